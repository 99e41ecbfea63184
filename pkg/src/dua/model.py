"""The full matching model: embeddings, turns-aware fusion, self-matching
flow, convolutional response matching, and attentive turns aggregation.

A forward pass scores one encoded context/response pair. Parameters are
held in a flat name -> tensor map so the trainer, checkpoints, and gradient
checks can treat them uniformly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

from .data import EncodedSample
from .layers import (
    AttentionParams,
    CnnParams,
    GruParams,
    additive_attention,
    cnn_match_encode,
    cnn_output_dim,
    gru_cell,
    gru_sequence,
    match_matrices,
    self_matching_flow,
)
from .numerics import (
    ContractError,
    DimensionError,
    Tensor,
    add,
    add_rows,
    concat,
    hconcat,
    log_softmax,
    matmul,
    mul,
    neg,
    softmax,
    stack,
    take,
    tanh,
    tensor,
    tile_rows,
    zeros,
)

FUSION_STRATEGIES = ("concat", "sum", "mul")


@dataclass
class DuaConfig:
    """Hyperparameters and structural switches for the model."""

    vocab_size: int | None = None
    max_utterances: int = 10
    max_words: int = 50
    emb_dim: int = 200
    utt_hidden: int = 200
    flow_hidden: int = 200
    turns_hidden: int = 200
    attention_width: int | None = None  # None: use the consuming stage's hidden size
    n_filters: int = 8
    kernel_size: int = 3
    pool: tuple[int, int] = (3, 3)
    fusion: str = "concat"
    ablate_cf: bool = False
    ablate_maf: bool = False
    seed: int = 0

    def validate(self) -> None:
        dims = {
            "max_utterances": self.max_utterances,
            "max_words": self.max_words,
            "emb_dim": self.emb_dim,
            "utt_hidden": self.utt_hidden,
            "flow_hidden": self.flow_hidden,
            "turns_hidden": self.turns_hidden,
            "n_filters": self.n_filters,
            "kernel_size": self.kernel_size,
        }
        for name, value in dims.items():
            if value < 1:
                raise ContractError(f"config: {name} must be positive, got {value}")
        if self.attention_width is not None and self.attention_width < 1:
            raise ContractError(f"config: attention_width must be positive, got {self.attention_width}")
        if self.fusion not in FUSION_STRATEGIES:
            raise ContractError(f"config: unknown fusion strategy {self.fusion!r}")
        conv_h = self.max_words - self.kernel_size + 1
        if conv_h < 1:
            raise ContractError(
                f"config: kernel_size {self.kernel_size} too large for max_words {self.max_words}"
            )
        if self.pool[0] > conv_h or self.pool[1] > conv_h:
            raise ContractError(
                f"config: pool window {self.pool} exceeds conv output {conv_h}x{conv_h}"
            )
        if self.vocab_size is not None and self.vocab_size < 2:
            raise ContractError(f"config: vocab_size must cover PAD and UNK, got {self.vocab_size}")

    # Derived dimensions -----------------------------------------------------

    @property
    def fused_dim(self) -> int:
        if self.ablate_cf:
            return self.utt_hidden
        return 2 * self.utt_hidden if self.fusion == "concat" else self.utt_hidden

    @property
    def flow_input_dim(self) -> int:
        # The flow GRU consumes [row, attention context]; without the
        # attention flow it consumes the fused row alone.
        return self.fused_dim if self.ablate_maf else 2 * self.fused_dim

    @property
    def flow_attention_width(self) -> int:
        return self.attention_width or self.flow_hidden

    @property
    def turns_attention_width(self) -> int:
        return self.attention_width or self.turns_hidden

    @property
    def match_dim(self) -> int:
        return cnn_output_dim(
            self.max_words, self.max_words, self.kernel_size, self.n_filters, self.pool
        )

    @property
    def mlp_input_dim(self) -> int:
        return self.max_utterances * self.match_dim


def parameter_shapes(config: DuaConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape map of every trainable tensor, in canonical order.

    This is the single source of structure: ablation switches add or remove
    entries here, and parameter construction, checkpoint loading and
    counting all follow it.
    """
    config.validate()
    if config.vocab_size is None:
        raise ContractError("config: vocab_size must be set before building parameters")
    shapes: dict[str, tuple[int, ...]] = {}
    shapes["embedding"] = (config.vocab_size, config.emb_dim)
    for f in GruParams.FIELDS:
        first = config.emb_dim if f.startswith("w") else config.utt_hidden
        shapes[f"utt_gru.{f}"] = (first, config.utt_hidden)
    for f in GruParams.FIELDS:
        first = config.flow_input_dim if f.startswith("w") else config.flow_hidden
        shapes[f"flow_gru.{f}"] = (first, config.flow_hidden)
    if not config.ablate_maf:
        aw = config.flow_attention_width
        shapes["flow_att.w_keys"] = (config.fused_dim, aw)
        shapes["flow_att.w_query"] = (config.fused_dim, aw)
        shapes["flow_att.bias"] = (aw,)
        shapes["flow_att.v"] = (aw,)
    shapes["bilinear"] = (config.flow_hidden, config.flow_hidden)
    k = config.kernel_size
    shapes["cnn.kernels_word"] = (config.n_filters, k, k)
    shapes["cnn.biases_word"] = (config.n_filters,)
    shapes["cnn.kernels_flow"] = (config.n_filters, k, k)
    shapes["cnn.biases_flow"] = (config.n_filters,)
    if config.ablate_cf:
        shapes["mlp.w"] = (config.mlp_input_dim, config.turns_hidden)
        shapes["mlp.b"] = (config.turns_hidden,)
    else:
        for f in GruParams.FIELDS:
            first = config.match_dim if f.startswith("w") else config.turns_hidden
            shapes[f"turns_gru.{f}"] = (first, config.turns_hidden)
        aw = config.turns_attention_width
        shapes["turns_att.w_keys"] = (config.turns_hidden, aw)
        shapes["turns_att.w_query"] = (config.flow_hidden, aw)
        shapes["turns_att.bias"] = (aw,)
        shapes["turns_att.v"] = (aw,)
    shapes["w_out"] = (config.turns_hidden, 2)
    return shapes


def count_parameters(config: DuaConfig) -> int:
    return sum(int(np.prod(s)) for s in parameter_shapes(config).values())


class DuaParams:
    """All trainable tensors, addressable by name and by structured views."""

    def __init__(self, config: DuaConfig, named: dict[str, Tensor]):
        expected = parameter_shapes(config)
        if set(named) != set(expected):
            missing = sorted(set(expected) - set(named))
            extra = sorted(set(named) - set(expected))
            raise ContractError(f"parameter map mismatch: missing {missing}, unexpected {extra}")
        for name, shape in expected.items():
            if named[name].shape != shape:
                raise ContractError(
                    f"parameter {name!r}: expected shape {shape}, got {named[name].shape}"
                )
        # Preserve canonical ordering regardless of input dict order.
        self.named: dict[str, Tensor] = {name: named[name] for name in expected}
        self.config = config
        self.embedding = self.named["embedding"]
        self.utt_gru = GruParams.from_named("utt_gru", self.named)
        self.flow_gru = GruParams.from_named("flow_gru", self.named)
        self.flow_att = None if config.ablate_maf else AttentionParams.from_named("flow_att", self.named)
        self.bilinear = self.named["bilinear"]
        self.cnn = CnnParams.from_named("cnn", self.named)
        if config.ablate_cf:
            self.mlp_w = self.named["mlp.w"]
            self.mlp_b = self.named["mlp.b"]
            self.turns_gru = None
            self.turns_att = None
        else:
            self.turns_gru = GruParams.from_named("turns_gru", self.named)
            self.turns_att = AttentionParams.from_named("turns_att", self.named)
        self.w_out = self.named["w_out"]


def init_params(config: DuaConfig) -> DuaParams:
    """Seeded uniform(-0.1, 0.1) initialization; the PAD embedding row is
    pinned to zero (and the optimizer keeps it there)."""
    rng = np.random.default_rng(config.seed)
    named: dict[str, Tensor] = {}
    for name, shape in parameter_shapes(config).items():
        arr = rng.uniform(-0.1, 0.1, size=shape)
        if name == "embedding":
            arr[0] = 0.0
        named[name] = tensor(arr)
    return DuaParams(config, named)


def apply_ablation(config: DuaConfig, ablate_cf: bool | None = None, ablate_maf: bool | None = None) -> DuaConfig:
    """Structural variant of a config with ablation switches applied."""
    out = replace(
        config,
        ablate_cf=config.ablate_cf if ablate_cf is None else ablate_cf,
        ablate_maf=config.ablate_maf if ablate_maf is None else ablate_maf,
    )
    out.validate()
    return out


@dataclass
class Diagnostics:
    """Optional per-forward traces for inspection and export."""

    match_vectors: list[np.ndarray]
    flow_weights: list[np.ndarray]  # per sequence: (true_len, padded_len) rows sum to 1
    turn_weights: np.ndarray | None


@dataclass
class MatchOutput:
    score: float  # probability that the response is the proper one
    logits: Tensor
    diagnostics: Diagnostics | None = None


def fuse_with_last(seqs: list[Tensor], lengths: list[int], strategy: str) -> list[Tensor]:
    """Fuse every hidden-state sequence with the last utterance's summary.

    ``seqs`` holds the per-utterance sequences followed by the response
    sequence; the summary is the final unmasked hidden state of the last
    utterance, broadcast to every position. ``concat`` doubles the row
    width; ``sum``/``mul`` combine elementwise and need equal dims.
    """
    if strategy not in FUSION_STRATEGIES:
        raise ContractError(f"fuse_with_last: unknown strategy {strategy!r}")
    if len(seqs) < 2:
        raise ContractError("fuse_with_last: need at least one utterance plus the response")
    summary = take(seqs[-2], lengths[-2] - 1)
    fused = []
    for seq in seqs:
        n = seq.shape[0]
        if strategy == "concat":
            fused.append(hconcat(seq, tile_rows(summary, n)))
        elif strategy == "sum":
            if seq.shape[1] != summary.shape[0]:
                raise DimensionError(
                    f"fuse_with_last: sum needs equal dims, got {seq.shape} and {summary.shape}"
                )
            fused.append(add(seq, tile_rows(summary, n)))
        else:
            if seq.shape[1] != summary.shape[0]:
                raise DimensionError(
                    f"fuse_with_last: mul needs equal dims, got {seq.shape} and {summary.shape}"
                )
            fused.append(mul(seq, tile_rows(summary, n)))
    return fused


def aggregate_and_score(
    match_stack: Tensor,
    flow_finals: Tensor,
    params: DuaParams,
    weights_out: list[np.ndarray] | None = None,
) -> tuple[Tensor, Tensor]:
    """GRU over the per-turn match vectors, attention-pooled into logits.

    ``flow_finals`` holds one flow summary state per utterance; it drives
    the per-turn attention scores together with the GRU states.
    """
    t = match_stack.shape[0]
    if t < 1:
        raise ContractError("aggregate_and_score: need at least one turn")
    att = params.turns_att
    h = zeros(params.turns_gru.hidden_dim)
    states = []
    for i in range(t):
        h = gru_cell(params.turns_gru, take(match_stack, i), h)
        states.append(h)
    h_stack = stack(states)
    pre = tanh(
        add_rows(
            add(matmul(flow_finals, att.w_query), matmul(h_stack, att.w_keys)),
            att.bias,
        )
    )
    alphas = softmax(matmul(pre, att.v))
    if weights_out is not None:
        weights_out.append(alphas.numpy().copy())
    pooled = matmul(alphas, h_stack)
    logits = matmul(pooled, params.w_out)
    return pooled, logits


def _mlp_aggregate(match_vectors: list[Tensor], params: DuaParams) -> tuple[Tensor, Tensor]:
    """Context-fusion ablation: one tanh hidden layer over the concatenated
    match vectors (zero-padded to the configured turn slots)."""
    config = params.config
    parts = list(match_vectors)
    parts.extend(zeros(config.match_dim) for _ in range(config.max_utterances - len(parts)))
    x = concat(parts)
    pooled = tanh(add(matmul(x, params.mlp_w), params.mlp_b))
    logits = matmul(pooled, params.w_out)
    return pooled, logits


def forward(
    config: DuaConfig,
    params: DuaParams,
    sample: EncodedSample,
    collect_diagnostics: bool = False,
) -> MatchOutput:
    """Score one encoded sample.

    Stages: embedding lookup; word-level GRU per utterance and response;
    fusion with the last utterance; self-matching flow; matching matrices
    against the response; convolutional match encoding per utterance; turn
    aggregation; 2-way softmax. The positive-class probability is the
    ranking score.
    """
    t = int(sample.turn_count)
    if t < 1:
        raise ContractError("forward: sample has no utterances")
    if sample.response_length < 1:
        raise ContractError("forward: sample has an empty response")
    lengths = [int(x) for x in sample.utterance_lengths[:t]] + [int(sample.response_length)]
    id_rows = [sample.utterances[i] for i in range(t)] + [sample.response]

    embedded = [take(params.embedding, ids) for ids in id_rows]
    states = [gru_sequence(params.utt_gru, e, ln) for e, ln in zip(embedded, lengths)]

    if config.ablate_cf:
        fused = states
    else:
        fused = fuse_with_last(states, lengths, config.fusion)

    flow_weights: list[np.ndarray] = []
    flows = []
    for f, ln in zip(fused, lengths):
        if config.ablate_maf:
            flows.append(gru_sequence(params.flow_gru, f, ln))
        else:
            step_weights: list[Tensor] | None = [] if collect_diagnostics else None
            flows.append(self_matching_flow(params.flow_gru, params.flow_att, f, ln, step_weights))
            if collect_diagnostics:
                flow_weights.append(np.stack([w.numpy() for w in step_weights]))

    response_flow = flows[-1]
    response_emb = embedded[-1]
    match_vectors = []
    for i in range(t):
        m_word, m_flow = match_matrices(
            embedded[i], response_emb, flows[i], response_flow, params.bilinear
        )
        match_vectors.append(cnn_match_encode(params.cnn, m_word, m_flow, config.pool))

    turn_weights_store: list[np.ndarray] | None = [] if collect_diagnostics else None
    if config.ablate_cf:
        _, logits = _mlp_aggregate(match_vectors, params)
    else:
        flow_finals = stack([take(flows[i], lengths[i] - 1) for i in range(t)])
        _, logits = aggregate_and_score(
            stack(match_vectors), flow_finals, params, turn_weights_store
        )

    score = float(softmax(logits).numpy()[1])
    diagnostics = None
    if collect_diagnostics:
        diagnostics = Diagnostics(
            match_vectors=[m.numpy().copy() for m in match_vectors],
            flow_weights=flow_weights,
            turn_weights=turn_weights_store[0] if turn_weights_store else None,
        )
    return MatchOutput(score=score, logits=logits, diagnostics=diagnostics)


def loss(output: MatchOutput, label: int) -> Tensor:
    """Cross entropy of the 2-way softmax against the true label."""
    if label not in (0, 1):
        raise ContractError(f"loss: label must be 0 or 1, got {label!r}")
    return neg(take(log_softmax(output.logits), label))
