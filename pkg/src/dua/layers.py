"""Differentiable building blocks of the matching network.

Contains the bias-free GRU, additive attention with masking, the
self-matching attention flow, word/sequence-level matching matrices, and
the convolutional encoder that turns a pair of matching matrices into one
match vector.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numerics import (
    ContractError,
    DimensionError,
    Tensor,
    add,
    add_rows,
    apply_activation,
    concat,
    conv2d_valid,
    flatten,
    matmul,
    maxpool2d,
    mul,
    relu,
    sigmoid,
    softmax,
    stack,
    sub,
    take,
    tanh,
    tensor,
    transpose,
    put,
    zeros,
)


def _uniform(rng: np.random.Generator, shape) -> Tensor:
    return tensor(rng.uniform(-0.1, 0.1, size=shape))


@dataclass
class GruParams:
    """Weights of a bias-free GRU cell.

    ``w_*`` act on the input, ``v_*`` on the previous hidden state; the
    ``z``/``r``/``h`` suffixes mark the update gate, reset gate, and
    candidate state.
    """

    w_z: Tensor
    w_r: Tensor
    w_h: Tensor
    v_z: Tensor
    v_r: Tensor
    v_h: Tensor

    FIELDS = ("w_z", "w_r", "w_h", "v_z", "v_r", "v_h")

    @classmethod
    def create(cls, input_dim: int, hidden_dim: int, rng: np.random.Generator) -> "GruParams":
        return cls(
            w_z=_uniform(rng, (input_dim, hidden_dim)),
            w_r=_uniform(rng, (input_dim, hidden_dim)),
            w_h=_uniform(rng, (input_dim, hidden_dim)),
            v_z=_uniform(rng, (hidden_dim, hidden_dim)),
            v_r=_uniform(rng, (hidden_dim, hidden_dim)),
            v_h=_uniform(rng, (hidden_dim, hidden_dim)),
        )

    @property
    def input_dim(self) -> int:
        return self.w_z.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.w_z.shape[1]

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{f}": getattr(self, f) for f in self.FIELDS}

    @classmethod
    def from_named(cls, prefix: str, named: dict[str, Tensor]) -> "GruParams":
        return cls(**{f: named[f"{prefix}.{f}"] for f in cls.FIELDS})


def gru_cell(params: GruParams, x: Tensor, h_prev: Tensor) -> Tensor:
    """One GRU step: h = z * candidate + (1 - z) * h_prev, no bias terms."""
    z = sigmoid(add(matmul(x, params.w_z), matmul(h_prev, params.v_z)))
    r = sigmoid(add(matmul(x, params.w_r), matmul(h_prev, params.v_r)))
    candidate = tanh(add(matmul(x, params.w_h), matmul(mul(r, h_prev), params.v_h)))
    ones = tensor(np.ones(z.shape))
    return add(mul(z, candidate), mul(sub(ones, z), h_prev))


def gru_sequence(params: GruParams, xs: Tensor, length: int) -> Tensor:
    """Run the GRU from a zero state over the first ``length`` rows of ``xs``.

    Rows at positions >= length are padding: they produce exact zero output
    rows and never feed the recurrence.
    """
    n = xs.shape[0]
    if not 1 <= length <= n:
        raise ContractError(f"gru_sequence: length {length} out of range for {n} rows")
    h = zeros(params.hidden_dim)
    rows = []
    for i in range(length):
        h = gru_cell(params, take(xs, i), h)
        rows.append(h)
    rows.extend(zeros(params.hidden_dim) for _ in range(n - length))
    return stack(rows)


@dataclass
class AttentionParams:
    """Additive attention weights: score = v . tanh(K w_keys + q w_query + bias).

    One width is shared by all four tensors. The same shape also serves the
    turns-level attention, where the per-position query projection runs over
    the flow summary states.
    """

    w_keys: Tensor
    w_query: Tensor
    bias: Tensor
    v: Tensor

    FIELDS = ("w_keys", "w_query", "bias", "v")

    @classmethod
    def create(
        cls,
        key_dim: int,
        width: int,
        rng: np.random.Generator,
        query_dim: int | None = None,
    ) -> "AttentionParams":
        return cls(
            w_keys=_uniform(rng, (key_dim, width)),
            w_query=_uniform(rng, (query_dim if query_dim is not None else key_dim, width)),
            bias=_uniform(rng, (width,)),
            v=_uniform(rng, (width,)),
        )

    @property
    def width(self) -> int:
        return self.v.shape[0]

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{f}": getattr(self, f) for f in self.FIELDS}

    @classmethod
    def from_named(cls, prefix: str, named: dict[str, Tensor]) -> "AttentionParams":
        return cls(**{f: named[f"{prefix}.{f}"] for f in cls.FIELDS})


def additive_attention(
    params: AttentionParams,
    keys: Tensor,
    query: Tensor,
    mask: Sequence[bool] | np.ndarray,
) -> tuple[Tensor, Tensor]:
    """Attention-weighted sum of unmasked key rows for one query vector.

    Returns (context, weights). Weights are a softmax over the unmasked
    scores only; masked positions get exact zero weight. The softmax is
    computed after excluding masked scores rather than by -inf substitution,
    which stays stable in 32-bit builds.
    """
    mask = np.asarray(mask, dtype=bool)
    n = keys.shape[0]
    if mask.shape != (n,):
        raise DimensionError(f"additive_attention: mask length {mask.shape} != {n} keys")
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        raise ContractError("additive_attention: all positions are masked")
    shifted = add_rows(matmul(keys, params.w_keys), add(matmul(query, params.w_query), params.bias))
    scores = matmul(tanh(shifted), params.v)
    visible = softmax(take(scores, idx))
    context = matmul(visible, take(keys, idx))
    weights = put(visible, idx, n)
    return context, weights


def self_matching_flow(
    gru: GruParams,
    att: AttentionParams,
    fused: Tensor,
    length: int,
    weights_out: list[Tensor] | None = None,
) -> Tensor:
    """Distill a fused sequence by attending it against itself.

    At each step t the whole unmasked sequence is attended with the current
    row as the query, and the GRU consumes the concatenation of the row with
    its attention context (dimension 2d). Masking matches gru_sequence.
    ``weights_out`` collects the per-step attention weight vectors.
    """
    n = fused.shape[0]
    if not 1 <= length <= n:
        raise ContractError(f"self_matching_flow: length {length} out of range for {n} rows")
    mask = np.zeros(n, dtype=bool)
    mask[:length] = True
    h = zeros(gru.hidden_dim)
    rows = []
    for t in range(length):
        f_t = take(fused, t)
        context, weights = additive_attention(att, fused, f_t, mask)
        if weights_out is not None:
            weights_out.append(weights)
        h = gru_cell(gru, concat((f_t, context)), h)
        rows.append(h)
    rows.extend(zeros(gru.hidden_dim) for _ in range(n - length))
    return stack(rows)


def match_matrices(
    u_emb: Tensor,
    r_emb: Tensor,
    p_u: Tensor,
    p_r: Tensor,
    bilinear: Tensor,
) -> tuple[Tensor, Tensor]:
    """Word-level and sequence-level matching grids for one utterance/response pair.

    The word-level grid holds raw embedding dot products; the sequence-level
    grid holds bilinear products of the flow outputs through ``bilinear``.
    Rows/columns at padded positions come out zero because the inputs carry
    zero rows there (pinned PAD embedding, masked flow outputs).
    """
    if u_emb.shape[1] != r_emb.shape[1]:
        raise DimensionError(
            f"match_matrices: embedding dims {u_emb.shape} and {r_emb.shape} disagree"
        )
    m_word = matmul(u_emb, transpose(r_emb))
    m_flow = matmul(matmul(p_u, bilinear), transpose(p_r))
    return m_word, m_flow


@dataclass
class CnnParams:
    """Kernel banks for the match encoder: one bank per matching matrix.

    ``kernels_*`` are (n_filters, l, l) stacks with one bias per kernel.
    """

    kernels_word: Tensor
    biases_word: Tensor
    kernels_flow: Tensor
    biases_flow: Tensor

    FIELDS = ("kernels_word", "biases_word", "kernels_flow", "biases_flow")

    @classmethod
    def create(cls, n_filters: int, kernel_size: int, rng: np.random.Generator) -> "CnnParams":
        if n_filters < 1 or kernel_size < 1:
            raise ContractError(
                f"CnnParams: n_filters {n_filters} and kernel_size {kernel_size} must be >= 1"
            )
        return cls(
            kernels_word=_uniform(rng, (n_filters, kernel_size, kernel_size)),
            biases_word=_uniform(rng, (n_filters,)),
            kernels_flow=_uniform(rng, (n_filters, kernel_size, kernel_size)),
            biases_flow=_uniform(rng, (n_filters,)),
        )

    @property
    def n_filters(self) -> int:
        return self.kernels_word.shape[0]

    @property
    def kernel_size(self) -> int:
        return self.kernels_word.shape[1]

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{f}": getattr(self, f) for f in self.FIELDS}

    @classmethod
    def from_named(cls, prefix: str, named: dict[str, Tensor]) -> "CnnParams":
        return cls(**{f: named[f"{prefix}.{f}"] for f in cls.FIELDS})


def cnn_output_dim(
    n_u: int, n_r: int, kernel_size: int, n_filters: int, pool: tuple[int, int]
) -> int:
    """Length of the match vector as a pure function of the shapes."""
    conv_h = n_u - kernel_size + 1
    conv_w = n_r - kernel_size + 1
    if conv_h < 1 or conv_w < 1:
        raise DimensionError(
            f"cnn_output_dim: kernel {kernel_size} larger than matrix {(n_u, n_r)}"
        )
    pooled_h = -(-conv_h // pool[0])
    pooled_w = -(-conv_w // pool[1])
    return 2 * n_filters * pooled_h * pooled_w


def cnn_match_encode(
    params: CnnParams,
    m_word: Tensor,
    m_flow: Tensor,
    pool: tuple[int, int] = (3, 3),
) -> Tensor:
    """Convolve, rectify, pool and flatten both matching matrices.

    Per matrix, every kernel yields conv -> ReLU -> max-pool; the pooled
    maps are flattened and concatenated, word-level bank first.
    """
    parts = []
    for kernels, biases, m in (
        (params.kernels_word, params.biases_word, m_word),
        (params.kernels_flow, params.biases_flow, m_flow),
    ):
        for i in range(params.n_filters):
            conv = conv2d_valid(m, take(kernels, i), take(biases, i))
            parts.append(flatten(maxpool2d(relu(conv), pool)))
    return concat(parts)
