"""Corpus ingestion, vocabulary, sample encoding, and negative sampling.

Input text is assumed pre-tokenized; tokenization here is whitespace
splitting. The candidate index implements keyword-driven retrieval over a
response pool (tf-idf scored inverted index) for building test-style
candidate groups.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .numerics import ContractError

logger = logging.getLogger(__name__)

PAD_ID = 0
UNK_ID = 1
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"


class CorpusFormatError(ValueError):
    """A corpus or vocabulary file does not match the expected format."""


class SkipSample(Exception):
    """Raised when a dialogue cannot be encoded (e.g. all-PAD response)."""


@dataclass
class RawDialogue:
    """One <context, response, label> triple as raw text."""

    label: int
    context: list[str]
    response: str
    category: str | None = None


def load_tsv_corpus(path) -> list[RawDialogue]:
    """Parse a TSV corpus: ``label TAB utt_1 TAB ... TAB utt_t TAB response``.

    Tokens inside each field are space-separated. Raises CorpusFormatError
    with the 1-based line number on malformed lines.
    """
    dialogues = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) < 3:
                raise CorpusFormatError(
                    f"{path}:{lineno}: expected at least 3 tab-separated fields, got {len(fields)}"
                )
            if fields[0] not in ("0", "1"):
                raise CorpusFormatError(
                    f"{path}:{lineno}: label must be 0 or 1, got {fields[0]!r}"
                )
            dialogues.append(
                RawDialogue(label=int(fields[0]), context=fields[1:-1], response=fields[-1])
            )
    return dialogues


def save_tsv_corpus(path, dialogues: list[RawDialogue]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for d in dialogues:
            fh.write("\t".join([str(d.label), *d.context, d.response]) + "\n")


class Vocabulary:
    """Token -> id map with reserved PAD (0) and UNK (1) entries.

    Ids are dense and deterministic: tokens are ordered by descending count,
    ties alphabetically. Tokens below ``min_count`` map to UNK.
    """

    def __init__(self, tokens: list[str], min_count: int = 1):
        self.min_count = min_count
        self._id_to_token = [PAD_TOKEN, UNK_TOKEN, *tokens]
        self._token_to_id = {tok: i for i, tok in enumerate(self._id_to_token)}
        if len(self._token_to_id) != len(self._id_to_token):
            raise CorpusFormatError("vocabulary contains duplicate tokens")

    @classmethod
    def build(cls, dialogues: list[RawDialogue], min_count: int = 1) -> "Vocabulary":
        counts: Counter[str] = Counter()
        for d in dialogues:
            for utt in d.context:
                counts.update(utt.split())
            counts.update(d.response.split())
        # Literal reserved tokens in a corpus would collide with the header
        # entries; they fall back to UNK.
        counts.pop(PAD_TOKEN, None)
        counts.pop(UNK_TOKEN, None)
        kept = sorted(
            (tok for tok, c in counts.items() if c >= min_count),
            key=lambda tok: (-counts[tok], tok),
        )
        return cls(kept, min_count=min_count)

    def __len__(self) -> int:
        return len(self._id_to_token)

    def id_of(self, token: str) -> int:
        return self._token_to_id.get(token, UNK_ID)

    def token_of(self, idx: int) -> str:
        return self._id_to_token[idx]

    def encode_tokens(self, tokens: list[str]) -> list[int]:
        return [self.id_of(t) for t in tokens]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for i, tok in enumerate(self._id_to_token):
                fh.write(f"{tok}\t{i}\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        id_to_token: list[str] = []
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise CorpusFormatError(f"{path}:{lineno}: expected 'token TAB id'")
                tok, idx = parts
                if int(idx) != len(id_to_token):
                    raise CorpusFormatError(f"{path}:{lineno}: ids must be dense, got {idx}")
                id_to_token.append(tok)
        if len(id_to_token) < 2 or id_to_token[0] != PAD_TOKEN or id_to_token[1] != UNK_TOKEN:
            raise CorpusFormatError(f"{path}: missing reserved PAD/UNK entries")
        return cls(id_to_token[2:])


@dataclass
class EncodedSample:
    """Padded token-id matrices plus true lengths for one dialogue."""

    utterances: np.ndarray  # (max_utterances, max_words) int
    utterance_lengths: np.ndarray  # (max_utterances,) int
    turn_count: int
    response: np.ndarray  # (max_words,) int
    response_length: int
    label: int
    category: str | None = None


def truncate_keep_latest(context: list, max_utterances: int) -> list:
    """Keep the most recent turns; the last utterance always survives."""
    if not context:
        raise ContractError("truncate_keep_latest: context is empty")
    return context[-max_utterances:]


def encode(raw: RawDialogue, vocab: Vocabulary, config) -> EncodedSample:
    """Encode one dialogue to fixed shapes.

    Word truncation keeps the first ``max_words`` tokens of each utterance;
    turn truncation keeps the latest ``max_utterances`` turns. Utterances
    with no tokens are dropped. Raises SkipSample when the response (or the
    whole context) encodes to nothing.
    """
    token_rows = [u.split() for u in raw.context]
    token_rows = [row for row in token_rows if row]
    if not token_rows:
        raise SkipSample("context has no tokens")
    token_rows = truncate_keep_latest(token_rows, config.max_utterances)
    response_tokens = raw.response.split()[: config.max_words]
    if not response_tokens:
        raise SkipSample("response encodes to all-PAD")

    utterances = np.zeros((config.max_utterances, config.max_words), dtype=np.int64)
    lengths = np.zeros(config.max_utterances, dtype=np.int64)
    for i, row in enumerate(token_rows):
        row = row[: config.max_words]
        utterances[i, : len(row)] = vocab.encode_tokens(row)
        lengths[i] = len(row)
    response = np.zeros(config.max_words, dtype=np.int64)
    response[: len(response_tokens)] = vocab.encode_tokens(response_tokens)
    return EncodedSample(
        utterances=utterances,
        utterance_lengths=lengths,
        turn_count=len(token_rows),
        response=response,
        response_length=len(response_tokens),
        label=raw.label,
        category=raw.category,
    )


def decode(sample: EncodedSample, vocab: Vocabulary) -> tuple[list[list[str]], list[str]]:
    """Token sequences (post truncation) recovered from an encoded sample."""
    context = [
        [vocab.token_of(int(t)) for t in sample.utterances[i, : sample.utterance_lengths[i]]]
        for i in range(sample.turn_count)
    ]
    response = [vocab.token_of(int(t)) for t in sample.response[: sample.response_length]]
    return context, response


def encode_corpus(dialogues: list[RawDialogue], vocab: Vocabulary, config) -> list[EncodedSample]:
    """Encode a corpus, logging and skipping unencodable dialogues."""
    samples = []
    for i, d in enumerate(dialogues):
        try:
            samples.append(encode(d, vocab, config))
        except SkipSample as exc:
            logger.warning("skipping dialogue %d: %s", i, exc)
    return samples


# --------------------------------------------------------------------------
# Candidate retrieval over a response pool


@dataclass
class CandidateIndex:
    """Inverted index with tf-idf statistics over a response pool."""

    responses: list[str]
    postings: dict[str, list[tuple[int, int]]]  # term -> [(doc, tf)]
    doc_freq: dict[str, int]
    size: int

    def idf(self, term: str) -> float:
        return math.log((self.size + 1) / (self.doc_freq.get(term, 0) + 1)) + 1.0


def build_candidate_index(pool: list[str]) -> CandidateIndex:
    if not pool:
        raise ContractError("build_candidate_index: response pool is empty")
    postings: dict[str, list[tuple[int, int]]] = {}
    doc_freq: dict[str, int] = {}
    for doc_id, response in enumerate(pool):
        counts = Counter(response.split())
        for term, tf in counts.items():
            postings.setdefault(term, []).append((doc_id, tf))
            doc_freq[term] = doc_freq.get(term, 0) + 1
    return CandidateIndex(responses=list(pool), postings=postings, doc_freq=doc_freq, size=len(pool))


def context_keywords(
    index: CandidateIndex,
    context: list[str],
    top_n: int = 5,
    stopwords: frozenset[str] = frozenset(),
) -> list[str]:
    """Top context tokens by tf-idf weight against the pool statistics.

    Weight is the token's count over the whole context times its pool idf;
    ties break alphabetically.
    """
    counts: Counter[str] = Counter()
    for utt in context:
        counts.update(tok for tok in utt.split() if tok not in stopwords)
    ranked = sorted(counts, key=lambda tok: (-counts[tok] * index.idf(tok), tok))
    return ranked[:top_n]


def retrieve_candidates(
    index: CandidateIndex,
    last_utterance: str,
    context: list[str],
    k: int,
    stopwords: frozenset[str] = frozenset(),
) -> list[str]:
    """Top-k distinct pool responses for a query built from the dialogue.

    The query is the union of the last utterance's tokens and the top-5
    context keywords; each candidate scores the sum of tf*idf over query
    terms, ties broken by pool order. An empty query falls back to the most
    frequent pool responses (logged as a warning).
    """
    if k > index.size:
        raise ContractError(f"retrieve_candidates: k={k} exceeds pool size {index.size}")
    query = set(tok for tok in last_utterance.split() if tok not in stopwords)
    query.update(context_keywords(index, context, stopwords=stopwords))

    if not query:
        logger.warning("retrieve_candidates: empty query; falling back to pool frequency")
        freq = Counter(index.responses)
        order = sorted(
            range(index.size), key=lambda i: (-freq[index.responses[i]], i)
        )
        return _distinct_responses(index, order, k)

    scores = np.zeros(index.size)
    for term in query:
        idf = index.idf(term)
        for doc_id, tf in index.postings.get(term, ()):
            scores[doc_id] += tf * idf
    order = sorted(range(index.size), key=lambda i: (-scores[i], i))
    return _distinct_responses(index, order, k)


def _distinct_responses(index: CandidateIndex, order: list[int], k: int) -> list[str]:
    out: list[str] = []
    seen: set[str] = set()
    for i in order:
        r = index.responses[i]
        if r not in seen:
            seen.add(r)
            out.append(r)
            if len(out) == k:
                return out
    raise ContractError(f"retrieve_candidates: pool has fewer than {k} distinct responses")


def negative_sample(
    positives: list[RawDialogue],
    pool: list[str],
    ratio: int,
    seed: int,
    mode: str = "train",
    stopwords: frozenset[str] = frozenset(),
) -> list[RawDialogue]:
    """Attach ``ratio`` label-0 candidates to every positive dialogue.

    Train mode draws distinct negatives uniformly from the pool; test mode
    retrieves them lexically via the candidate index. The true response is
    never selected. Output keeps each positive followed by its negatives,
    so test mode yields consecutive groups of ratio+1 candidates.
    """
    if ratio < 1:
        raise ContractError(f"negative_sample: ratio must be >= 1, got {ratio}")
    if len(pool) <= ratio:
        raise ContractError(
            f"negative_sample: pool of {len(pool)} cannot supply {ratio} negatives"
        )
    if mode not in ("train", "test"):
        raise ContractError(f"negative_sample: unknown mode {mode!r}")
    rng = np.random.default_rng(seed)
    index = build_candidate_index(pool) if mode == "test" else None
    out: list[RawDialogue] = []
    for pos in positives:
        out.append(pos)
        if mode == "train":
            negatives: list[str] = []
            chosen: set[str] = set()
            for i in rng.permutation(len(pool)):
                r = pool[int(i)]
                if r == pos.response or r in chosen:
                    continue
                chosen.add(r)
                negatives.append(r)
                if len(negatives) == ratio:
                    break
            if len(negatives) < ratio:
                raise ContractError(
                    "negative_sample: pool exhausted before drawing "
                    f"{ratio} negatives for response {pos.response!r}"
                )
        else:
            ranked = retrieve_candidates(
                index, pos.context[-1], pos.context, min(ratio + 1, len(pool)), stopwords
            )
            negatives = [r for r in ranked if r != pos.response][:ratio]
            if len(negatives) < ratio:
                raise ContractError(
                    "negative_sample: pool exhausted before retrieving "
                    f"{ratio} negatives for response {pos.response!r}"
                )
        for r in negatives:
            out.append(
                RawDialogue(label=0, context=list(pos.context), response=r, category=pos.category)
            )
    return out


def load_pretrained_embeddings(path, vocab: Vocabulary, dim: int, base: np.ndarray) -> np.ndarray:
    """Overlay vectors from a text embedding file onto ``base`` rows.

    The file starts with ``vocab_count dim`` and holds one ``token float...``
    line per word. Rows for tokens absent from the file keep their ``base``
    values; the PAD row stays zero.
    """
    out = np.array(base, copy=True)
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise CorpusFormatError(f"{path}:1: expected 'vocab_count dim' header")
        count, file_dim = int(header[0]), int(header[1])
        if file_dim != dim:
            raise CorpusFormatError(
                f"{path}: embedding dim {file_dim} does not match configured {dim}"
            )
        loaded = 0
        for lineno, line in enumerate(fh, start=2):
            parts = line.rstrip("\n").split(" ")
            if len(parts) != dim + 1:
                raise CorpusFormatError(f"{path}:{lineno}: expected token plus {dim} floats")
            idx = vocab.id_of(parts[0])
            if idx not in (PAD_ID, UNK_ID) or parts[0] == UNK_TOKEN:
                out[idx] = [float(x) for x in parts[1:]]
            loaded += 1
        if loaded != count:
            raise CorpusFormatError(f"{path}: header promised {count} vectors, found {loaded}")
    out[PAD_ID] = 0.0
    return out
