"""Proximity-score target construction for the token-order objective.

Given a token sequence with a W-token overhang, every position t < T gets
a score vector over the vocabulary: a token whose first occurrence after t
is d steps ahead (0 < d <= W) scores W - d, every other token scores -inf.
Three independent routes produce the same structure:

  build_dense    backward scan over the sequence with a next-occurrence table
  build_sparse   vectorized previous-occurrence construction, position-major
  oracle_forward_scan   literal per-(t, v) window scan, used only to verify

Rows can be all -inf only inside sentinel padding at the corpus end; the
valid-row mask travels with the targets so losses can skip those positions.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

_MAGIC = b"TOPTARG1"
_FORMAT_VERSION = 1

SCORE_DTYPE = np.float32


class TargetContractError(ValueError):
    """Input sequence violates the construction contract."""


@dataclass
class DenseTargets:
    scores: np.ndarray  # (T, V), SCORE_DTYPE, entries in {-inf} | [0, W-1]
    window: int

    @property
    def seq_len(self) -> int:
        return self.scores.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.scores.shape[1]

    def valid_rows(self) -> np.ndarray:
        return np.isfinite(self.scores).any(axis=1)


@dataclass
class SparseTargets:
    """Finite target entries only, position-major with a per-position offset index."""

    offsets: np.ndarray  # (T+1,) int64; pairs for position t live in [offsets[t], offsets[t+1])
    tokens: np.ndarray  # (n_pairs,) int32
    scores: np.ndarray  # (n_pairs,) SCORE_DTYPE
    seq_len: int
    vocab_size: int
    window: int

    @property
    def n_pairs(self) -> int:
        return int(self.offsets[-1])

    def counts(self) -> np.ndarray:
        return np.diff(self.offsets)

    def valid_rows(self) -> np.ndarray:
        return self.counts() > 0

    def pairs_at(self, t: int) -> list[tuple[int, float]]:
        lo, hi = int(self.offsets[t]), int(self.offsets[t + 1])
        return list(zip(self.tokens[lo:hi].tolist(), self.scores[lo:hi].tolist()))


def _coerce_sequence(x, window: int) -> np.ndarray:
    """Accept a raw id array or a data.TokenSequence of matching window."""
    tokens = getattr(x, "tokens", x)
    seq_window = getattr(x, "window", None)
    if seq_window is not None and seq_window != window:
        raise TargetContractError(
            f"sequence was built with window {seq_window}, targets requested {window}")
    return np.asarray(tokens, dtype=np.int64)


def _check_input(x: np.ndarray, vocab_size: int, window: int) -> int:
    if window < 1:
        raise TargetContractError(f"window must be >= 1, got {window}")
    if vocab_size < 1:
        raise TargetContractError(f"vocab size must be >= 1, got {vocab_size}")
    if x.ndim != 1 or len(x) <= window:
        raise TargetContractError(
            f"sequence length {x.shape} must be T + window with T >= 1 (window={window})"
        )
    return len(x) - window


def build_dense(x: np.ndarray, vocab_size: int, window: int) -> DenseTargets:
    """Single backward pass with a next-occurrence table.

    next[] starts at T + W ("no future occurrence"); each step first emits
    the row for t from occurrences strictly after t, then records x[t].
    Tokens outside [0, V) are invalid and never recorded.
    """
    x = _coerce_sequence(x, window)
    T = _check_input(x, vocab_size, window)
    total = T + window
    scores = np.full((T, vocab_size), -np.inf, dtype=SCORE_DTYPE)
    nxt = np.full(vocab_size, total, dtype=np.int64)
    for t in range(total - 1, -1, -1):
        if t < T:
            d = nxt - t
            hit = (d > 0) & (d <= window)
            scores[t, hit] = (window - d[hit]).astype(SCORE_DTYPE)
        tok = x[t]
        if 0 <= tok < vocab_size:
            nxt[tok] = t
    return DenseTargets(scores=scores, window=window)


def _prev_occurrence(x: np.ndarray) -> np.ndarray:
    """prev[j] = largest i < j with x[i] == x[j], else -1."""
    n = len(x)
    order = np.argsort(x, kind="stable")
    prev = np.full(n, -1, dtype=np.int64)
    if n > 1:
        same = x[order[1:]] == x[order[:-1]]
        prev[order[1:][same]] = order[:-1][same]
    return prev


def build_sparse(x: np.ndarray, vocab_size: int, window: int) -> SparseTargets:
    """Streaming-friendly construction of the finite entries only.

    A token x[j] scores at position t = j - d exactly when j is its first
    occurrence after t, i.e. when the previous occurrence of x[j] is at or
    before t. Two counting passes over the offsets d fill the
    position-major layout in place (closest token first), so transient
    memory stays O(T + W) beyond the output arrays themselves.
    """
    x = _coerce_sequence(x, window)
    T = _check_input(x, vocab_size, window)
    prev = _prev_occurrence(x)

    def hits_at(d):
        j = np.arange(d, T + d)
        ok = (x[j] >= 0) & (x[j] < vocab_size) & ((j - prev[j]) >= d)
        return j[ok]

    counts = np.zeros(T, dtype=np.int64)
    for d in range(1, window + 1):
        counts[hits_at(d) - d] += 1
    offsets = np.zeros(T + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    n = int(offsets[-1])
    tokens = np.empty(n, dtype=np.int32)
    scores = np.empty(n, dtype=SCORE_DTYPE)
    cursor = offsets[:-1].copy()
    for d in range(1, window + 1):  # ascending d = descending score = canonical order
        jj = hits_at(d)
        slots = cursor[jj - d]
        tokens[slots] = x[jj]
        scores[slots] = SCORE_DTYPE(window - d)
        cursor[jj - d] += 1
    return SparseTargets(offsets=offsets, tokens=tokens, scores=scores,
                         seq_len=T, vocab_size=vocab_size, window=window)


def densify(sparse: SparseTargets) -> DenseTargets:
    scores = np.full((sparse.seq_len, sparse.vocab_size), -np.inf, dtype=SCORE_DTYPE)
    pos = np.repeat(np.arange(sparse.seq_len), sparse.counts())
    scores[pos, sparse.tokens] = sparse.scores
    return DenseTargets(scores=scores, window=sparse.window)


def oracle_forward_scan(x: np.ndarray, vocab_size: int, window: int) -> DenseTargets:
    """Independent O(T*W*V) verification oracle: literal window scan per (t, v)."""
    x = _coerce_sequence(x, window)
    T = _check_input(x, vocab_size, window)
    total = T + window
    scores = np.full((T, vocab_size), -np.inf, dtype=SCORE_DTYPE)
    for t in range(T):
        for v in range(vocab_size):
            for d in range(1, window + 1):
                j = t + d
                if j < total and x[j] == v:
                    scores[t, v] = SCORE_DTYPE(window - d)
                    break
    return DenseTargets(scores=scores, window=window)


def build_sparse_batch(overhang: np.ndarray, vocab_size: int, window: int) -> list[SparseTargets]:
    """Per-row sparse targets for a (B, T+W) token matrix."""
    return [build_sparse(row, vocab_size, window) for row in overhang]


# ---------------------------------------------------------------------------
# flat-file serialization
#
# Little-endian layout:
#   magic "TOPTARG1" | u32 format version | u64 T | u64 V | u64 W
#   u32 count[t] for t in 0..T-1
#   per position, count[t] records of (u32 token, u32 score), closest first


def write_sparse_file(path, sparse: SparseTargets) -> None:
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<IQQQ", _FORMAT_VERSION, sparse.seq_len,
                            sparse.vocab_size, sparse.window))
        f.write(sparse.counts().astype("<u4").tobytes())
        pairs = np.empty((sparse.n_pairs, 2), dtype="<u4")
        pairs[:, 0] = sparse.tokens
        pairs[:, 1] = sparse.scores.astype(np.int64)
        f.write(pairs.tobytes())


def read_sparse_file(path) -> SparseTargets:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != _MAGIC:
            raise ValueError(f"not a target file (bad magic {magic!r})")
        version, T, V, W = struct.unpack("<IQQQ", f.read(28))
        if version != _FORMAT_VERSION:
            raise ValueError(f"unsupported target file version {version}")
        counts = np.frombuffer(f.read(4 * T), dtype="<u4").astype(np.int64)
        n = int(counts.sum())
        pairs = np.frombuffer(f.read(8 * n), dtype="<u4").reshape(n, 2)
        offsets = np.zeros(T + 1, dtype=np.int64)
        np.cumsum(counts, out=offsets[1:])
        return SparseTargets(offsets=offsets,
                             tokens=pairs[:, 0].astype(np.int32),
                             scores=pairs[:, 1].astype(SCORE_DTYPE),
                             seq_len=T, vocab_size=V, window=W)
