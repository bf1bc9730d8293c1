"""Corpus ingestion, byte-level tokenization, and batch assembly.

Sequences carry a W-token overhang beyond the T-token body so proximity
targets can look ahead at every body position. The invalid sentinel id is
V (one past the last real id); it appears only as tail padding where the
corpus ran out and a single `tok == V` comparison detects it.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


class TokenizationError(ValueError):
    """Input byte not covered by the vocabulary; carries the file offset."""


class CorpusTooSmallError(ValueError):
    """Stream has no usable (input, target) pair."""


@dataclass(frozen=True)
class Vocab:
    size: int
    kind: str = "byte"  # "byte" or "toy"
    symbols: tuple[str, ...] | None = None  # toy only, id = position

    @property
    def sentinel(self) -> int:
        return self.size

    @staticmethod
    def byte() -> "Vocab":
        return Vocab(size=256, kind="byte")

    @staticmethod
    def toy(symbols) -> "Vocab":
        symbols = tuple(symbols)
        return Vocab(size=len(symbols), kind="toy", symbols=symbols)

    @staticmethod
    def toy_from_file(path) -> "Vocab":
        """One single-character symbol per line; id = line number."""
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        symbols = []
        for i, line in enumerate(lines):
            if len(line) != 1:
                raise TokenizationError(f"line {i}: toy symbols must be single characters, got {line!r}")
            symbols.append(line)
        return Vocab.toy(symbols)


@dataclass(frozen=True)
class TokenSequence:
    tokens: np.ndarray  # (T + W,) int64, sentinel-padded tail allowed
    body_len: int
    window: int

    def __post_init__(self):
        if len(self.tokens) != self.body_len + self.window:
            raise ValueError(
                f"token count {len(self.tokens)} != body {self.body_len} + window {self.window}"
            )


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray  # (B, T) int64
    ntp_targets: np.ndarray  # (B, T) int64, inputs shifted by one
    overhang: np.ndarray  # (B, T + W) int64
    sentinel: int
    mtp_targets: np.ndarray | None = None  # (B, T, N) int64

    @property
    def batch_size(self) -> int:
        return self.inputs.shape[0]

    @property
    def seq_len(self) -> int:
        return self.inputs.shape[1]

    @property
    def window(self) -> int:
        return self.overhang.shape[1] - self.inputs.shape[1]

    def input_mask(self) -> np.ndarray:
        return self.inputs != self.sentinel

    def ntp_mask(self) -> np.ndarray:
        return self.input_mask() & (self.ntp_targets != self.sentinel)

    def mtp_mask(self) -> np.ndarray:
        """(B, T, N) validity: input valid and the offset-n target valid."""
        if self.mtp_targets is None:
            raise ValueError("batch was built without mtp targets")
        return self.input_mask()[:, :, None] & (self.mtp_targets != self.sentinel)


def load_corpus(path, vocab: Vocab) -> np.ndarray:
    """Read a file into a token-id stream (int64)."""
    raw = Path(path).read_bytes()
    if vocab.kind == "byte":
        return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    table = np.full(256, -1, dtype=np.int64)
    for i, sym in enumerate(vocab.symbols):
        table[ord(sym)] = i
    ids = table[np.frombuffer(raw, dtype=np.uint8)]
    misses = np.flatnonzero(ids < 0)
    if misses.size:
        off = int(misses[0])
        raise TokenizationError(f"byte {raw[off]:#04x} at offset {off} not in toy vocab")
    return ids


def encode_text(text: str, vocab: Vocab) -> np.ndarray:
    if vocab.kind == "byte":
        return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.int64)
    try:
        return np.array([vocab.symbols.index(c) for c in text], dtype=np.int64)
    except ValueError as e:
        raise TokenizationError(str(e)) from None


def decode_tokens(ids, vocab: Vocab) -> str:
    ids = [int(i) for i in ids if int(i) < vocab.size]
    if vocab.kind == "byte":
        return bytes(ids).decode("utf-8", errors="replace")
    return "".join(vocab.symbols[i] for i in ids)


def window_starts(stream_len: int, seq_len: int) -> np.ndarray:
    """Non-overlapping window starts (stride T) covering the whole stream."""
    n_windows = max(1, -(-stream_len // seq_len))
    return np.arange(n_windows) * seq_len


def _window(stream: np.ndarray, start: int, length: int, sentinel: int) -> np.ndarray:
    out = np.full(length, sentinel, dtype=np.int64)
    chunk = stream[start:start + length]
    out[: len(chunk)] = chunk
    return out


def make_batches(stream: np.ndarray, seq_len: int, window: int, batch_size: int,
                 seed: int, sentinel: int = 256, mtp_n: int | None = None,
                 epochs: int | None = 1, skip: int = 0):
    """Yield Batches of non-overlapping windows in seeded permuted order.

    Deterministic for a fixed seed: epoch e uses the permutation drawn from
    seed + e, so position in the run is a pure function of (seed, step) and
    resume can fast-forward with `skip`. Short final windows are padded
    with the sentinel. epochs=None cycles forever.
    """
    stream = np.asarray(stream, dtype=np.int64)
    if seq_len < 1 or window < 1 or batch_size < 1:
        raise ValueError("seq_len, window, and batch_size must all be >= 1")
    if mtp_n is not None and mtp_n > window:
        raise ValueError(f"mtp future-token count {mtp_n} exceeds overhang window {window}")
    if len(stream) < 2:
        raise CorpusTooSmallError(
            f"corpus has {len(stream)} tokens; need at least 2 for one training pair"
        )
    starts = window_starts(len(stream), seq_len)
    n_batches_per_epoch = -(-len(starts) // batch_size)
    epoch = 0
    emitted = 0
    while epochs is None or epoch < epochs:
        order = np.random.default_rng(np.random.PCG64(seed + epoch)).permutation(len(starts))
        for i in range(n_batches_per_epoch):
            if emitted < skip:
                emitted += 1
                continue
            emitted += 1
            # the final batch of an epoch may be short so that every window
            # appears exactly once per epoch
            chosen = order[i * batch_size:(i + 1) * batch_size]
            yield assemble_batch(stream, starts[chosen], seq_len, window, sentinel, mtp_n)
        epoch += 1


def assemble_batch(stream, starts, seq_len, window, sentinel, mtp_n=None) -> Batch:
    total = seq_len + window
    over = np.stack([_window(stream, int(s), total, sentinel) for s in starts])
    inputs = over[:, :seq_len]
    ntp_targets = over[:, 1:seq_len + 1]
    mtp = None
    if mtp_n is not None:
        mtp = np.stack([over[:, n:seq_len + n] for n in range(1, mtp_n + 1)], axis=2)
    return Batch(inputs=np.ascontiguousarray(inputs),
                 ntp_targets=np.ascontiguousarray(ntp_targets),
                 overhang=over, sentinel=sentinel, mtp_targets=mtp)


def split_heldout(stream: np.ndarray, seq_len: int, fraction: float = 0.05):
    """Window-aligned train/held-out split; the final `fraction` of windows are held out."""
    stream = np.asarray(stream, dtype=np.int64)
    starts = window_starts(len(stream), seq_len)
    n_held = max(1, round(len(starts) * fraction))
    if n_held >= len(starts):
        raise CorpusTooSmallError("corpus too small to carve out a held-out split")
    cut = int(starts[len(starts) - n_held])
    return stream[:cut], stream[cut:]


def unigram_entropy(stream: np.ndarray, vocab_size: int) -> float:
    """Byte/token unigram entropy of the stream in nats (sentinels excluded)."""
    stream = np.asarray(stream)
    counts = np.bincount(stream[stream < vocab_size], minlength=vocab_size).astype(np.float64)
    total = counts.sum()
    if total == 0:
        raise CorpusTooSmallError("no valid tokens in stream")
    p = counts[counts > 0] / total
    return float(-(p * np.log(p)).sum())
