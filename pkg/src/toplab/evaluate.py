"""Held-out evaluation and head diagnostics.

The cross-objective comparison quantity is the NTP-head loss: the masked
mean next-token cross-entropy computed only through the next-token head,
whatever the training objective was. Ranking quality of the token-order
head is summarized by three numbers: how often its argmax is the true
next token, the mean rank it assigns the true next token, and how often
it orders pairs of upcoming tokens the same way the proximity targets do.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as tt
from .data import Batch
from .model import Model
from .top_targets import DenseTargets, SparseTargets, build_sparse_batch

PAIRS_PER_POSITION = 64


class EmptyEvalError(ValueError):
    """No batches or no valid positions to evaluate."""


@dataclass
class EvalReport:
    token_count: int
    ntp_head_loss: float
    perplexity: float
    mtp_per_head_losses: list[float] | None = None
    top_next_token_top1_rate: float | None = None
    top_mean_true_next_rank: float | None = None
    top_window_ordering_agreement: float | None = None

    def pretty(self) -> str:
        lines = [f"tokens evaluated      {self.token_count}",
                 f"ntp head loss         {self.ntp_head_loss:.6f}",
                 f"perplexity            {self.perplexity:.4f}"]
        if self.mtp_per_head_losses is not None:
            for i, v in enumerate(self.mtp_per_head_losses, start=1):
                lines.append(f"mtp head {i} loss       {v:.6f}")
        if self.top_next_token_top1_rate is not None:
            lines.append(f"top head top-1 rate   {self.top_next_token_top1_rate:.4f}")
            lines.append(f"mean true-next rank   {self.top_mean_true_next_rank:.2f}")
            agree = self.top_window_ordering_agreement
            lines.append("window order agree    "
                         + (f"{agree:.4f}" if agree is not None else "absent"))
        return "\n".join(lines)


def _nll_sums(logits: np.ndarray, targets: np.ndarray, mask: np.ndarray) -> tuple[float, int]:
    """Sum of masked next-token negative log-likelihoods plus the count."""
    v = logits.shape[-1]
    z = logits.astype(np.float64)
    m = z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z - m).sum(axis=-1, keepdims=True)) + m
    logp = z - lse
    picked = np.take_along_axis(logp, np.minimum(targets, v - 1)[..., None], axis=-1).squeeze(-1)
    return float(-(picked * mask).sum()), int(mask.sum())


def evaluate(model: Model, batches: list[Batch], pair_seed: int = 0) -> EvalReport:
    """Pure function of (parameters, data): averages over all valid positions."""
    if not batches:
        raise EmptyEvalError("no held-out batches")
    spec = model.spec
    nll_sum, count = 0.0, 0
    head_sums = head_counts = None
    top1_hits = rank_sum = top_positions = 0
    agree_hits = agree_pairs = 0
    rng = np.random.default_rng(np.random.PCG64(pair_seed))
    for batch in batches:
        out = model.forward(batch.inputs)
        mask = batch.ntp_mask()
        s, c = _nll_sums(out.ntp_logits.data, batch.ntp_targets, mask)
        nll_sum += s
        count += c
        if spec.objective.kind == "mtp":
            n = spec.objective.future_tokens
            if head_sums is None:
                head_sums, head_counts = np.zeros(n), np.zeros(n, dtype=np.int64)
            hm = batch.mtp_mask()
            for i in range(n):
                hs, hc = _nll_sums(out.mtp_logits.data[:, :, i, :], batch.mtp_targets[:, :, i], hm[:, :, i])
                head_sums[i] += hs
                head_counts[i] += hc
        if spec.objective.kind == "top":
            sparse = build_sparse_batch(batch.overhang, spec.vocab_size, spec.objective.window)
            sc = out.top_scores.data
            t1, rk, npos = _rank_stats(sc, batch.ntp_targets, mask)
            top1_hits += t1
            rank_sum += rk
            top_positions += npos
            ah, ap = _agreement_counts(sc, sparse, batch.input_mask(), rng)
            agree_hits += ah
            agree_pairs += ap
    if count == 0:
        raise EmptyEvalError("no valid positions in held-out batches")
    loss = nll_sum / count
    report = EvalReport(token_count=count, ntp_head_loss=loss, perplexity=float(np.exp(loss)))
    if head_sums is not None:
        report.mtp_per_head_losses = (head_sums / np.maximum(head_counts, 1)).tolist()
    if spec.objective.kind == "top":
        report.top_next_token_top1_rate = top1_hits / top_positions if top_positions else None
        report.top_mean_true_next_rank = rank_sum / top_positions if top_positions else None
        report.top_window_ordering_agreement = agree_hits / agree_pairs if agree_pairs else None
    return report


def _rank_stats(scores: np.ndarray, targets: np.ndarray, mask: np.ndarray):
    v = scores.shape[-1]
    tgt = np.minimum(targets, v - 1)
    tgt_score = np.take_along_axis(scores, tgt[..., None], axis=-1)
    rank = 1 + (scores > tgt_score).sum(axis=-1)
    top1 = np.argmax(scores, axis=-1) == tgt
    return int(top1[mask].sum()), int(rank[mask].sum()), int(mask.sum())


def _agreement_counts(scores: np.ndarray, sparse: list[SparseTargets],
                      input_mask: np.ndarray, rng,
                      max_pairs: int = PAIRS_PER_POSITION) -> tuple[int, int]:
    hits = pairs = 0
    for b, sp in enumerate(sparse):
        counts = sp.counts()
        eligible = np.flatnonzero((counts >= 2) & input_mask[b])
        if eligible.size == 0:
            continue
        k = counts[eligible]
        n_pairs = np.minimum(max_pairs, k * (k - 1) // 2)
        pos_rep = np.repeat(eligible, n_pairs)
        k_rep = np.repeat(k, n_pairs)
        total = pos_rep.size
        i = (rng.random(total) * k_rep).astype(np.int64)
        j = (i + 1 + (rng.random(total) * (k_rep - 1)).astype(np.int64)) % k_rep
        base = sp.offsets[pos_rep]
        ti, tj = sp.tokens[base + i], sp.tokens[base + j]
        si, sj = sp.scores[base + i], sp.scores[base + j]
        mi = scores[b, pos_rep, ti]
        mj = scores[b, pos_rep, tj]
        agree = ((mi - mj) * (si - sj).astype(scores.dtype)) > 0
        hits += int(agree.sum())
        pairs += total
    return hits, pairs


def window_ordering_agreement(top_scores, targets: DenseTargets,
                              max_pairs: int = PAIRS_PER_POSITION,
                              seed: int = 0) -> float | None:
    """Pairwise order agreement between model scores and proximity targets.

    Over seeded samples of token pairs that both have finite, distinct
    target scores at a position: the fraction where the model orders them
    the same way. Returns None when no position offers an eligible pair.
    """
    scores = top_scores.data if isinstance(top_scores, tt.Tensor) else np.asarray(top_scores)
    if scores.shape != targets.scores.shape:
        raise tt.ShapeError(f"scores {scores.shape} vs targets {targets.scores.shape}")
    sp = _sparse_from_dense(targets)
    rng = np.random.default_rng(np.random.PCG64(seed))
    hits, pairs = _agreement_counts(scores[None], [sp],
                                    np.ones((1, targets.seq_len), dtype=bool),
                                    rng, max_pairs=max_pairs)
    return hits / pairs if pairs else None


def _sparse_from_dense(targets: DenseTargets) -> SparseTargets:
    T, V = targets.scores.shape
    offs = [0]
    toks, scs = [], []
    for t in range(T):
        finite = np.flatnonzero(np.isfinite(targets.scores[t]))
        order = np.argsort(-targets.scores[t, finite], kind="stable")
        toks.append(finite[order].astype(np.int32))
        scs.append(targets.scores[t, finite[order]])
        offs.append(offs[-1] + finite.size)
    return SparseTargets(offsets=np.array(offs, dtype=np.int64),
                         tokens=np.concatenate(toks) if toks else np.empty(0, np.int32),
                         scores=np.concatenate(scs) if scs else np.empty(0, np.float32),
                         seq_len=T, vocab_size=V, window=targets.window)


def mtp_head_ordering(report: EvalReport) -> tuple[bool, list[float]]:
    """True iff per-head losses are non-decreasing in head offset; margins are consecutive diffs."""
    losses = report.mtp_per_head_losses
    if losses is None or len(losses) < 2:
        raise ValueError("head ordering needs an mtp report with >= 2 heads")
    margins = [losses[i + 1] - losses[i] for i in range(len(losses) - 1)]
    return all(m >= 0 for m in margins), margins


def eval_csv_columns(spec) -> list[str]:
    cols = ["step", "token_count", "ntp_head_loss", "perplexity"]
    if spec.objective.kind == "mtp":
        cols += [f"mtp_head_{i}_loss" for i in range(1, spec.objective.future_tokens + 1)]
    if spec.objective.kind == "top":
        cols += ["top_top1_rate", "top_mean_rank", "top_agreement"]
    return cols


def append_eval_row(path, spec, step: int, report: EvalReport) -> None:
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as f:
        w = csv.writer(f)
        if new:
            w.writerow(eval_csv_columns(spec))
        row = [step, report.token_count, repr(report.ntp_head_loss), repr(report.perplexity)]
        if spec.objective.kind == "mtp":
            row += [repr(v) for v in report.mtp_per_head_losses]
        if spec.objective.kind == "top":
            row += [repr(report.top_next_token_top1_rate),
                    repr(report.top_mean_true_next_rank),
                    "" if report.top_window_ordering_agreement is None
                    else repr(report.top_window_ordering_agreement)]
        w.writerow(row)
