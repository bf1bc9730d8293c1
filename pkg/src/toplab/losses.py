"""Training objectives: next-token, multi-token, and token-order losses.

All losses are means over valid positions (and over heads for the
multi-token loss); masked-out positions contribute exactly zero to value
and gradient. Target distributions for the token-order loss are constants
built from proximity scores; gradients flow only into model outputs.

The fused token-order path consumes sparse targets and walks the sequence
in position blocks, so the dense (T, V) target matrix and the full logit
matrix never coexist in memory; the backward pass recomputes each block's
logits instead of caching them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .tensor import Tensor
from .top_targets import DenseTargets, SparseTargets, densify


class EmptyBatchError(ValueError):
    """No valid position under the mask."""


class MaskContractError(ValueError):
    """A masked-in position has no finite target entry (mask construction bug)."""


@dataclass
class LossBreakdown:
    ntp: float
    total: float
    valid_position_count: int
    top: float | None = None
    mtp_per_head: list[float] | None = None

    def components_sum(self) -> float:
        if self.mtp_per_head is not None:
            return float(np.mean(self.mtp_per_head))
        return self.ntp + (self.top if self.top is not None else 0.0)


def _weights_from_mask(mask: np.ndarray) -> tuple[np.ndarray, int]:
    count = int(mask.sum())
    if count == 0:
        raise EmptyBatchError("no valid positions in batch")
    return mask.astype(np.float64) / count, count


def _masked_weighted_nll(logp: Tensor, targets: np.ndarray, weights: np.ndarray) -> Tensor:
    """-sum(weights * logp[targets]) as a trace node; weights are constants."""
    vocab = logp.shape[-1]
    flat_lp = logp.data.reshape(-1, vocab)
    flat_t = np.minimum(targets.reshape(-1), vocab - 1)  # masked rows may hold the sentinel
    flat_w = weights.reshape(-1)
    picked = flat_lp[np.arange(flat_lp.shape[0]), flat_t]
    value = np.asarray(-(flat_w * picked).sum(), dtype=logp.data.dtype)

    def backward(g):
        grad = np.zeros_like(flat_lp)
        np.subtract.at(grad, (np.arange(flat_lp.shape[0]), flat_t),
                       (g * flat_w).astype(logp.data.dtype))
        logp._accumulate(grad.reshape(logp.shape))

    return tt._node(value, (logp,), backward)


def _masked_soft_ce(logp: Tensor, p: np.ndarray, weights: np.ndarray) -> Tensor:
    """-sum_bt weights * <p_bt, logp_bt> with constant soft targets p."""
    inner = np.einsum("...v,...v->...", p, logp.data.astype(np.float64))
    value = np.asarray(-(weights * inner).sum(), dtype=logp.data.dtype)

    def backward(g):
        grad = -(g * weights)[..., None] * p
        logp._accumulate(grad.astype(logp.data.dtype))

    return tt._node(value, (logp,), backward)


def ntp_loss(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean masked cross-entropy of the next token."""
    if logits.shape[:-1] != targets.shape or targets.shape != mask.shape:
        raise tt.ShapeError(
            f"ntp_loss shapes disagree: logits {logits.shape}, targets {targets.shape}, mask {mask.shape}"
        )
    weights, _ = _weights_from_mask(mask)
    return _masked_weighted_nll(tt.log_softmax(logits), targets, weights)


def top_loss_dense(scores: Tensor, targets: list[DenseTargets] | np.ndarray,
                   mask: np.ndarray) -> Tensor:
    """Listwise ranking loss against dense proximity targets.

    Cross-entropy between the softmax of the target scores (over their
    finite support) and the log-softmax of the model scores.
    """
    raw = np.stack([t.scores for t in targets]) if isinstance(targets, list) else targets
    if scores.shape != raw.shape:
        raise tt.ShapeError(f"scores {scores.shape} vs targets {raw.shape}")
    finite_rows = np.isfinite(raw).any(axis=-1)
    if (mask & ~finite_rows).any():
        raise MaskContractError("masked-in position with all -inf target row")
    weights, _ = _weights_from_mask(mask)
    p = tt.softmax_rows_with_neg_inf(raw)
    return _masked_soft_ce(tt.log_softmax(scores), p, weights)


def _sparse_label_arrays(targets: list[SparseTargets], mask: np.ndarray):
    """Flatten masked-in sparse rows to (b, t, token, p) arrays; p in f64."""
    bs, ts, toks, ps = [], [], [], []
    for b, sp in enumerate(targets):
        counts = sp.counts()
        valid = counts > 0
        if (mask[b] & ~valid).any():
            raise MaskContractError("masked-in position with empty target row")
        keep = mask[b] & valid
        if not keep.any():
            continue
        reps = counts[keep]
        pair_sel = np.repeat(keep, counts)
        s = sp.scores[pair_sel].astype(np.float64)
        seg = np.repeat(np.arange(len(reps)), reps)
        seg_off = np.concatenate([[0], np.cumsum(reps)[:-1]])
        m = np.maximum.reduceat(s, seg_off)
        e = np.exp(s - m[seg])
        denom = np.add.reduceat(e, seg_off)
        ps.append(e / denom[seg])
        toks.append(sp.tokens[pair_sel].astype(np.int64))
        t_idx = np.repeat(np.flatnonzero(keep), reps)
        ts.append(t_idx)
        bs.append(np.full(t_idx.size, b, dtype=np.int64))
    if not bs:
        raise EmptyBatchError("no valid positions in batch")
    return (np.concatenate(bs), np.concatenate(ts),
            np.concatenate(toks), np.concatenate(ps))


def top_loss_fused(hidden: Tensor, weights: Tensor, targets: list[SparseTargets],
                   mask: np.ndarray, block_size: int) -> Tensor:
    """Blockwise unembedding + ranking loss without materializing dense targets.

    Numerically equal to top_loss_dense(hidden @ weights, densify(targets))
    while keeping transient memory at O(B * block_size * V). Gradients flow
    to both hidden states and the unembedding matrix.
    """
    if block_size < 1:
        raise ValueError("block_size must be >= 1")
    B, T, D = hidden.shape
    if weights.ndim != 2 or weights.shape[0] != D:
        raise tt.ShapeError(f"weights {weights.shape} incompatible with hidden {hidden.shape}")
    if mask.shape != (B, T):
        raise tt.ShapeError(f"mask {mask.shape} != {(B, T)}")
    block_size = min(block_size, T)
    w_pos, _ = _weights_from_mask(mask)
    pb, pt, ptok, pp = _sparse_label_arrays(targets, mask)
    pair_w = w_pos[pb, pt] * pp  # weight carried by each (position, token) pair

    total = 0.0
    for t0 in range(0, T, block_size):
        t1 = min(t0 + block_size, T)
        z = hidden.data[:, t0:t1, :] @ weights.data  # (B, bs, V)
        z64 = z.astype(np.float64)
        m = z64.max(axis=-1, keepdims=True)
        lse = (np.log(np.exp(z64 - m).sum(axis=-1, keepdims=True)) + m).squeeze(-1)
        total += float((w_pos[:, t0:t1] * lse).sum())
        sel = (pt >= t0) & (pt < t1)
        if sel.any():
            total -= float((pair_w[sel] * z64[pb[sel], pt[sel] - t0, ptok[sel]]).sum())
    value = np.asarray(total, dtype=hidden.data.dtype)

    def backward(g):
        g = float(g)
        dh = np.zeros_like(hidden.data)
        dw = np.zeros_like(weights.data)
        for t0 in range(0, T, block_size):
            t1 = min(t0 + block_size, T)
            hblk = hidden.data[:, t0:t1, :]
            z = hblk @ weights.data  # recomputed, not cached
            m = z.max(axis=-1, keepdims=True)
            e = np.exp(z - m)
            q = e / e.sum(axis=-1, keepdims=True)
            dz = q * (g * w_pos[:, t0:t1, None]).astype(z.dtype)
            sel = (pt >= t0) & (pt < t1)
            if sel.any():
                np.subtract.at(dz, (pb[sel], pt[sel] - t0, ptok[sel]),
                               (g * pair_w[sel]).astype(z.dtype))
            dh[:, t0:t1, :] = dz @ weights.data.T
            dw += hblk.reshape(-1, D).T @ dz.reshape(-1, z.shape[-1])
        if hidden.requires_grad or hidden._parents:
            hidden._accumulate(dh)
        if weights.requires_grad or weights._parents:
            weights._accumulate(dw)

    return tt._node(value, (hidden, weights), backward)


def mtp_loss(per_head_logits: Tensor, mtp_targets: np.ndarray,
             mask: np.ndarray) -> tuple[Tensor, list[float]]:
    """Multi-head future-token loss: mean over heads of per-head masked CE.

    Returns the differentiable total plus per-head loss values for the
    head-ordering diagnostic.
    """
    B, T, N, V = per_head_logits.shape
    if mtp_targets.shape != (B, T, N) or mask.shape != (B, T, N):
        raise tt.ShapeError(
            f"mtp shapes disagree: logits {per_head_logits.shape}, targets {mtp_targets.shape}, mask {mask.shape}"
        )
    counts = mask.sum(axis=(0, 1))
    if (counts == 0).any():
        raise EmptyBatchError(f"head(s) {np.flatnonzero(counts == 0).tolist()} have no valid positions")
    weights = mask.astype(np.float64) / (counts[None, None, :] * N)
    logp = tt.log_softmax(per_head_logits)
    total = _masked_weighted_nll(logp, mtp_targets, weights)
    per_head = []
    flat_t = np.minimum(mtp_targets, V - 1)
    picked = np.take_along_axis(logp.data, flat_t[..., None], axis=-1).squeeze(-1).astype(np.float64)
    for n in range(N):
        per_head.append(float(-(picked[:, :, n] * mask[:, :, n]).sum() / counts[n]))
    return total, per_head


def combine(ntp: Tensor, aux: Tensor | None, aux_weight: float = 1.0) -> Tensor:
    """Total objective: NTP plus the (weighted) auxiliary loss."""
    if aux is None:
        return ntp
    return tt.add(ntp, tt.scale(aux, aux_weight))


def top_mask(targets: list[SparseTargets], input_mask: np.ndarray) -> np.ndarray:
    """Positions eligible for the token-order loss: valid input and >=1 finite target."""
    rows = np.stack([sp.valid_rows() for sp in targets])
    return input_mask & rows


def top_loss_from_sparse(scores: Tensor, targets: list[SparseTargets],
                         mask: np.ndarray) -> Tensor:
    """Dense-path ranking loss fed by sparse targets (densified per row)."""
    return top_loss_dense(scores, [densify(sp) for sp in targets], mask)
