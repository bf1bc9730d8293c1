"""Optimization loop: AdamW, cosine decay with warmup, clipping, metrics.

Every run writes, in order: a manifest (the fully resolved config, in the
same key=value format the CLI reads back), a metrics CSV flushed row by
row, periodic eval rows, and checkpoints that capture parameters plus
optimizer state so a resumed run replays the identical trace.

Deterministic mode keeps batch assembly on the training thread and zeroes
the wall-clock column so reruns produce bitwise-identical metrics files;
throughput mode moves batch assembly to a producer thread and records
real timings.
"""

from __future__ import annotations

import csv
import math
import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import tensor as tt
from .data import make_batches, split_heldout
from .evaluate import append_eval_row, evaluate
from .losses import (LossBreakdown, combine, mtp_loss, ntp_loss, top_loss_from_sparse,
                     top_loss_fused, top_mask)
from .model import Model, ModelSpec, init_params, load_checkpoint, param_shapes, save_checkpoint
from .top_targets import build_sparse_batch


class NonFiniteGradError(FloatingPointError):
    """A gradient went NaN/Inf; the step is aborted."""


class NanLossHalt(RuntimeError):
    """Training halted on a non-finite loss; carries the last good checkpoint."""

    def __init__(self, step: int, last_checkpoint: str | None):
        self.step = step
        self.last_checkpoint = last_checkpoint
        at = last_checkpoint or "<none written>"
        super().__init__(f"non-finite loss at step {step}; last good checkpoint: {at}")


@dataclass
class AdamWConfig:
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.01


@dataclass
class RunConfig:
    model: ModelSpec = field(default_factory=ModelSpec)
    steps: int = 3000
    warmup_steps: int = 100
    peak_lr: float = 3e-4
    min_lr_fraction: float = 0.10
    batch_size: int = 16
    grad_clip_max_norm: float = 1.0
    adamw: AdamWConfig = field(default_factory=AdamWConfig)
    seed: int = 0
    eval_every: int = 250
    checkpoint_every: int = 1000
    output_dir: str = "runs/out"
    corpus_path: str = ""
    deterministic: bool = True
    dtype: str = "f32"  # f32 | f64
    holdout_fraction: float = 0.05
    top_loss_weight: float = 1.0
    top_fused: bool = True
    top_block_size: int = 32
    eval_max_batches: int = 8

    def validate(self) -> None:
        if not (0 <= self.warmup_steps < self.steps):
            raise ValueError(f"need 0 <= warmup_steps < steps, got {self.warmup_steps}/{self.steps}")
        if not (0.0 < self.min_lr_fraction <= 1.0):
            raise ValueError(f"min_lr_fraction must be in (0, 1], got {self.min_lr_fraction}")
        if self.grad_clip_max_norm <= 0:
            raise ValueError("grad_clip_max_norm must be > 0")
        if self.batch_size < 1 or self.peak_lr <= 0:
            raise ValueError("batch_size must be >= 1 and peak_lr > 0")
        if self.dtype not in ("f32", "f64"):
            raise ValueError(f"dtype must be f32 or f64, got {self.dtype}")
        if not (0.0 < self.holdout_fraction < 1.0):
            raise ValueError("holdout_fraction must be in (0, 1)")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "f32" else np.float64

    def overhang_window(self) -> int:
        obj = self.model.objective
        if obj.kind == "top":
            return obj.window
        if obj.kind == "mtp":
            return obj.future_tokens
        return 1


def lr_at(step: int, config: RunConfig) -> float:
    """Linear ramp 0 -> peak over warmup, then cosine decay to the floor."""
    peak, warm, total = config.peak_lr, config.warmup_steps, config.steps
    if warm > 0 and step <= warm:
        return peak * step / warm
    floor = config.min_lr_fraction
    progress = (step - warm) / (total - warm)
    return peak * (floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * progress)))


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float):
    """Global-norm clipping; returns (clipped grads, pre-clip norm)."""
    sq = 0.0
    for name in sorted(grads):
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradError(f"non-finite gradient in {name}")
        sq += float(np.square(g, dtype=np.float64).sum())
    norm = math.sqrt(sq)
    if norm <= max_norm:
        return grads, norm
    factor = max_norm / norm
    return {k: g * g.dtype.type(factor) for k, g in grads.items()}, norm


@dataclass
class AdamWState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @staticmethod
    def init(params: dict[str, tt.Tensor]) -> "AdamWState":
        return AdamWState(m={k: np.zeros_like(p.data) for k, p in params.items()},
                          v={k: np.zeros_like(p.data) for k, p in params.items()})


def adamw_step(params: dict[str, tt.Tensor], grads: dict[str, np.ndarray],
               state: AdamWState, lr: float, config: AdamWConfig) -> None:
    """Decoupled-weight-decay Adam with bias correction; updates in place."""
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name in sorted(params):
        p = params[name]
        g = grads[name]
        dt = p.data.dtype.type
        if config.weight_decay:  # decoupled decay on the pre-step value
            p.data -= dt(lr * config.weight_decay) * p.data
        m = state.m[name]
        v = state.v[name]
        m *= dt(b1)
        m += dt(1.0 - b1) * g
        v *= dt(b2)
        v += dt(1.0 - b2) * np.square(g)
        mhat = m / dt(bc1)
        vhat = v / dt(bc2)
        p.data -= dt(lr) * (mhat / (np.sqrt(vhat) + dt(config.eps)))


@dataclass
class TrainResult:
    final_checkpoint: str
    metrics_path: str
    eval_path: str
    output_dir: str
    final_step: int
    final_loss: float


def metrics_columns(spec: ModelSpec) -> list[str]:
    cols = ["step", "lr", "loss_total", "loss_ntp"]
    if spec.objective.kind == "top":
        cols.append("loss_top")
    if spec.objective.kind == "mtp":
        cols += [f"loss_mtp_head_{i}" for i in range(1, spec.objective.future_tokens + 1)]
    cols += ["valid_positions", "grad_norm", "tokens_seen", "wall_ms"]
    return cols


def _batch_source(config: RunConfig, stream: np.ndarray, skip: int):
    gen = make_batches(stream, config.model.max_seq_len, config.overhang_window(),
                       config.batch_size, seed=config.seed,
                       sentinel=config.model.vocab_size,
                       mtp_n=(config.model.objective.future_tokens
                              if config.model.objective.kind == "mtp" else None),
                       epochs=None, skip=skip)
    if config.deterministic:
        return gen
    q: queue.Queue = queue.Queue(maxsize=4)
    stop = object()

    def produce():
        for b in gen:
            q.put(b)
        q.put(stop)

    threading.Thread(target=produce, daemon=True).start()

    def drain():
        while True:
            item = q.get()
            if item is stop:
                return
            yield item

    return drain()


def compute_loss(model: Model, batch, config: RunConfig):
    """Forward plus the objective for this run; returns (total, breakdown)."""
    obj = config.model.objective
    if obj.kind == "ntp":
        out = model.forward(batch.inputs)
        mask = batch.ntp_mask()
        total = ntp_loss(out.ntp_logits, batch.ntp_targets, mask)
        val = total.item()
        return total, LossBreakdown(ntp=val, total=val, valid_position_count=int(mask.sum()))
    if obj.kind == "mtp":
        out = model.forward(batch.inputs)
        mask = batch.mtp_mask()
        total, per_head = mtp_loss(out.mtp_logits, batch.mtp_targets, mask)
        return total, LossBreakdown(ntp=per_head[0], total=total.item(),
                                    mtp_per_head=per_head,
                                    valid_position_count=int(mask[:, :, 0].sum()))
    out = model.forward(batch.inputs, materialize_top_scores=not config.top_fused)
    nmask = batch.ntp_mask()
    nt = ntp_loss(out.ntp_logits, batch.ntp_targets, nmask)
    sparse = build_sparse_batch(batch.overhang, config.model.vocab_size, obj.window)
    tmask = top_mask(sparse, batch.input_mask())
    if config.top_fused:
        tl = top_loss_fused(out.final_hidden, model.params["unembed_top"], sparse,
                            tmask, config.top_block_size)
    else:
        tl = top_loss_from_sparse(out.top_scores, sparse, tmask)
    total = combine(nt, tl, config.top_loss_weight)
    return total, LossBreakdown(ntp=nt.item(), top=tl.item(), total=total.item(),
                                valid_position_count=int(nmask.sum()))


def write_manifest(path, config: RunConfig) -> None:
    from .cli import format_config  # shared key=value format, parseable by the CLI

    with open(path, "w") as f:
        f.write(f"# resolved run configuration (toplab {__version__})\n")
        f.write(f"code_version = {__version__}\n")
        for key, value in format_config(config):
            f.write(f"{key} = {value}\n")


def train(config: RunConfig, corpus: np.ndarray, resume_from: str | None = None) -> TrainResult:
    """Run the step loop; returns paths to the final checkpoint and metrics."""
    config.validate()
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "checkpoints").mkdir(exist_ok=True)
    write_manifest(out / "manifest.txt", config)

    train_stream, heldout = split_heldout(np.asarray(corpus, dtype=np.int64),
                                          config.model.max_seq_len, config.holdout_fraction)
    eval_batches = list(make_batches(
        heldout, config.model.max_seq_len, config.overhang_window(), config.batch_size,
        seed=config.seed + 1_000_003, sentinel=config.model.vocab_size,
        mtp_n=(config.model.objective.future_tokens
               if config.model.objective.kind == "mtp" else None),
        epochs=1))[: config.eval_max_batches]

    if resume_from is not None:
        model, state, start_step = _load_train_state(resume_from, config)
    else:
        model = Model(config.model, init_params(config.model, config.seed, config.np_dtype))
        state = AdamWState.init(model.params)
        start_step = 0

    metrics_path = out / "metrics.csv"
    eval_path = out / "eval.csv"
    mode = "a" if (resume_from is not None and metrics_path.exists()) else "w"
    last_ckpt: str | None = None
    tokens_per_step = config.batch_size * config.model.max_seq_len
    final_loss = math.nan

    with open(metrics_path, mode, newline="") as mf:
        writer = csv.writer(mf)
        if mode == "w":
            writer.writerow(metrics_columns(config.model))
            mf.flush()
        batches = _batch_source(config, train_stream, skip=start_step)
        for step in range(start_step + 1, config.steps + 1):
            t0 = time.perf_counter()
            batch = next(batches)
            try:
                total, breakdown = compute_loss(model, batch, config)
                if not math.isfinite(breakdown.total):
                    raise tt.NonFiniteError("loss is not finite")
                for p in model.params.values():
                    p.zero_grad()
                total.backward()
                grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                         for k, p in model.params.items()}
                grads, gnorm = clip_gradients(grads, config.grad_clip_max_norm)
            except (tt.NonFiniteError, NonFiniteGradError) as e:
                raise NanLossHalt(step, last_ckpt) from e
            lr = lr_at(step, config)
            adamw_step(model.params, grads, state, lr, config.adamw)
            final_loss = breakdown.total

            wall_ms = 0.0 if config.deterministic else (time.perf_counter() - t0) * 1e3
            row = [step, repr(lr), repr(breakdown.total), repr(breakdown.ntp)]
            if breakdown.top is not None:
                row.append(repr(breakdown.top))
            if breakdown.mtp_per_head is not None:
                row += [repr(v) for v in breakdown.mtp_per_head]
            row += [breakdown.valid_position_count, repr(gnorm),
                    step * tokens_per_step, repr(wall_ms)]
            writer.writerow(row)
            mf.flush()

            if config.eval_every and step % config.eval_every == 0:
                report = evaluate(_eval_view(model), eval_batches, pair_seed=config.seed)
                append_eval_row(eval_path, config.model, step, report)
            if (config.checkpoint_every and step % config.checkpoint_every == 0) \
                    or step == config.steps:
                last_ckpt = str(out / "checkpoints" / f"step_{step:06d}.ckpt")
                _save_train_state(last_ckpt, model, state, step)

    final = out / "final.ckpt"
    _save_train_state(final, model, state, config.steps)
    return TrainResult(final_checkpoint=str(final), metrics_path=str(metrics_path),
                       eval_path=str(eval_path), output_dir=str(out),
                       final_step=config.steps, final_loss=final_loss)


def _eval_view(model: Model) -> Model:
    """Read-only snapshot: same arrays wrapped without gradient tracking."""
    frozen = {k: tt.constant(p.data, dtype=p.data.dtype.type) for k, p in model.params.items()}
    return Model(model.spec, frozen)


def _save_train_state(path, model: Model, state: AdamWState, step: int) -> None:
    tensors = dict(model.named_arrays())
    for k, arr in state.m.items():
        tensors[f"adam_m.{k}"] = arr
    for k, arr in state.v.items():
        tensors[f"adam_v.{k}"] = arr
    save_checkpoint(path, model.spec, tensors,
                    meta={"step": step, "adam_t": state.t, "toplab_version": __version__})


def _load_train_state(path, config: RunConfig):
    spec, tensors, meta = load_checkpoint(path)
    if spec != config.model:
        raise ValueError("checkpoint model spec does not match the run config")
    names = param_shapes(spec)
    params = {k: tt.parameter(tensors[k], dtype=tensors[k].dtype.type) for k in names}
    state = AdamWState(
        m={k: tensors[f"adam_m.{k}"].copy() for k in names},
        v={k: tensors[f"adam_v.{k}"].copy() for k in names},
        t=meta["adam_t"])
    return Model(spec, params), state, meta["step"]
