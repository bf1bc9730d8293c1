"""Command-line entry point: train / eval / build-targets / generate / compare.

Config files are key = value lines with dotted sections; # starts a
comment. Flags override file values, file values override defaults, and
the fully resolved configuration is written to the run manifest before
any compute. A manifest is itself a valid config file, so a run can be
reproduced from it alone.

Exit codes: 0 success, 1 usage or config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import importlib.resources
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import Vocab, decode_tokens, encode_text, load_corpus
from .model import Model, ModelSpec, Objective, model_from_checkpoint, strip_to_inference
from .trainer import AdamWConfig, NanLossHalt, RunConfig, train
from .top_targets import build_sparse, write_sparse_file

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

OUT_ROOT_ENV = "TOPLAB_OUT_ROOT"


class UsageError(Exception):
    pass


_BOOL = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}

# key -> (attribute path, converter); "objective" keys are handled specially
_SCALAR_KEYS = {
    "steps": ("steps", int),
    "warmup_steps": ("warmup_steps", int),
    "peak_lr": ("peak_lr", float),
    "min_lr_fraction": ("min_lr_fraction", float),
    "batch_size": ("batch_size", int),
    "grad_clip_max_norm": ("grad_clip_max_norm", float),
    "seed": ("seed", int),
    "eval_every": ("eval_every", int),
    "checkpoint_every": ("checkpoint_every", int),
    "out": ("output_dir", str),
    "corpus": ("corpus_path", str),
    "deterministic": ("deterministic", None),
    "dtype": ("dtype", str),
    "holdout_fraction": ("holdout_fraction", float),
    "adamw.beta1": ("adamw.beta1", float),
    "adamw.beta2": ("adamw.beta2", float),
    "adamw.eps": ("adamw.eps", float),
    "adamw.weight_decay": ("adamw.weight_decay", float),
    "top.loss_weight": ("top_loss_weight", float),
    "top.fused": ("top_fused", None),
    "top.block_size": ("top_block_size", int),
    "eval.max_batches": ("eval_max_batches", int),
    "model.hidden_size": ("model.hidden_size", int),
    "model.layers": ("model.layers", int),
    "model.n_heads": ("model.n_heads", int),
    "model.vocab_size": ("model.vocab_size", int),
    "model.max_seq_len": ("model.max_seq_len", int),
    "model.rope_theta": ("model.rope_theta", float),
    "model.tied_embeddings": ("model.tied_embeddings", None),
    "model.mtp_parameter_matched": ("model.mtp_parameter_matched", None),
}

KNOWN_KEYS = set(_SCALAR_KEYS) | {"objective", "objective.window",
                                  "objective.future_tokens", "code_version"}


def parse_config_file(path) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    return values


def _to_bool(s: str) -> bool:
    try:
        return _BOOL[s.lower()]
    except KeyError:
        raise UsageError(f"expected a boolean, got {s!r}") from None


def config_from_values(values: dict[str, str]) -> RunConfig:
    unknown = sorted(set(values) - KNOWN_KEYS)
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
    kind = values.get("objective", "ntp")
    if kind == "ntp":
        objective = Objective.ntp()
    elif kind == "mtp":
        objective = Objective.mtp(int(values.get("objective.future_tokens", 4)))
    elif kind == "top":
        objective = Objective.top(int(values.get("objective.window", 32)))
    else:
        raise UsageError(f"objective must be ntp, mtp, or top, got {kind!r}")

    model_kw: dict = {"objective": objective}
    cfg_kw: dict = {}
    adamw_kw: dict = {}
    for key, raw in values.items():
        if key not in _SCALAR_KEYS:
            continue
        attr, conv = _SCALAR_KEYS[key]
        val = _to_bool(raw) if conv is None else conv(raw)
        if attr.startswith("model."):
            model_kw[attr.removeprefix("model.")] = val
        elif attr.startswith("adamw."):
            adamw_kw[attr.removeprefix("adamw.")] = val
        else:
            cfg_kw[attr] = val
    try:
        spec = ModelSpec(**model_kw)
        return RunConfig(model=spec, adamw=AdamWConfig(**adamw_kw), **cfg_kw)
    except ValueError as e:
        raise UsageError(str(e)) from None


def format_config(config: RunConfig) -> list[tuple[str, str]]:
    """Dotted key/value pairs; parse_config_file + config_from_values round-trips them."""
    s = config.model
    obj = s.objective
    pairs = [("objective", obj.kind)]
    if obj.kind == "mtp":
        pairs.append(("objective.future_tokens", str(obj.future_tokens)))
    if obj.kind == "top":
        pairs.append(("objective.window", str(obj.window)))
    pairs += [
        ("model.hidden_size", str(s.hidden_size)),
        ("model.layers", str(s.layers)),
        ("model.n_heads", str(s.n_heads)),
        ("model.vocab_size", str(s.vocab_size)),
        ("model.max_seq_len", str(s.max_seq_len)),
        ("model.rope_theta", repr(s.rope_theta)),
        ("model.tied_embeddings", str(s.tied_embeddings).lower()),
        ("model.mtp_parameter_matched", str(s.mtp_parameter_matched).lower()),
        ("corpus", config.corpus_path),
        ("out", config.output_dir),
        ("seed", str(config.seed)),
        ("steps", str(config.steps)),
        ("warmup_steps", str(config.warmup_steps)),
        ("peak_lr", repr(config.peak_lr)),
        ("min_lr_fraction", repr(config.min_lr_fraction)),
        ("batch_size", str(config.batch_size)),
        ("grad_clip_max_norm", repr(config.grad_clip_max_norm)),
        ("adamw.beta1", repr(config.adamw.beta1)),
        ("adamw.beta2", repr(config.adamw.beta2)),
        ("adamw.eps", repr(config.adamw.eps)),
        ("adamw.weight_decay", repr(config.adamw.weight_decay)),
        ("eval_every", str(config.eval_every)),
        ("checkpoint_every", str(config.checkpoint_every)),
        ("deterministic", str(config.deterministic).lower()),
        ("dtype", config.dtype),
        ("holdout_fraction", repr(config.holdout_fraction)),
        ("top.loss_weight", repr(config.top_loss_weight)),
        ("top.fused", str(config.top_fused).lower()),
        ("top.block_size", str(config.top_block_size)),
        ("eval.max_batches", str(config.eval_max_batches)),
    ]
    return pairs


def find_config_file(name: str) -> Path:
    direct = Path(name)
    if direct.exists():
        return direct
    packaged = importlib.resources.files("toplab") / "configs" / f"{name}.cfg"
    if packaged.is_file():
        return Path(str(packaged))
    local = Path("configs") / f"{name}.cfg"
    if local.exists():
        return local
    raise UsageError(f"config {name!r} not found (tried literal path, packaged configs, ./configs)")


_FLAG_TO_KEY = {
    "seed": "seed",
    "steps": "steps",
    "warmup_steps": "warmup_steps",
    "batch_size": "batch_size",
    "peak_lr": "peak_lr",
    "eval_every": "eval_every",
    "checkpoint_every": "checkpoint_every",
    "objective": "objective",
    "objective_window": "objective.window",
    "objective_future_tokens": "objective.future_tokens",
    "corpus": "corpus",
    "out": "out",
    "dtype": "dtype",
}


def _resolve(args) -> RunConfig:
    values: dict[str, str] = {}
    if args.config:
        values.update(parse_config_file(find_config_file(args.config)))
    for flag, key in _FLAG_TO_KEY.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[key] = str(v)
    if args.deterministic is not None:
        values["deterministic"] = "true" if args.deterministic else "false"
    if "out" not in values or not values["out"]:
        root = os.environ.get(OUT_ROOT_ENV, "runs")
        tag = values.get("objective", "ntp")
        values["out"] = str(Path(root) / f"{tag}-seed{values.get('seed', '0')}")
    return config_from_values(values)


def _load_vocab(args) -> Vocab:
    if getattr(args, "toy_vocab", None):
        return Vocab.toy_from_file(args.toy_vocab)
    return Vocab.byte()


def cmd_train(args) -> int:
    config = _resolve(args)
    if not config.corpus_path:
        raise UsageError("train needs a corpus (--corpus or corpus= in the config)")
    if not Path(config.corpus_path).exists():
        print(f"error: corpus not found: {config.corpus_path}", file=sys.stderr)
        return EXIT_RUNTIME
    vocab = _load_vocab(args)
    if vocab.size != config.model.vocab_size:
        raise UsageError(
            f"vocab size {vocab.size} != model.vocab_size {config.model.vocab_size}")
    corpus = load_corpus(config.corpus_path, vocab)
    try:
        result = train(config, corpus, resume_from=args.resume)
    except NanLossHalt as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"run complete: {result.output_dir}")
    print(f"final loss {result.final_loss:.6f}; checkpoint {result.final_checkpoint}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .data import make_batches, split_heldout
    from .evaluate import append_eval_row, evaluate

    if not Path(args.ckpt).exists():
        print(f"error: checkpoint not found: {args.ckpt}", file=sys.stderr)
        return EXIT_RUNTIME
    model, meta = model_from_checkpoint(args.ckpt)
    vocab = _load_vocab(args)
    corpus = load_corpus(args.corpus, vocab)
    spec = model.spec
    window = spec.objective.window if spec.objective.kind == "top" else \
        (spec.objective.future_tokens if spec.objective.kind == "mtp" else 1)
    _, heldout = split_heldout(corpus, spec.max_seq_len, args.holdout_fraction)
    batches = list(make_batches(
        heldout, spec.max_seq_len, window, args.batch_size, seed=args.seed + 1_000_003,
        sentinel=spec.vocab_size,
        mtp_n=spec.objective.future_tokens if spec.objective.kind == "mtp" else None,
        epochs=1))[: args.max_batches]
    report = evaluate(model, batches, pair_seed=args.seed)
    print(report.pretty())
    if args.out:
        append_eval_row(args.out, spec, meta.get("step", -1), report)
    return EXIT_OK


def cmd_build_targets(args) -> int:
    if args.window < 1:
        raise UsageError("window size must be >= 1")
    if args.vocab_size < 1:
        raise UsageError("vocab size must be >= 1")
    if not Path(args.corpus).exists():
        print(f"error: corpus not found: {args.corpus}", file=sys.stderr)
        return EXIT_RUNTIME
    vocab = Vocab.byte() if args.vocab_size == 256 else Vocab(size=args.vocab_size, kind="byte")
    stream = load_corpus(args.corpus, Vocab.byte())
    if stream.size and int(stream.max()) >= args.vocab_size:
        print(f"error: corpus holds byte {int(stream.max())} outside vocab "
              f"size {args.vocab_size}", file=sys.stderr)
        return EXIT_RUNTIME
    padded = np.concatenate([stream, np.full(args.window, vocab.sentinel, dtype=np.int64)])
    sparse = build_sparse(padded, args.vocab_size, args.window)
    write_sparse_file(args.out, sparse)
    print(f"wrote {sparse.n_pairs} pairs for {sparse.seq_len} positions to {args.out}")
    return EXIT_OK


def cmd_generate(args) -> int:
    from .model import generate_greedy

    if not Path(args.ckpt).exists():
        print(f"error: checkpoint not found: {args.ckpt}", file=sys.stderr)
        return EXIT_RUNTIME
    model, _ = model_from_checkpoint(args.ckpt)
    vocab = _load_vocab(args)
    if not args.no_strip:
        spec, params = strip_to_inference(model.spec, model.params)
        model = Model(spec, params)
    prompt = encode_text(args.prompt, vocab)
    out = generate_greedy(model, prompt, args.max_new)
    print(decode_tokens(out, vocab))
    return EXIT_OK


def cmd_compare(args) -> int:
    rows: dict[str, dict[str, str]] = {}
    names = []
    for run_dir in args.run_dirs:
        d = Path(run_dir)
        manifest = d / "manifest.txt"
        eval_csv = d / "eval.csv"
        metrics_csv = d / "metrics.csv"
        for required in (manifest, eval_csv, metrics_csv):
            if not required.exists():
                print(f"error: missing file: {required}", file=sys.stderr)
                return EXIT_RUNTIME
        values = parse_config_file(manifest)
        name = f"{values.get('objective', '?')}:{d.name}"
        names.append(name)
        col = {"objective": values.get("objective", "?"),
               "steps": values.get("steps", "?")}
        with open(metrics_csv) as f:
            last = None
            header = None
            for row in csv.reader(f):
                if header is None:
                    header = row
                else:
                    last = row
        if last:
            m = dict(zip(header, last))
            col["final_train_loss_total"] = m.get("loss_total", "")
            col["final_train_loss_ntp"] = m.get("loss_ntp", "")
        with open(eval_csv) as f:
            last = None
            header = None
            for row in csv.reader(f):
                if header is None:
                    header = row
                else:
                    last = row
        if last:
            e = dict(zip(header, last))
            col["heldout_ntp_loss"] = e.get("ntp_head_loss", "")
            col["heldout_perplexity"] = e.get("perplexity", "")
            col["top_top1_rate"] = e.get("top_top1_rate", "")
            col["top_agreement"] = e.get("top_agreement", "")
        rows[name] = col
    baseline = next((n for n in names if rows[n]["objective"] == "ntp"), None)
    if baseline is not None:
        base_loss = float(rows[baseline]["heldout_ntp_loss"])
        for n in names:
            got = rows[n].get("heldout_ntp_loss")
            if got:
                rows[n]["ntp_loss_delta_vs_ntp"] = repr(float(got) - base_loss)
    metric_names = ["objective", "steps", "final_train_loss_total", "final_train_loss_ntp",
                    "heldout_ntp_loss", "heldout_perplexity", "ntp_loss_delta_vs_ntp",
                    "top_top1_rate", "top_agreement"]
    out_rows = [["metric"] + names]
    for metric in metric_names:
        if any(metric in rows[n] for n in names):
            out_rows.append([metric] + [rows[n].get(metric, "") for n in names])
    writer = csv.writer(sys.stdout)
    writer.writerows(out_rows)
    if args.out:
        with open(args.out, "w", newline="") as f:
            csv.writer(f).writerows(out_rows)
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> _Parser:
    p = _Parser(prog="toplab", description=__doc__)
    p.add_argument("--version", action="version", version=f"toplab {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    tr = sub.add_parser("train", help="train a model per a run config")
    tr.add_argument("--config", help="config file path or packaged config name")
    tr.add_argument("--seed", type=int)
    tr.add_argument("--steps", type=int)
    tr.add_argument("--warmup-steps", type=int, dest="warmup_steps")
    tr.add_argument("--batch-size", type=int, dest="batch_size")
    tr.add_argument("--peak-lr", type=float, dest="peak_lr")
    tr.add_argument("--eval-every", type=int, dest="eval_every")
    tr.add_argument("--checkpoint-every", type=int, dest="checkpoint_every")
    tr.add_argument("--objective", choices=["ntp", "mtp", "top"])
    tr.add_argument("--objective.window", type=int, dest="objective_window")
    tr.add_argument("--objective.future-tokens", type=int, dest="objective_future_tokens")
    tr.add_argument("--corpus")
    tr.add_argument("--out")
    tr.add_argument("--dtype", choices=["f32", "f64"])
    tr.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None)
    tr.add_argument("--resume", help="checkpoint to resume from")
    tr.add_argument("--toy-vocab", dest="toy_vocab", help="toy vocab file (one symbol per line)")
    tr.set_defaults(fn=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a corpus held-out split")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--corpus", required=True)
    ev.add_argument("--out", help="eval CSV to append to")
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--batch-size", type=int, dest="batch_size", default=8)
    ev.add_argument("--holdout-fraction", type=float, dest="holdout_fraction", default=0.05)
    ev.add_argument("--max-batches", type=int, dest="max_batches", default=16)
    ev.add_argument("--toy-vocab", dest="toy_vocab")
    ev.set_defaults(fn=cmd_eval)

    bt = sub.add_parser("build-targets", help="pre-compute proximity targets for a corpus")
    bt.add_argument("--corpus", required=True)
    bt.add_argument("--vocab-size", "-V", type=int, dest="vocab_size", default=256)
    bt.add_argument("--window", "-W", type=int, required=True)
    bt.add_argument("--out", required=True)
    bt.set_defaults(fn=cmd_build_targets)

    ge = sub.add_parser("generate", help="greedy generation from a checkpoint")
    ge.add_argument("--ckpt", required=True)
    ge.add_argument("--prompt", required=True)
    ge.add_argument("--max-new", type=int, dest="max_new", default=64)
    ge.add_argument("--no-strip", action="store_true",
                    help="keep auxiliary heads instead of stripping to the ntp model")
    ge.add_argument("--toy-vocab", dest="toy_vocab")
    ge.set_defaults(fn=cmd_generate)

    cp = sub.add_parser("compare", help="side-by-side summary of completed runs")
    cp.add_argument("run_dirs", nargs="+")
    cp.add_argument("--out")
    cp.set_defaults(fn=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
