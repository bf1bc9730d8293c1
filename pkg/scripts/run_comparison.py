#!/usr/bin/env python3
"""Three-way desk comparison: ntp vs mtp vs top on identical data and seed.

All three models match on non-embedding parameter count; the run ends
with a side-by-side table of held-out NTP-head losses and token-order
ranking diagnostics, the desk-scale analogue of a benchmark table.
"""

import argparse
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from toplab.cli import main as cli_main
from toplab.data import load_corpus, unigram_entropy, Vocab
from toplab.model import ModelSpec, Objective, count_non_embedding_params
from toplab.synthtext import generate_text
from toplab.trainer import RunConfig, train


def build_specs(mtp_n: int, top_w: int):
    return {
        "ntp": ModelSpec(),
        "mtp": ModelSpec(objective=Objective.mtp(mtp_n)),
        "top": ModelSpec(objective=Objective.top(top_w)),
    }


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out-root", default="runs/compare")
    ap.add_argument("--steps", type=int, default=1500)
    ap.add_argument("--warmup", type=int, default=100)
    ap.add_argument("--batch-size", type=int, default=8)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--eval-every", type=int, default=250)
    ap.add_argument("--eval-batches", type=int, default=16)
    ap.add_argument("--mtp-future-tokens", type=int, default=4)
    ap.add_argument("--top-window", type=int, default=32)
    ap.add_argument("--corpus", help="optional corpus file; default is 5.5 MB of synthetic text")
    ap.add_argument("--corpus-bytes", type=int, default=5_500_000)
    args = ap.parse_args()

    if args.corpus:
        corpus = load_corpus(args.corpus, Vocab.byte())
    else:
        corpus = np.frombuffer(generate_text(args.corpus_bytes, seed=args.seed),
                               dtype=np.uint8).astype(np.int64)
    print(f"corpus: {len(corpus)} bytes, unigram entropy "
          f"{unigram_entropy(corpus, 256):.4f} nats")

    specs = build_specs(args.mtp_future_tokens, args.top_window)
    base = count_non_embedding_params(specs["ntp"])
    for name, spec in specs.items():
        delta = count_non_embedding_params(spec) / base - 1.0
        print(f"{name}: non-embedding params {count_non_embedding_params(spec)} "
              f"({delta:+.3%} vs ntp)")

    run_dirs = []
    for name, spec in specs.items():
        out = str(Path(args.out_root) / name)
        config = RunConfig(model=spec, steps=args.steps, warmup_steps=args.warmup,
                           batch_size=args.batch_size, seed=args.seed,
                           eval_every=args.eval_every, checkpoint_every=args.steps,
                           output_dir=out, eval_max_batches=args.eval_batches)
        print(f"training {name} ...")
        train(config, corpus)
        run_dirs.append(out)

    return cli_main(["compare", *run_dirs])


if __name__ == "__main__":
    sys.exit(main())
