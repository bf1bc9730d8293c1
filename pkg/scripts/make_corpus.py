#!/usr/bin/env python3
"""Write a deterministic synthetic text corpus for desk experiments."""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from toplab.synthtext import generate_text


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("out")
    ap.add_argument("--bytes", type=int, default=5_500_000, dest="n_bytes")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    data = generate_text(args.n_bytes, seed=args.seed)
    Path(args.out).write_bytes(data)
    print(f"wrote {len(data)} bytes to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
