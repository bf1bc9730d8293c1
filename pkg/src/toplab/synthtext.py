"""Deterministic synthetic English-like text for reproducible desk runs.

Template-grammar sentences over a fixed word bank: enough byte-level
structure (recurring words, predictable suffixes, punctuation rhythm)
for a small model to learn from, while any seed always produces the
same bytes on any machine.
"""

from __future__ import annotations

import random

NOUNS = [
    "engine", "window", "signal", "token", "ledger", "river", "garden", "matrix",
    "circuit", "lantern", "archive", "needle", "harbor", "message", "pattern",
    "kernel", "stream", "cache", "forest", "mirror", "anchor", "beacon", "cluster",
    "compass", "thread", "vector", "bridge", "island", "furnace", "orchard",
]
VERBS = [
    "holds", "moves", "repeats", "follows", "signals", "orders", "carries",
    "predicts", "reaches", "returns", "collects", "records", "remembers",
    "balances", "measures", "restores", "shapes", "traces", "guards", "feeds",
]
ADJECTIVES = [
    "quiet", "bright", "narrow", "steady", "hidden", "distant", "formal",
    "gentle", "rapid", "sparse", "dense", "early", "late", "hollow", "plain",
]
ADVERBS = ["slowly", "often", "rarely", "again", "almost", "together", "apart", "soon"]
CONNECTORS = ["and", "but", "while", "because", "until", "although", "so"]
PREPOSITIONS = ["near", "under", "beyond", "inside", "against", "toward"]


def _sentence(rng: random.Random) -> str:
    def np_():
        det = rng.choice(["the", "a", "each", "this", "that"])
        if rng.random() < 0.45:
            return f"{det} {rng.choice(ADJECTIVES)} {rng.choice(NOUNS)}"
        return f"{det} {rng.choice(NOUNS)}"

    clause = f"{np_()} {rng.choice(VERBS)} {np_()}"
    if rng.random() < 0.3:
        clause += f" {rng.choice(PREPOSITIONS)} {np_()}"
    if rng.random() < 0.25:
        clause += f" {rng.choice(ADVERBS)}"
    if rng.random() < 0.35:
        clause += f" {rng.choice(CONNECTORS)} {np_()} {rng.choice(VERBS)} {np_()}"
    return clause[0].upper() + clause[1:] + rng.choice([".", ".", ".", "?", ";"])


def generate_text(n_bytes: int, seed: int = 0) -> bytes:
    rng = random.Random(seed)
    chunks: list[str] = []
    size = 0
    sentences_in_par = 0
    while size < n_bytes:
        s = _sentence(rng)
        sentences_in_par += 1
        if sentences_in_par >= rng.randint(3, 7):
            s += "\n\n"
            sentences_in_par = 0
        else:
            s += " "
        chunks.append(s)
        size += len(s)
    return "".join(chunks).encode("ascii")[:n_bytes]
