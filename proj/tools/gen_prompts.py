#!/usr/bin/env python3
"""Regenerates the committed prompt corpus (data/prompts_train.txt,
data/prompts_eval.txt). Deterministic: a fixed seed and a fixed grammar, so
the files never change unless this script does. The eval lines are disjoint
from the training lines."""

import random
from pathlib import Path

COLORS = ["red", "blue", "green", "yellow", "violet", "orange", "teal",
          "crimson", "pale gray", "dark amber", "ivory", "cobalt"]
SHAPES = ["square", "circle", "triangle", "hexagon", "crescent", "diamond",
          "ring", "cross", "bar", "arch", "spiral", "wedge", "star", "dot",
          "lattice", "chevron", "ribbon", "disc", "column", "knot",
          "grid", "arrow", "loop", "band"]
RELATIONS = ["above", "below", "beside", "inside", "around", "behind",
             "overlapping", "leaning against"]
GROUNDS = ["a white field", "a black backdrop", "rough canvas", "wet glass",
           "brushed steel", "soft haze", "a tiled floor", "folded paper",
           "a sand dune", "still water", "woven cloth", "cracked clay"]
COUNTS = ["one", "two", "three", "a few", "many"]

TRAIN_N = 512
EVAL_N = 64
SEED = 20240817


def make_line(rng: random.Random) -> str:
    kind = rng.randrange(3)
    if kind == 0:
        return (f"a {rng.choice(COLORS)} {rng.choice(SHAPES)} on "
                f"{rng.choice(GROUNDS)}")
    if kind == 1:
        return (f"{rng.choice(COUNTS)} {rng.choice(COLORS)} "
                f"{rng.choice(SHAPES)}s {rng.choice(RELATIONS)} "
                f"a {rng.choice(COLORS)} {rng.choice(SHAPES)}")
    return (f"a {rng.choice(COLORS)} {rng.choice(SHAPES)} "
            f"{rng.choice(RELATIONS)} a {rng.choice(SHAPES)} on "
            f"{rng.choice(GROUNDS)}")


def main() -> None:
    rng = random.Random(SEED)
    seen: set[str] = set()
    lines: list[str] = []
    while len(lines) < TRAIN_N + EVAL_N:
        line = make_line(rng)
        if line not in seen:
            seen.add(line)
            lines.append(line)

    out = Path(__file__).resolve().parent.parent / "data"
    out.mkdir(exist_ok=True)
    (out / "prompts_train.txt").write_text("\n".join(lines[:TRAIN_N]) + "\n")
    (out / "prompts_eval.txt").write_text("\n".join(lines[TRAIN_N:]) + "\n")
    print(f"wrote {TRAIN_N} train + {EVAL_N} eval prompts")


if __name__ == "__main__":
    main()
