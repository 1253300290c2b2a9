"""Rescoring FULL's top-k classes when no ground-truth prompt is available.

For every candidate class the detector is prompted with that class name and
the FG model classifies the resulting crop; only the FG logit at the prompted
class is kept. Here the FG logits are simulated: a crop made with the right
prompt gets a boost at the true class, wrong prompts get noise.

Run:  python demos/topk_rescoring.py
"""

import numpy as np

from l2r2 import accuracy
from l2r2.topk import gather_candidates, sweep_k

rng = np.random.default_rng(3)
C = 20


def make_split(n):
    y = rng.integers(0, C, n)
    full = rng.normal(0, 1, (n, C)) + 1.5 * np.eye(C)[y]
    sets = []
    for i in range(n):
        fg = {p: rng.normal(0, 1, C) + (2.5 * np.eye(C)[y[i]] if p == y[i] else 0) for p in range(C)}
        bg = {p: rng.normal(0, 1, C) for p in range(C)}
        # roughly one prompt in ten fails to produce a detection
        fg = {p: v for p, v in fg.items() if rng.random() > 0.1}
        sets.append(gather_candidates(f"s{i}", full[i], 10, fg, bg, full[i], full[i]))
    return full, y, sets


_, y_val, val = make_split(400)
full_test, y_test, test = make_split(1000)
print(f"FULL top-1 test accuracy {accuracy(np.argmax(full_test, 1), y_test):.3f}")
for mode in ("two_way", "three_way"):
    k, rows = sweep_k(val, y_val, test, y_test, range(1, 11), mode)
    print(f"{mode}: k chosen on val = {k}, test accuracy {dict((r[0], r[2]) for r in rows)[k]:.3f}")
