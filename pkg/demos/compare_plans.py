"""
What each selection strategy does with the same scores
=======================================================

A hand-written similarity profile with a redundant middle section, fed to
every planner. Roles are printed per layer: D = drop, T = tune, . = freeze.
"""

import numpy as np

from interlace.planner import STRATEGIES, make_plan
from interlace.similarity import SimilarityReport

L = 16
layer = 0.7 + 0.28 * np.sin(np.linspace(0.1, np.pi - 0.1, L))
# triplet score: cosine across three layers shrinks roughly with the product
triplet = [float(layer[i] * layer[i + 1] * layer[i + 2]) for i in range(L - 2)]
report = SimilarityReport(L, layer.tolist(), triplet, tokens_seen=1, calib_fingerprint="hand-made")

print("layer        " + "".join(f"{l:>3}" for l in range(1, L + 1)))
for strategy in STRATEGIES:
    plan = make_plan(strategy, 0.25, report=report, seed=0)
    roles = ["D" if l in plan.drop else "T" if l in plan.tune else "." for l in range(1, L + 1)]
    print(f"{strategy:<13}" + "".join(f"{r:>3}" for r in roles))
