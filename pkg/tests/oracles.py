"""Independent reference implementations used only by the tests.

Nothing here imports from ``interlace.planner`` or ``interlace.similarity``.
"""

import math
from fractions import Fraction

import numpy as np

from interlace.model import forward_with_taps


def algorithm1(s_layer, s_triplet, rho):
    """Straight-line transcription of the Interlace selection pseudocode.

    ``s_layer[l]`` and ``s_triplet[i]`` are dicts keyed by 1-based index.
    Returns (drop, tune, freeze) as sets.
    """
    L = len(s_layer)
    K = int(Fraction(str(rho)) * L)  # floor for positive values
    # sort triplets descending; stable sort over ascending i keeps lower i first on ties
    pi = sorted(range(1, L - 1), key=lambda i: s_triplet[i], reverse=True)
    drop, tune, freeze = set(), set(), set()
    assigned = set()
    for k in range(1, L - 1):
        i = pi[k - 1]
        T = {i, i + 1, i + 2}
        if not (T & assigned) and len(drop) < K:
            freeze = freeze | {i + 2}
            if s_layer[i] > s_layer[i + 1]:
                drop = drop | {i}
                tune = tune | {i + 1}
            else:
                drop = drop | {i + 1}
                tune = tune | {i}
            assigned = assigned | T
    freeze = freeze | (set(range(1, L + 1)) - assigned)
    return drop, tune, freeze, K


def best_window_exhaustive(s_layer, K):
    """Brute-force scan of every K-window admitting K successors."""
    L = len(s_layer)
    best, best_sum = None, None
    for start in range(1, L - 2 * K + 2):
        total = sum(s_layer[start - 1:start - 1 + K])
        if best_sum is None or total > best_sum:
            best, best_sum = start, total
    return best


def materialized_oracle(model, calib):
    """Keep every trace alive, then average with exact summation."""
    traces = [forward_with_taps(model, p, t)[1].states for p, t in calib]
    L = len(traces[0]) - 1
    per_layer = [[] for _ in range(L)]
    per_trip = [[] for _ in range(L - 2)]
    for states in traces:
        xs = [s.detach().numpy() for s in states]
        for j in range(xs[0].shape[0]):
            def cos(a, b):
                return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))
            for l in range(1, L + 1):
                per_layer[l - 1].append(cos(xs[l - 1][j], xs[l][j]))
            for i in range(1, L - 1):
                per_trip[i - 1].append(cos(xs[i - 1][j], xs[i + 2][j]))
    n = len(per_layer[0])
    return [math.fsum(v) / n for v in per_layer], [math.fsum(v) / n for v in per_trip], n
