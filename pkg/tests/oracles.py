"""Brute-force reference implementations used to cross-check the metric formulas.

Every oracle works in exact rational arithmetic and only rounds at the end, so
it shares no code path with ``firmguard.metrics``.
"""

from __future__ import annotations

import math
import random
import statistics
from fractions import Fraction


def vrr(fixed: int, total: int) -> float:
    if total == 0:
        return 100.0
    return float(Fraction(100 * fixed, total))


def sci(cf: float, cs: float, cd: float, w1: float, w2: float, w3: float) -> float:
    num = sum(Fraction(w) * Fraction(c) for w, c in ((w1, cf), (w2, cs), (w3, cd)))
    return float(num / (Fraction(w1) + Fraction(w2) + Fraction(w3)))


def tmcs(mitigated: int, total: int) -> float:
    return float(Fraction(100 * mitigated, total))


def wcet(times: list[float]) -> float:
    best = times[0]
    for t in times:
        if t > best:
            best = t
    return best


def jitter(times: list[float]) -> float:
    return statistics.pstdev([Fraction(t) for t in times])


def ada(tp: int, tn: int, fp: int, fn: int) -> float:
    return float(Fraction(tp + tn, tp + tn + fp + fn))


def iei(d_sec: float, d_perf: float, resources: float) -> float:
    return float((Fraction(d_sec) + Fraction(d_perf)) / Fraction(resources))


def close(a: float, b: float, rel: float = 1e-9) -> bool:
    return math.isclose(a, b, rel_tol=rel, abs_tol=1e-12)


def operand_sets(n: int, seed: int = 0):
    """Yield ``n`` random valid operand sets, one dict per draw."""
    rng = random.Random(seed)
    for _ in range(n):
        total = rng.randint(0, 500)
        threats = rng.randint(1, 50)
        times = [rng.uniform(0.0, 50.0) for _ in range(rng.randint(1, 40))]
        counts = [rng.randint(0, 100) for _ in range(4)]
        if sum(counts) == 0:
            counts[0] = 1
        yield {
            "vrr": (rng.randint(0, total), total),
            "sci": (rng.random(), rng.random(), rng.random(), rng.uniform(0.01, 5), rng.uniform(0, 5), rng.uniform(0, 5)),
            "tmcs": (rng.randint(0, threats), threats),
            "times": times,
            "ada": tuple(counts),
            "iei": (rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(1e-6, 10)),
        }
