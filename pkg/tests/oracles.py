"""Independent reference implementations used as test oracles.

Written with naive loops and exact rationals, sharing no code with the package.
"""

from fractions import Fraction
from itertools import permutations
from math import factorial


def _div(num, den):
    return Fraction(num, den) if den else Fraction(0)


def metrics_oracle(pred, gold):
    """pred, gold: lists of tuples of 0/1 ints. Returns a dict of Fractions and per-label counts."""
    n, k = len(gold), len(gold[0])
    exact = sum(1 for p, g in zip(pred, gold) if tuple(p) == tuple(g))
    counts, f1s = [], []
    for j in range(k):
        tp = fp = fn = tn = 0
        for p, g in zip(pred, gold):
            if p[j] and g[j]:
                tp += 1
            elif p[j]:
                fp += 1
            elif g[j]:
                fn += 1
            else:
                tn += 1
        counts.append((tp, fp, fn, tn))
        prec, rec = _div(tp, tp + fp), _div(tp, tp + fn)
        f1s.append(_div(2 * prec * rec, 1) / (prec + rec) if prec + rec else Fraction(0))
    TP = sum(c[0] for c in counts)
    FP = sum(c[1] for c in counts)
    FN = sum(c[2] for c in counts)
    micro_p, micro_r = _div(TP, TP + FP), _div(TP, TP + FN)
    micro = 2 * micro_p * micro_r / (micro_p + micro_r) if micro_p + micro_r else Fraction(0)
    samples = []
    for p, g in zip(pred, gold):
        inter = sum(1 for a, b in zip(p, g) if a and b)
        size = sum(p) + sum(g)
        samples.append(_div(2 * inter, size))
    return {
        "subset_accuracy": Fraction(exact, n),
        "micro_f1": micro,
        "macro_f1": sum(f1s) / k,
        "samples_f1": sum(samples) / n,
        "f1": f1s,
        "counts": counts,
    }


def kappa_oracle(a, b):
    n = len(a)
    po = Fraction(sum(1 for x, y in zip(a, b) if x == y), n)
    pa1, pb1 = Fraction(sum(a), n), Fraction(sum(b), n)
    pe = pa1 * pb1 + (1 - pa1) * (1 - pb1)
    if pe == 1:
        return Fraction(1)
    return (po - pe) / (1 - pe)


def shapley_by_permutations(v, n):
    """Average marginal contribution over all n! orderings; v maps frozenset -> number."""
    phi = [0.0] * n
    for order in permutations(range(n)):
        seen = frozenset()
        for i in order:
            phi[i] += v(seen | {i}) - v(seen)
            seen = seen | {i}
    return [x / factorial(n) for x in phi]
