"""Independent re-implementations used as test oracles.

Nothing here imports the code under test beyond plain data types, so a bug
in the library cannot also hide in its oracle.
"""

from __future__ import annotations

import math
from fractions import Fraction
from itertools import product

import mpmath
import numpy as np

TOPS = ("chain", "tree", "graph")


# trace structure


def classify_oracle(nodes: list[tuple[str, tuple[str, ...]]], links: list[tuple[str, str]]) -> str:
    """Degree counting plus DFS three-colour cycle detection."""
    ids = [i for i, _ in nodes]
    out_deg = {i: 0 for i in ids}
    adj: dict[str, list[str]] = {i: [] for i in ids}
    for i, parents in nodes:
        for p in parents:
            out_deg[p] += 1
            adj[p].append(i)

    colour = {i: 0 for i in ids}

    def dfs(u: str) -> bool:
        colour[u] = 1
        for v in adj[u]:
            if colour[v] == 1 or (colour[v] == 0 and dfs(v)):
                return True
        colour[u] = 2
        return False

    cyclic = any(colour[i] == 0 and dfs(i) for i in ids)
    if links or cyclic or any(len(ps) >= 2 for _, ps in nodes):
        return "graph"
    n_roots = sum(1 for _, ps in nodes if not ps)
    if n_roots != 1 or any(d >= 2 for d in out_deg.values()):
        return "tree"
    return "chain"


# quantiles and labels


def quantile_exact(values, p) -> Fraction:
    """Rank-interpolated quantile in exact rationals."""
    v = sorted(Fraction(x) for x in values)
    h = Fraction(p) * (len(v) - 1)
    lo = math.floor(h)
    if lo == len(v) - 1:
        return v[lo]
    return v[lo] + (h - lo) * (v[lo + 1] - v[lo])


def quantile_numpy(values, p) -> float:
    return float(np.quantile(np.asarray(values, dtype=float), p, method="linear"))


def topology_label_oracle(outcomes: list[int]) -> tuple[int, int, float]:
    c = sum(1 for h in outcomes if h == 1)
    return c, len(outcomes), c / len(outcomes)


def segment_oracle(scores: dict[str, dict[str, float]], q_hi: float, q_lo: float) -> dict[str, str]:
    """``scores[qid][topology]``; thresholds via numpy's linear quantile."""
    qids = list(scores)
    hi = {t: quantile_numpy([scores[q][t] for q in qids], q_hi) for t in TOPS}
    lo = {t: quantile_numpy([scores[q][t] for q in qids], q_lo) for t in TOPS}
    out = {}
    for q in qids:
        if all(scores[q][t] > hi[t] for t in TOPS):
            out[q] = "easy"
        elif all(scores[q][t] < lo[t] for t in TOPS):
            out[q] = "hard"
        else:
            out[q] = "medium"
    return out


def win_rate_oracle(scores: list[dict[str, float]]) -> dict[str, Fraction]:
    credit = dict.fromkeys(TOPS, Fraction(0))
    for row in scores:
        best = max(row.values())
        tied = [t for t in TOPS if row[t] == best]
        for t in tied:
            credit[t] += Fraction(1, len(tied))
    return {t: credit[t] / len(scores) for t in TOPS}


# pairs


def pair_cap_oracle(n_w: int, n_l: int, k: int | None) -> int:
    full = n_w * n_l
    return full if k is None else min(k, full)


def all_combinations(winners, losers):
    return set(product(winners, losers))


# SimPO in arbitrary precision


def _mp_log_softmax_row(row):
    m = max(row)
    s = mpmath.fsum(mpmath.exp(x - m) for x in row)
    return [x - m - mpmath.log(s) for x in row]


def mp_avg_logprob(theta, y) -> mpmath.mpf:
    """Average bigram log-probability with a BOS row at index ``V``."""
    v = len(theta[0])
    prev = v
    total = mpmath.mpf(0)
    for tok in y:
        total += _mp_log_softmax_row(theta[prev])[tok]
        prev = tok
    return total / len(y)


def mp_simpo_loss(theta: np.ndarray, batch, beta: float, gamma: float, dps: int = 50) -> mpmath.mpf:
    with mpmath.workdps(dps):
        th = [[mpmath.mpf(float(x)) for x in row] for row in theta]
        terms = []
        for yw, yl in batch:
            z = mpmath.mpf(beta) * (mp_avg_logprob(th, yw) - mp_avg_logprob(th, yl)) - mpmath.mpf(gamma)
            terms.append(mpmath.log1p(mpmath.exp(-z)))
        return mpmath.fsum(terms) / len(terms)


def mp_ntp_loss(theta: np.ndarray, y, dps: int = 50) -> mpmath.mpf:
    with mpmath.workdps(dps):
        th = [[mpmath.mpf(float(x)) for x in row] for row in theta]
        return -mp_avg_logprob(th, y) * len(y)
