"""Empirical CVaR and the projection onto its dual envelope.

On an S-sample empirical measure the CVaR risk envelope is
{zeta >= 0: mean(zeta) = 1, zeta_i <= 1/alpha}; the coherent-risk dual
identity CVaR(c) = max_zeta mean(zeta * c) then reduces to averaging the
worst alpha-fraction of the samples, with fractional weight on the
boundary order statistic when alpha*S is not an integer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RiskSpec:
    """Risk functional selector: CVaR at tail level alpha, or plain expectation."""

    kind: str = "cvar"          # "cvar" | "expectation"
    alpha: float = 0.1
    gamma: float = 1e-3         # saddle-point regularization

    def __post_init__(self):
        if self.kind not in ("cvar", "expectation"):
            raise ValueError(f"unknown risk kind {self.kind!r}")
        if not (0.0 < self.alpha <= 1.0):
            raise ValueError("alpha must lie in (0, 1]")
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")

    @property
    def effective_alpha(self) -> float:
        return 1.0 if self.kind == "expectation" else self.alpha


@dataclass
class RiskWeights:
    """Feasible dual density over the sample batch: mean one, capped at 1/alpha."""

    zeta: np.ndarray
    alpha: float


def cvar_estimate(costs: np.ndarray, alpha: float) -> float:
    """Mean of the worst alpha-fraction of the cost samples.

    Equals the maximum of mean(zeta * costs) over the risk envelope; the
    top floor(alpha S) samples receive the cap 1/alpha and the remaining
    dual mass sits on the next order statistic.
    """
    costs = np.asarray(costs, dtype=float).ravel()
    S = costs.size
    if S == 0:
        raise ValueError("empty cost sample")
    if not (0.0 < alpha <= 1.0):
        raise ValueError("alpha must lie in (0, 1]")
    cap = 1.0 / alpha
    k = int(np.floor(alpha * S))
    order = np.sort(costs)[::-1]
    total = cap * float(np.sum(order[:k]))
    if k < S:
        total += (S - k * cap) * order[k]
    return total / S


def project_risk_weights(y: np.ndarray, alpha: float, tol: float = 1e-13) -> RiskWeights:
    """Euclidean projection onto {zeta: mean(zeta) = 1, 0 <= zeta <= 1/alpha}.

    The projection is clip(y + tau, 0, 1/alpha) with the scalar shift tau
    fixed by the mean constraint; mean(clip(y + tau)) is nondecreasing in
    tau, so tau is found by bisection.
    """
    y = np.asarray(y, dtype=float).ravel()
    if not (0.0 < alpha <= 1.0):
        raise ValueError("alpha must lie in (0, 1]")
    cap = 1.0 / alpha

    def mean_at(tau: float) -> float:
        return float(np.mean(np.clip(y + tau, 0.0, cap)))

    lo = float(-np.max(y))            # everything clips to zero: mean 0
    hi = float(cap - np.min(y))       # everything clips to cap: mean cap >= 1
    # run to floating-point exhaustion: a relative-width stop would leave the
    # boundary weight imprecise when y has a huge scale
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid == lo or mid == hi:
            break
        if mean_at(mid) < 1.0:
            lo = mid
        else:
            hi = mid
        if abs(mean_at(0.5 * (lo + hi)) - 1.0) <= tol and hi - lo <= tol * max(1.0, abs(lo) + abs(hi)) * 1e-3:
            break
    tau = 0.5 * (lo + hi)
    zeta = np.clip(y + tau, 0.0, cap)
    return RiskWeights(zeta=zeta, alpha=alpha)


def risk_envelope_violation(weights: RiskWeights) -> float:
    """Max constraint violation of a dual density (feasibility diagnostic)."""
    z = weights.zeta
    return max(
        abs(float(np.mean(z)) - 1.0),
        float(max(0.0, -z.min())),
        float(max(0.0, z.max() - 1.0 / weights.alpha)),
    )
