"""Mean-optimal feedback gain via Kleinman-Newton on the generalized ARE.

Solves  F'P + PF + C'PC - P B r^{-1} B'P + Q = 0  for the reduced model
(F = generator + A_N) by iterating Lyapunov-type linear solves
(F+BK)'P + P(F+BK) + C'PC + Q + K' r K = 0 with gain updates
K = -r^{-1} B'P.  The Lyapunov operator including the C'PC term is solved
densely through vectorization, which is cheap at the reduced dimensions
used here (n_aug <= ~30).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_continuous_are

from .reduction import ReducedModel
from .sde import FeedbackPolicy, TimeGrid


class RiccatiError(Exception):
    """Stabilizing gain not found or iteration failure."""


@dataclass
class RiccatiSolution:
    P: np.ndarray
    K_lq: np.ndarray      # (n,) row gain, K = -r^{-1} B'P
    residual: float       # Frobenius norm of the generalized ARE residual
    iterations: int
    iterates: list = field(default_factory=list)  # P_k history when requested


def _ms_margin(F_cl: np.ndarray, C: np.ndarray) -> float:
    """Largest real part of the mean-square Lyapunov operator spectrum.

    The closed loop is mean-square stable iff the operator
    P -> F_cl'P + P F_cl + C'PC has spectrum in the open left half plane.
    """
    n = F_cl.shape[0]
    eye = np.eye(n)
    op = np.kron(eye, F_cl.T) + np.kron(F_cl.T, eye) + np.kron(C.T, C.T)
    return float(np.max(np.linalg.eigvals(op).real))


def _lyap_with_noise(F_cl: np.ndarray, C: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve F_cl'P + P F_cl + C'PC + rhs = 0 by dense vectorization."""
    n = F_cl.shape[0]
    eye = np.eye(n)
    op = np.kron(eye, F_cl.T) + np.kron(F_cl.T, eye) + np.kron(C.T, C.T)
    try:
        vec = np.linalg.solve(op, -rhs.reshape(n * n, order="F"))
    except np.linalg.LinAlgError as exc:
        raise RiccatiError(f"singular Lyapunov solve: {exc}") from exc
    P = vec.reshape(n, n, order="F")
    return 0.5 * (P + P.T)


def _initial_gain(F: np.ndarray, B: np.ndarray, C: np.ndarray, Q: np.ndarray, r: float) -> np.ndarray:
    """Mean-square stabilizing bootstrap gain.

    Tries K = 0 first, then gains from deterministic AREs on the shifted
    plant F + shift*I, increasing the shift until the closed loop passes
    the mean-square stability test.
    """
    n = F.shape[0]
    if _ms_margin(F, C) < 0:
        return np.zeros(n)
    B2 = B.reshape(n, 1)
    R = np.array([[r]])
    for shift in (0.0, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0):
        try:
            P0 = solve_continuous_are(F + shift * np.eye(n), B2, Q + np.eye(n), R)
        except Exception:
            continue
        K0 = -(B2.T @ P0).ravel() / r
        if _ms_margin(F + np.outer(B, K0), C) < 0:
            return K0
    raise RiccatiError("no mean-square stabilizing initial gain found")


def solve_gare(F: np.ndarray, B: np.ndarray, C: np.ndarray, Q: np.ndarray, r: float,
               gain_tol: float = 1e-10, max_iter: int = 200,
               keep_iterates: bool = False) -> RiccatiSolution:
    """Kleinman-Newton iteration for the generalized ARE with multiplicative noise."""
    F = np.atleast_2d(np.asarray(F, dtype=float))
    n = F.shape[0]
    B = np.asarray(B, dtype=float).reshape(n)
    C = np.atleast_2d(np.asarray(C, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    if r <= 0:
        raise RiccatiError("control weight must be positive")

    K = _initial_gain(F, B, C, Q, r)
    P = np.zeros((n, n))
    iterates = []
    iterations = 0
    for iterations in range(1, max_iter + 1):
        F_cl = F + np.outer(B, K)
        rhs = Q + np.outer(K, K) * r
        P = _lyap_with_noise(F_cl, C, rhs)
        if keep_iterates:
            iterates.append(P.copy())
        K_new = -(P @ B) / r
        if np.max(np.abs(K_new - K)) < gain_tol:
            K = K_new
            break
        K = K_new
    else:
        raise RiccatiError(f"Kleinman-Newton did not converge in {max_iter} iterations")

    res = F.T @ P + P @ F + C.T @ P @ C - np.outer(P @ B, P @ B) / r + Q
    sol = RiccatiSolution(P=P, K_lq=K, residual=float(np.linalg.norm(res)), iterations=iterations)
    if keep_iterates:
        sol.iterates = iterates
    return sol


def solve_stochastic_are(model: ReducedModel, gain_tol: float = 1e-10, max_iter: int = 200) -> RiccatiSolution:
    """Risk-neutral gain for a reduced model: K = -r^{-1} B_N' P."""
    return solve_gare(model.drift_matrix, model.B_N, model.C_N, model.Q_N, model.r_ctrl,
                      gain_tol=gain_tol, max_iter=max_iter)


def baseline_policy(sol: RiccatiSolution, grid: TimeGrid,
                    box_control: tuple[float, float] = (-50.0, 50.0),
                    box_gain=None) -> FeedbackPolicy:
    """Static LQ feedback as a policy: v = 0, K clipped into the admissible boxes."""
    n = sol.K_lq.size
    policy = FeedbackPolicy(
        T=grid.T,
        v=np.zeros(grid.steps),
        K=sol.K_lq.copy(),
        box_control=box_control,
        box_gain=box_gain if box_gain is not None else np.tile(np.array([-50.0, 50.0]), (n, 1)),
    )
    clipped = policy.clipped()
    if not np.array_equal(clipped.K, policy.K):
        warnings.warn("LQ gain was clipped by the admissible box; the baseline is no longer the unconstrained optimum")
    return clipped


def save_solution(sol: RiccatiSolution, path):
    with open(path, "w") as fh:
        json.dump(
            {
                "kind": "riccati_solution",
                "P": sol.P.tolist(),
                "K": sol.K_lq.tolist(),
                "residual": sol.residual,
                "iterations": sol.iterations,
            },
            fh,
            sort_keys=True,
            indent=1,
        )
        fh.write("\n")
