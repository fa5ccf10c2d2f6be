"""Policy gradients and the projected gradient descent-ascent loop.

Gradients of the weighted batch cost with respect to the open-loop values
and the feedback gain come from the adjoint representation
p(t) = I(t) Phi(t)^{-1} of the closed-loop fundamental matrix Phi.  The
adjoint row is accumulated by a backward recursion over the grid,

    q_M = 2 Z_M' G,    q_m = (2 Z_m' Q + 2 r U_m K) dt + q_{m+1} E_m,

where E_m = I + (F + B K) dt + C dW_m is the one-step propagator
(equal to Phi_{m+1} Phi_m^{-1}), so no matrix is ever inverted and the
poor conditioning of Phi over long horizons never enters.  The recursion
is the exact adjoint of the Euler-Maruyama forward pass, which is what
makes central finite differences match to high relative accuracy.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .reduction import ReducedModel
from .risk import RiskSpec, cvar_estimate, project_risk_weights
from .sde import (
    FeedbackPolicy,
    NoiseBank,
    SimulationError,
    TimeGrid,
    TrajectoryBatch,
    derive_seed,
    simulate_batch,
    simulate_costs,
    EVAL_BRANCH,
)


class DivergenceError(Exception):
    """Risk estimate blew past the divergence guard; carries the last good state."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


@dataclass
class GradientPair:
    grad_v: np.ndarray   # (M,) L2-density of the open-loop gradient on the grid
    grad_K: np.ndarray   # (n_aug,)


def compute_gradients(model: ReducedModel, policy: FeedbackPolicy, batch: TrajectoryBatch,
                      weights: np.ndarray) -> GradientPair:
    """Gradient of (1/S) sum_s w_s J_s at the batch's noise realizations.

    ``grad_v[m]`` is the gradient density at t_m (the partial derivative of
    the weighted cost w.r.t. v[m] is grad_v[m] * dt); ``grad_K`` is the
    plain partial-derivative row.  Requires a batch simulated with
    fundamental matrices on the policy's own grid.
    """
    if batch.Phi is None:
        raise SimulationError("gradient computation requires fundamental matrices (simulate with with_fundamental=True)")
    if batch.Z is None or batch.U is None:
        raise SimulationError("gradient computation requires stored paths")
    grid = batch.grid
    if grid.steps != policy.steps or grid.T != policy.T:
        raise SimulationError("policy grid and batch grid must coincide for gradient updates")
    weights = np.asarray(weights, dtype=float).reshape(-1)
    S = batch.samples
    if weights.size != S:
        raise SimulationError(f"{weights.size} weights for {S} samples")

    dt = grid.dt
    M = grid.steps
    F_cl = model.drift_matrix + np.outer(model.B_N, policy.K)
    Cm = model.C_N
    B = model.B_N
    K = policy.K
    Q = model.Q_N
    G = model.G_N
    r = model.r_ctrl
    w_over_S = weights / S

    grad_v = np.empty(M)
    grad_K = np.zeros(K.size)
    q = 2.0 * (batch.Z[:, M] @ G)
    for m in range(M - 1, -1, -1):
        Zm = batch.Z[:, m]
        U = batch.U[:, m]
        term = q @ B + 2.0 * r * U
        # cross-sample reductions stay in einsum (single-threaded, fixed order)
        grad_v[m] = float(np.einsum("s,s->", w_over_S, term))
        grad_K += np.einsum("s,si->i", w_over_S * term, Zm)
        # q_{m+1} -> q_m through the one-step propagator E_m = Phi_{m+1} Phi_m^{-1}
        q = q + dt * (q @ F_cl) + batch.dW[:, m][:, None] * (q @ Cm)
        q += (2.0 * (Zm @ Q) + (2.0 * r) * U[:, None] * K[None, :]) * dt
    grad_K *= dt
    return GradientPair(grad_v=grad_v, grad_K=grad_K)


@dataclass
class OptimizerState:
    """Mutable snapshot of the descent-ascent iteration."""

    policy: FeedbackPolicy
    zeta: np.ndarray
    risk: RiskSpec
    eta: float
    beta_step: float
    iteration: int = 0
    history: list = field(default_factory=list)
    eval_history: list = field(default_factory=list)
    adaptive: bool = False
    scale_v: np.ndarray | None = None
    scale_K: np.ndarray | None = None
    prev_grad_v: np.ndarray | None = None
    prev_grad_K: np.ndarray | None = None


def _adaptive_scales(scale, grad, prev, lo=0.1, hi=10.0):
    if prev is None:
        return scale
    same = np.sign(grad) * np.sign(prev) >= 0
    return np.clip(np.where(same, scale * 1.05, scale * 0.5), lo, hi)


def gda_step(state: OptimizerState, model: ReducedModel, noise: NoiseBank, workers: int = 1) -> OptimizerState:
    """One projected descent step on (v, K) and ascent step on the dual weights.

    Uses a single simulation of the batch: the gradient weights are
    zeta*(1 - gamma*zeta) and the dual update reuses the same batch costs,
    followed by projection onto the risk envelope.  With alpha = 1 and
    gamma = 0 this is projected gradient descent on the mean cost (the dual
    projection maps everything back to the constant density).
    """
    grid = noise.grid
    policy = state.policy
    alpha = state.risk.effective_alpha
    gamma = state.risk.gamma
    zeta = state.zeta
    if zeta.size != noise.samples:
        raise SimulationError("dual weights must match the bank's sample count")

    batch = simulate_batch(model, policy, noise, grid, with_fundamental=True, workers=workers)
    w = zeta * (1.0 - gamma * zeta)
    grads = compute_gradients(model, policy, batch, w)

    scale_v = state.scale_v if state.scale_v is not None else np.ones(policy.steps)
    scale_K = state.scale_K if state.scale_K is not None else np.ones(policy.K.size)
    if state.adaptive:
        scale_v = _adaptive_scales(scale_v, grads.grad_v, state.prev_grad_v)
        scale_K = _adaptive_scales(scale_K, grads.grad_K, state.prev_grad_K)
        step_v = state.eta * scale_v * grads.grad_v
        step_K = state.eta * scale_K * grads.grad_K
    else:
        step_v = state.eta * grads.grad_v
        step_K = state.eta * grads.grad_K

    lo, hi = policy.box_control
    new_policy = FeedbackPolicy(
        T=policy.T,
        v=np.clip(policy.v - step_v, lo, hi),
        K=np.clip(policy.K - step_K, policy.box_gain[:, 0], policy.box_gain[:, 1]),
        box_control=policy.box_control,
        box_gain=policy.box_gain.copy(),
    )
    dual_arg = zeta + state.beta_step * (1.0 - 2.0 * gamma * zeta) * batch.costs
    new_zeta = project_risk_weights(dual_arg, alpha).zeta

    dt = grid.dt
    row = {
        "iteration": state.iteration,
        "risk": cvar_estimate(batch.costs, alpha),
        "mean_cost": float(np.mean(batch.costs)),
        "grad_v_norm": float(np.sqrt(np.sum(grads.grad_v**2) * dt)),
        "grad_K_norm": float(np.linalg.norm(grads.grad_K)),
    }
    return replace(
        state,
        policy=new_policy,
        zeta=new_zeta,
        iteration=state.iteration + 1,
        history=state.history + [row],
        scale_v=scale_v,
        scale_K=scale_K,
        prev_grad_v=grads.grad_v,
        prev_grad_K=grads.grad_K,
    )


@dataclass
class OptimizerSchedule:
    """Hyperparameters of one optimization run."""

    iterations: int = 1000
    eta: float = 1e-3
    beta_step: float = 1e-2
    samples: int = 2000
    steps: int = 4000
    seed: int = 0
    eval_every: int = 50
    eval_samples: int = 10000
    frozen_bank: bool = False
    adaptive: bool = False
    divergence_factor: float = 10.0


def run_optimization(model: ReducedModel, risk_spec: RiskSpec, init: FeedbackPolicy,
                     schedule: OptimizerSchedule, workers: int = 1) -> OptimizerState:
    """Iterate gda_step with per-iteration noise banks and held-out tracking.

    A fresh bank keyed by (seed, iteration) is drawn each step unless
    ``frozen_bank`` is set; dual weights are carried by sample index and
    re-projected.  Held-out CVaR/mean estimates on the evaluation bank are
    recorded every ``eval_every`` iterations and at the end.  A risk
    estimate exceeding ``divergence_factor`` times the initial one aborts
    with the last good state attached.
    """
    grid = TimeGrid(model.T, schedule.steps)
    state = OptimizerState(
        policy=init.clipped(),
        zeta=np.ones(schedule.samples),
        risk=risk_spec,
        eta=schedule.eta,
        beta_step=schedule.beta_step,
        adaptive=schedule.adaptive,
    )
    eval_bank = None
    if schedule.eval_samples > 0:
        eval_bank = NoiseBank(derive_seed(schedule.seed, EVAL_BRANCH), schedule.eval_samples, grid)

    def record_eval(st: OptimizerState):
        if eval_bank is None:
            return
        costs = simulate_costs(model, st.policy, eval_bank, grid, workers=workers)
        st.eval_history.append(
            {
                "iteration": st.iteration,
                "risk": cvar_estimate(costs, risk_spec.effective_alpha),
                "mean_cost": float(np.mean(costs)),
            }
        )

    record_eval(state)
    base_bank = NoiseBank(derive_seed(schedule.seed, 0), schedule.samples, grid) if schedule.frozen_bank else None
    initial_risk = None
    for it in range(schedule.iterations):
        bank = base_bank if schedule.frozen_bank else NoiseBank(derive_seed(schedule.seed, it), schedule.samples, grid)
        prev = state
        state = gda_step(state, model, bank, workers=workers)
        risk_now = state.history[-1]["risk"]
        if initial_risk is None:
            initial_risk = risk_now
        if risk_now > schedule.divergence_factor * max(abs(initial_risk), 1e-12):
            raise DivergenceError(
                f"risk estimate {risk_now:.6g} exceeded {schedule.divergence_factor}x the initial {initial_risk:.6g}"
                f" at iteration {state.iteration}",
                state=prev,
            )
        if schedule.eval_every > 0 and state.iteration % schedule.eval_every == 0:
            record_eval(state)
    if schedule.eval_every <= 0 or state.iteration % schedule.eval_every != 0:
        record_eval(state)
    return state
