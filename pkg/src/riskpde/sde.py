"""Batched Euler-Maruyama simulation of the reduced SDE and the
finite-difference co-simulation of the original interconnection.

Reproducibility contract: every sample owns a counter-based Philox stream
keyed by (seed, sample), so a noise bank is bit-identical for a given
(seed, S, M, T) regardless of how samples are later chunked across
workers.  All state contractions go through ``np.einsum`` (fixed C-order
reduction), which keeps per-sample arithmetic independent of the batch
partition; cost accumulation is a fixed-order loop over the time grid.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_banded

from .reduction import CoupledSystemSpec, ReducedModel


class SimulationError(Exception):
    """Non-finite state or inconsistent simulation inputs."""


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on [0, T] with ``steps`` Euler intervals."""

    T: float
    steps: int

    def __post_init__(self):
        if self.T <= 0 or self.steps < 1:
            raise ValueError("need T > 0 and steps >= 1")

    @property
    def dt(self) -> float:
        return self.T / self.steps

    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.steps + 1)


class NoiseBank:
    """Brownian increments, one independent Philox stream per sample.

    ``increments[s, m]`` is distributed Normal(0, dt); the array is fully
    determined by (seed, S, steps, T).
    """

    def __init__(self, seed: int, samples: int, grid: TimeGrid):
        if not (0 <= int(seed) < 2**64):
            raise ValueError("seed must fit in an unsigned 64-bit integer")
        self.seed = int(seed)
        self.samples = int(samples)
        self.grid = grid
        sqrt_dt = np.sqrt(grid.dt)
        inc = np.empty((samples, grid.steps))
        for s in range(samples):
            gen = np.random.Generator(np.random.Philox(key=np.array([self.seed, s], dtype=np.uint64)))
            inc[s] = gen.standard_normal(grid.steps)
        inc *= sqrt_dt
        self.increments = inc

    def meta(self) -> dict:
        return {"seed": self.seed, "samples": self.samples, "steps": self.grid.steps, "T": self.grid.T}

    @staticmethod
    def from_increments(increments: np.ndarray, T: float, seed: int = 0) -> "NoiseBank":
        """Bank wrapping externally built increments (e.g. coarsened refinements)."""
        increments = np.asarray(increments, dtype=float)
        bank = NoiseBank.__new__(NoiseBank)
        bank.seed = int(seed)
        bank.samples = increments.shape[0]
        bank.grid = TimeGrid(T, increments.shape[1])
        bank.increments = increments
        return bank

    def coarsened(self, factor: int) -> "NoiseBank":
        """Sum consecutive increments so the same Brownian path lives on a coarser grid."""
        S, M = self.increments.shape
        if M % factor:
            raise ValueError("steps must be divisible by the coarsening factor")
        inc = self.increments.reshape(S, M // factor, factor).sum(axis=2)
        return NoiseBank.from_increments(inc, self.grid.T, seed=self.seed)


def derive_seed(master: int, *branch: int) -> int:
    """Deterministic 64-bit child seed for an iteration/evaluation branch."""
    ss = np.random.SeedSequence(entropy=(int(master),) + tuple(int(b) for b in branch))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


EVAL_BRANCH = 0xE7A1  # branch tag reserved for held-out evaluation banks


@dataclass
class FeedbackPolicy:
    """Affine feedback u(t) = v(t) + K z with box-constrained parameters.

    ``v`` is piecewise constant on its own uniform grid over [0, T]; when a
    simulation runs on a different grid the open-loop term is looked up by
    time.
    """

    T: float
    v: np.ndarray            # (M_v,)
    K: np.ndarray            # (n_aug,)
    box_control: tuple[float, float] = (-50.0, 50.0)
    box_gain: np.ndarray | None = None  # (n_aug, 2); defaults to +-50 per entry

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=float).reshape(-1)
        self.K = np.asarray(self.K, dtype=float).reshape(-1)
        if self.box_gain is None:
            self.box_gain = np.tile(np.array([-50.0, 50.0]), (self.K.size, 1))
        else:
            self.box_gain = np.asarray(self.box_gain, dtype=float).reshape(self.K.size, 2)

    @property
    def steps(self) -> int:
        return self.v.size

    def open_loop_on(self, grid: TimeGrid) -> np.ndarray:
        if grid.steps == self.steps and grid.T == self.T:
            return self.v
        dt_v = self.T / self.steps
        t = np.arange(grid.steps) * grid.dt
        idx = np.clip(np.floor(t / dt_v + 1e-9).astype(int), 0, self.steps - 1)
        return self.v[idx]

    def clipped(self) -> "FeedbackPolicy":
        lo, hi = self.box_control
        return FeedbackPolicy(
            T=self.T,
            v=np.clip(self.v, lo, hi),
            K=np.clip(self.K, self.box_gain[:, 0], self.box_gain[:, 1]),
            box_control=self.box_control,
            box_gain=self.box_gain.copy(),
        )

    def to_dict(self) -> dict:
        return {
            "kind": "feedback_policy",
            "T": self.T,
            "steps": self.steps,
            "v": self.v.tolist(),
            "K": self.K.tolist(),
            "box_control": list(self.box_control),
            "box_gain": self.box_gain.tolist(),
        }

    @staticmethod
    def from_dict(data: dict) -> "FeedbackPolicy":
        if data.get("kind") != "feedback_policy":
            raise ValueError("not a feedback-policy document")
        return FeedbackPolicy(
            T=float(data["T"]),
            v=np.asarray(data["v"], dtype=float),
            K=np.asarray(data["K"], dtype=float),
            box_control=tuple(data["box_control"]),
            box_gain=np.asarray(data["box_gain"], dtype=float),
        )

    def save(self, path, provenance: dict | None = None):
        doc = self.to_dict()
        if provenance:
            doc["provenance"] = provenance
        with open(path, "w") as fh:
            json.dump(doc, fh, sort_keys=True, indent=1)
            fh.write("\n")

    @staticmethod
    def load(path) -> "FeedbackPolicy":
        with open(path) as fh:
            return FeedbackPolicy.from_dict(json.load(fh))


@dataclass
class TrajectoryBatch:
    """Simulated paths and per-sample costs under common random numbers."""

    grid: TimeGrid
    Z: np.ndarray | None          # (S, M+1, n_aug) when paths are stored
    U: np.ndarray | None          # (S, M)
    dW: np.ndarray                # (S, M)
    costs: np.ndarray             # (S,)
    Phi: np.ndarray | None = None  # (S, M+1, n_aug, n_aug), gradient runs only
    X_final: np.ndarray | None = None

    @property
    def samples(self) -> int:
        return self.dW.shape[0]


def _quad_form(Z: np.ndarray, mat: np.ndarray) -> np.ndarray:
    # row-wise quadratic form; the length-n reductions are sequential, so
    # per-sample results do not depend on the batch partition
    return ((Z @ mat) * Z).sum(axis=1)


def _left_apply_flat(mat: np.ndarray, P3: np.ndarray) -> np.ndarray:
    """mat @ P3 over the leading axis of a (n, S, n) stack via one flat dgemm."""
    n, S, n2 = P3.shape
    return (mat @ P3.reshape(n, S * n2)).reshape(n, S, n2)


def _chunk_ranges(total: int, workers: int):
    workers = max(1, min(workers, total)) if total else 1
    size = -(-total // workers)
    return [(i, min(i + size, total)) for i in range(0, total, size)]


def _simulate_chunk(model: ReducedModel, policy: FeedbackPolicy, dW: np.ndarray, grid: TimeGrid,
                    with_fundamental: bool, store_paths: bool) -> dict:
    S, M = dW.shape
    n = model.n_aug
    dt = grid.dt
    F = model.drift_matrix
    Cm = model.C_N
    B = model.B_N
    K = policy.K
    if K.size != n:
        raise SimulationError(f"policy gain has {K.size} entries, model needs {n}")
    F_T = np.ascontiguousarray(F.T)
    C_T = np.ascontiguousarray(Cm.T)
    Fcl = F + np.outer(B, K)
    v_grid = policy.open_loop_on(grid)
    times = grid.times()
    r_g = model.r_N.on_grid(times[:-1])
    sig_g = model.sigma_N.on_grid(times[:-1])

    Zm = np.tile(model.Z0, (S, 1))
    costs = np.zeros(S)
    Z_path = U_path = Phi_path = None
    if store_paths:
        Z_path = np.empty((S, M + 1, n))
        Z_path[:, 0] = Zm
        U_path = np.empty((S, M))
    Phi3 = None  # fundamental matrices stored mode-major (n, S, n) for flat dgemm steps
    if with_fundamental:
        Phi3 = np.ascontiguousarray(np.broadcast_to(np.eye(n)[:, None, :], (n, S, n)))
        if store_paths:
            Phi_path = np.empty((S, M + 1, n, n))
            Phi_path[:, 0] = np.eye(n)

    for m in range(M):
        # divergence is detected and reported below, so silence overflow warnings
        with np.errstate(over="ignore", invalid="ignore"):
            U = v_grid[m] + Zm @ K
            costs += (_quad_form(Zm, model.Q_N) + model.r_ctrl * U * U) * dt
            drift = Zm @ F_T + U[:, None] * B[None, :] + r_g[m][None, :]
            diffu = Zm @ C_T + sig_g[m][None, :]
            Zm = Zm + dt * drift + diffu * dW[:, m][:, None]
        if not np.all(np.isfinite(Zm)):
            bad = int(np.argwhere(~np.isfinite(Zm).all(axis=1))[0][0])
            raise SimulationError(f"non-finite state at sample {bad}, step {m + 1}")
        if store_paths:
            Z_path[:, m + 1] = Zm
            U_path[:, m] = U
        if with_fundamental:
            Phi3 = Phi3 + dt * _left_apply_flat(Fcl, Phi3) + dW[:, m][None, :, None] * _left_apply_flat(Cm, Phi3)
            if store_paths:
                Phi_path[:, m + 1] = Phi3.transpose(1, 0, 2)
    costs += _quad_form(Zm, model.G_N)
    return {"Z": Z_path, "U": U_path, "Phi": Phi_path, "costs": costs, "X_final": Zm[:, : model.d].copy()}


def _run_batched(model, policy, noise, grid, with_fundamental, store_paths, workers):
    if noise.grid.steps != grid.steps or noise.grid.T != grid.T:
        raise SimulationError("noise bank was generated for a different grid")
    ranges = _chunk_ranges(noise.samples, workers)
    args = [(model, policy, noise.increments[a:b], grid, with_fundamental, store_paths) for a, b in ranges]
    if len(ranges) == 1 or workers <= 1:
        parts = [_simulate_chunk(*a) for a in args]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda a: _simulate_chunk(*a), args))
    out = {"costs": np.concatenate([p["costs"] for p in parts]),
           "X_final": np.concatenate([p["X_final"] for p in parts])}
    for key in ("Z", "U", "Phi"):
        vals = [p[key] for p in parts]
        out[key] = np.concatenate(vals) if vals[0] is not None else None
    return out


def simulate_batch(model: ReducedModel, policy: FeedbackPolicy, noise: NoiseBank, grid: TimeGrid,
                   with_fundamental: bool = False, workers: int = 1) -> TrajectoryBatch:
    """Euler-Maruyama paths of the reduced SDE under the feedback policy.

    Left-endpoint quadrature of the running cost plus the terminal quadratic
    term; with ``with_fundamental`` the closed-loop fundamental-matrix paths
    (identity at t=0) are propagated alongside the state.
    """
    res = _run_batched(model, policy, noise, grid, with_fundamental, store_paths=True, workers=workers)
    return TrajectoryBatch(grid=grid, Z=res["Z"], U=res["U"], dW=noise.increments, costs=res["costs"],
                           Phi=res["Phi"], X_final=res["X_final"])


def simulate_costs(model: ReducedModel, policy: FeedbackPolicy, noise: NoiseBank, grid: TimeGrid,
                   workers: int = 1) -> np.ndarray:
    """Per-sample costs only, without storing paths (memory-light evaluation).

    Identical arithmetic to :func:`simulate_batch`, so the returned costs are
    bit-equal to the batched ones.
    """
    return _run_batched(model, policy, noise, grid, with_fundamental=False, store_paths=False,
                        workers=workers)["costs"]


def evaluate_cost(batch: TrajectoryBatch, model: ReducedModel) -> np.ndarray:
    """Recompute per-sample costs from stored paths.

    Reproduces the in-simulation accumulation order exactly, so the result
    equals ``batch.costs`` bit for bit.
    """
    if batch.Z is None or batch.U is None:
        raise SimulationError("cost evaluation needs stored paths")
    dt = batch.grid.dt
    M = batch.grid.steps
    costs = np.zeros(batch.samples)
    for m in range(M):
        U = batch.U[:, m]
        costs += (_quad_form(batch.Z[:, m], model.Q_N) + model.r_ctrl * U * U) * dt
    costs += _quad_form(batch.Z[:, M], model.G_N)
    return costs


def open_loop_from_boundary(V_knots: np.ndarray, grid: TimeGrid, mu: float) -> np.ndarray:
    """Open-loop input v reproducing a target boundary path on the grid.

    With Y_{m+1} = Y_m + (mu Y_m + v_m) dt and Y_0 = V_knots[0], choosing
    v_m = (V_{m+1} - V_m)/dt - mu V_m makes Y_m = V_knots[m] exactly.
    """
    V_knots = np.asarray(V_knots, dtype=float)
    if V_knots.size != grid.steps + 1:
        raise SimulationError("boundary path must have steps+1 knot values")
    return np.diff(V_knots) / grid.dt - mu * V_knots[:-1]


@dataclass
class CosimResult:
    """Direct simulation of the original coupled system on a space grid."""

    grid: TimeGrid
    x: np.ndarray                # (J,)
    X: np.ndarray                # (S, M+1, d)
    u: np.ndarray                # (S, n_snapshots, J)
    snapshot_steps: np.ndarray   # time-step index of each stored profile
    costs: np.ndarray            # (S,)
    V_knots: np.ndarray
    U_knots: np.ndarray


def _cosimulate_chunk(spec, V_knots, U_grid, dW, grid, J, u_stride, Q, G, r_ctrl):
    S, M = dW.shape
    d = spec.d
    dt = grid.dt
    h = 1.0 / (J - 1)
    b0_coef, b1_coef = spec.robin.beta0, spec.robin.beta1
    c = spec.robin.c

    # banded (I - dt L) for the implicit diffusion step; L carries the
    # homogeneous Robin flux terms, boundary data enters the right-hand side
    ab = np.zeros((3, J))
    ab[1, :] = 1.0 + 2.0 * dt / h**2
    ab[1, 0] += 2.0 * dt * b0_coef / h
    ab[1, -1] += 2.0 * dt * b1_coef / h
    ab[0, 1] = -2.0 * dt / h**2
    ab[0, 2:] = -dt / h**2
    ab[2, :-2] = -dt / h**2
    ab[2, -2] = -2.0 * dt / h**2

    x = np.linspace(0.0, 1.0, J)
    u = np.tile(spec.u0(x), (S, 1))
    X = np.empty((S, M + 1, d))
    X[:, 0] = spec.X0
    times = grid.times()
    r_g = spec.r_drift.on_grid(times[:-1])
    sig_g = spec.sigma_drift.on_grid(times[:-1])

    n_snap = M // u_stride + 1
    snaps = np.empty((S, n_snap, J))
    snaps[:, 0] = u
    snap_steps = [0]
    costs = np.zeros(S)

    A, B, C, D, Mrow = spec.A, spec.B, spec.C, spec.D, spec.M
    A_T, C_T = np.ascontiguousarray(A.T), np.ascontiguousarray(C.T)
    for m in range(M):
        u_left = u[:, 0]
        Xm = X[:, m]
        costs += (_quad_form(Xm, Q) + r_ctrl * (V_knots[m] ** 2 + U_grid[m] ** 2)) * dt
        drift = Xm @ A_T + u_left[:, None] * B[None, :] + r_g[m][None, :]
        diffu = Xm @ C_T + u_left[:, None] * D[None, :] + sig_g[m][None, :]
        Xn = Xm + dt * drift + diffu * dW[:, m][:, None]
        X[:, m + 1] = Xn
        # boundary data at the new time level
        b0 = Xn @ Mrow
        b1 = V_knots[m + 1]
        rhs = u + dt * c * u
        rhs[:, 0] += dt * (-2.0 * b0 / h)
        rhs[:, -1] += dt * (2.0 * b1 / h)
        u = solve_banded((1, 1), ab, rhs.T).T
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(Xn))):
            raise SimulationError(f"co-simulation diverged at step {m + 1}")
        if (m + 1) % u_stride == 0:
            snaps[:, (m + 1) // u_stride] = u
            if len(snap_steps) < n_snap:
                snap_steps.append(m + 1)
    costs += _quad_form(X[:, M], G)
    return X, snaps, np.array(snap_steps), costs


def cosimulate_original(spec: CoupledSystemSpec, V_knots: np.ndarray, noise: NoiseBank,
                        space_points: int, grid: TimeGrid, u_stride: int = 1,
                        U_knots: np.ndarray | None = None, Q=None, G=None, r_ctrl: float = 1.0,
                        workers: int = 1) -> CosimResult:
    """Direct finite-difference/Euler-Maruyama run of the original system.

    The rod uses a second-order ghost-point Robin discretization with an
    implicit diffusion step and explicit reaction; the lumped state is
    stepped with the same Brownian increments as the reduced simulation.
    ``V_knots`` holds the boundary input at the grid knots (V_knots[0] must
    equal the compatibility value V0).  Cost samples use the reduced-cost
    convention int X'QX + r_ctrl (V^2 + U^2) dt + terminal; pass Q/G to get
    comparable numbers, otherwise costs are control-effort only.
    """
    if space_points < 64:
        raise SimulationError("need at least 64 space points")
    if noise.grid.steps != grid.steps or noise.grid.T != grid.T:
        raise SimulationError("noise bank was generated for a different grid")
    V_knots = np.asarray(V_knots, dtype=float)
    if V_knots.size != grid.steps + 1:
        raise SimulationError("V_knots must have steps+1 entries")
    if U_knots is None:
        U_knots = open_loop_from_boundary(V_knots, grid, spec.robin.mu)
    d = spec.d
    Q = np.zeros((d, d)) if Q is None else np.atleast_2d(np.asarray(Q, dtype=float))
    G = np.zeros((d, d)) if G is None else np.atleast_2d(np.asarray(G, dtype=float))

    ranges = _chunk_ranges(noise.samples, workers)
    args = [(spec, V_knots, U_knots, noise.increments[a:b], grid, space_points, u_stride, Q, G, r_ctrl)
            for a, b in ranges]
    if len(ranges) == 1 or workers <= 1:
        parts = [_cosimulate_chunk(*a) for a in args]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda a: _cosimulate_chunk(*a), args))
    X = np.concatenate([p[0] for p in parts])
    snaps = np.concatenate([p[1] for p in parts])
    costs = np.concatenate([p[3] for p in parts])
    return CosimResult(grid=grid, x=np.linspace(0.0, 1.0, space_points), X=X, u=snaps,
                       snapshot_steps=parts[0][2], costs=costs, V_knots=V_knots, U_knots=np.asarray(U_knots))
