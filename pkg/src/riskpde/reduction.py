"""Assembly of the finite-dimensional reduced SDE and cost.

Augmented coordinates are ordered (X_1..X_d, Y, mode_0..mode_N) where Y is
the integrated boundary input and the mode block holds H1 coefficients of
the shifted PDE state.  The generator block stores -lambda_n so that the
simulated dynamics dZ = (generator + A_N) Z dt + ... decay mode n at rate
lambda_n; the reaction rate c of the rod enters the mode diagonal of A_N.

Coupling signs follow the direct substitution
u(t,0) = z(t,0) + theta(0) V(t) + psi(0) M X_t  (theta/psi = control/state
lifters); an alternative historical sign set is kept behind
``coupling_signs="flipped"`` for investigation and is not validated by the
co-simulation oracle.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .forms import ParametricForm
from .spectral import (
    BoundaryLifter,
    EigenBasis,
    RobinParams,
    TraceRepresenter,
    project_h1,
    reconstruct_on_basis,
)


class AssemblyError(Exception):
    """Dimension mismatches or incompatible inputs during assembly."""


@dataclass
class DriftSchedule:
    """Piecewise-constant vector signal on [0, T]: values[i] holds on [times[i], times[i+1])."""

    times: np.ndarray   # (L,), ascending, times[0] == 0
    values: np.ndarray  # (L, dim)

    def __post_init__(self):
        self.times = np.atleast_1d(np.asarray(self.times, dtype=float))
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if self.times[0] != 0.0:
            raise AssemblyError("drift schedule must start at t=0")
        if np.any(np.diff(self.times) <= 0):
            raise AssemblyError("drift schedule times must be strictly increasing")
        if self.values.shape[0] != self.times.size:
            raise AssemblyError("drift schedule needs one value row per knot")

    @staticmethod
    def constant(vec) -> "DriftSchedule":
        return DriftSchedule(np.array([0.0]), np.atleast_2d(np.asarray(vec, dtype=float)))

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def at(self, t: float) -> np.ndarray:
        idx = int(np.searchsorted(self.times, t, side="right") - 1)
        return self.values[max(idx, 0)]

    def on_grid(self, grid_times: np.ndarray) -> np.ndarray:
        idx = np.searchsorted(self.times, grid_times, side="right") - 1
        return self.values[np.maximum(idx, 0)]

    def map_rows(self, fn) -> "DriftSchedule":
        return DriftSchedule(self.times.copy(), np.stack([fn(v) for v in self.values]))

    def to_dict(self) -> dict:
        return {"times": self.times.tolist(), "values": self.values.tolist()}

    @staticmethod
    def from_dict(d: dict) -> "DriftSchedule":
        return DriftSchedule(np.asarray(d["times"]), np.asarray(d["values"]))


@dataclass
class CoupledSystemSpec:
    """Data of the original interconnection: SDE matrices, drifts, rod parameters, initial state."""

    A: np.ndarray
    B: np.ndarray            # (d,) or (d,1) boundary-input column
    C: np.ndarray
    D: np.ndarray
    M: np.ndarray            # (d,) or (1,d) boundary-output row
    r_drift: DriftSchedule
    sigma_drift: DriftSchedule
    robin: RobinParams
    T: float
    X0: np.ndarray
    u0: ParametricForm
    V0: float = 0.0
    compat_tol: float = 1e-6

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        d = self.A.shape[0]
        if self.A.shape != (d, d):
            raise AssemblyError("A must be square")
        self.B = np.asarray(self.B, dtype=float).reshape(d)
        self.C = np.atleast_2d(np.asarray(self.C, dtype=float))
        self.D = np.asarray(self.D, dtype=float).reshape(d)
        self.M = np.asarray(self.M, dtype=float).reshape(d)
        self.X0 = np.asarray(self.X0, dtype=float).reshape(d)
        if self.C.shape != (d, d):
            raise AssemblyError("C must match A's shape")
        if self.r_drift.dim != d or self.sigma_drift.dim != d:
            raise AssemblyError("drift schedules must have dimension d")
        if self.T <= 0:
            raise AssemblyError("horizon T must be positive")
        self._check_compatibility()

    @property
    def d(self) -> int:
        return self.A.shape[0]

    def _check_compatibility(self):
        """u0 must satisfy the boundary conditions at t=0 (with V(0) = V0)."""
        du0 = self.u0.derivative()
        res1 = du0(1.0) + self.robin.beta1 * self.u0(1.0) - self.V0
        res0 = du0(0.0) - self.robin.beta0 * self.u0(0.0) - float(self.M @ self.X0)
        if abs(res0) > self.compat_tol or abs(res1) > self.compat_tol:
            raise AssemblyError(
                f"initial profile violates boundary compatibility: residuals ({res0:.3e}, {res1:.3e})"
            )


@dataclass
class ReducedModel:
    """All finite-dimensional data of the reduced SDE and quadratic cost."""

    d: int
    N: int
    mu: float
    T: float
    eigenvalues: np.ndarray   # (N+1,) mode decay rates lambda_n
    generator: np.ndarray     # diag(0_{d+1}, -lambda_0..-lambda_N)
    A_N: np.ndarray
    B_N: np.ndarray           # (n_aug,)
    C_N: np.ndarray
    r_N: DriftSchedule
    sigma_N: DriftSchedule
    Q_N: np.ndarray
    G_N: np.ndarray
    r_ctrl: float
    Z0: np.ndarray
    robin: RobinParams = None
    traces_left: np.ndarray = None
    coupling_signs: str = "derived"

    @property
    def n_aug(self) -> int:
        return self.A_N.shape[0]

    @property
    def drift_matrix(self) -> np.ndarray:
        return self.generator + self.A_N

    def to_dict(self) -> dict:
        out = {
            "kind": "reduced_model",
            "d": self.d,
            "N": self.N,
            "n_aug": self.n_aug,
            "mu": self.mu,
            "T": self.T,
            "eigenvalues": self.eigenvalues.tolist(),
            "generator_diag": np.diag(self.generator).tolist(),
            "A_N": self.A_N.tolist(),
            "B_N": self.B_N.tolist(),
            "C_N": self.C_N.tolist(),
            "r_N": self.r_N.to_dict(),
            "sigma_N": self.sigma_N.to_dict(),
            "Q_N": self.Q_N.tolist(),
            "G_N": self.G_N.tolist(),
            "r_ctrl": self.r_ctrl,
            "Z0": self.Z0.tolist(),
            "coupling_signs": self.coupling_signs,
        }
        if self.robin is not None:
            out["robin"] = {
                "beta0": self.robin.beta0,
                "beta1": self.robin.beta1,
                "c": self.robin.c,
                "mu": self.robin.mu,
            }
        if self.traces_left is not None:
            out["traces_left"] = self.traces_left.tolist()
        return out

    @staticmethod
    def from_dict(data: dict) -> "ReducedModel":
        if data.get("kind") != "reduced_model":
            raise AssemblyError("not a reduced-model document")
        robin = None
        if "robin" in data:
            rb = data["robin"]
            robin = RobinParams(rb["beta0"], rb["beta1"], rb["c"], rb["mu"])
        return ReducedModel(
            d=int(data["d"]),
            N=int(data["N"]),
            mu=float(data["mu"]),
            T=float(data["T"]),
            eigenvalues=np.asarray(data["eigenvalues"], dtype=float),
            generator=np.diag(np.asarray(data["generator_diag"], dtype=float)),
            A_N=np.asarray(data["A_N"], dtype=float),
            B_N=np.asarray(data["B_N"], dtype=float),
            C_N=np.asarray(data["C_N"], dtype=float),
            r_N=DriftSchedule.from_dict(data["r_N"]),
            sigma_N=DriftSchedule.from_dict(data["sigma_N"]),
            Q_N=np.asarray(data["Q_N"], dtype=float),
            G_N=np.asarray(data["G_N"], dtype=float),
            r_ctrl=float(data["r_ctrl"]),
            Z0=np.asarray(data["Z0"], dtype=float),
            robin=robin,
            traces_left=np.asarray(data["traces_left"], dtype=float) if "traces_left" in data else None,
            coupling_signs=data.get("coupling_signs", "derived"),
        )

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, indent=1)
            fh.write("\n")

    @staticmethod
    def load(path) -> "ReducedModel":
        with open(path) as fh:
            return ReducedModel.from_dict(json.load(fh))


def assemble_cost(Q, G, r_ctrl: float, basis: EigenBasis, N: int):
    """Reduced cost matrices: Q_N = blockdiag(Q, r_ctrl, 0), G_N = blockdiag(G, 0, 0)."""
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    G = np.atleast_2d(np.asarray(G, dtype=float))
    d = Q.shape[0]
    if G.shape != (d, d):
        raise AssemblyError("Q and G must have the same shape")
    for name, mat in (("Q", Q), ("G", G)):
        if not np.allclose(mat, mat.T, atol=1e-12):
            raise AssemblyError(f"{name} must be symmetric")
        if np.linalg.eigvalsh(mat).min() < -1e-10:
            raise AssemblyError(f"{name} must be positive semidefinite")
    if r_ctrl <= 0:
        raise AssemblyError("control weight must be positive")
    n_aug = d + 1 + (N + 1)
    Q_N = np.zeros((n_aug, n_aug))
    G_N = np.zeros((n_aug, n_aug))
    Q_N[:d, :d] = Q
    Q_N[d, d] = r_ctrl
    G_N[:d, :d] = G
    return Q_N, G_N, float(r_ctrl)


def assemble_reduced(
    spec: CoupledSystemSpec,
    basis: EigenBasis,
    lifters: tuple[BoundaryLifter, BoundaryLifter],
    representer: TraceRepresenter,
    N: int,
    Q=None,
    G=None,
    r_ctrl: float = 1.0,
    coupling_signs: str = "derived",
) -> ReducedModel:
    """Build the reduced SDE matrices from the spectral data.

    ``lifters`` is (control-side, state-side).  ``representer`` fixes the
    trace row used for the boundary value of the mode block; on the basis
    span that row equals the left traces.
    """
    if coupling_signs not in ("derived", "flipped"):
        raise AssemblyError(f"unknown coupling sign convention {coupling_signs!r}")
    if basis.size != N + 1:
        raise AssemblyError(f"basis holds {basis.size} modes, assembly needs N+1={N + 1}")
    if basis.params != spec.robin:
        raise AssemblyError("basis was computed with different Robin parameters than the spec")
    control_lifter, state_lifter = lifters
    if control_lifter.side != "control" or state_lifter.side != "state":
        raise AssemblyError("lifters must be passed as (control-side, state-side)")

    d = spec.d
    n_modes = N + 1
    n_aug = d + 1 + n_modes
    mu = spec.robin.mu
    c = spec.robin.c

    tr0 = basis.traces_left
    p_ctrl = project_h1(control_lifter.form, basis)
    p_state = project_h1(state_lifter.form, basis)
    th0 = control_lifter.value_at_0
    ps0 = state_lifter.value_at_0

    A, B, C, D, M = spec.A, spec.B, spec.C, spec.D, spec.M
    MB = float(M @ B)
    MD = float(M @ D)
    sign = 1.0 if coupling_signs == "derived" else -1.0
    mu_shift = -mu if coupling_signs == "derived" else +mu

    sl_X = slice(0, d)
    i_Y = d
    sl_z = slice(d + 1, n_aug)

    generator = np.zeros((n_aug, n_aug))
    generator[sl_z, sl_z] = np.diag(-basis.eigenvalues)

    A_N = np.zeros((n_aug, n_aug))
    A_N[sl_X, sl_X] = A + sign * ps0 * np.outer(B, M)
    A_N[sl_X, i_Y] = sign * th0 * B
    A_N[sl_X, sl_z] = np.outer(B, tr0)
    A_N[i_Y, i_Y] = mu
    row_X = M @ A + sign * MB * ps0 * M + mu_shift * M
    A_N[sl_z, sl_X] = -np.outer(p_state, row_X)
    A_N[sl_z, i_Y] = -sign * MB * th0 * p_state
    A_N[sl_z, sl_z] = c * np.eye(n_modes) - MB * np.outer(p_state, tr0)

    C_N = np.zeros((n_aug, n_aug))
    C_N[sl_X, sl_X] = C + sign * ps0 * np.outer(D, M)
    C_N[sl_X, i_Y] = sign * th0 * D
    C_N[sl_X, sl_z] = np.outer(D, tr0)
    row_Xc = M @ C + sign * MD * ps0 * M
    C_N[sl_z, sl_X] = -np.outer(p_state, row_Xc)
    C_N[sl_z, i_Y] = -sign * MD * th0 * p_state
    C_N[sl_z, sl_z] = -MD * np.outer(p_state, tr0)

    B_N = np.zeros(n_aug)
    B_N[i_Y] = 1.0
    B_N[sl_z] = -p_ctrl

    def lift_drift(vec: np.ndarray) -> np.ndarray:
        out = np.zeros(n_aug)
        out[sl_X] = vec
        out[sl_z] = -float(M @ vec) * p_state
        return out

    r_N = spec.r_drift.map_rows(lift_drift)
    sigma_N = spec.sigma_drift.map_rows(lift_drift)

    shifted = spec.u0 - control_lifter.form.scaled(spec.V0) - state_lifter.form.scaled(float(M @ spec.X0))
    Z0 = np.zeros(n_aug)
    Z0[sl_X] = spec.X0
    Z0[i_Y] = spec.V0
    Z0[sl_z] = project_h1(shifted, basis)

    if Q is None:
        Q = np.zeros((d, d))
    if G is None:
        G = np.zeros((d, d))
    Q_N, G_N, r_ctrl = assemble_cost(Q, G, r_ctrl, basis, N)

    return ReducedModel(
        d=d,
        N=N,
        mu=mu,
        T=spec.T,
        eigenvalues=basis.eigenvalues.copy(),
        generator=generator,
        A_N=A_N,
        B_N=B_N,
        C_N=C_N,
        r_N=r_N,
        sigma_N=sigma_N,
        Q_N=Q_N,
        G_N=G_N,
        r_ctrl=r_ctrl,
        Z0=Z0,
        robin=spec.robin,
        traces_left=tr0.copy(),
        coupling_signs=coupling_signs,
    )


@dataclass
class ReconstructedState:
    """Physical rod profile and lumped states recovered from reduced coordinates."""

    profile: ParametricForm
    X: np.ndarray
    V: float
    mode_coeffs: np.ndarray


def reconstruct_state(
    z_reduced,
    basis: EigenBasis,
    lifters: tuple[BoundaryLifter, BoundaryLifter],
    m_row=None,
) -> ReconstructedState:
    """Undo the boundary lifting: u = sum_n kappa_n phi_n + theta V + psi (M X)."""
    z_reduced = np.asarray(z_reduced, dtype=float)
    control_lifter, state_lifter = lifters
    d = z_reduced.size - 1 - basis.size
    if d < 0:
        raise AssemblyError("reduced vector too short for this basis")
    X = z_reduced[:d]
    V = float(z_reduced[d])
    kappa = z_reduced[d + 1 :]
    m_row = np.zeros(d) if m_row is None else np.asarray(m_row, dtype=float).reshape(d)
    profile = (
        reconstruct_on_basis(kappa, basis)
        + control_lifter.form.scaled(V)
        + state_lifter.form.scaled(float(m_row @ X))
    )
    return ReconstructedState(profile=profile, X=X, V=V, mode_coeffs=kappa.copy())
