"""Sturm-Liouville eigenbasis and boundary lifters for the Robin Laplacian.

Solves -f'' = lam*f on (0,1) with f'(0) - beta0*f(0) = 0 and
f'(1) + beta1*f(1) = 0, builds the H1-normalized eigenbasis together with
its Gram matrix and boundary traces, and constructs the two hyperbolic
lifting functions that carry inhomogeneous boundary data into the domain.
All functions are exact :class:`~riskpde.forms.ParametricForm` objects, so
inner products and residuals are analytic rather than quadrature-based.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .forms import GridFunction, ParametricForm, h1_inner, h1_norm

CONTROL_SIDE = "control"  # lifter multiplying the boundary input: unit Robin residual at x=1
STATE_SIDE = "state"      # lifter multiplying the SDE coupling output: unit Robin residual at x=0


class SpectralError(Exception):
    """Raised when root bracketing or a boundary solve fails."""


@dataclass(frozen=True)
class RobinParams:
    """Robin coefficients, reaction rate and lifting shift of the rod."""

    beta0: float
    beta1: float
    c: float = 0.0
    mu: float | None = None

    def __post_init__(self):
        if self.beta0 < 0 or self.beta1 < 0:
            raise ValueError("Robin coefficients must be nonnegative")
        if self.mu is None:
            object.__setattr__(self, "mu", self.c + 1.0)
        if self.mu <= self.c:
            raise ValueError(f"lifting shift mu={self.mu} must exceed the reaction rate c={self.c}")

    @property
    def lifter_rate(self) -> float:
        """k = sqrt(mu - c); the lifters solve f'' = k^2 f."""
        return math.sqrt(self.mu - self.c)


@dataclass
class EigenBasis:
    """First N+1 eigenpairs of the Robin Laplacian, H1-normalized."""

    params: RobinParams
    eigenvalues: np.ndarray          # (N+1,), strictly increasing
    modes: list[ParametricForm]      # normalized eigenfunctions
    traces_left: np.ndarray          # mode values at x=0
    traces_right: np.ndarray         # mode values at x=1
    gram: np.ndarray = field(default=None)  # H1 Gram matrix of the modes

    @property
    def size(self) -> int:
        return len(self.modes)


@dataclass
class BoundaryLifter:
    """Hyperbolic solution of -f'' - c f + mu f = 0 with unit Robin residual on one side."""

    side: str                      # CONTROL_SIDE or STATE_SIDE
    k: float
    coef_cosh: float
    coef_sinh: float
    form: ParametricForm
    value_at_0: float
    value_at_1: float
    proj_h1: np.ndarray | None = None  # Gram-solved H1 coefficients on a basis, if attached


@dataclass
class TraceRepresenter:
    """H1 Riesz representer of point evaluation at x=0: <g, v>_H1 = v(0)."""

    form: ParametricForm
    proj_h1: np.ndarray


def _characteristic(s: float, beta0: float, beta1: float) -> float:
    # Robin residual at x=1 of the left-BC-satisfying candidate
    # phi(x) = cos(s x) + (beta0/s) sin(s x).
    return -s * math.sin(s) + beta0 * math.cos(s) + beta1 * (math.cos(s) + (beta0 / s) * math.sin(s))


def _bisect(f, lo: float, hi: float) -> float:
    flo, fhi = f(lo), f(hi)
    if flo == 0.0:
        return lo
    if fhi == 0.0:
        return hi
    if flo * fhi > 0:
        raise SpectralError(f"no sign change on bracket [{lo}, {hi}] (f: {flo}, {fhi})")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid == lo or mid == hi:
            break
        fm = f(mid)
        if fm == 0.0:
            return mid
        if flo * fm < 0:
            hi, fhi = mid, fm
        else:
            lo, flo = mid, fm
    return 0.5 * (lo + hi)


def solve_eigenpairs(params: RobinParams, n_modes: int) -> EigenBasis:
    """First ``n_modes + 1`` eigenpairs in increasing eigenvalue order.

    Pure Neumann (beta0 = beta1 = 0) is handled in closed form, including
    the zero eigenvalue with constant mode; otherwise the transcendental
    characteristic equation is bisected on the bracket ((n-1)pi, n pi),
    where its endpoint signs alternate.
    """
    if n_modes < 0:
        raise ValueError("n_modes must be >= 0")
    beta0, beta1 = params.beta0, params.beta1
    lambdas: list[float] = []
    raw_modes: list[ParametricForm] = []

    if beta0 == 0.0 and beta1 == 0.0:
        lambdas.append(0.0)
        raw_modes.append(ParametricForm.constant(1.0))
        for n in range(1, n_modes + 1):
            s = n * math.pi
            lambdas.append(s * s)
            raw_modes.append(ParametricForm.cosine(s))
    else:
        f = lambda s: _characteristic(s, beta0, beta1)
        n = 1
        while len(lambdas) < n_modes + 1:
            lo = max(1e-9, (n - 1) * math.pi + 1e-12)
            hi = n * math.pi - 1e-12
            try:
                s = _bisect(f, lo, hi)
            except SpectralError as exc:
                raise SpectralError(f"eigenvalue bracket {n} failed on [{lo:.6g}, {hi:.6g}]") from exc
            lambdas.append(s * s)
            form = ParametricForm.cosine(s) + ParametricForm.sine(s, beta0 / s)
            raw_modes.append(form)
            n += 1

    modes = [m.scaled(1.0 / h1_norm(m)) for m in raw_modes]
    size = len(modes)
    gram = np.empty((size, size))
    for i in range(size):
        for j in range(i, size):
            gram[i, j] = gram[j, i] = h1_inner(modes[i], modes[j])
    return EigenBasis(
        params=params,
        eigenvalues=np.asarray(lambdas),
        modes=modes,
        traces_left=np.array([m(0.0) for m in modes]),
        traces_right=np.array([m(1.0) for m in modes]),
        gram=gram,
    )


def solve_lifter(params: RobinParams, side: str, basis: EigenBasis | None = None) -> BoundaryLifter:
    """Boundary lifter f = a cosh(kx) + b sinh(kx) for one Robin side.

    The control-side lifter has f'(1) + beta1 f(1) = 1 and a homogeneous
    condition at x=0; the state-side lifter is the mirror image.  The 2x2
    linear system in (a, b) is nonsingular whenever mu > c.
    """
    if side not in (CONTROL_SIDE, STATE_SIDE):
        raise ValueError(f"unknown lifter side {side!r}")
    k = params.lifter_rate
    beta0, beta1 = params.beta0, params.beta1
    ck, sk = math.cosh(k), math.sinh(k)
    # rows: residual at x=0 (f'(0) - beta0 f(0)), residual at x=1 (f'(1) + beta1 f(1))
    mat = np.array(
        [
            [-beta0, k],
            [k * sk + beta1 * ck, k * ck + beta1 * sk],
        ]
    )
    rhs = np.array([0.0, 1.0]) if side == CONTROL_SIDE else np.array([1.0, 0.0])
    try:
        a, b = np.linalg.solve(mat, rhs)
    except np.linalg.LinAlgError as exc:
        raise SpectralError(f"singular lifter system for {side} side: {exc}") from exc
    form = ParametricForm.cosh(k, a) + ParametricForm.sinh(k, b)
    lifter = BoundaryLifter(
        side=side,
        k=k,
        coef_cosh=float(a),
        coef_sinh=float(b),
        form=form,
        value_at_0=float(form(0.0)),
        value_at_1=float(form(1.0)),
    )
    if basis is not None:
        lifter.proj_h1 = project_h1(form, basis)
    return lifter


def trace_representer(basis: EigenBasis) -> TraceRepresenter:
    """Riesz representer of v -> v(0): g(x) = cosh(1-x)/sinh(1).

    Satisfies -g'' + g = 0 with g'(0) = -1, g'(1) = 0, hence
    <g, v>_H1 = v(0) for every v in H1(0,1); its H1 projection
    coefficients on the basis solve gram @ kappa = traces_left.
    """
    sh = math.sinh(1.0)
    # cosh(1-x) = cosh(1) cosh(x) - sinh(1) sinh(x)
    form = ParametricForm.cosh(1.0, math.cosh(1.0) / sh) + ParametricForm.sinh(1.0, -1.0)
    coeffs = np.linalg.solve(basis.gram, basis.traces_left)
    return TraceRepresenter(form=form, proj_h1=coeffs)


def project_h1(f, basis: EigenBasis) -> np.ndarray:
    """H1-orthogonal projection coefficients of f on the basis span.

    Solves gram @ kappa = [<f, phi_n>_H1]; for the Neumann basis the Gram
    matrix is the identity and this reduces to plain inner products.
    """
    rhs = np.array([h1_inner(f, m) for m in basis.modes])
    try:
        return np.linalg.solve(basis.gram, rhs)
    except np.linalg.LinAlgError as exc:
        raise SpectralError(f"singular Gram matrix: {exc}") from exc


def reconstruct_on_basis(coeffs, basis: EigenBasis) -> ParametricForm:
    """Linear combination sum_n coeffs[n] * phi_n as a parametric form."""
    out = ParametricForm.zero()
    for c, m in zip(coeffs, basis.modes):
        out = out + m.scaled(float(c))
    return out
