"""Closed-form function descriptors on [0, 1] with exact H1 inner products.

Every analytic function handled by the toolkit (trigonometric eigenmodes,
hyperbolic boundary lifters, polynomials, and their combinations) is stored
as a finite sum of terms ``coef * x**power * exp(rate * x)`` with complex
coefficient and rate.  The family is closed under differentiation and
pointwise products, so L2 and H1 inner products on (0, 1) reduce to the
primitive integrals ``int_0^1 x**m exp(a x) dx``, which have stable closed
forms.  Real functions are built from conjugate exponential pairs; inner
products return the real part.

Functions known only through samples are wrapped in :class:`GridFunction`
and integrated with composite Simpson quadrature instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import simpson


def _power_exp_integral(power: int, rate: complex) -> complex:
    """Integral of x**power * exp(rate*x) over [0, 1].

    Uses the series sum_n rate**n / (n! (n + power + 1)) for small |rate|
    (the recurrence loses accuracy there) and the upward recurrence
    I_m = (exp(rate) - m I_{m-1}) / rate otherwise.
    """
    if power < 0:
        raise ValueError("power must be nonnegative")
    a = complex(rate)
    if abs(a) <= max(4.0, float(power)):
        total = 0.0 + 0.0j
        term = 1.0 + 0.0j  # a**n / n!
        for n in range(0, 60):
            contrib = term / (n + power + 1)
            total += contrib
            term *= a / (n + 1)
            if abs(term) < 1e-18 * max(1.0, abs(total)):
                break
        return total
    ea = np.exp(a)
    val = (ea - 1.0) / a
    for m in range(1, power + 1):
        val = (ea - m * val) / a
    return val


@dataclass(frozen=True)
class Term:
    coef: complex
    power: int
    rate: complex


class ParametricForm:
    """Finite sum of ``coef * x**power * exp(rate x)`` terms."""

    __slots__ = ("terms",)

    def __init__(self, terms):
        merged: dict[tuple[int, complex], complex] = {}
        for t in terms:
            key = (t.power, complex(t.rate))
            merged[key] = merged.get(key, 0.0 + 0.0j) + complex(t.coef)
        self.terms = tuple(
            Term(c, p, r) for (p, r), c in sorted(merged.items(), key=lambda kv: (kv[0][0], kv[0][1].real, kv[0][1].imag)) if c != 0
        )

    # -- constructors -------------------------------------------------
    @staticmethod
    def zero() -> "ParametricForm":
        return ParametricForm(())

    @staticmethod
    def constant(value: float) -> "ParametricForm":
        return ParametricForm((Term(complex(value), 0, 0.0 + 0.0j),))

    @staticmethod
    def monomial(power: int, coef: float = 1.0) -> "ParametricForm":
        return ParametricForm((Term(complex(coef), power, 0.0 + 0.0j),))

    @staticmethod
    def cosine(freq: float, amplitude: float = 1.0) -> "ParametricForm":
        """amplitude * cos(freq * x)."""
        half = 0.5 * amplitude
        return ParametricForm((Term(half, 0, 1j * freq), Term(half, 0, -1j * freq)))

    @staticmethod
    def sine(freq: float, amplitude: float = 1.0) -> "ParametricForm":
        h = amplitude / 2j
        return ParametricForm((Term(h, 0, 1j * freq), Term(-h, 0, -1j * freq)))

    @staticmethod
    def cosh(rate: float, amplitude: float = 1.0) -> "ParametricForm":
        half = 0.5 * amplitude
        return ParametricForm((Term(half, 0, complex(rate)), Term(half, 0, complex(-rate))))

    @staticmethod
    def sinh(rate: float, amplitude: float = 1.0) -> "ParametricForm":
        half = 0.5 * amplitude
        return ParametricForm((Term(half, 0, complex(rate)), Term(-half, 0, complex(-rate))))

    # -- algebra -------------------------------------------------------
    def __add__(self, other: "ParametricForm") -> "ParametricForm":
        return ParametricForm(self.terms + other.terms)

    def __sub__(self, other: "ParametricForm") -> "ParametricForm":
        return self + other.scaled(-1.0)

    def scaled(self, factor: float) -> "ParametricForm":
        return ParametricForm(tuple(Term(t.coef * factor, t.power, t.rate) for t in self.terms))

    def derivative(self) -> "ParametricForm":
        out = []
        for t in self.terms:
            if t.power > 0:
                out.append(Term(t.coef * t.power, t.power - 1, t.rate))
            if t.rate != 0:
                out.append(Term(t.coef * t.rate, t.power, t.rate))
        return ParametricForm(tuple(out))

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        val = np.zeros(x.shape, dtype=complex)
        for t in self.terms:
            val += t.coef * x**t.power * np.exp(t.rate * x)
        return val.real if val.shape else float(val.real)

    # -- serialization -------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "kind": "parametric",
            "coefficients": [
                [t.coef.real, t.coef.imag, t.power, t.rate.real, t.rate.imag] for t in self.terms
            ],
        }

    @staticmethod
    def from_dict(data: dict) -> "ParametricForm":
        if data.get("kind") != "parametric":
            raise ValueError(f"not a parametric descriptor: {data.get('kind')!r}")
        terms = tuple(
            Term(complex(cr, ci), int(p), complex(rr, ri)) for cr, ci, p, rr, ri in data["coefficients"]
        )
        return ParametricForm(terms)

    def __repr__(self) -> str:
        return f"ParametricForm({len(self.terms)} terms)"


class GridFunction:
    """Function known through samples on a uniform grid over [0, 1]."""

    __slots__ = ("values",)

    def __init__(self, values):
        values = np.asarray(values, dtype=float)
        if values.ndim != 1 or values.size < 3:
            raise ValueError("grid function needs a 1-D array of at least 3 samples")
        self.values = values

    @property
    def x(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.values.size)

    def __call__(self, x):
        return np.interp(np.asarray(x, dtype=float), self.x, self.values)

    def to_dict(self) -> dict:
        return {"kind": "grid", "coefficients": self.values.tolist()}


def l2_inner(f, g) -> float:
    """Inner product int_0^1 f g dx, exact for parametric operands."""
    if isinstance(f, ParametricForm) and isinstance(g, ParametricForm):
        total = 0.0 + 0.0j
        for tf in f.terms:
            for tg in g.terms:
                total += tf.coef * tg.coef * _power_exp_integral(tf.power + tg.power, tf.rate + tg.rate)
        return float(total.real)
    fg, gg = _as_grids(f, g)
    return float(simpson(fg.values * gg.values, x=fg.x))


def h1_inner(f, g) -> float:
    """H1(0,1) inner product: int f g + int f' g'.

    Exact (closed form) when both operands are parametric; Simpson
    quadrature with second-order finite-difference derivatives otherwise.
    """
    if isinstance(f, ParametricForm) and isinstance(g, ParametricForm):
        return l2_inner(f, g) + l2_inner(f.derivative(), g.derivative())
    fg, gg = _as_grids(f, g)
    x = fg.x
    df = np.gradient(fg.values, x)
    dg = np.gradient(gg.values, x)
    return float(simpson(fg.values * gg.values + df * dg, x=x))


def h1_norm(f) -> float:
    return math.sqrt(h1_inner(f, f))


def _as_grids(f, g) -> tuple[GridFunction, GridFunction]:
    size = max(
        f.values.size if isinstance(f, GridFunction) else 0,
        g.values.size if isinstance(g, GridFunction) else 0,
        2001,
    )
    x = np.linspace(0.0, 1.0, size)

    def resample(h):
        if isinstance(h, GridFunction):
            return GridFunction(np.interp(x, h.x, h.values)) if h.values.size != size else h
        return GridFunction(h(x))

    return resample(f), resample(g)
