"""TOML experiment configuration: parsing, validation, defaults.

One structured file drives the whole pipeline.  Unknown keys are hard
errors (silent hyperparameter typos are the main reproducibility hazard),
and every validation message carries the dotted path of the offending key.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

try:
    import tomllib  # py >= 3.11
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from .forms import ParametricForm
from .reduction import CoupledSystemSpec, DriftSchedule
from .spectral import RobinParams


class ConfigError(Exception):
    """Invalid configuration (unknown key, bad dimension, parse failure)."""


@dataclass
class SimulationBlock:
    steps: int = 4000
    dt: float | None = None
    S_train: int = 2000
    S_eval: int = 10000
    seed: int = 0
    workers: int = 1


@dataclass
class RiskBlock:
    alpha: float = 0.1
    gamma: float = 1e-3
    kind: str = "cvar"


@dataclass
class OptimizerBlock:
    iterations: int = 1000
    eta: float = 1e-3
    beta_step: float = 1e-2
    box_control: tuple = (-50.0, 50.0)
    box_gain: tuple = (-50.0, 50.0)
    adaptive: bool = False
    eval_every: int = 50
    eval_samples: int = 2000
    frozen_bank: bool = False


@dataclass
class OutputBlock:
    directory: str = "out"
    formats: tuple = ("csv", "json")
    histogram_bins: int = 60
    quantile_levels: tuple = (0.20, 0.40, 0.60, 0.70, 0.80, 0.90, 0.95, 0.99)


@dataclass
class ExperimentConfig:
    system: CoupledSystemSpec
    N: int
    Q: np.ndarray
    G: np.ndarray
    r_ctrl: float
    simulation: SimulationBlock = field(default_factory=SimulationBlock)
    risk: RiskBlock = field(default_factory=RiskBlock)
    optimizer: OptimizerBlock = field(default_factory=OptimizerBlock)
    output: OutputBlock = field(default_factory=OutputBlock)


def _require_keys(block: dict, path: str, known: set[str]):
    for key in block:
        if key not in known:
            raise ConfigError(f"{path}.{key}: unknown key")


def _matrix(block: dict, path: str, key: str, rows: int, cols: int, default=None):
    if key not in block:
        if default is not None:
            return default
        raise ConfigError(f"{path}.{key}: required matrix missing")
    raw = block[key]
    if not isinstance(raw, list) or len(raw) != rows:
        raise ConfigError(f"{path}.{key}: expected {rows} rows")
    out = np.empty((rows, cols))
    for i, row in enumerate(raw):
        if not isinstance(row, list) or len(row) != cols:
            raise ConfigError(f"{path}.{key}: expected {cols} columns")
        try:
            out[i] = [float(v) for v in row]
        except (TypeError, ValueError):
            raise ConfigError(f"{path}.{key}: row {i} holds a non-numeric entry")
    return out


def _vector(block: dict, path: str, key: str, size: int, default=None):
    if key not in block:
        if default is not None:
            return default
        raise ConfigError(f"{path}.{key}: required vector missing")
    raw = block[key]
    if not isinstance(raw, list) or len(raw) != size:
        raise ConfigError(f"{path}.{key}: expected {size} entries")
    try:
        return np.array([float(v) for v in raw])
    except (TypeError, ValueError):
        raise ConfigError(f"{path}.{key}: non-numeric entry")


def _drift(block: dict, path: str, key: str, dim: int) -> DriftSchedule:
    raw = block.get(key)
    if raw is None:
        return DriftSchedule.constant(np.zeros(dim))
    if isinstance(raw, list):
        return DriftSchedule.constant(_vector(block, path, key, dim))
    if isinstance(raw, dict):
        _require_keys(raw, f"{path}.{key}", {"times", "values"})
        times = np.asarray(raw.get("times", [0.0]), dtype=float)
        values = np.asarray(raw.get("values"), dtype=float)
        if values.ndim != 2 or values.shape[1] != dim:
            raise ConfigError(f"{path}.{key}.values: expected rows of {dim} entries")
        try:
            return DriftSchedule(times, values)
        except Exception as exc:
            raise ConfigError(f"{path}.{key}: {exc}")
    raise ConfigError(f"{path}.{key}: expected a vector or a times/values table")


def _profile(block: dict, path: str, key: str) -> ParametricForm:
    raw = block.get(key, {"kind": "zero"})
    if not isinstance(raw, dict) or "kind" not in raw:
        raise ConfigError(f"{path}.{key}: expected a table with a 'kind' field")
    kind = raw["kind"]
    if kind == "zero":
        _require_keys(raw, f"{path}.{key}", {"kind"})
        return ParametricForm.zero()
    if kind == "constant":
        _require_keys(raw, f"{path}.{key}", {"kind", "value"})
        return ParametricForm.constant(float(raw.get("value", 0.0)))
    if kind == "cosine":
        # amplitude * cos(frequency * pi * x); Neumann-compatible for integer frequency
        _require_keys(raw, f"{path}.{key}", {"kind", "amplitude", "frequency"})
        return ParametricForm.cosine(float(raw.get("frequency", 1.0)) * math.pi, float(raw.get("amplitude", 1.0)))
    if kind == "cosine_sum":
        _require_keys(raw, f"{path}.{key}", {"kind", "amplitudes"})
        out = ParametricForm.zero()
        for n, a in enumerate(raw.get("amplitudes", []), start=1):
            out = out + ParametricForm.cosine(n * math.pi, float(a))
        return out
    if kind == "parametric":
        _require_keys(raw, f"{path}.{key}", {"kind", "coefficients"})
        return ParametricForm.from_dict(raw)
    raise ConfigError(f"{path}.{key}.kind: unknown profile kind {kind!r}")


def parse_config(text: str) -> ExperimentConfig:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"TOML parse error: {exc}")

    _require_keys(doc, "config", {"system", "reduction", "simulation", "cost", "risk", "optimizer", "output"})
    if "system" not in doc:
        raise ConfigError("system: required block missing")

    sys_b = doc["system"]
    _require_keys(
        sys_b,
        "system",
        {"d", "A", "B", "C", "D", "M", "c", "beta0", "beta1", "mu", "T", "X0", "V0", "sigma", "r", "u0"},
    )
    d = int(sys_b.get("d", 0))
    if d < 1:
        raise ConfigError("system.d: state dimension must be a positive integer")
    A = _matrix(sys_b, "system", "A", d, d)
    C = _matrix(sys_b, "system", "C", d, d, default=np.zeros((d, d)))
    B = _vector(sys_b, "system", "B", d, default=np.zeros(d))
    D_ = _vector(sys_b, "system", "D", d, default=np.zeros(d))
    M_ = _vector(sys_b, "system", "M", d, default=np.zeros(d))
    X0 = _vector(sys_b, "system", "X0", d, default=np.zeros(d))
    T = float(sys_b.get("T", 1.0))
    try:
        robin = RobinParams(
            beta0=float(sys_b.get("beta0", 0.0)),
            beta1=float(sys_b.get("beta1", 0.0)),
            c=float(sys_b.get("c", 0.0)),
            mu=float(sys_b["mu"]) if "mu" in sys_b else None,
        )
    except ValueError as exc:
        raise ConfigError(f"system: {exc}")
    red_b = doc.get("reduction", {})
    _require_keys(red_b, "reduction", {"N", "mu"})
    N = int(red_b.get("N", 3))
    if N < 0:
        raise ConfigError("reduction.N: must be nonnegative")
    if "mu" in red_b:
        try:
            robin = RobinParams(robin.beta0, robin.beta1, robin.c, float(red_b["mu"]))
        except ValueError as exc:
            raise ConfigError(f"reduction.mu: {exc}")

    try:
        system = CoupledSystemSpec(
            A=A,
            B=B,
            C=C,
            D=D_,
            M=M_,
            r_drift=_drift(sys_b, "system", "r", d),
            sigma_drift=_drift(sys_b, "system", "sigma", d),
            robin=robin,
            T=T,
            X0=X0,
            u0=_profile(sys_b, "system", "u0"),
            V0=float(sys_b.get("V0", 0.0)),
        )
    except ConfigError:
        raise
    except Exception as exc:
        raise ConfigError(f"system: {exc}")

    cost_b = doc.get("cost", {})
    _require_keys(cost_b, "cost", {"c_q", "Q", "G", "r_ctrl"})
    if "Q" in cost_b and "c_q" in cost_b:
        raise ConfigError("cost: give either Q or c_q, not both")
    if "Q" in cost_b:
        Q = _matrix(cost_b, "cost", "Q", d, d)
    else:
        Q = float(cost_b.get("c_q", 1.0)) * np.eye(d)
    G = _matrix(cost_b, "cost", "G", d, d, default=np.zeros((d, d)))
    r_ctrl = float(cost_b.get("r_ctrl", 1.0))
    if r_ctrl <= 0:
        raise ConfigError("cost.r_ctrl: must be positive")

    sim_b = doc.get("simulation", {})
    _require_keys(sim_b, "simulation", {"dt", "steps", "S_train", "S_eval", "seed", "workers"})
    if "dt" in sim_b and "steps" in sim_b:
        raise ConfigError("simulation: give either dt or steps, not both")
    if "dt" in sim_b:
        dt = float(sim_b["dt"])
        if dt <= 0:
            raise ConfigError("simulation.dt: must be positive")
        steps = int(round(T / dt))
    else:
        steps = int(sim_b.get("steps", 4000))
    if steps < 1:
        raise ConfigError("simulation.steps: must be at least 1")
    simulation = SimulationBlock(
        steps=steps,
        dt=T / steps,
        S_train=int(sim_b.get("S_train", 2000)),
        S_eval=int(sim_b.get("S_eval", 10000)),
        seed=int(sim_b.get("seed", 0)),
        workers=int(sim_b.get("workers", 1)),
    )
    if simulation.S_train < 1 or simulation.S_eval < 1:
        raise ConfigError("simulation.S_train/S_eval: must be positive")
    if not (0 <= simulation.seed < 2**63):
        raise ConfigError("simulation.seed: must be a nonnegative 63-bit integer")
    if simulation.workers < 1:
        raise ConfigError("simulation.workers: must be at least 1")

    risk_b = doc.get("risk", {})
    _require_keys(risk_b, "risk", {"alpha", "gamma", "kind"})
    try:
        risk = RiskBlock(
            alpha=float(risk_b.get("alpha", 0.1)),
            gamma=float(risk_b.get("gamma", 1e-3)),
            kind=risk_b.get("kind", "cvar"),
        )
        from .risk import RiskSpec

        RiskSpec(risk.kind, risk.alpha, risk.gamma)
    except ValueError as exc:
        raise ConfigError(f"risk: {exc}")

    opt_b = doc.get("optimizer", {})
    _require_keys(
        opt_b,
        "optimizer",
        {"iterations", "eta", "beta_step", "box_control", "box_gain", "adaptive", "eval_every", "eval_samples", "frozen_bank"},
    )
    box_c = opt_b.get("box_control", [-50.0, 50.0])
    box_g = opt_b.get("box_gain", [-50.0, 50.0])
    for name, box in (("box_control", box_c), ("box_gain", box_g)):
        if not (isinstance(box, list) and len(box) == 2 and box[0] < box[1]):
            raise ConfigError(f"optimizer.{name}: expected [lo, hi] with lo < hi")
    optimizer = OptimizerBlock(
        iterations=int(opt_b.get("iterations", 1000)),
        eta=float(opt_b.get("eta", 1e-3)),
        beta_step=float(opt_b.get("beta_step", 1e-2)),
        box_control=(float(box_c[0]), float(box_c[1])),
        box_gain=(float(box_g[0]), float(box_g[1])),
        adaptive=bool(opt_b.get("adaptive", False)),
        eval_every=int(opt_b.get("eval_every", 50)),
        eval_samples=int(opt_b.get("eval_samples", 2000)),
        frozen_bank=bool(opt_b.get("frozen_bank", False)),
    )
    if optimizer.iterations < 0:
        raise ConfigError("optimizer.iterations: must be nonnegative")

    out_b = doc.get("output", {})
    _require_keys(out_b, "output", {"directory", "formats", "histogram_bins", "quantile_levels"})
    levels = tuple(float(v) for v in out_b.get("quantile_levels", OutputBlock.quantile_levels))
    if any(not (0 < v < 1) for v in levels) or any(b <= a for a, b in zip(levels, levels[1:])):
        raise ConfigError("output.quantile_levels: must be strictly increasing in (0, 1)")
    output = OutputBlock(
        directory=out_b.get("directory", "out"),
        formats=tuple(out_b.get("formats", ["csv", "json"])),
        histogram_bins=int(out_b.get("histogram_bins", 60)),
        quantile_levels=levels,
    )
    if output.histogram_bins < 1:
        raise ConfigError("output.histogram_bins: must be positive")

    return ExperimentConfig(
        system=system,
        N=N,
        Q=Q,
        G=G,
        r_ctrl=r_ctrl,
        simulation=simulation,
        risk=risk,
        optimizer=optimizer,
        output=output,
    )


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "r") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}")
    return parse_config(text)
