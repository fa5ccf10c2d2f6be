import math
import warnings

import numpy as np
import pytest
from scipy.linalg import solve_continuous_are

from riskpde.forms import ParametricForm
from riskpde import spectral as sp
from riskpde.reduction import CoupledSystemSpec, DriftSchedule, assemble_reduced
from riskpde.riccati import RiccatiError, baseline_policy, solve_gare, solve_stochastic_are
from riskpde.sde import NoiseBank, TimeGrid, FeedbackPolicy, simulate_costs


def bench_model(X0=(1.0, 1.0)):
    robin = sp.RobinParams(0.0, 0.0, c=0.2, mu=1.2)
    basis = sp.solve_eigenpairs(robin, 3)
    lifters = (sp.solve_lifter(robin, sp.CONTROL_SIDE), sp.solve_lifter(robin, sp.STATE_SIDE))
    spec = CoupledSystemSpec(
        A=np.array([[0.6, 0.4], [0.0, 0.4]]), B=[0.0, 1.0], C=np.diag([0.1, 0.1]), D=[0.0, 0.0],
        M=[0.0, 0.0], r_drift=DriftSchedule.constant(np.zeros(2)),
        sigma_drift=DriftSchedule.constant([0.05, 0.05]), robin=robin, T=4.0,
        X0=np.asarray(X0, dtype=float), u0=ParametricForm.zero(), V0=0.0,
    )
    return assemble_reduced(spec, basis, lifters, sp.trace_representer(basis), 3,
                            Q=np.eye(2), r_ctrl=3.0)


class TestScalarInstances:
    def test_deterministic_scalar(self):
        # 2p - p^2 + 1 = 0 at the positive root p = 1 + sqrt(2)
        sol = solve_gare(np.array([[1.0]]), [1.0], np.array([[0.0]]), np.array([[1.0]]), 1.0)
        assert abs(sol.P[0, 0] - (1.0 + math.sqrt(2.0))) < 1e-10
        assert abs(sol.K_lq[0] + (1.0 + math.sqrt(2.0))) < 1e-10

    def test_stochastic_scalar(self):
        # p + 1 - p^2 = 0 at the golden ratio
        sol = solve_gare(np.array([[0.0]]), [1.0], np.array([[1.0]]), np.array([[1.0]]), 1.0)
        assert abs(sol.P[0, 0] - (1.0 + math.sqrt(5.0)) / 2.0) < 1e-10


class TestAgainstDeterministicOracle:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_noise_free_matches_care_solver(self, seed):
        rng = np.random.default_rng(seed)
        n = 4
        F = rng.standard_normal((n, n)) - 1.5 * np.eye(n)
        B = rng.standard_normal(n)
        W = rng.standard_normal((n, n))
        Q = W @ W.T + 0.1 * np.eye(n)
        r = 0.7
        sol = solve_gare(F, B, np.zeros((n, n)), Q, r)
        oracle = solve_continuous_are(F, B.reshape(n, 1), Q, np.array([[r]]))
        assert np.abs(sol.P - oracle).max() < 1e-8

    def test_residual_small_on_bench_model(self):
        model = bench_model()
        sol = solve_stochastic_are(model)
        F = model.drift_matrix
        res = F.T @ sol.P + sol.P @ F + model.C_N.T @ sol.P @ model.C_N \
            - np.outer(sol.P @ model.B_N, sol.P @ model.B_N) / model.r_ctrl + model.Q_N
        assert np.linalg.norm(res) < 1e-8
        assert np.linalg.eigvalsh(sol.P).min() > -1e-10


class TestKleinmanNewton:
    def test_value_monotone_after_first_iteration(self):
        model = bench_model()
        sol = solve_stochastic_are(model, keep_iterates=True)
        rng = np.random.default_rng(8)
        for _ in range(5):
            z = rng.standard_normal(model.n_aug)
            vals = [float(z @ P @ z) for P in sol.iterates]
            diffs = np.diff(vals)
            assert np.all(diffs <= 1e-9 * max(1.0, abs(vals[0])))

    def test_unstabilizable_pair_rejected(self):
        # uncontrollable unstable mode: B = 0 on an unstable plant
        with pytest.raises(RiccatiError):
            solve_gare(np.array([[1.0]]), [0.0], np.array([[0.0]]), np.array([[1.0]]), 1.0)


class TestBaselinePolicy:
    def test_wide_boxes_keep_gain(self):
        model = bench_model()
        sol = solve_stochastic_are(model)
        grid = TimeGrid(4.0, 100)
        policy = baseline_policy(sol, grid)
        assert np.array_equal(policy.K, sol.K_lq)
        assert np.abs(policy.v).max() == 0.0
        assert policy.steps == 100

    def test_tight_box_clips_with_warning(self):
        model = bench_model()
        sol = solve_stochastic_are(model)
        grid = TimeGrid(4.0, 50)
        eps = 0.5 * np.abs(sol.K_lq).max()
        box = np.tile(np.array([-eps, eps]), (model.n_aug, 1))
        with pytest.warns(UserWarning, match="clipped"):
            policy = baseline_policy(sol, grid, box_gain=box)
        assert np.abs(policy.K).max() <= eps
        assert np.abs(policy.K).max() == eps

    def test_baseline_beats_zero_policy_in_mean(self):
        model = bench_model()
        sol = solve_stochastic_are(model)
        grid = TimeGrid(4.0, 400)
        bank = NoiseBank(17, 256, grid)
        base = baseline_policy(sol, grid)
        zero = FeedbackPolicy(T=4.0, v=np.zeros(400), K=np.zeros(model.n_aug))
        with warnings.catch_warnings():
            warnings.simplefilter("error")  # the open-loop plant is unstable but finite over T=4
            cb = simulate_costs(model, base, bank, grid)
            cz = simulate_costs(model, zero, bank, grid)
        assert cb.mean() <= cz.mean()
