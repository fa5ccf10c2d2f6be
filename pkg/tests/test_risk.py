import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from riskpde.risk import RiskSpec, cvar_estimate, project_risk_weights, risk_envelope_violation


class TestCvarEstimate:
    def test_top_fraction_mean(self):
        costs = np.arange(1.0, 11.0)
        # sort-and-average oracle: mean of the two largest
        assert cvar_estimate(costs, 0.2) == pytest.approx(9.5, abs=1e-12)

    def test_constant_costs_for_any_alpha(self):
        costs = np.full(37, 4.2)
        for alpha in (0.05, 0.3, 0.77, 1.0):
            assert cvar_estimate(costs, alpha) == pytest.approx(4.2, abs=1e-12)

    def test_alpha_one_is_mean(self):
        rng = np.random.default_rng(0)
        costs = rng.standard_normal(101)
        assert cvar_estimate(costs, 1.0) == pytest.approx(costs.mean(), abs=1e-12)

    def test_fractional_boundary_weight(self):
        costs = np.array([0.0, 1.0, 2.0, 3.0])
        # alpha*S = 1.2: cap 1/0.3 on the max, remaining mass 4 - 1/0.3 on the next
        expected = ((1 / 0.3) * 3.0 + (4 - 1 / 0.3) * 2.0) / 4.0
        assert cvar_estimate(costs, 0.3) == pytest.approx(expected, abs=1e-12)

    def test_empty_sample_rejected(self):
        with pytest.raises(ValueError):
            cvar_estimate(np.array([]), 0.5)


class TestProjection:
    def test_feasible_point_unchanged(self):
        y = np.array([0.5, 1.5, 1.0, 1.0])
        out = project_risk_weights(y, 0.5).zeta
        assert np.abs(out - y).max() < 1e-10

    def test_uniform_shift(self):
        out = project_risk_weights(np.zeros(4), 0.5).zeta
        assert np.abs(out - 1.0).max() < 1e-10

    def test_cap_saturation(self):
        out = project_risk_weights(np.array([10.0, 0.0, 0.0, 0.0]), 0.25).zeta
        assert np.abs(out - np.array([4.0, 0.0, 0.0, 0.0])).max() < 1e-10

    @pytest.mark.parametrize("alpha", [0.1, 0.25, 0.5, 1.0])
    def test_matches_quadratic_program(self, alpha):
        cvxpy = pytest.importorskip("cvxpy")
        rng = np.random.default_rng(5)
        for _ in range(3):
            y = 3.0 * rng.standard_normal(12)
            ours = project_risk_weights(y, alpha).zeta
            z = cvxpy.Variable(12)
            prob = cvxpy.Problem(
                cvxpy.Minimize(cvxpy.sum_squares(z - y)),
                [cvxpy.sum(z) == 12.0, z >= 0, z <= 1.0 / alpha],
            )
            prob.solve()
            assert np.abs(ours - z.value).max() < 1e-6

    def test_dual_identity_with_sorted_estimate(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            S = int(rng.integers(3, 200))
            alpha = float(rng.uniform(0.05, 1.0))
            costs = rng.standard_normal(S) * rng.uniform(0.1, 10)
            zeta = project_risk_weights(1e12 * costs, alpha).zeta
            dual_value = float(np.mean(zeta * costs))
            assert abs(dual_value - cvar_estimate(costs, alpha)) < 1e-8


finite_vecs = st.lists(
    st.floats(min_value=-50, max_value=50, allow_nan=False, allow_infinity=False), min_size=2, max_size=40
)
alphas = st.floats(min_value=0.05, max_value=1.0, allow_nan=False)


@settings(max_examples=100, deadline=None)
@given(finite_vecs, alphas)
def test_projection_feasible_and_idempotent(y, alpha):
    y = np.asarray(y)
    w = project_risk_weights(y, alpha)
    assert risk_envelope_violation(w) < 1e-9
    again = project_risk_weights(w.zeta, alpha).zeta
    assert np.abs(again - w.zeta).max() < 1e-9


@settings(max_examples=60, deadline=None)
@given(finite_vecs, alphas, st.integers(min_value=0, max_value=2**31))
def test_projection_nonexpansive(y, alpha, seed):
    y = np.asarray(y)
    other = y + np.random.default_rng(seed).standard_normal(y.size)
    pa = project_risk_weights(y, alpha).zeta
    pb = project_risk_weights(other, alpha).zeta
    assert np.linalg.norm(pa - pb) <= np.linalg.norm(y - other) + 1e-9


class TestRiskSpec:
    def test_expectation_has_unit_alpha(self):
        spec = RiskSpec("expectation", alpha=0.3)
        assert spec.effective_alpha == 1.0

    def test_invalid_values_rejected(self):
        with pytest.raises(ValueError):
            RiskSpec("cvar", alpha=0.0)
        with pytest.raises(ValueError):
            RiskSpec("entropic", alpha=0.5)
        with pytest.raises(ValueError):
            RiskSpec("cvar", alpha=0.5, gamma=-1.0)
