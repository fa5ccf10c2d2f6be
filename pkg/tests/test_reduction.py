import math

import numpy as np
import pytest

from riskpde.forms import ParametricForm
from riskpde import spectral as sp
from riskpde.reduction import (
    AssemblyError,
    CoupledSystemSpec,
    DriftSchedule,
    ReducedModel,
    assemble_cost,
    assemble_reduced,
    reconstruct_state,
)


NEUMANN = sp.RobinParams(0.0, 0.0, c=0.2, mu=1.2)
A_BENCH = np.array([[0.6, 0.4], [0.0, 0.4]])


def make_spec(robin=NEUMANN, A=None, B=(0.0, 1.0), C=None, D=(0.0, 0.0), M=(0.0, 0.0),
              X0=(0.0, 0.0), V0=0.0, u0=None, sigma=(0.05, 0.05), r=(0.0, 0.0), T=4.0):
    return CoupledSystemSpec(
        A=A_BENCH if A is None else A,
        B=np.asarray(B, dtype=float),
        C=np.diag([0.1, 0.1]) if C is None else C,
        D=np.asarray(D, dtype=float),
        M=np.asarray(M, dtype=float),
        r_drift=DriftSchedule.constant(np.asarray(r, dtype=float)),
        sigma_drift=DriftSchedule.constant(np.asarray(sigma, dtype=float)),
        robin=robin,
        T=T,
        X0=np.asarray(X0, dtype=float),
        u0=ParametricForm.zero() if u0 is None else u0,
        V0=V0,
    )


def spectral_data(robin, N):
    basis = sp.solve_eigenpairs(robin, N)
    lifters = (sp.solve_lifter(robin, sp.CONTROL_SIDE, basis), sp.solve_lifter(robin, sp.STATE_SIDE, basis))
    return basis, lifters, sp.trace_representer(basis)


def compatible_u0(robin, v0, mx0):
    # the lifters carry exactly the Robin residuals (v0 at x=1, mx0 at x=0)
    ctrl = sp.solve_lifter(robin, sp.CONTROL_SIDE)
    state = sp.solve_lifter(robin, sp.STATE_SIDE)
    return ctrl.form.scaled(v0) + state.form.scaled(mx0)


def assemble(spec, N, robin=None, **kw):
    basis, lifters, rep = spectral_data(robin or spec.robin, N)
    return assemble_reduced(spec, basis, lifters, rep, N, **kw)


class TestAssembly:
    def test_bench_generator_block(self):
        model = assemble(make_spec(), 3)
        lam = np.array([0.0, math.pi**2, (2 * math.pi) ** 2, (3 * math.pi) ** 2])
        diag = np.diag(model.generator)
        assert np.abs(diag[:3]).max() == 0.0
        assert np.abs(np.abs(diag[3:]) - lam).max() < 1e-10
        assert np.all(diag[3:] <= 0.0)  # modes decay under the simulated dynamics

    def test_boundary_input_row(self):
        model = assemble(make_spec(), 3)
        # the integrated-input coordinate obeys dY = mu Y dt + U dt
        assert model.A_N[2, 2] == pytest.approx(1.2)
        assert model.B_N[2] == 1.0
        assert np.abs(model.A_N[2, [0, 1, 3, 4, 5, 6]]).max() == 0.0

    def test_decoupled_state_block(self):
        spec = make_spec(B=(0.0, 0.0), D=(0.0, 0.0), M=(0.0, 0.0))
        model = assemble(spec, 2)
        assert np.abs(model.A_N[:2, :2] - spec.A).max() == 0.0
        assert np.abs(model.A_N[:2, 2:]).max() == 0.0
        assert np.abs(model.C_N[:2, :2] - spec.C).max() == 0.0
        assert np.abs(model.C_N[:2, 2:]).max() == 0.0

    def test_mode_rows_vanish_without_coupling(self):
        model = assemble(make_spec(M=(0.0, 0.0)), 3)
        n = model.n_aug
        # with M = 0 the shifted-state rows only keep reaction and input terms
        off_diag = model.A_N[3:, :].copy()
        off_diag[np.arange(4), 3 + np.arange(4)] -= NEUMANN.c
        assert np.abs(off_diag).max() < 1e-14
        assert np.abs(model.C_N[3:, :]).max() == 0.0
        assert np.abs(model.B_N[3:] + sp.project_h1(
            sp.solve_lifter(NEUMANN, sp.CONTROL_SIDE).form, sp.solve_eigenpairs(NEUMANN, 3)
        )).max() < 1e-12
        assert n == 7

    def test_full_coupling_rows(self):
        robin = sp.RobinParams(0.7, 0.5, c=0.1, mu=1.1)
        spec = make_spec(robin=robin, D=(0.2, 0.1), M=(0.5, 0.5), X0=(1.0, -1.0))
        basis, lifters, rep = spectral_data(robin, 2)
        model = assemble_reduced(spec, basis, lifters, rep, 2)
        ctrl, state = lifters
        p_state = sp.project_h1(state.form, basis)
        MB = float(spec.M @ spec.B)
        # substitution-derived signs
        assert np.allclose(model.A_N[:2, :2], spec.A + state.value_at_0 * np.outer(spec.B, spec.M), atol=1e-13)
        assert np.allclose(model.A_N[:2, 2], ctrl.value_at_0 * spec.B, atol=1e-13)
        assert np.allclose(model.A_N[:2, 3:], np.outer(spec.B, basis.traces_left), atol=1e-13)
        row = spec.M @ spec.A + MB * state.value_at_0 * spec.M - robin.mu * spec.M
        assert np.allclose(model.A_N[3:, :2], -np.outer(p_state, row), atol=1e-13)
        assert np.allclose(
            model.A_N[3:, 3:], robin.c * np.eye(3) - MB * np.outer(p_state, basis.traces_left), atol=1e-13
        )

    def test_initial_state_projection(self):
        u0 = ParametricForm.cosine(math.pi, 2.0)
        spec = make_spec(u0=u0)
        basis, lifters, rep = spectral_data(NEUMANN, 3)
        model = assemble_reduced(spec, basis, lifters, rep, 3)
        assert np.abs(model.Z0[:3]).max() == 0.0
        expected = sp.project_h1(u0, basis)
        assert np.abs(model.Z0[3:] - expected).max() < 1e-12

    def test_robin_mismatch_rejected(self):
        spec = make_spec()
        basis, lifters, rep = spectral_data(sp.RobinParams(1.0, 1.0, c=0.2, mu=1.2), 2)
        with pytest.raises(AssemblyError):
            assemble_reduced(spec, basis, lifters, rep, 2)

    def test_incompatible_initial_profile_rejected(self):
        # cos(pi x /2) has derivative -pi/2 at x=1, violating the V0 = 0 condition
        with pytest.raises(AssemblyError):
            make_spec(u0=ParametricForm.cosine(math.pi / 2.0))


class TestLinearityAndNesting:
    def test_assembly_additive_in_system_data(self):
        # The map (A,B,C,D,r,sigma) -> matrices is affine; differences from the
        # zero assembly must add exactly.  M and the rod parameters are shared
        # (the coupling is bilinear in (B, M) and (D, M)).
        rng = np.random.default_rng(7)
        robin = sp.RobinParams(0.4, 0.9, c=0.1, mu=0.9)
        basis, lifters, rep = spectral_data(robin, 2)
        M_row = (0.3, -0.2)

        mx0 = float(np.dot(M_row, (1.0, -1.5)))
        u0 = compatible_u0(robin, 0.0, mx0)

        def rand_spec():
            return make_spec(
                robin=robin,
                A=rng.standard_normal((2, 2)),
                B=rng.standard_normal(2),
                C=rng.standard_normal((2, 2)),
                D=rng.standard_normal(2),
                M=M_row,
                sigma=rng.standard_normal(2),
                r=rng.standard_normal(2),
                X0=(1.0, -1.5),
                u0=u0,
            )

        s1, s2 = rand_spec(), rand_spec()
        s_sum = make_spec(
            robin=robin, A=s1.A + s2.A, B=s1.B + s2.B, C=s1.C + s2.C, D=s1.D + s2.D, M=M_row,
            sigma=s1.sigma_drift.values[0] + s2.sigma_drift.values[0],
            r=s1.r_drift.values[0] + s2.r_drift.values[0], X0=(1.0, -1.5), u0=u0,
        )
        s_zero = make_spec(robin=robin, A=np.zeros((2, 2)), B=(0, 0), C=np.zeros((2, 2)), D=(0, 0),
                           M=M_row, sigma=(0, 0), r=(0, 0), X0=(1.0, -1.5), u0=u0)
        models = {k: assemble_reduced(s, basis, lifters, rep, 2)
                  for k, s in (("1", s1), ("2", s2), ("sum", s_sum), ("0", s_zero))}
        for attr in ("A_N", "B_N", "C_N"):
            delta = lambda k: getattr(models[k], attr) - getattr(models["0"], attr)
            assert np.abs(delta("sum") - (delta("1") + delta("2"))).max() < 1e-12
        for attr in ("r_N", "sigma_N"):
            delta = lambda k: getattr(models[k], attr).values - getattr(models["0"], attr).values
            assert np.abs(delta("sum") - (delta("1") + delta("2"))).max() < 1e-12

    def test_refinement_nesting_neumann(self):
        spec = make_spec(M=(0.1, 0.1), X0=(1.0, -1.0), u0=ParametricForm.cosine(math.pi))
        coarse = assemble(spec, 3)
        fine = assemble(spec, 6)
        nc = coarse.n_aug
        assert np.abs(np.diag(fine.generator)[:nc] - np.diag(coarse.generator)).max() < 1e-10
        assert np.abs(fine.A_N[:nc, :nc] - coarse.A_N).max() < 1e-10
        assert np.abs(fine.B_N[:nc] - coarse.B_N).max() < 1e-10
        assert np.abs(fine.C_N[:nc, :nc] - coarse.C_N).max() < 1e-10
        assert np.abs(fine.Z0[:nc] - coarse.Z0).max() < 1e-10


class TestCost:
    def test_zero_cost_keeps_only_control_weight(self):
        basis = sp.solve_eigenpairs(NEUMANN, 3)
        Q_N, G_N, r = assemble_cost(np.zeros((2, 2)), np.zeros((2, 2)), 3.0, basis, 3)
        expected = np.zeros((7, 7))
        expected[2, 2] = 3.0
        assert np.array_equal(Q_N, expected)
        assert np.array_equal(G_N, np.zeros((7, 7)))

    def test_bench_cost_diagonal(self):
        basis = sp.solve_eigenpairs(NEUMANN, 3)
        Q_N, G_N, _ = assemble_cost(np.eye(2), np.zeros((2, 2)), 3.0, basis, 3)
        assert np.array_equal(np.diag(Q_N), np.array([1.0, 1.0, 3.0, 0, 0, 0, 0]))

    def test_terminal_block(self):
        basis = sp.solve_eigenpairs(NEUMANN, 2)
        _, G_N, _ = assemble_cost(np.zeros((2, 2)), np.eye(2), 1.0, basis, 2)
        assert np.array_equal(G_N[:2, :2], np.eye(2))
        assert np.abs(G_N[2:, :]).max() == 0.0

    def test_psd_preserved(self):
        rng = np.random.default_rng(11)
        basis = sp.solve_eigenpairs(NEUMANN, 2)
        for _ in range(5):
            W = rng.standard_normal((2, 2))
            Q = W @ W.T
            W2 = rng.standard_normal((2, 2))
            G = W2 @ W2.T
            Q_N, G_N, _ = assemble_cost(Q, G, 0.5, basis, 2)
            assert np.linalg.eigvalsh(Q_N).min() >= -1e-12
            assert np.linalg.eigvalsh(G_N).min() >= -1e-12

    def test_indefinite_rejected(self):
        basis = sp.solve_eigenpairs(NEUMANN, 1)
        with pytest.raises(AssemblyError):
            assemble_cost(np.array([[1.0, 0.0], [0.0, -0.5]]), np.zeros((2, 2)), 1.0, basis, 1)


class TestReconstruction:
    def test_zero_coordinates_give_zero_profile(self):
        basis, lifters, _ = spectral_data(NEUMANN, 3)
        rec = reconstruct_state(np.zeros(7), basis, lifters, m_row=np.zeros(2))
        x = np.linspace(0, 1, 33)
        assert np.abs(rec.profile(x)).max() == 0.0

    def test_pure_mode_reconstruction(self):
        basis, lifters, _ = spectral_data(NEUMANN, 3)
        z = np.zeros(7)
        z[3] = 1.0
        rec = reconstruct_state(z, basis, lifters, m_row=np.zeros(2))
        x = np.linspace(0, 1, 33)
        assert np.abs(rec.profile(x) - 1.0).max() < 1e-12  # normalized constant mode

    def test_projection_round_trip(self):
        robin = sp.RobinParams(0.6, 0.2, c=0.1, mu=1.0)
        basis, lifters, rep = spectral_data(robin, 3)
        rng = np.random.default_rng(4)
        z = rng.standard_normal(7)
        m_row = np.array([0.4, -0.3])
        rec = reconstruct_state(z, basis, lifters, m_row=m_row)
        shifted = rec.profile - lifters[0].form.scaled(rec.V) - lifters[1].form.scaled(float(m_row @ rec.X))
        again = sp.project_h1(shifted, basis)
        assert np.abs(again - z[3:]).max() < 1e-12


class TestSerialization:
    def test_round_trip(self, tmp_path):
        spec = make_spec(M=(0.1, 0.2), X0=(1.0, 2.0), u0=compatible_u0(NEUMANN, 0.0, 0.5))
        model = assemble(spec, 2, Q=np.eye(2), G=0.5 * np.eye(2), r_ctrl=3.0)
        path = tmp_path / "model.json"
        model.save(path)
        loaded = ReducedModel.load(path)
        for attr in ("A_N", "B_N", "C_N", "Q_N", "G_N", "Z0", "generator", "eigenvalues"):
            assert np.array_equal(getattr(model, attr), getattr(loaded, attr))
        assert loaded.r_ctrl == model.r_ctrl
        assert loaded.robin == model.robin
        assert np.array_equal(loaded.r_N.values, model.r_N.values)


class TestDriftSchedule:
    def test_piecewise_lookup(self):
        sched = DriftSchedule(np.array([0.0, 1.0, 2.0]), np.array([[1.0], [2.0], [3.0]]))
        assert sched.at(0.5)[0] == 1.0
        assert sched.at(1.0)[0] == 2.0
        assert np.array_equal(sched.on_grid(np.array([0.0, 0.9, 1.5, 2.5]))[:, 0], [1, 1, 2, 3])

    def test_validation(self):
        with pytest.raises(AssemblyError):
            DriftSchedule(np.array([0.5]), np.array([[1.0]]))
        with pytest.raises(AssemblyError):
            DriftSchedule(np.array([0.0, 0.0]), np.array([[1.0], [2.0]]))
