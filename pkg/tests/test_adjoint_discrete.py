import numpy as np
import pytest

from lbto.adjoint_discrete import (
    DiscreteAdjointSolver,
    ThermalAdjointSolver,
    run_discrete_adjoint,
    thermal_coupling_term,
)
from lbto.boundaries import ThermalBoundarySet
from lbto.cases import build_heat_sink_3d, build_pipe_bend_2d, build_pipe_bend_3d
from lbto.domain import CaseConfig, NodeRole
from lbto.forward import FlowSolver, Status, stream_indices
from lbto.lattice import make_stencil
from lbto.linearized import (
    adjoint_collision,
    collision_jacobian_dense,
    linearized_collision,
)
from lbto.thermal import ThermalSolver

Q9 = make_stencil("D2Q9")


def group_by_role(bset, role):
    for g in bset.groups:
        if g.role == role:
            return g
    raise AssertionError(f"no group with role {role}")


def bend2d(u_in=0.03, n=16, tau=0.8):
    return build_pipe_bend_2d(CaseConfig(tau=tau, u_in=u_in), n=n, port_width=4)


class TestBoundaryMatrices2D:
    def test_velocity_inlet_matrix_matches_printed_form(self):
        case = bend2d()
        bset = FlowSolver(case).bset
        g = group_by_role(bset, NodeRole.INLET_VELOCITY)
        expected = np.array([
            [1, 0, 0, 0, 0, 0, 0, 0, 0],
            [0, 0, 0, 1, 0, 0, 0, 0, 0],
            [0, 0, 1, 0, 0, 0, 0, 0, 0],
            [0, 0, 0, 1, 0, 0, 0, 0, 0],
            [0, 0, 0, 0, 1, 0, 0, 0, 0],
            [0, 0, -0.5, 0, 0.5, 0, 0, 1, 0],
            [0, 0, 0, 0, 0, 0, 1, 0, 0],
            [0, 0, 0, 0, 0, 0, 0, 1, 0],
            [0, 0, 0.5, 0, -0.5, 0, 1, 0, 0],
        ], dtype=float)
        assert np.abs(g.matrix - expected).max() <= 1e-15

    def test_adjoint_inlet_closed_form(self):
        case = bend2d()
        g = group_by_role(FlowSolver(case).bset, NodeRole.INLET_VELOCITY)
        rng = np.random.default_rng(0)
        fc = rng.standard_normal(9)
        out = g.matrix_t @ fc
        assert out[1] == out[5] == out[8] == 0.0
        assert out[0] == pytest.approx(fc[0], abs=1e-15)
        assert out[2] == pytest.approx(fc[2] - 0.5 * fc[5] + 0.5 * fc[8], abs=1e-14)
        assert out[4] == pytest.approx(fc[4] + 0.5 * fc[5] - 0.5 * fc[8], abs=1e-14)
        assert out[3] == pytest.approx(fc[3] + fc[1], abs=1e-14)
        assert out[6] == pytest.approx(fc[6] + fc[8], abs=1e-14)
        assert out[7] == pytest.approx(fc[7] + fc[5], abs=1e-14)

    def test_adjoint_inlet_all_ones(self):
        case = bend2d()
        g = group_by_role(FlowSolver(case).bset, NodeRole.INLET_VELOCITY)
        out = g.matrix_t @ np.ones(9)
        expected = np.array([1, 0, 1, 2, 1, 0, 2, 2, 0], dtype=float)
        assert np.allclose(out, expected, atol=1e-15)

    def test_adjoint_outlet_closed_form(self):
        case = bend2d()
        g = group_by_role(FlowSolver(case).bset, NodeRole.OUTLET_PRESSURE)
        rng = np.random.default_rng(1)
        fc = rng.standard_normal(9)
        out = g.matrix_t @ fc
        y = fc[2] * 2 / 3 + fc[5] / 6 + fc[6] / 6
        assert out[2] == out[5] == out[6] == 0.0
        assert out[0] == pytest.approx(fc[0] - y, abs=1e-14)
        assert out[1] == pytest.approx(
            fc[1] - 2 / 3 * fc[2] - 2 / 3 * fc[5] + 1 / 3 * fc[6], abs=1e-14)
        assert out[3] == pytest.approx(
            fc[3] - 2 / 3 * fc[2] + 1 / 3 * fc[5] - 2 / 3 * fc[6], abs=1e-14)
        assert out[4] == pytest.approx(
            fc[4] - (fc[2] + fc[5] + fc[6]) / 3, abs=1e-14)
        assert out[7] == pytest.approx(
            fc[7] - 4 / 3 * fc[2] + 2 / 3 * fc[5] - 1 / 3 * fc[6], abs=1e-14)
        assert out[8] == pytest.approx(
            fc[8] - 4 / 3 * fc[2] - 1 / 3 * fc[5] + 2 / 3 * fc[6], abs=1e-14)

    def test_adjoint_outlet_all_ones_cancels(self):
        case = bend2d()
        g = group_by_role(FlowSolver(case).bset, NodeRole.OUTLET_PRESSURE)
        out = g.matrix_t @ np.ones(9)
        assert np.abs(out).max() <= 1e-15

    def test_zero_maps_to_zero(self):
        case = bend2d()
        for g in FlowSolver(case).bset.groups:
            assert np.abs(g.matrix_t @ np.zeros(case.stencil.q)).max() == 0.0


class TestBoundaryMatrices3D:
    def test_velocity_inlet_transpose(self):
        case = build_pipe_bend_3d(CaseConfig(tau=0.8, u_in=0.02), n=12, port_width=4)
        g = group_by_role(FlowSolver(case).bset, NodeRole.INLET_VELOCITY)
        rng = np.random.default_rng(2)
        fc = rng.standard_normal(19)
        out = g.matrix_t @ fc
        for k in (1, 7, 9, 11, 13):
            assert out[k] == 0.0
        assert out[2] == pytest.approx(fc[2] + fc[1], abs=1e-14)
        assert out[8] == pytest.approx(fc[8] + fc[9], abs=1e-14)
        assert out[10] == pytest.approx(fc[10] + fc[7], abs=1e-14)
        assert out[12] == pytest.approx(fc[12] + fc[13], abs=1e-14)
        assert out[14] == pytest.approx(fc[14] + fc[11], abs=1e-14)
        for k in (0, 3, 4, 5, 6, 15, 16, 17, 18):
            assert out[k] == pytest.approx(fc[k], abs=1e-14)

    def test_pressure_outlet_transpose_z_face(self):
        case = build_pipe_bend_3d(CaseConfig(tau=0.8, u_in=0.02), n=12, port_width=4)
        g = group_by_role(FlowSolver(case).bset, NodeRole.OUTLET_PRESSURE)
        rng = np.random.default_rng(3)
        fc = rng.standard_normal(19)
        out = g.matrix_t @ fc
        y = (2 * fc[5] + fc[11] + fc[12] + fc[15] + fc[16]) / 3.0
        opp = case.stencil.opposite
        for k in (5, 11, 12, 15, 16):
            assert out[k] == 0.0
        for k in (0, 1, 2, 3, 4, 7, 8, 9, 10):
            assert out[k] == pytest.approx(fc[k] - y / 2.0, abs=1e-13)
        for k in (6, 13, 14, 17, 18):
            assert out[k] == pytest.approx(fc[k] + fc[opp[k]] - y, abs=1e-13)

    def test_pressure_inlet_and_outlet_x_faces(self):
        case = build_heat_sink_3d(CaseConfig(tau=0.8), dims=(12, 8, 8), reynolds=5.0)
        bset = FlowSolver(case).bset
        rng = np.random.default_rng(4)
        fc = rng.standard_normal(19)
        opp = case.stencil.opposite

        g_in = group_by_role(bset, NodeRole.INLET_PRESSURE)
        out = g_in.matrix_t @ fc
        y = (2 * fc[1] + fc[7] + fc[9] + fc[11] + fc[13]) / 3.0
        for k in (1, 7, 9, 11, 13):
            assert out[k] == 0.0
        for k in (0, 3, 4, 5, 6, 15, 16, 17, 18):
            assert out[k] == pytest.approx(fc[k] - y / 2.0, abs=1e-13)
        for k in (2, 8, 10, 12, 14):
            assert out[k] == pytest.approx(fc[k] + fc[opp[k]] - y, abs=1e-13)

        g_out = group_by_role(bset, NodeRole.OUTLET_PRESSURE)
        out = g_out.matrix_t @ fc
        y = (2 * fc[2] + fc[8] + fc[10] + fc[12] + fc[14]) / 3.0
        for k in (2, 8, 10, 12, 14):
            assert out[k] == 0.0
        for k in (0, 3, 4, 5, 6, 15, 16, 17, 18):
            assert out[k] == pytest.approx(fc[k] - y / 2.0, abs=1e-13)
        for k in (1, 7, 9, 11, 13):
            assert out[k] == pytest.approx(fc[k] + fc[opp[k]] - y, abs=1e-13)

    def test_symmetry_transpose(self):
        case = build_heat_sink_3d(CaseConfig(tau=0.8), dims=(12, 8, 8), reynolds=5.0)
        g = group_by_role(FlowSolver(case).bset, NodeRole.SYMMETRY)
        rng = np.random.default_rng(5)
        fc = rng.standard_normal(19)
        out = g.matrix_t @ fc
        for k in g.sets.into:
            assert out[k] == 0.0
            assert out[g.mirror[k]] == pytest.approx(fc[g.mirror[k]] + fc[k], abs=1e-14)


class TestAdjointStreaming:
    def test_transpose_identity_on_random_vectors(self):
        case = bend2d(n=12)
        dims = case.geometry.dims
        rng = np.random.default_rng(6)
        src = stream_indices(Q9, dims)
        rev = stream_indices(Q9, dims, reverse=True)
        a = rng.standard_normal((9, 144))
        b = rng.standard_normal((9, 144))
        sa = np.take_along_axis(a, src, axis=1)
        stb = np.take_along_axis(b, rev, axis=1)
        assert abs(np.vdot(sa, b) - np.vdot(a, stb)) <= 1e-13 * np.linalg.norm(a) * np.linalg.norm(b)

    def test_roundtrip_bit_exact(self):
        rng = np.random.default_rng(7)
        src = stream_indices(Q9, (7, 9))
        rev = stream_indices(Q9, (7, 9), reverse=True)
        a = rng.standard_normal((9, 63))
        fwd = np.take_along_axis(a, src, axis=1)
        back = np.take_along_axis(fwd, rev, axis=1)
        assert np.array_equal(back, a)


class TestAdjointCollision:
    def test_matches_dense_transposed_jacobian(self):
        rng = np.random.default_rng(8)
        for stencil in (Q9, make_stencil("D3Q19")):
            for _ in range(20):
                u = 0.1 * rng.standard_normal((stencil.dim, 1))
                alpha = np.array([rng.random()])
                tau = 0.6 + rng.random()
                fstar = rng.standard_normal((stencil.q, 1))
                out = adjoint_collision(fstar, u, alpha, np.array([1.0 / tau]),
                                        stencil, 1.0)
                dense = collision_jacobian_dense(u[:, 0], alpha[0], stencil,
                                                 1.0, tau)
                expected = dense.T @ fstar[:, 0]
                assert np.abs(out[:, 0] - expected).max() <= 1e-13

    def test_dense_jacobian_matches_central_fd_of_collision(self):
        # the collision operator is quadratic, so central differences are exact
        from lbto.forward import collide, equilibrium, moments

        rng = np.random.default_rng(9)
        stencil = Q9
        tau = 0.8
        alpha = 0.63
        f0 = stencil.w + 0.05 * rng.standard_normal(9)

        def collide_node(fv):
            fg = fv.reshape(9, 1, 1)
            rho, u = moments(fg, stencil, 1.0)
            feq = equilibrium(rho, u, np.full((1, 1), alpha), stencil, 1.0)
            return collide(fg, feq, 1.0 / tau).ravel()

        h = 0.5
        jac_fd = np.empty((9, 9))
        for k in range(9):
            fp, fm = f0.copy(), f0.copy()
            fp[k] += h
            fm[k] -= h
            jac_fd[:, k] = (collide_node(fp) - collide_node(fm)) / (2 * h)
        rho0, u0 = moments(f0.reshape(9, 1, 1), stencil, 1.0)
        dense = collision_jacobian_dense(u0[:, 0, 0], alpha, stencil, 1.0, tau)
        assert np.abs(jac_fd - dense).max() <= 1e-13

    def test_constant_field_fixed_point_at_zero_velocity(self):
        dims_n = 25
        u = np.zeros((2, dims_n))
        alpha = np.random.default_rng(10).random(dims_n)
        fstar = np.full((9, dims_n), 1.37)
        out = adjoint_collision(fstar, u, alpha, np.full(dims_n, 1 / 0.8), Q9, 1.0)
        assert np.abs(out - 1.37).max() <= 1e-14

    def test_zero_stays_zero(self):
        out = adjoint_collision(np.zeros((9, 10)), np.zeros((2, 10)),
                                np.ones(10), np.ones(10), Q9, 1.0)
        assert np.abs(out).max() == 0.0


class TestGlobalTranspose:
    """Dot-product test of one full linearized step against one adjoint step."""

    def _operators(self, case):
        forward = FlowSolver(case)
        forward.run_to_steady(tol=1e-9, max_steps=20_000)
        bset = forward.bset
        st = case.stencil
        src = stream_indices(st, case.geometry.dims)
        rev = stream_indices(st, case.geometry.dims, reverse=True)

        def a_op(a):
            x = linearized_collision(a, forward.u, forward.alpha, forward.relax,
                                     st, 1.0)
            x = np.take_along_axis(x, src, axis=1)
            bset.apply_linear(x)
            return x

        def a_star(b, wrong_order=False):
            x = b.copy()
            if wrong_order:
                x = adjoint_collision(x, forward.u, forward.alpha, forward.relax,
                                      st, 1.0)
                x = np.take_along_axis(x, rev, axis=1)
                bset.apply_adjoint(x)
                return x
            bset.apply_adjoint(x)
            x = np.take_along_axis(x, rev, axis=1)
            return adjoint_collision(x, forward.u, forward.alpha, forward.relax,
                                     st, 1.0)

        return forward, a_op, a_star

    def test_analytic_linearization_dot_product(self):
        case = bend2d(u_in=0.05, n=12)
        _, a_op, a_star = self._operators(case)
        rng = np.random.default_rng(11)
        for _ in range(5):
            a = rng.standard_normal((9, 144))
            b = rng.standard_normal((9, 144))
            lhs = np.vdot(a_op(a), b)
            rhs = np.vdot(a, a_star(b))
            assert abs(lhs - rhs) <= 1e-12 * np.linalg.norm(a) * np.linalg.norm(b)

    def test_wrong_execution_order_breaks_identity(self):
        case = bend2d(u_in=0.05, n=12)
        _, a_op, a_star = self._operators(case)
        rng = np.random.default_rng(12)
        a = rng.standard_normal((9, 144))
        b = rng.standard_normal((9, 144))
        lhs = np.vdot(a_op(a), b)
        rhs = np.vdot(a, a_star(b, wrong_order=True))
        assert abs(lhs - rhs) > 1e-6 * np.linalg.norm(a) * np.linalg.norm(b)

    def test_finite_difference_linearization_dot_product(self):
        case = bend2d(u_in=0.05, n=12)
        forward, _, a_star = self._operators(case)
        st = case.stencil
        src = stream_indices(st, case.geometry.dims)
        f0 = forward.f.copy()

        def full_step(f):
            solver = FlowSolver(case, f0=f)
            solver.step()
            return solver.f

        base = full_step(f0)
        rng = np.random.default_rng(13)
        a = rng.standard_normal(f0.shape)
        b = rng.standard_normal(f0.shape)
        eps = 1e-7 * np.linalg.norm(f0) / np.linalg.norm(a)
        aa = (full_step(f0 + eps * a) - base) / eps
        lhs = np.vdot(aa, b)
        rhs = np.vdot(a, a_star(b))
        assert abs(lhs - rhs) <= 1e-6 * np.linalg.norm(a) * np.linalg.norm(b)


class TestDiscreteAdjointRuns:
    def test_zero_source_stays_zero(self):
        case = bend2d(u_in=0.03, n=14)
        forward = FlowSolver(case)
        forward.run_to_steady(tol=1e-9, max_steps=20_000)
        adj = DiscreteAdjointSolver(case, forward, objective="none")
        for _ in range(30):
            adj.step()
        assert np.abs(adj.fstar_c).max() == 0.0

    def test_inlet_source_first_step_value(self):
        case = bend2d(u_in=0.03, n=14)
        forward = FlowSolver(case)
        forward.run_to_steady(tol=1e-9, max_steps=20_000)
        adj = DiscreteAdjointSolver(case, forward)
        adj.step()
        n_in = case.roles.n_inlet
        # starting from fstar_C = 0 the first step only injects the source
        assert np.allclose(adj.fstar_c[:, adj.source_idx], -1.0 / (3 * n_in))
        mask = np.ones(adj.fstar_c.shape[1], dtype=bool)
        mask[adj.source_idx] = False
        assert np.abs(adj.fstar_c[:, mask]).max() == 0.0

    def test_still_inflow_converges(self):
        case = bend2d(u_in=0.0, n=14)
        forward = FlowSolver(case)
        forward.run_to_steady(max_steps=2000)
        adj = DiscreteAdjointSolver(case, forward)
        result = adj.run(tol=1e-10, max_steps=20_000)
        assert result.status == Status.CONVERGED

    def test_pipe_bend_low_re_converges(self):
        case = build_pipe_bend_2d(CaseConfig(tau=0.8, u_in=0.01), n=24, port_width=6)
        forward = FlowSolver(case)
        assert forward.run_to_steady(tol=1e-9, max_steps=40_000).ok
        res = run_discrete_adjoint(case, forward, tol=1e-9, max_steps=40_000)
        assert res.flow_result.status == Status.CONVERGED


class TestThermalAdjoint:
    def _setup(self, dims=(12, 8, 8), re=5.0):
        case = build_heat_sink_3d(CaseConfig(tau=0.8), dims=dims, reynolds=re)
        # carve a solid block so beta is inhomogeneous
        case.design.alpha[5:8, 2:5, 2:5] = 0.0
        case.design.phi[5:8, 2:5, 2:5] = -1.0
        forward = FlowSolver(case)
        assert forward.run_to_steady(tol=1e-8, max_steps=30_000).ok
        thermal = ThermalSolver(case, forward.u)
        assert thermal.run_to_steady(tol=1e-8, max_steps=30_000).ok
        return case, forward, thermal

    def test_fluid_node_without_source_stays_zero(self):
        case, forward, thermal = self._setup()
        adj = ThermalAdjointSolver(case, thermal)
        adj.step()
        flat_alpha = case.design.alpha.ravel()
        fluid = np.nonzero((flat_alpha == 1.0) & thermal.bset.collide_mask.ravel())[0]
        assert np.abs(adj.gstar_c[:, fluid]).max() == 0.0
        solid = np.nonzero(flat_alpha == 0.0)[0]
        solid = solid[thermal.bset.collide_mask.ravel()[solid]]
        beta_max = case.config.beta_max
        assert np.allclose(adj.gstar_c[:, solid], -beta_max)

    def test_thermal_inlet_adjoint_matches_printed_form(self):
        case, forward, thermal = self._setup()
        bset = thermal.bset
        rng = np.random.default_rng(14)
        gc = rng.standard_normal((7, case.geometry.n_nodes))
        ref = gc.copy()
        bset.apply_adjoint(gc)
        sets, idx = bset.inlet[0]
        node = idx[3]
        assert gc[1, node] == 0.0
        assert gc[2, node] == pytest.approx(ref[2, node] - ref[1, node], abs=1e-15)
        for k in (0, 3, 4, 5, 6):
            assert gc[k, node] == ref[k, node]

    def test_thermal_outlet_adjoint_is_transpose_of_forward(self):
        # dense check of the non-local zero-gradient boundary map
        case, forward, thermal = self._setup(dims=(6, 5, 5))
        bset = ThermalBoundarySet(case.thermal_stencil, case.roles)
        n = case.geometry.n_nodes
        size = 7 * n
        rng = np.random.default_rng(15)

        def fwd(vec):
            g = vec.reshape(7, n).copy()
            bset.apply(g)
            return g.ravel()

        def adj(vec):
            g = vec.reshape(7, n).copy()
            bset.apply_adjoint(g)
            return g.ravel()

        for _ in range(10):
            a = rng.standard_normal(size)
            b = rng.standard_normal(size)
            lhs = fwd(a) @ b
            rhs = a @ adj(b)
            assert abs(lhs - rhs) <= 1e-12 * np.linalg.norm(a) * np.linalg.norm(b)

    def test_coupling_term_zero_for_zero_temperature_or_solid(self):
        case, forward, thermal = self._setup()
        adj = ThermalAdjointSolver(case, thermal)
        adj.run(tol=1e-8, max_steps=20_000)
        coup = thermal_coupling_term(case, thermal, adj)
        flat_alpha = case.design.alpha.ravel()
        solid = flat_alpha == 0.0
        assert np.abs(coup[:, solid]).max() == 0.0
        # constant adjoint field has zero weighted first moment
        adj.gstar_s[:] = 3.3
        coup = thermal_coupling_term(case, thermal, adj)
        assert np.abs(coup).max() <= 1e-15

    def test_cascade_runs(self):
        case, forward, thermal = self._setup()
        res = run_discrete_adjoint(case, forward, thermal,
                                   tol=1e-8, max_steps=30_000)
        assert res.ok
        assert np.isfinite(res.flow.fstar_s).all()
