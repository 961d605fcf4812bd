"""Sensitivity assembly from adjoint fields, plus the finite-difference oracle.

The per-node physics term is

    jw = -(rho0 / tau) sum_i w_i fstar_i [3 (e_i.u) + 9 a (e_i.u)^2 - 3 a u^2]

the exact derivative of the penalized equilibrium with respect to the design
variable at its current value a (the bracket is the equilibrium's own, with
the quadratic terms carrying the local alpha).  Both adjoint methods share
this kernel; the continuous one feeds its post-boundary field, the discrete
one its post-streaming field.  The total sensitivity is jw plus the volume
Lagrange multiplier.

Heat-sink runs add the thermal terms: the advection coupling through the
thermal equilibrium, the fluid/solid relaxation contrast, and the heat
source term including the objective's explicit design dependence.
"""

from __future__ import annotations

import numpy as np

from .adjoint_continuous import ContinuousAdjointSolver
from .adjoint_discrete import DiscreteAdjointSolver, ThermalAdjointSolver
from .cases import Case
from .forward import FlowSolver, Status
from .lattice import Stencil
from .thermal import ThermalSolver


def sensitivity_jw(fstar, u, alpha, tau, stencil: Stencil, rho0: float):
    """Flow physics term of the sensitivity, flat (N,)."""
    e = stencil.e.astype(float)
    eu = e @ u
    u2 = np.einsum("dn,dn->n", u, u)
    bracket = 3.0 * eu + alpha * (9.0 * eu * eu - 3.0 * u2)
    return -(rho0 / tau) * np.einsum("q,qn->n", stencil.w, fstar * bracket)


def sensitivity_continuous(adj: ContinuousAdjointSolver) -> np.ndarray:
    """Physics term from the converged continuous adjoint (post-boundary field)."""
    return sensitivity_jw(adj.fstar, adj.u, adj.alpha, adj.config.tau,
                          adj.stencil, adj.rho0)


def sensitivity_discrete(adj: DiscreteAdjointSolver,
                         thermal: ThermalSolver | None = None,
                         thermal_adj: ThermalAdjointSolver | None = None) -> np.ndarray:
    """Physics term from the converged discrete adjoint (post-streaming field),
    plus the heat-sink thermal terms when the thermal pair is given."""
    jw = sensitivity_jw(adj.fstar_s, adj.u, adj.alpha, adj.config.tau,
                        adj.stencil, adj.rho0)
    if thermal is not None:
        jw = jw + heatsink_thermal_jw(adj.u, thermal, thermal_adj)
    return jw


def heatsink_thermal_jw(u_flow, thermal: ThermalSolver,
                        adj: ThermalAdjointSolver) -> np.ndarray:
    """Thermal contribution to the heat-sink sensitivity."""
    st = thermal.stencil
    cfg = thermal.config
    e = st.e.astype(float)
    w = st.w[:, None]
    gs = adj.gstar_s
    t = thermal.t
    cmask = thermal.bset.collide_mask.ravel().astype(float)

    # advection coupling: -(4T/tau_g) sum_i w_i gstar_S_i (e_i.u)
    eu = e @ u_flow
    adv = -4.0 * t * adj.relax * np.einsum("qn,qn->n", w * gs, eu)

    # relaxation contrast: (1/tau_f - 1/tau_s) sum_i gstar_S_i (g_i - geq_i)
    geq = w * (t * (1.0 + 4.0 * (e @ thermal.au)))
    contrast = (1.0 / cfg.tau_g_fluid - 1.0 / cfg.tau_g_solid) * cmask
    contrast = contrast * np.einsum("qn,qn->n", gs, thermal.g - geq)

    # source term with the objective's explicit design dependence
    wgs = st.w @ gs
    source = cfg.beta_max * (1.0 - t) * (1.0 + wgs) * cmask
    return adv + contrast + source


def laplacian_phi(phi: np.ndarray) -> np.ndarray:
    """Second difference with mirror (zero normal gradient) face closure."""
    padded = np.pad(phi, 1, mode="reflect")
    lap = np.zeros_like(phi)
    ndim = phi.ndim
    core = tuple(slice(1, -1) for _ in range(ndim))
    for a in range(ndim):
        lo = tuple(slice(0, -2) if i == a else core[i] for i in range(ndim))
        hi = tuple(slice(2, None) if i == a else core[i] for i in range(ndim))
        lap += padded[lo] + padded[hi]
    lap -= 2.0 * ndim * phi
    return lap


def lagrange_multiplier(jw, phi, sigma: float, g_value: float,
                        designable) -> float:
    """Volume-constraint multiplier: the mean of |jw - sigma lap(phi)| over
    the designable region, gated by exp(G).

    The exponent is clamped above so a strongly violated constraint yields a
    large but finite multiplier that still preserves the relative structure
    of jw in double precision.
    """
    lap = laplacian_phi(phi)
    jw_grid = jw.reshape(phi.shape)
    mean = float(np.abs(jw_grid[designable] - sigma * lap[designable]).mean())
    return float(np.exp(np.clip(g_value, -700.0, 20.0))) * mean


def diagonal_nodes(case: Case, count: int = 20):
    """Sample of designable nodes along the chamber diagonal running from
    the inlet corner toward the outlet corner (the sensitivity-profile
    extraction line, recorded in run metadata)."""
    dims = case.geometry.dims
    if len(dims) != 2:
        raise ValueError("diagonal extraction is defined for 2D cases")
    nx, ny = dims
    n = min(nx, ny)
    picks = np.linspace(2, n - 3, count).round().astype(int)
    out = []
    for i in picks:
        x, y = int(i), int(ny - 1 - i)
        if case.design.designable[x, y]:
            out.append((x, y))
    return out


def fdm_gradient(case: Case, nodes, objective, h: float | None = None,
                 base_forward: FlowSolver | None = None,
                 base_thermal: ThermalSolver | None = None,
                 probe_tol: float | None = None,
                 probe_max_steps: int | None = None):
    """Central finite differences of the objective in the design variable.

    Each probe is a full solve to convergence, warm-started from the base
    state; the two probes of a pair run the same number of steps so their
    residual convergence error cancels in the difference.  Returns a list of
    dicts (node, grad, ok); probes whose forward solve diverges are flagged
    and excluded from comparisons.
    """
    cfg = case.config
    h = cfg.fdm_step if h is None else h
    probe_tol = cfg.forward_tol if probe_tol is None else probe_tol
    probe_max_steps = cfg.max_steps if probe_max_steps is None else probe_max_steps
    dims = case.geometry.dims

    if base_forward is None:
        base_forward = FlowSolver(case)
        if not base_forward.run_to_steady().ok:
            raise RuntimeError("base forward solve did not converge")
    bset = base_forward.bset
    if case.thermal and base_thermal is None:
        base_thermal = ThermalSolver(case, base_forward.u)
        if not base_thermal.run_to_steady().ok:
            raise RuntimeError("base thermal solve did not converge")

    results = []
    for node in nodes:
        flat = int(np.ravel_multi_index(node, dims))
        if not case.design.designable.ravel()[flat]:
            raise ValueError(f"node {node} is not designable")
        probes = []
        ok = True
        for sgn in (+1.0, -1.0):
            alpha = base_forward.alpha.copy()
            alpha[flat] += sgn * h
            solver = FlowSolver(case, alpha=alpha, f0=base_forward.f, bset=bset)
            res = solver.run_to_steady(tol=probe_tol, max_steps=probe_max_steps)
            if res.status == Status.DIVERGED:
                ok = False
                probes.append((solver, None, res))
                continue
            th = None
            if case.thermal:
                th = ThermalSolver(case, solver.u, alpha=alpha,
                                   g0=base_thermal.g, bset=base_thermal.bset)
                tres = th.run_to_steady(tol=probe_tol,
                                        max_steps=probe_max_steps)
                if tres.status == Status.DIVERGED:
                    ok = False
            probes.append((solver, th, res))
        grad = None
        if ok:
            _equalize_steps(probes)
            j_plus = objective(probes[0][0], probes[0][1])
            j_minus = objective(probes[1][0], probes[1][1])
            grad = (j_plus - j_minus) / (2.0 * h)
        results.append({"node": tuple(node), "grad": grad, "ok": ok})
    return results


def _equalize_steps(probes):
    """Top up the shorter probe so both sides used identical step counts."""
    (sp, tp, _), (sm, tm, _) = probes
    n = max(sp.steps, sm.steps)
    for solver in (sp, sm):
        while solver.steps < n:
            solver.step()
    if tp is not None and tm is not None:
        m = max(tp.steps, tm.steps)
        for th in (tp, tm):
            while th.steps < m:
                th.step()


def fdm_richardson(case: Case, node, objective, h: float,
                   base_forward: FlowSolver | None = None, **kw):
    """Gradient estimates at h and h/2 (step-halving convergence check)."""
    g_h = fdm_gradient(case, [node], objective, h=h,
                       base_forward=base_forward, **kw)[0]["grad"]
    g_h2 = fdm_gradient(case, [node], objective, h=h / 2.0,
                        base_forward=base_forward, **kw)[0]["grad"]
    return g_h, g_h2
