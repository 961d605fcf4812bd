"""Level-set topology optimization loop and the stability-sweep harness.

Each outer iteration: forward solve -> adjoint solve -> sensitivity and
volume multiplier -> reaction-diffusion update of the level set -> design
remap.  Solver states are warm-started across iterations.  A diverging
adjoint (the expected continuous-method failure at higher Reynolds numbers)
terminates the run with a first-class status and the history preserved.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .adjoint_continuous import ContinuousAdjointSolver
from .adjoint_discrete import (
    DiscreteAdjointSolver,
    ThermalAdjointSolver,
    thermal_coupling_term,
)
from .cases import Case
from .domain import ConfigError, NodeRole, map_levelset_to_design, volume_constraint
from .forward import FlowSolver, Status
from .sensitivity import (
    laplacian_phi,
    lagrange_multiplier,
    sensitivity_continuous,
    sensitivity_discrete,
)
from .thermal import ThermalSolver

PHI_STEP_CAP = 0.1  # max |delta phi| per iteration under adaptive scaling


def objective_pipebend(forward: FlowSolver, thermal=None) -> float:
    """Mean inlet lattice pressure (steady-state convention)."""
    idx = [g.idx for g in forward.bset.groups
           if g.role in (NodeRole.INLET_VELOCITY, NodeRole.INLET_PRESSURE)]
    if not idx:
        raise ConfigError("objective needs an inlet segment")
    idx = np.concatenate(idx)
    return float(forward.rho[idx].sum() / (3.0 * len(idx)))


def objective_heatsink(forward: FlowSolver, thermal: ThermalSolver) -> float:
    """Negated total heat generation (lower is better)."""
    return float(-(thermal.beta * (1.0 - thermal.t)).sum())


def rd_update(phi, jtotal, k_step: float, sigma: float, dxi: float,
              designable) -> np.ndarray:
    """One explicit Euler step of the reaction-diffusion level-set update,
    clamped to [-1, 1], non-designable nodes frozen."""
    lap = laplacian_phi(phi)
    out = phi.copy()
    out[designable] -= dxi * k_step * (jtotal[designable] - sigma * lap[designable])
    np.clip(out, -1.0, 1.0, out=out)
    out[~designable] = phi[~designable]
    return out


@dataclass
class OptimizationRun:
    method: str
    status: str
    history: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    baseline_j: float | None = None
    final_j: float | None = None

    @property
    def iterations(self) -> int:
        return len(self.history)


def optimize(case: Case, method: str = "discrete",
             max_outer: int | None = None,
             keep_snapshots: bool = True,
             inner_tol: float | None = None,
             inner_max_steps: int | None = None,
             adjoint_max_steps: int | None = None) -> OptimizationRun:
    """Run the level-set optimization loop on ``case`` (mutates its design)."""
    if method not in ("discrete", "continuous"):
        raise ConfigError(f"unknown adjoint method {method!r}")
    if case.thermal and method != "discrete":
        raise ConfigError("the heat-sink case requires the discrete adjoint")
    cfg = case.config
    max_outer = cfg.max_outer_iterations if max_outer is None else max_outer
    design = case.design
    run = OptimizationRun(method=method, status="max-iterations")

    objective = objective_heatsink if case.thermal else objective_pipebend
    f_warm = None
    g_warm = None
    adj_warm = None
    t_adj_warm = None
    bset = None
    t_bset = None
    still = 0
    j_history = []

    for it in range(max_outer):
        forward = FlowSolver(case, f0=f_warm, bset=bset)
        bset = forward.bset
        fres = forward.run_to_steady(tol=inner_tol, max_steps=inner_max_steps)
        if fres.status == Status.DIVERGED:
            run.status = "diverged-forward"
            break
        f_warm = forward.f

        thermal = None
        t_adj = None
        if case.thermal:
            thermal = ThermalSolver(case, forward.u, g0=g_warm, bset=t_bset)
            t_bset = thermal.bset
            tres = thermal.run_to_steady(tol=inner_tol, max_steps=inner_max_steps)
            if tres.status == Status.DIVERGED:
                run.status = "diverged-forward"
                break
            g_warm = thermal.g

        j_value = objective(forward, thermal)
        if run.baseline_j is None:
            run.baseline_j = j_value

        if method == "continuous":
            adj = ContinuousAdjointSolver(case, forward, fstar0=adj_warm)
            ares = adj.run(max_steps=adjoint_max_steps)
            adj_steps = ares.steps
            if ares.status == Status.DIVERGED:
                run.status = "diverged-adjoint"
                run.history.append(_row(it, j_value, None, None, 0,
                                        fres, ares))
                break
            adj_warm = adj.fstar
            jw = sensitivity_continuous(adj)
        else:
            if case.thermal:
                t_adj = ThermalAdjointSolver(case, thermal, gstar_c0=t_adj_warm)
                tares = t_adj.run(max_steps=adjoint_max_steps)
                if tares.status == Status.DIVERGED:
                    run.status = "diverged-adjoint"
                    run.history.append(_row(it, j_value, None, None, 0,
                                            fres, tares))
                    break
                t_adj_warm = t_adj.gstar_c
                coupling = thermal_coupling_term(case, thermal, t_adj)
                adj = DiscreteAdjointSolver(case, forward, objective="none",
                                            coupling=coupling,
                                            fstar_c0=adj_warm)
            else:
                adj = DiscreteAdjointSolver(case, forward, fstar_c0=adj_warm)
            ares = adj.run(max_steps=adjoint_max_steps)
            adj_steps = ares.steps + (tares.steps if case.thermal else 0)
            if ares.status == Status.DIVERGED:
                run.status = "diverged-adjoint"
                run.history.append(_row(it, j_value, None, None, 0,
                                        fres, ares))
                break
            adj_warm = adj.fstar_c
            jw = sensitivity_discrete(adj, thermal, t_adj)

        g_value = volume_constraint(design, cfg.Vmax)
        lam = lagrange_multiplier(jw, design.phi, cfg.sigma, g_value,
                                  design.designable)
        jtotal = (lam + jw).reshape(case.geometry.dims)

        # adaptive front speed: keep the level-set motion sub-cell
        rhs = jtotal - cfg.sigma * laplacian_phi(design.phi)
        peak = np.abs(rhs[design.designable]).max()
        dxi_eff = cfg.dxi
        if peak > 0 and cfg.dxi * cfg.K * peak > PHI_STEP_CAP:
            dxi_eff = PHI_STEP_CAP / (cfg.K * peak)
        alpha_before = design.alpha.copy()
        design.phi = rd_update(design.phi, jtotal, cfg.K, cfg.sigma, dxi_eff,
                               design.designable)
        map_levelset_to_design(design)
        changed = int((design.alpha != alpha_before).sum())

        run.history.append(_row(it, j_value, g_value, lam, changed, fres, ares))
        if keep_snapshots:
            run.snapshots.append(design.phi.copy())
        j_history.append(j_value)
        run.final_j = j_value

        still = still + 1 if changed == 0 else 0
        if still >= 5:
            run.status = "converged-design"
            break
        if len(j_history) > 10:
            ref = j_history[-11]
            if abs(j_history[-1] - ref) < 1e-5 * abs(ref):
                run.status = "converged-objective"
                break
    return run


def _row(it, j_value, g_value, lam, changed, fres, ares):
    return {
        "iteration": it,
        "J": j_value,
        "G": g_value,
        "lambda": lam,
        "changed_nodes": changed,
        "forward_steps": fres.steps,
        "forward_status": fres.status.value,
        "adjoint_steps": ares.steps if ares is not None else 0,
        "adjoint_status": ares.status.value if ares is not None else "",
    }


def has_fluid_path(case: Case, alpha=None) -> bool:
    """Flood-fill check that some inlet node connects to an outlet node
    through fluid (orthogonal connectivity)."""
    alpha = case.design.alpha if alpha is None else alpha
    fluid = alpha.reshape(case.geometry.dims) > 0.5
    labels, _ = ndimage.label(fluid)
    role = case.roles.role
    inlet = np.isin(role, (int(NodeRole.INLET_VELOCITY), int(NodeRole.INLET_PRESSURE)))
    outlet = role == int(NodeRole.OUTLET_PRESSURE)
    inlet_labels = set(np.unique(labels[inlet & fluid])) - {0}
    outlet_labels = set(np.unique(labels[outlet & fluid])) - {0}
    return bool(inlet_labels & outlet_labels)


@dataclass
class SweepResult:
    solver: str
    u_max: float
    bracket: float
    probes: list = field(default_factory=list)
    no_unstable_found: bool = False


def stability_probe(case_factory, u_in: float, solver: str, iter_cap: int) -> bool:
    """True if the selected solver survives ``iter_cap`` iterations at u_in."""
    case = case_factory(u_in)
    forward = FlowSolver(case)
    fres = forward.run_to_steady(max_steps=iter_cap)
    if fres.status == Status.DIVERGED:
        return False
    if solver == "forward":
        return True
    if solver == "continuous":
        adj = ContinuousAdjointSolver(case, forward)
    elif solver == "discrete":
        adj = DiscreteAdjointSolver(case, forward)
    else:
        raise ConfigError(f"unknown stability solver {solver!r}")
    ares = adj.run(max_steps=iter_cap)
    return ares.status != Status.DIVERGED


def stability_sweep(case_factory, solver: str, iter_cap: int,
                    bracket: float = 1e-3, u_seed: float = 0.05,
                    u_limit: float = 2.0) -> SweepResult:
    """Largest stable inlet velocity by bisection.

    ``case_factory(u_in)`` builds the probe geometry; u = 0 is stable by
    definition.  The unstable bound is found by doubling from ``u_seed``;
    if nothing diverges up to ``u_limit`` that is reported instead of
    silently returning the cap.
    """
    probes = []

    def probe(u):
        stable = stability_probe(case_factory, u, solver, iter_cap)
        probes.append((u, stable))
        return stable

    lo, hi = 0.0, None
    u = u_seed
    while u <= u_limit:
        if probe(u):
            lo = u
        else:
            hi = u
            break
        u *= 2.0
    if hi is None:
        return SweepResult(solver, lo, bracket, probes, no_unstable_found=True)
    while hi - lo > bracket:
        mid = 0.5 * (lo + hi)
        if probe(mid):
            lo = mid
        else:
            hi = mid
    return SweepResult(solver, lo, bracket, probes)
