"""Discrete (discretize-then-adjoin) adjoint solvers.

The execution order is completely reversed relative to the primal solver:
boundary condition -> streaming -> collision, each the exact transpose of
its forward counterpart.  Boundary transposes come from the mechanically
constructed per-group matrices (see :mod:`lbto.boundaries`); adjoint
streaming is the inverse index permutation; the collision transpose shares
its kernel with the continuous adjoint.  The objective derivative enters as
a source inside the adjoint collision.

For the heat-sink case the adjoint heat-transfer populations are solved to
a fixed point first, then the flow adjoint runs with the frozen coupling
term from the thermal equilibrium's velocity dependence (one-way cascade).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .boundaries import ThermalBoundarySet
from .cases import Case
from .domain import NodeRole
from .forward import FlowSolver, RunResult, Status, stream_indices
from .linearized import adjoint_collision, adjoint_thermal_collision
from .thermal import ThermalSolver

ADJOINT_BLOWUP = 1e10


class DiscreteAdjointSolver:
    """Reverse-order adjoint of the flow solver about a frozen state.

    ``fstar_C`` is the adjoint of the post-collision populations (the field
    initialized to zero and iterated), ``fstar`` the post-boundary adjoint,
    ``fstar_S`` the post-streaming adjoint used by the sensitivity formula.
    """

    def __init__(self, case: Case, forward: FlowSolver,
                 objective: str = "inlet-pressure",
                 coupling: np.ndarray | None = None,
                 fstar_c0: np.ndarray | None = None):
        self.case = case
        self.stencil = case.stencil
        self.config = case.config
        self.dims = case.geometry.dims
        self.n = case.geometry.n_nodes
        self.bset = forward.bset
        self.u = forward.u.copy()
        self.alpha = forward.alpha.copy()
        self.relax = forward.relax
        self.rho0 = case.config.rho0

        q = self.stencil.q
        self.fstar_c = (np.zeros((q, self.n)) if fstar_c0 is None
                        else np.array(fstar_c0, dtype=float, copy=True).reshape(q, self.n))
        self.fstar = np.empty_like(self.fstar_c)
        self.fstar_s = np.empty_like(self.fstar_c)
        self._rev = stream_indices(self.stencil, self.dims, reverse=True)
        self.coupling = coupling

        if objective == "inlet-pressure":
            idx = [g.idx for g in self.bset.groups
                   if g.role in (NodeRole.INLET_VELOCITY, NodeRole.INLET_PRESSURE)]
            self.source_idx = np.concatenate(idx) if idx else np.empty(0, dtype=np.int64)
            n_in = case.roles.n_inlet
            self.source_value = 1.0 / (3.0 * n_in) if n_in else 0.0
        elif objective == "none":
            self.source_idx = np.empty(0, dtype=np.int64)
            self.source_value = 0.0
        else:
            raise ValueError(f"unknown objective {objective!r}")
        self.steps = 0

    @property
    def fstar_s_field(self):
        return self.fstar_s.reshape((self.stencil.q,) + self.dims)

    def step(self):
        np.copyto(self.fstar, self.fstar_c)
        self.bset.apply_adjoint(self.fstar)
        for i in range(self.stencil.q):
            np.take(self.fstar[i], self._rev[i], out=self.fstar_s[i])
        adjoint_collision(self.fstar_s, self.u, self.alpha, self.relax,
                          self.stencil, self.rho0, out=self.fstar_c)
        if len(self.source_idx):
            self.fstar_c[:, self.source_idx] -= self.source_value
        if self.coupling is not None:
            self.fstar_c += self.coupling
        self.steps += 1

    def diverged(self) -> bool:
        m = np.abs(self.fstar_c).max()
        return (not np.isfinite(m)) or m > ADJOINT_BLOWUP

    def run(self, tol: float | None = None, max_steps: int | None = None,
            window: int = 100) -> RunResult:
        tol = self.config.adjoint_tol if tol is None else tol
        max_steps = self.config.max_steps if max_steps is None else max_steps
        ref = self.fstar_c.copy()
        residuals = []
        n = 0
        while n < max_steps:
            self.step()
            n += 1
            if self.diverged():
                return RunResult(Status.DIVERGED, n, residuals, diverged_step=n)
            if n % window == 0:
                df = np.linalg.norm(self.fstar_c - ref)
                scale = np.linalg.norm(self.fstar_c)
                res = df / scale if scale > 0 else df
                done = res < tol or df <= 1e-13 * np.sqrt(self.fstar_c.size)
                residuals.append((n, res))
                np.copyto(ref, self.fstar_c)
                if done:
                    return RunResult(Status.CONVERGED, n, residuals)
        return RunResult(Status.MAX_STEPS, max_steps, residuals)


class ThermalAdjointSolver:
    """Reverse-order adjoint of the heat-transfer solver (heat-sink case).

    The objective is the (negated) total heat generation, whose derivative
    with respect to the temperature populations is beta per node; together
    with the source's own Jacobian it enters the adjoint collision as
    -beta (1 + sum_m w_m gstar_S_m).
    """

    def __init__(self, case: Case, thermal: ThermalSolver,
                 gstar_c0: np.ndarray | None = None):
        self.case = case
        self.stencil = case.thermal_stencil
        self.config = case.config
        self.dims = case.geometry.dims
        self.n = case.geometry.n_nodes
        self.bset = thermal.bset
        self.au = thermal.au.copy()
        self.relax = thermal.relax
        self.beta = thermal.beta

        q = self.stencil.q
        self.gstar_c = (np.zeros((q, self.n)) if gstar_c0 is None
                        else np.array(gstar_c0, dtype=float, copy=True).reshape(q, self.n))
        self.gstar = np.empty_like(self.gstar_c)
        self.gstar_s = np.empty_like(self.gstar_c)
        self._rev = stream_indices(self.stencil, self.dims, reverse=True)
        self.steps = 0

    @property
    def gstar_s_field(self):
        return self.gstar_s.reshape((self.stencil.q,) + self.dims)

    def step(self):
        np.copyto(self.gstar, self.gstar_c)
        self.bset.apply_adjoint(self.gstar)
        for i in range(self.stencil.q):
            np.take(self.gstar[i], self._rev[i], out=self.gstar_s[i])
        adjoint_thermal_collision(self.gstar_s, self.au, self.relax,
                                  self.stencil, out=self.gstar_c)
        wgs = self.stencil.w @ self.gstar_s.reshape(self.stencil.q, self.n)
        self.gstar_c -= self.beta * (1.0 + wgs)
        self.steps += 1

    def diverged(self) -> bool:
        m = np.abs(self.gstar_c).max()
        return (not np.isfinite(m)) or m > ADJOINT_BLOWUP

    def run(self, tol: float | None = None, max_steps: int | None = None,
            window: int = 100) -> RunResult:
        tol = self.config.adjoint_tol if tol is None else tol
        max_steps = self.config.max_steps if max_steps is None else max_steps
        ref = self.gstar_c.copy()
        residuals = []
        n = 0
        while n < max_steps:
            self.step()
            n += 1
            if self.diverged():
                return RunResult(Status.DIVERGED, n, residuals, diverged_step=n)
            if n % window == 0:
                dg = np.linalg.norm(self.gstar_c - ref)
                scale = np.linalg.norm(self.gstar_c)
                res = dg / scale if scale > 0 else dg
                done = res < tol or dg <= 1e-13 * np.sqrt(self.gstar_c.size)
                residuals.append((n, res))
                np.copyto(ref, self.gstar_c)
                if done:
                    return RunResult(Status.CONVERGED, n, residuals)
        return RunResult(Status.MAX_STEPS, max_steps, residuals)


def thermal_coupling_term(case: Case, thermal: ThermalSolver,
                          adjoint: ThermalAdjointSolver) -> np.ndarray:
    """Extra flow-adjoint collision source from the thermal equilibrium's
    velocity dependence: (1/tau_g) sum_m dgeq_m/df_i gstar_S_m with
    dgeq_m/df_i = 4 w_m T alpha (e_m.e_i) / rho0."""
    st_g = case.thermal_stencil
    st_f = case.stencil
    wgs = st_g.w[:, None] * adjoint.gstar_s
    pg = st_g.e.astype(float).T @ wgs                      # (d, N)
    scale = adjoint.relax * thermal.t * thermal.alpha * (4.0 / case.config.rho0)
    return (st_f.e.astype(float) @ pg) * scale


@dataclass
class AdjointCascadeResult:
    flow: DiscreteAdjointSolver
    flow_result: RunResult
    thermal: ThermalAdjointSolver | None = None
    thermal_result: RunResult | None = None

    @property
    def ok(self) -> bool:
        flow_ok = self.flow_result.status == Status.CONVERGED
        if self.thermal_result is None:
            return flow_ok
        return flow_ok and self.thermal_result.status == Status.CONVERGED


def run_discrete_adjoint(case: Case, forward: FlowSolver,
                         thermal: ThermalSolver | None = None,
                         tol: float | None = None,
                         max_steps: int | None = None) -> AdjointCascadeResult:
    """Solve the discrete adjoint system for a converged forward state."""
    if case.thermal and thermal is not None:
        t_adj = ThermalAdjointSolver(case, thermal)
        t_res = t_adj.run(tol=tol, max_steps=max_steps)
        if t_res.status == Status.DIVERGED:
            dummy = DiscreteAdjointSolver(case, forward, objective="none")
            return AdjointCascadeResult(dummy, RunResult(Status.DIVERGED, 0),
                                        t_adj, t_res)
        coupling = thermal_coupling_term(case, thermal, t_adj)
        f_adj = DiscreteAdjointSolver(case, forward, objective="none",
                                      coupling=coupling)
        f_res = f_adj.run(tol=tol, max_steps=max_steps)
        return AdjointCascadeResult(f_adj, f_res, t_adj, t_res)
    f_adj = DiscreteAdjointSolver(case, forward, objective="inlet-pressure")
    f_res = f_adj.run(tol=tol, max_steps=max_steps)
    return AdjointCascadeResult(f_adj, f_res)
