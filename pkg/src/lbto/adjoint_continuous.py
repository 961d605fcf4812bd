"""Continuous (adjoin-then-discretize) adjoint flow solver.

Runs in the primal order collide -> reversed streaming -> boundary
conditions, starting from a zero field.  The objective enters through the
inlet boundary condition as the constant source s = 2 / (3 W_in t_eff).

With the steady-state convention (objective = instantaneous mean inlet
pressure, the same convention the discrete solver uses), the effective time
normalization of this boundary-injected source is t_eff = cs2 = 1/3, not 1:
a per-step boundary offset feeds the adjoint a factor 1/cs2 more weakly
than the per-step collision source of the discrete method.  The value was
pinned by requiring the continuous sensitivity to approach the
finite-difference gradient in the Re -> 0 limit, where these boundary
conditions become consistent; the constant is 3.00 +/- 0.01 across
relaxation times, grids and 2D/3D.  Only the overall sensitivity scale
depends on it; stability and divergence behavior do not.

These boundary conditions are intrinsically inconsistent: the conditions
attached to the outgoing directions cannot be enforced and are dropped.
Their magnitudes are evaluated every residual window and kept as a
diagnostic history quantifying the inconsistency.
"""

from __future__ import annotations

import numpy as np

from .boundaries import BoundarySet
from .cases import Case
from .domain import ConfigError, NodeRole
from .forward import FlowSolver, RunResult, Status, stream_indices
from .linearized import adjoint_collision

ADJOINT_BLOWUP = 1e10


class ContinuousAdjointSolver:
    """Fixed-point iteration of the discretized continuous adjoint equation
    over a frozen forward solution."""

    def __init__(self, case: Case, forward: FlowSolver,
                 fstar0: np.ndarray | None = None,
                 source_scale: float | None = None,
                 t_eff: float | None = None):
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
        for g in self.bset.groups:
            if g.role in (NodeRole.INLET_PRESSURE, NodeRole.SYMMETRY):
                raise ConfigError(
                    "continuous adjoint supports velocity inlets, pressure "
                    f"outlets and walls only (got {g.role.name})"
                )
        if case.roles.w_in <= 0:
            raise ConfigError("continuous adjoint needs an inlet segment")
        self.t_eff = self.stencil.cs2 if t_eff is None else t_eff
        self.s = (2.0 / (3.0 * case.roles.w_in * self.t_eff)
                  if source_scale is None else source_scale)

        q = self.stencil.q
        self.fstar = (np.zeros((q, self.n)) if fstar0 is None
                      else np.array(fstar0, dtype=float, copy=True).reshape(q, self.n))
        self._buf = np.empty_like(self.fstar)
        self._rev = stream_indices(self.stencil, self.dims, reverse=True)
        # in-plane condition residual extractors, one per open group
        self._res_ext = []
        for g in self.bset.groups:
            r = g.matrix[g.sets.into][:, g.sets.inplane]
            self._res_ext.append((g, r))
        self.steps = 0

    @property
    def fstar_field(self):
        return self.fstar.reshape((self.stencil.q,) + self.dims)

    def apply_boundaries(self, fstar: np.ndarray) -> None:
        """Adjoint BCs: bounce-back walls, opposite-minus-source closures."""
        opp = self.stencil.opposite
        if len(self.bset.wall_idx):
            fstar[:, self.bset.wall_idx] = fstar[opp][:, self.bset.wall_idx]
        for g in self.bset.groups:
            sets = g.sets
            if g.role == NodeRole.INLET_VELOCITY:
                for k, kb in zip(sets.into, sets.outof):
                    fstar[kb, g.idx] = fstar[k, g.idx] - self.s
            else:  # pressure outlet
                c_ax = 4.0 / 3.0 if self.stencil.dim == 2 else 2.0 / 3.0
                axis_dir = None
                diag = []
                for k in sets.into:
                    if np.abs(self.stencil.e[k]).sum() == 1:
                        axis_dir = k
                    else:
                        diag.append(k)
                x = c_ax * fstar[axis_dir, g.idx]
                for k in diag:
                    x = x + fstar[k, g.idx] / 3.0
                for k, kb in zip(sets.into, sets.outof):
                    fstar[kb, g.idx] = fstar[k, g.idx] - x

    def boundary_residuals(self):
        """Max magnitude of the dropped (unenforceable) in-plane conditions."""
        out = {}
        for g, r in self._res_ext:
            vals = r.T @ self.fstar[:, g.idx][g.sets.into]
            if g.role == NodeRole.INLET_VELOCITY:
                vals = 0.5 * self.s - vals
            key = "inlet" if g.role == NodeRole.INLET_VELOCITY else "outlet"
            out[key] = max(out.get(key, 0.0), float(np.abs(vals).max()))
        return out

    def step(self):
        adjoint_collision(self.fstar, self.u, self.alpha, self.relax,
                          self.stencil, self.rho0, out=self._buf)
        fc = self._buf
        for i in range(self.stencil.q):
            np.take(fc[i], self._rev[i], out=self.fstar[i])
        self.apply_boundaries(self.fstar)
        self.steps += 1

    def diverged(self) -> bool:
        m = np.abs(self.fstar).max()
        return (not np.isfinite(m)) or m > ADJOINT_BLOWUP

    def run(self, tol: float | None = None, max_steps: int | None = None,
            window: int = 100) -> RunResult:
        tol = self.config.adjoint_tol if tol is None else tol
        max_steps = self.config.max_steps if max_steps is None else max_steps
        ref = self.fstar.copy()
        residuals = []
        self.residual_log = []
        n = 0
        while n < max_steps:
            self.step()
            n += 1
            if self.diverged():
                return RunResult(Status.DIVERGED, n, residuals, diverged_step=n)
            if n % window == 0:
                df = np.linalg.norm(self.fstar - ref)
                scale = np.linalg.norm(self.fstar)
                res = df / scale if scale > 0 else df
                done = res < tol or df <= 1e-13 * np.sqrt(self.fstar.size)
                residuals.append((n, res))
                self.residual_log.append((n, self.boundary_residuals()))
                np.copyto(ref, self.fstar)
                if done:
                    return RunResult(Status.CONVERGED, n, residuals)
        return RunResult(Status.MAX_STEPS, max_steps, residuals)


def run_continuous_adjoint(case: Case, forward: FlowSolver,
                           tol: float | None = None,
                           max_steps: int | None = None):
    solver = ContinuousAdjointSolver(case, forward)
    result = solver.run(tol=tol, max_steps=max_steps)
    return solver, result
