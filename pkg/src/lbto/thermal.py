"""D3Q7 heat-transfer solver, one-way coupled to a frozen flow field.

The temperature populations advect with the penalized velocity alpha*u and
pick up a volumetric source Q = beta_max (1 - alpha)(1 - T) that saturates
at the dimensionless cap T = 1.  The relaxation rate interpolates linearly
in alpha between the fluid and solid diffusivities, so the binary design
reproduces the two-material model and continuous perturbations (used by the
finite-difference oracle) stay well defined.
"""

from __future__ import annotations

import numpy as np

from .boundaries import ThermalBoundarySet
from .cases import Case
from .forward import RunResult, Status, stream_indices
from .lattice import Stencil


def thermal_equilibrium(t, au, stencil: Stencil) -> np.ndarray:
    """Linear thermal equilibrium w_i T (1 + 4 e_i . alpha u)."""
    eu = np.einsum("qd,d...->q...", stencil.e.astype(float), au)
    return stencil.wq * t * (1.0 + 4.0 * eu)


def thermal_relax_rate(alpha, config, collide_mask) -> np.ndarray:
    """Per-node 1/tau_g, linear in alpha between fluid and solid, zero on walls."""
    inv = alpha / config.tau_g_fluid + (1.0 - alpha) / config.tau_g_solid
    return inv * collide_mask


class ThermalSolver:
    """Evolves the temperature populations over a frozen flow solution."""

    def __init__(self, case: Case, u_flow: np.ndarray,
                 alpha: np.ndarray | None = None,
                 g0: np.ndarray | None = None,
                 bset: ThermalBoundarySet | None = None):
        if case.thermal_stencil is None:
            raise ValueError("case has no thermal stencil")
        self.case = case
        self.stencil = case.thermal_stencil
        self.config = case.config
        self.dims = case.geometry.dims
        self.n = case.geometry.n_nodes
        q, d = self.stencil.q, self.stencil.dim

        alpha = case.design.alpha if alpha is None else alpha
        self.alpha = np.ascontiguousarray(alpha, dtype=float).reshape(self.n)
        self.bset = bset if bset is not None else ThermalBoundarySet(
            self.stencil, case.roles)
        cmask = self.bset.collide_mask.reshape(self.n)
        self.relax = thermal_relax_rate(self.alpha, case.config, cmask)
        self.beta = case.config.beta_max * (1.0 - self.alpha) * cmask
        self.au = (self.alpha * u_flow.reshape(d, self.n))

        self._E = self.stencil.e.astype(float)
        self._W = self.stencil.w[:, None]
        self._src = stream_indices(self.stencil, self.dims)
        self._eau = self._E @ self.au          # frozen flow: e_i . alpha u
        self._geq_shape = 1.0 + 4.0 * self._eau

        if g0 is None:
            self.g = np.zeros((q, self.n))
        else:
            self.g = np.array(g0, dtype=float, copy=True).reshape(q, self.n)
        self._buf = np.empty_like(self.g)
        self._geq = np.empty_like(self.g)
        self.t = np.empty(self.n)
        self.steps = 0
        self.update_macro()

    @property
    def g_field(self):
        return self.g.reshape((self.stencil.q,) + self.dims)

    @property
    def t_field(self):
        return self.t.reshape(self.dims)

    def update_macro(self):
        self.g.sum(axis=0, out=self.t)

    def source(self) -> np.ndarray:
        """Heat generation Q per node for the current temperature."""
        return self.beta * (1.0 - self.t)

    def step(self):
        np.multiply(self._geq_shape, self.t, out=self._geq)
        self._geq *= self._W
        gc = self._geq
        np.subtract(self.g, gc, out=gc)
        gc *= self.relax
        np.subtract(self.g, gc, out=gc)      # gc = g - relax (g - geq)
        gc += self._W * self.source()
        for i in range(self.stencil.q):
            np.take(gc[i], self._src[i], out=self._buf[i])
        self.g, self._buf = self._buf, self.g
        self.bset.apply(self.g)
        self.update_macro()
        self.steps += 1

    def diverged(self) -> bool:
        m = np.abs(self.t).max()
        return (not np.isfinite(m)) or m > 1e3

    def run_to_steady(self, tol: float | None = None,
                      max_steps: int | None = None,
                      window: int = 100) -> RunResult:
        tol = self.config.forward_tol if tol is None else tol
        max_steps = self.config.max_steps if max_steps is None else max_steps
        t_ref = self.t.copy()
        residuals = []
        n = 0
        while n < max_steps:
            self.step()
            n += 1
            if self.diverged():
                return RunResult(Status.DIVERGED, n, residuals, diverged_step=n)
            if n % window == 0:
                dt = np.linalg.norm(self.t - t_ref)
                scale = np.linalg.norm(self.t)
                res = dt / scale if scale > 0 else dt
                done = res < tol or dt <= 1e-13 * np.sqrt(self.t.size)
                residuals.append((n, res))
                np.copyto(t_ref, self.t)
                if done:
                    return RunResult(Status.CONVERGED, n, residuals)
        return RunResult(Status.MAX_STEPS, max_steps, residuals)
