"""Forward BGK lattice Boltzmann solver with design-variable penalization.

One time step is collide -> stream -> boundary conditions.  Streaming wraps
periodically; the wrapped values are placeholders that the boundary step
overwrites, which keeps the streaming operator a pure (unitary) index
permutation.  Solid regions stay in the lattice: alpha = 0 suppresses the
velocity inside the equilibrium instead of removing nodes.

The module-level functions are the grid-shaped reference implementations.
``FlowSolver`` runs the same update on flat (q, N) arrays with preallocated
buffers and index-gather streaming; a regression test pins the two paths to
each other bit-for-bit apart from rounding order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .boundaries import BoundarySet
from .cases import Case, reynolds_number  # noqa: F401  (re-exported API)
from .lattice import Stencil


class Status(str, Enum):
    CONVERGED = "converged"
    MAX_STEPS = "max-steps"
    DIVERGED = "diverged"


@dataclass
class RunResult:
    status: Status
    steps: int
    residuals: list = field(default_factory=list)
    diverged_step: int | None = None

    @property
    def ok(self) -> bool:
        return self.status == Status.CONVERGED


def equilibrium(rho, u, alpha, stencil: Stencil, rho0: float) -> np.ndarray:
    """Extended equilibrium with the velocity scaled by the design variable."""
    au = alpha * u
    eu = np.einsum("qd,d...->q...", stencil.e.astype(float), au)
    au2 = np.einsum("d...,d...->...", au, au)
    return stencil.wq * (rho + rho0 * (3.0 * eu + 4.5 * eu * eu - 1.5 * au2))


def moments(f, stencil: Stencil, rho0: float):
    """Density and velocity from the zeroth and first moments."""
    rho = f.sum(axis=0)
    u = np.einsum("qd,q...->d...", stencil.e.astype(float), f) / rho0
    return rho, u


def collide(f, feq, relax):
    """BGK relaxation toward equilibrium; ``relax`` is 1/tau per node
    (zero on non-colliding wall nodes)."""
    return f - relax * (f - feq)


def stream(f, stencil: Stencil, out=None):
    """Shift every population one lattice link with periodic wraparound."""
    if out is None:
        out = np.empty_like(f)
    axes = tuple(range(f.ndim - 1))
    for i in range(stencil.q):
        out[i] = np.roll(f[i], shift=tuple(stencil.e[i]), axis=axes)
    return out


def stream_reversed(f, stencil: Stencil, out=None):
    """Exact inverse permutation of :func:`stream` (adjoint streaming)."""
    if out is None:
        out = np.empty_like(f)
    axes = tuple(range(f.ndim - 1))
    for i in range(stencil.q):
        out[i] = np.roll(f[i], shift=tuple(-stencil.e[i]), axis=axes)
    return out


def stream_indices(stencil: Stencil, dims, reverse: bool = False) -> np.ndarray:
    """Per-direction flat gather maps realizing periodic streaming.

    ``out[i].flat[n] = f[i].flat[src[i, n]]`` reproduces :func:`stream`
    (or its inverse with ``reverse=True``).
    """
    coords = np.indices(dims)
    src = np.empty((stencil.q, int(np.prod(dims))), dtype=np.int64)
    sgn = 1 if reverse else -1
    for i in range(stencil.q):
        shifted = [
            (coords[a] + sgn * stencil.e[i, a]) % dims[a]
            for a in range(len(dims))
        ]
        src[i] = np.ravel_multi_index(shifted, dims).ravel()
    return src


class FlowSolver:
    """Owns the populations and macroscopic fields of one flow simulation.

    Internally everything is flat (q, N); the ``*_field`` properties expose
    grid-shaped views.
    """

    def __init__(self, case: Case, alpha: np.ndarray | None = None,
                 f0: np.ndarray | None = None, bset: BoundarySet | None = None):
        self.case = case
        self.stencil = case.stencil
        self.config = case.config
        self.rho0 = case.config.rho0
        self.dims = case.geometry.dims
        self.n = case.geometry.n_nodes
        q, d = self.stencil.q, self.stencil.dim

        alpha = case.design.alpha if alpha is None else alpha
        self.alpha = np.ascontiguousarray(alpha, dtype=float).reshape(self.n)
        self.bset = bset if bset is not None else BoundarySet(
            case.stencil, case.roles, case.config.rho0)
        self.relax = (self.bset.collide_mask.reshape(self.n) / case.config.tau)

        self._E = self.stencil.e.astype(float)            # (q, d)
        self._W = self.stencil.w[:, None]                  # (q, 1)
        self._src = stream_indices(self.stencil, self.dims)

        if f0 is None:
            self.f = np.tile(self._W * self.rho0, (1, self.n))
        else:
            self.f = np.array(f0, dtype=float, copy=True).reshape(q, self.n)
        self._buf = np.empty_like(self.f)
        self._feq = np.empty_like(self.f)
        self._eu = np.empty_like(self.f)
        self.rho = np.empty(self.n)
        self.u = np.empty((d, self.n))
        self._au = np.empty((d, self.n))
        self._node = np.empty(self.n)
        self.steps = 0
        self.update_macro()

    # -- grid-shaped views --------------------------------------------------

    @property
    def f_field(self):
        return self.f.reshape((self.stencil.q,) + self.dims)

    @property
    def rho_field(self):
        return self.rho.reshape(self.dims)

    @property
    def u_field(self):
        return self.u.reshape((self.stencil.dim,) + self.dims)

    @property
    def alpha_field(self):
        return self.alpha.reshape(self.dims)

    def update_macro(self):
        self.f.sum(axis=0, out=self.rho)
        np.matmul(self._E.T, self.f, out=self.u)
        if self.rho0 != 1.0:
            self.u *= 1.0 / self.rho0

    def _compute_equilibrium(self):
        """Fill self._feq from the current macroscopic fields."""
        np.multiply(self.u, self.alpha, out=self._au)
        np.matmul(self._E, self._au, out=self._eu)
        feq = self._feq
        np.multiply(self._eu, 4.5, out=feq)
        feq += 3.0
        feq *= self._eu
        feq *= self.rho0
        # node part: rho - 1.5 rho0 |alpha u|^2
        np.einsum("dn,dn->n", self._au, self._au, out=self._node)
        self._node *= -1.5 * self.rho0
        self._node += self.rho
        feq += self._node
        feq *= self._W

    def step(self):
        self._compute_equilibrium()
        fc = self._feq
        np.subtract(self.f, fc, out=fc)     # fc = f - feq
        fc *= self.relax
        np.subtract(self.f, fc, out=fc)     # fc = f - relax (f - feq)
        for i in range(self.stencil.q):
            np.take(fc[i], self._src[i], out=self._buf[i])
        self.f, self._buf = self._buf, self.f
        self.bset.apply(self.f)
        self.update_macro()
        self.steps += 1

    def diverged(self) -> bool:
        m = np.abs(self.rho - self.rho0).max()
        return (not np.isfinite(m)) or m > 10.0 * self.rho0

    def run_to_steady(self, tol: float | None = None,
                      max_steps: int | None = None,
                      window: int = 100,
                      min_steps: int = 0) -> RunResult:
        """Iterate until the relative L2 change of u over ``window`` steps
        drops below ``tol``.  Divergence is a reported status, not an error."""
        tol = self.config.forward_tol if tol is None else tol
        max_steps = self.config.max_steps if max_steps is None else max_steps
        u_ref = self.u.copy()
        residuals = []
        n = 0
        while n < max_steps:
            self.step()
            n += 1
            if self.diverged():
                return RunResult(Status.DIVERGED, n, residuals, diverged_step=n)
            if n % window == 0:
                du = np.linalg.norm(self.u - u_ref)
                scale = np.linalg.norm(self.u)
                # relative change, with an absolute escape so a machine-zero
                # velocity field (still inflow) counts as steady
                res = du / scale if scale > 0 else du
                done = res < tol or du <= 1e-13 * np.sqrt(self.u.size)
                residuals.append((n, res))
                np.copyto(u_ref, self.u)
                if done and n >= min_steps:
                    return RunResult(Status.CONVERGED, n, residuals)
        return RunResult(Status.MAX_STEPS, max_steps, residuals)

    def mass(self) -> float:
        return float(self.f.sum())
