"""Linearized collision and its transpose about a frozen flow state.

The equilibrium depends on the populations through rho = sum_i f_i and
rho0 u = sum_i e_i f_i, so its Jacobian about a state (u, alpha) is

    d feq_m / d f_i = w_m [1 + 3 a (e_m.e_i) + 9 a^2 (e_m.u)(e_m.e_i)
                           - 3 a^2 (u.e_i)]

Both adjoint methods relax with the transpose of this Jacobian; the forward
linearization is kept alongside for the transpose (dot-product) tests.  All
fields are flat (q, N) with per-node ``alpha`` and ``relax`` = 1/tau
(zero on non-colliding wall nodes).
"""

from __future__ import annotations

import numpy as np

from .lattice import Stencil


def adjoint_collision(fstar, u, alpha, relax, stencil: Stencil, rho0: float,
                      out=None):
    """out_i = fs_i - relax (fs_i - sum_m dfeq_m/df_i fs_m)."""
    e = stencil.e.astype(float)
    w = stencil.w[:, None]
    wfs = w * fstar
    a_node = wfs.sum(axis=0)                       # sum_m w_m fs_m
    p = e.T @ wfs                                  # sum_m w_m e_m fs_m
    eu = e @ u
    qv = e.T @ (eu * wfs)                          # sum_m w_m (e_m.u) e_m fs_m
    a2 = alpha * alpha
    jt = e @ p
    jt *= 3.0 * alpha
    jt += (9.0 * a2) * (e @ qv)
    jt += a_node
    jt -= (3.0 * a2) * eu * a_node
    if out is None:
        out = np.empty_like(fstar)
    np.subtract(fstar, jt, out=out)
    out *= relax
    np.subtract(fstar, out, out=out)
    return out


def linearized_collision(df, u, alpha, relax, stencil: Stencil, rho0: float,
                         out=None):
    """Forward-mode counterpart: out_i = df_i - relax (df_i - dfeq_i[df])."""
    e = stencil.e.astype(float)
    w = stencil.w[:, None]
    a0 = df.sum(axis=0)
    pa = e.T @ df
    eu = e @ u
    epa = e @ pa
    a2 = alpha * alpha
    upa = np.einsum("dn,dn->n", u, pa)
    dfeq = 3.0 * alpha * epa
    dfeq += (9.0 * a2) * eu * epa
    dfeq += a0 - (3.0 * a2) * upa
    dfeq *= w
    if out is None:
        out = np.empty_like(df)
    np.subtract(df, dfeq, out=out)
    out *= relax
    np.subtract(df, out, out=out)
    return out


def collision_jacobian_dense(u_node, alpha, stencil: Stencil, rho0: float,
                             tau: float) -> np.ndarray:
    """Dense q x q collision Jacobian at one node (test oracle)."""
    q = stencil.q
    e = stencil.e.astype(float)
    jac = np.empty((q, q))
    a2 = alpha * alpha
    for m in range(q):
        em_u = e[m] @ u_node
        for i in range(q):
            jac[m, i] = stencil.w[m] * (
                1.0
                + 3.0 * alpha * (e[m] @ e[i])
                + 9.0 * a2 * em_u * (e[m] @ e[i])
                - 3.0 * a2 * (u_node @ e[i])
            )
    return np.eye(q) - (np.eye(q) - jac) / tau


def adjoint_thermal_collision(gstar, au, relax_g, stencil: Stencil, out=None):
    """Transpose of the thermal collision: the thermal equilibrium Jacobian
    d geq_m / d g_i = w_m (1 + 4 e_m.(alpha u)) does not depend on i, so the
    relaxation target is one scalar field per node."""
    e = stencil.e.astype(float)
    w = stencil.w[:, None]
    wgs = w * gstar
    a_node = wgs.sum(axis=0)
    p = e.T @ wgs
    target = a_node + 4.0 * np.einsum("dn,dn->n", au, p)
    if out is None:
        out = np.empty_like(gstar)
    np.subtract(gstar, target, out=out)
    out *= relax_g
    np.subtract(gstar, out, out=out)
    return out


def linearized_thermal_collision(dg, au, relax_g, beta, stencil: Stencil,
                                 out=None):
    """Forward linearization of the thermal collision including the source
    Q = beta (1 - T):  d(w_i Q)/dg = -w_i beta sum_m dg_m."""
    e = stencil.e.astype(float)
    w = stencil.w[:, None]
    a0 = dg.sum(axis=0)
    eau = e @ au
    dgeq = w * ((1.0 + 4.0 * eau) * a0)
    if out is None:
        out = np.empty_like(dg)
    np.subtract(dg, dgeq, out=out)
    out *= relax_g
    np.subtract(dg, out, out=out)
    out -= w * (beta * a0)
    return out
