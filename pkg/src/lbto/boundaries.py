"""Boundary condition machinery shared by the forward and adjoint solvers.

Open boundaries use the non-equilibrium bounce-back (Zou-He) closure written
once as a per-node affine map; each boundary group carries the map's matrix
M and offset c, built mechanically by probing that closure with unit vectors
(exact, the map is affine).  The forward solver applies M f + c; the
reverse-mode solver applies M^T, which is the definition of the discrete
adjoint boundary condition.  Hand-derived closed forms of the transposed
maps exist alongside and every constructed group is checked against them,
so a transcription error in either path fails loudly at setup.

Walls are fullway bounce-back: wall-face nodes reverse all populations and
are excluded from collision.  The reversal is a symmetric permutation, hence
self-adjoint.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .domain import NodeRole, NodeRoleMap, face_indexer
from .lattice import Stencil, directions_on_face, mirror_map


class AdjointConsistencyError(RuntimeError):
    """Closed-form adjoint boundary map disagrees with the mechanical B^T."""


@dataclass(frozen=True)
class FaceSets:
    """Direction index bookkeeping for one face orientation.

    ``axis``/``sign`` give the inward normal n = sign * e_axis.  ``into``
    are the post-streaming unknowns (e.n > 0), ``outof`` their opposites in
    matching order, ``inplane`` the rest.  In 2D, ``tsign`` holds e.t per
    unknown for the transverse Zou-He correction and ``tplus``/``tminus``
    the axis directions along the transverse unit vector t.
    """

    axis: int
    sign: int
    into: np.ndarray
    outof: np.ndarray
    inplane: np.ndarray
    tsign: np.ndarray | None = None
    tplus: int = -1
    tminus: int = -1


def face_sets(stencil: Stencil, axis: int, sign: int) -> FaceSets:
    into, _, inplane = directions_on_face(stencil, axis, sign)
    outof = stencil.opposite[into]
    tsign = None
    tplus = tminus = -1
    if stencil.dim == 2:
        t_axis = 1 - axis
        tsign = stencil.e[into, t_axis].astype(np.int64)
        axis_dirs = np.nonzero(np.abs(stencil.e).sum(axis=1) == 1)[0]
        for d in axis_dirs:
            if stencil.e[d, t_axis] == 1:
                tplus = int(d)
            elif stencil.e[d, t_axis] == -1:
                tminus = int(d)
    return FaceSets(axis=axis, sign=sign, into=into, outof=outof,
                    inplane=inplane, tsign=tsign, tplus=tplus, tminus=tminus)


def zou_he_node(fs: np.ndarray, stencil: Stencil, sets: FaceSets, rho0: float,
                mode: str, value: float) -> np.ndarray:
    """Zou-He closure on one node's populations.

    mode 'velocity': ``value`` is the prescribed inward normal velocity.
    mode 'pressure': ``value`` is the prescribed density; the normal momentum
    follows from the density constraint.  Unknowns are rebuilt as
    f_i = f_ibar + 6 w_i rho0 u_n (+ transverse correction in 2D); everything
    else passes through.
    """
    out = fs.copy()
    if mode == "velocity":
        run = rho0 * value
    elif mode == "pressure":
        run = value - fs[sets.inplane].sum() - 2.0 * fs[sets.outof].sum()
    else:
        raise ValueError(f"unknown open-boundary mode {mode!r}")
    for k, kb, m in zip(sets.into, sets.outof, range(len(sets.into))):
        new = fs[kb] + 6.0 * stencil.w[k] * run
        if stencil.dim == 2 and sets.tsign[m] != 0:
            new -= sets.tsign[m] * 0.5 * (fs[sets.tplus] - fs[sets.tminus])
        out[k] = new
    return out


def symmetry_node(fs: np.ndarray, sets: FaceSets, mirror: np.ndarray) -> np.ndarray:
    """Specular reflection: unknowns copy their mirrored partner."""
    out = fs.copy()
    for k in sets.into:
        out[k] = fs[mirror[k]]
    return out


_OPEN_MODE = {
    NodeRole.INLET_VELOCITY: "velocity",
    NodeRole.INLET_PRESSURE: "pressure",
    NodeRole.OUTLET_PRESSURE: "pressure",
}


@dataclass
class BoundaryGroup:
    role: NodeRole
    sets: FaceSets
    idx: np.ndarray  # flat node indices into the (q, N) population array
    value: float
    matrix: np.ndarray = field(repr=False, default=None)
    offset: np.ndarray = field(repr=False, default=None)
    matrix_t: np.ndarray = field(repr=False, default=None)
    mirror: np.ndarray | None = field(repr=False, default=None)

    @property
    def n_nodes(self) -> int:
        return len(self.idx)


def _group_matrix(group: BoundaryGroup, stencil: Stencil, rho0: float):
    q = stencil.q

    def probe(vec):
        if group.role == NodeRole.SYMMETRY:
            return symmetry_node(vec, group.sets, group.mirror)
        return zou_he_node(vec, stencil, group.sets, rho0,
                           _OPEN_MODE[group.role], group.value)

    offset = probe(np.zeros(q))
    mat = np.empty((q, q))
    for k in range(q):
        unit = np.zeros(q)
        unit[k] = 1.0
        mat[:, k] = probe(unit) - offset
    return mat, offset


def adjoint_closed_form(group: BoundaryGroup, stencil: Stencil,
                        fc: np.ndarray) -> np.ndarray:
    """Hand-derived transpose of the forward boundary map, applied to the
    per-node adjoint vectors ``fc`` of shape (q, n).

    These are the closed forms the mechanical M^T must reproduce; the
    velocity-inlet and pressure cases reduce on canonical faces to the
    printed per-direction formulas checked in the test suite.
    """
    out = fc.copy()
    sets = group.sets
    if group.role == NodeRole.SYMMETRY:
        for k in sets.into:
            out[group.mirror[k]] = fc[group.mirror[k]] + fc[k]
        out[sets.into] = 0.0
        return out

    mode = _OPEN_MODE[group.role]
    if mode == "pressure":
        y = np.einsum("k,kn->n", 6.0 * stencil.w[sets.into], fc[sets.into])
        out[sets.inplane] -= y
        for k, kb in zip(sets.into, sets.outof):
            out[kb] = fc[kb] + fc[k] - 2.0 * y
    else:
        for k, kb in zip(sets.into, sets.outof):
            out[kb] = fc[kb] + fc[k]
    if stencil.dim == 2:
        for k, t in zip(sets.into, sets.tsign):
            if t > 0:
                out[sets.tplus] -= 0.5 * fc[k]
                out[sets.tminus] += 0.5 * fc[k]
            elif t < 0:
                out[sets.tplus] += 0.5 * fc[k]
                out[sets.tminus] -= 0.5 * fc[k]
    out[sets.into] = 0.0
    return out


class BoundarySet:
    """All flow boundary treatment for one case, forward and adjoint.

    Operates on populations laid out flat as (q, N); node membership of every
    group is precomputed as flat index arrays.
    """

    def __init__(self, stencil: Stencil, roles: NodeRoleMap, rho0: float,
                 verify: bool = True):
        self.stencil = stencil
        self.rho0 = rho0
        dims = roles.geometry.dims
        self.wall_mask = (roles.role == int(NodeRole.WALL)).ravel()
        self.wall_idx = np.nonzero(self.wall_mask)[0]
        self.collide_mask = (~self.wall_mask).reshape(dims)
        self.groups = []

        for seg in roles.segments:
            if seg.role == NodeRole.WALL:
                continue
            axis, sign = seg.axis, (-1 if seg.side else +1)
            sets = face_sets(stencil, axis, sign)
            mask = np.zeros(dims, dtype=bool)
            mask[face_indexer(roles.geometry, seg)] = True
            mask &= roles.role == int(seg.role)  # corner rule may have shaved edges
            if not mask.any():
                continue
            group = BoundaryGroup(
                role=seg.role, sets=sets,
                idx=np.nonzero(mask.ravel())[0], value=seg.value,
                mirror=mirror_map(stencil, (axis,)) if seg.role == NodeRole.SYMMETRY else None,
            )
            group.matrix, group.offset = _group_matrix(group, stencil, rho0)
            group.matrix_t = np.ascontiguousarray(group.matrix.T)
            self.groups.append(group)
        if verify:
            self.verify_adjoint_consistency()

    # -- forward ----------------------------------------------------------

    def apply(self, f: np.ndarray) -> None:
        """Overwrite boundary-node populations in place (post-streaming)."""
        if len(self.wall_idx):
            f[:, self.wall_idx] = f[self.stencil.opposite][:, self.wall_idx]
        for g in self.groups:
            f[:, g.idx] = g.matrix @ f[:, g.idx] + g.offset[:, None]

    def apply_linear(self, df: np.ndarray) -> None:
        """Linear part only (for linearized-operator and transpose tests)."""
        if len(self.wall_idx):
            df[:, self.wall_idx] = df[self.stencil.opposite][:, self.wall_idx]
        for g in self.groups:
            df[:, g.idx] = g.matrix @ df[:, g.idx]

    # -- discrete adjoint ---------------------------------------------------

    def apply_adjoint(self, fc: np.ndarray) -> None:
        """In-place B^T: unknown directions zeroed, outgoing accumulate."""
        if len(self.wall_idx):
            fc[:, self.wall_idx] = fc[self.stencil.opposite][:, self.wall_idx]
        for g in self.groups:
            fc[:, g.idx] = g.matrix_t @ fc[:, g.idx]

    # -- setup-time self check ---------------------------------------------

    def verify_adjoint_consistency(self, n_states: int = 32, seed: int = 0) -> None:
        rng = np.random.default_rng(seed)
        for g in self.groups:
            vecs = rng.standard_normal((self.stencil.q, n_states))
            mech = g.matrix_t @ vecs
            hand = adjoint_closed_form(g, self.stencil, vecs)
            err = np.abs(mech - hand)
            if err.max() > 1e-13:
                i, _ = np.unravel_index(err.argmax(), err.shape)
                raise AdjointConsistencyError(
                    f"adjoint boundary mismatch for role {g.role.name} "
                    f"(axis={g.sets.axis}, sign={g.sets.sign}) in direction {i}: "
                    f"max |B^T - closed form| = {err.max():.3e}"
                )


class ThermalBoundarySet:
    """D3Q7 boundary treatment for the heat-transfer populations.

    Inlet: anti-bounce-back pinning the inlet temperature to zero.
    Outlet: fully developed, the unknown copies its upstream neighbour
    (the one non-local boundary map; its transpose scatters back upstream).
    Walls: adiabatic fullway bounce-back.  Symmetry: specular reflection,
    which for D3Q7 coincides with bounce-back of the normal direction.
    """

    def __init__(self, stencil: Stencil, roles: NodeRoleMap):
        self.stencil = stencil
        dims = roles.geometry.dims
        self.wall_idx = np.nonzero((roles.role == int(NodeRole.WALL)).ravel())[0]
        self.collide_mask = roles.role != int(NodeRole.WALL)
        self.inlet = []
        self.outlet = []
        self.symmetry = []

        for seg in roles.segments:
            if seg.role == NodeRole.WALL:
                continue
            axis, sign = seg.axis, (-1 if seg.side else +1)
            sets = face_sets(stencil, axis, sign)
            mask = np.zeros(dims, dtype=bool)
            mask[face_indexer(roles.geometry, seg)] = True
            mask &= roles.role == int(seg.role)
            if not mask.any():
                continue
            coords = np.nonzero(mask)
            idx = np.ravel_multi_index(coords, dims)
            if seg.role in (NodeRole.INLET_VELOCITY, NodeRole.INLET_PRESSURE):
                self.inlet.append((sets, idx))
            elif seg.role == NodeRole.OUTLET_PRESSURE:
                up = list(coords)
                up[axis] = coords[axis] + sign  # one node into the domain
                self.outlet.append((sets, idx, np.ravel_multi_index(tuple(up), dims)))
            elif seg.role == NodeRole.SYMMETRY:
                self.symmetry.append((sets, idx))

    def apply(self, g: np.ndarray) -> None:
        opp = self.stencil.opposite
        if len(self.wall_idx):
            g[:, self.wall_idx] = g[opp][:, self.wall_idx]
        for sets, idx in self.inlet:
            for k in sets.into:
                g[k, idx] = -g[opp[k], idx]
        for sets, idx, up in self.outlet:
            for k in sets.into:
                g[k, idx] = g[k, up]
        for sets, idx in self.symmetry:
            for k in sets.into:
                g[k, idx] = g[opp[k], idx]

    def apply_adjoint(self, gc: np.ndarray) -> None:
        opp = self.stencil.opposite
        if len(self.wall_idx):
            gc[:, self.wall_idx] = gc[opp][:, self.wall_idx]
        for sets, idx in self.inlet:
            for k in sets.into:
                kb = opp[k]
                gc[kb, idx] = gc[kb, idx] - gc[k, idx]
                gc[k, idx] = 0.0
        for sets, idx, up in self.outlet:
            for k in sets.into:
                gc[k, up] = gc[k, up] + gc[k, idx]
                gc[k, idx] = 0.0
        for sets, idx in self.symmetry:
            for k in sets.into:
                kb = opp[k]
                gc[kb, idx] = gc[kb, idx] + gc[k, idx]
                gc[k, idx] = 0.0
