"""Grid geometry, node classification, design state and case configuration."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from enum import IntEnum
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


class ConfigError(ValueError):
    """Invalid case configuration or boundary specification."""


class NodeRole(IntEnum):
    INTERIOR = 0
    WALL = 1
    INLET_VELOCITY = 2
    INLET_PRESSURE = 3
    OUTLET_PRESSURE = 4
    SYMMETRY = 5


OPEN_ROLES = (NodeRole.INLET_VELOCITY, NodeRole.INLET_PRESSURE, NodeRole.OUTLET_PRESSURE)


@dataclass(frozen=True)
class GridGeometry:
    """Cartesian node grid, unit spacing, extents in nodes per axis."""

    dims: tuple

    def __post_init__(self):
        if len(self.dims) not in (2, 3):
            raise ConfigError(f"grid must be 2D or 3D, got dims={self.dims}")
        if any(n < 3 for n in self.dims):
            raise ConfigError(f"every grid extent must be >= 3, got {self.dims}")

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.dims))


@dataclass(frozen=True)
class BoundarySegment:
    """Axis-aligned patch of one domain face.

    ``axis``/``side`` select the face (side 0 = low face, 1 = high face);
    ``lo``/``hi`` are inclusive node ranges on the remaining axes, in axis
    order, or None for the full face.  ``value`` is u_in for velocity inlets
    and the prescribed density for pressure boundaries.
    """

    role: NodeRole
    axis: int
    side: int
    lo: tuple | None = None
    hi: tuple | None = None
    value: float = 0.0


@dataclass
class NodeRoleMap:
    """Per-node boundary classification plus the boundary segment list."""

    geometry: GridGeometry
    role: np.ndarray
    segments: tuple
    n_inlet: int
    w_in: float

    def nodes_with_role(self, role: NodeRole):
        return np.nonzero(self.role == role)


def face_indexer(geometry: GridGeometry, seg: BoundarySegment):
    """Slice tuple selecting the nodes of a segment, or raise if off-grid."""
    dims = geometry.dims
    if not 0 <= seg.axis < len(dims):
        raise ConfigError(f"segment axis {seg.axis} invalid for {len(dims)}D grid")
    other_axes = [a for a in range(len(dims)) if a != seg.axis]
    lo = seg.lo if seg.lo is not None else tuple(0 for _ in other_axes)
    hi = seg.hi if seg.hi is not None else tuple(dims[a] - 1 for a in other_axes)
    if len(lo) != len(other_axes) or len(hi) != len(other_axes):
        raise ConfigError("segment lo/hi must give one range per transverse axis")
    sel = [None] * len(dims)
    sel[seg.axis] = dims[seg.axis] - 1 if seg.side else 0
    for a, l, h in zip(other_axes, lo, hi):
        if not (0 <= l <= h < dims[a]):
            raise ConfigError(
                f"segment range [{l}, {h}] outside axis {a} of extent {dims[a]}"
            )
        sel[a] = slice(l, h + 1)
    return tuple(sel)


def classify_nodes(geometry: GridGeometry, segments) -> NodeRoleMap:
    """Build the role map from axis-aligned face segments.

    Unlisted face nodes default to walls.  Nodes on more than one face
    (edges and corners) are forced to the wall role unless every face they
    belong to carries the symmetry role; two open segments claiming one node
    with different roles is an error.
    """
    dims = geometry.dims
    role = np.full(dims, int(NodeRole.INTERIOR), dtype=np.int8)

    on_face_count = np.zeros(dims, dtype=np.int8)
    sym_face_count = np.zeros(dims, dtype=np.int8)
    for axis in range(len(dims)):
        for side in (0, 1):
            sel = [slice(None)] * len(dims)
            sel[axis] = dims[axis] - 1 if side else 0
            on_face_count[tuple(sel)] += 1
            role[tuple(sel)] = int(NodeRole.WALL)

    claimed = np.zeros(dims, dtype=np.int8)
    for seg in segments:
        sel = face_indexer(geometry, seg)
        prev = role[sel]
        already = claimed[sel] > 0
        # edge/corner nodes may be claimed from several faces; the corner
        # rule below owns them, so only single-face overlap is a conflict
        single = on_face_count[sel] == 1
        if np.any(already & single & (prev != int(seg.role))):
            raise ConfigError(
                f"segment {seg} overlaps a previous segment with a different role"
            )
        role[sel] = int(seg.role)
        claimed[sel] = 1
        if seg.role == NodeRole.SYMMETRY:
            sym_face_count[sel] += 1

    # corner rule: multi-face nodes revert to wall unless all faces are symmetry
    multi = on_face_count >= 2
    role[multi & (sym_face_count < on_face_count)] = int(NodeRole.WALL)

    inlet = np.isin(role, (int(NodeRole.INLET_VELOCITY), int(NodeRole.INLET_PRESSURE)))
    n_inlet = int(inlet.sum())
    return NodeRoleMap(
        geometry=geometry,
        role=role,
        segments=tuple(segments),
        n_inlet=n_inlet,
        w_in=float(n_inlet),
    )


@dataclass
class DesignState:
    """Binary design field alpha and its continuous level-set relaxation phi.

    alpha is defined on every node: 1 on fluid, 0 on solid.  Only nodes in
    the designable mask are controlled by the optimizer; everything else is
    frozen (chamber walls at 0, open boundaries and forced-fluid aprons at 1).
    """

    alpha: np.ndarray
    phi: np.ndarray
    designable: np.ndarray

    def copy(self) -> "DesignState":
        return DesignState(self.alpha.copy(), self.phi.copy(), self.designable)


def map_levelset_to_design(state: DesignState) -> DesignState:
    """Update alpha from phi on designable nodes: fluid iff phi >= 0."""
    np.clip(state.phi, -1.0, 1.0, out=state.phi)
    d = state.designable
    state.alpha[d] = np.where(state.phi[d] >= 0.0, 1.0, 0.0)
    return state


def volume_constraint(state: DesignState, vmax: float) -> float:
    """G = sum(alpha) - vmax * N over the designable region (G <= 0 feasible)."""
    n = int(state.designable.sum())
    return float(state.alpha[state.designable].sum() - vmax * n)


@dataclass(frozen=True)
class CaseConfig:
    """Physical and algorithmic parameters, all in lattice units."""

    tau: float = 0.8
    rho0: float = 1.0
    u_in: float | None = None
    p1: float | None = None
    p0: float | None = None
    Vmax: float = 1.0
    K: float = 1.0
    sigma: float = 5e-3
    dxi: float = 1.0
    Pr: float = 7.1
    beta_max: float = 1e-5
    tau_g_fluid: float = 0.6
    tau_g_solid: float = 10.5
    forward_tol: float = 1e-8
    adjoint_tol: float = 1e-8
    max_steps: int = 200_000
    stability_iter_cap: int = 20_000
    fdm_step: float = 1e-3
    max_outer_iterations: int = 200

    def __post_init__(self):
        if not self.tau > 0.5:
            raise ConfigError(f"tau must exceed 0.5 (got {self.tau})")
        if not (self.tau_g_fluid > 0.5 and self.tau_g_solid > 0.5):
            raise ConfigError("thermal relaxation times must exceed 0.5")
        if not 0.0 < self.Vmax <= 1.0:
            raise ConfigError(f"Vmax must lie in (0, 1] (got {self.Vmax})")
        for name in ("forward_tol", "adjoint_tol", "fdm_step"):
            if not getattr(self, name) > 0.0:
                raise ConfigError(f"{name} must be positive")
        if self.rho0 <= 0.0:
            raise ConfigError("rho0 must be positive")
        has_p = self.p1 is not None or self.p0 is not None
        if has_p and (self.p1 is None or self.p0 is None):
            raise ConfigError("pressure-driven cases need both p1 and p0")
        if self.u_in is not None and has_p:
            raise ConfigError("specify either u_in or the (p1, p0) pair, not both")

    @property
    def nu(self) -> float:
        """Kinematic viscosity (tau - 0.5) / 3."""
        return (self.tau - 0.5) / 3.0


_CONFIG_KEYS = {f.name for f in fields(CaseConfig)}


def config_from_mapping(data: dict) -> CaseConfig:
    extra = {k: v for k, v in data.items() if k in _CONFIG_KEYS}
    return CaseConfig(**extra)


def load_config_file(path) -> dict:
    """Read a JSON or TOML case description into a plain dict.

    A run manifest (JSON with a ``config`` key) is accepted as well, so any
    finished run can be replayed from its manifest.
    """
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix.lower() == ".toml":
        try:
            data = tomllib.loads(raw.decode())
        except tomllib.TOMLDecodeError as err:
            raise ConfigError(f"{path}: invalid TOML: {err}") from None
    else:
        try:
            data = json.loads(raw.decode())
        except json.JSONDecodeError as err:
            raise ConfigError(
                f"{path}: invalid JSON at line {err.lineno}, column {err.colno}: {err.msg}"
            ) from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a table/object")
    if "config" in data and isinstance(data["config"], dict):
        data = data["config"]
    return data


def with_overrides(config: CaseConfig, **kwargs) -> CaseConfig:
    return replace(config, **kwargs)
