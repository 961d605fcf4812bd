"""Benchmark case builders: 2D/3D pipe bend, 3D microchannel heat sink, channel.

Grid proportions that the reference figures leave unstated (resolutions,
port widths, port centers) are defaults here, overridable from the config
file and echoed into every run manifest.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .domain import (
    BoundarySegment,
    CaseConfig,
    ConfigError,
    DesignState,
    GridGeometry,
    NodeRole,
    NodeRoleMap,
    classify_nodes,
    config_from_mapping,
)
from .lattice import Stencil, make_stencil


@dataclass
class Case:
    """Everything a solver needs: stencil, grid, roles, design, parameters."""

    name: str
    stencil: Stencil
    geometry: GridGeometry
    roles: NodeRoleMap
    design: DesignState
    config: CaseConfig
    char_length: float
    thermal: bool = False
    thermal_stencil: Stencil | None = None
    meta: dict = field(default_factory=dict)


def thermal_relaxation_pair(tau: float, pr: float, conductivity_ratio: float):
    """D3Q7 relaxation times giving a_fluid = nu/Pr and the solid/fluid ratio."""
    nu = (tau - 0.5) / 3.0
    a_fluid = nu / pr
    return 0.5 + 4.0 * a_fluid, 0.5 + 4.0 * conductivity_ratio * a_fluid


def velocity_for_reynolds(re: float, config: CaseConfig, length: float) -> float:
    return re * config.nu / length


def pressure_pair_for_reynolds(re: float, config: CaseConfig, length: float):
    """Inlet/outlet lattice pressures giving Re via U = sqrt(dp / rho0)."""
    ubar = re * config.nu / length
    p0 = config.rho0 / 3.0
    return p0 + config.rho0 * ubar * ubar, p0


def _interior_mask(dims) -> np.ndarray:
    m = np.zeros(dims, dtype=bool)
    m[tuple(slice(1, n - 1) for n in dims)] = True
    return m


def _base_design(roles: NodeRoleMap) -> DesignState:
    """All-fluid initial design; wall nodes carry alpha = 0 and are frozen."""
    dims = roles.geometry.dims
    alpha = np.ones(dims)
    alpha[roles.role == int(NodeRole.WALL)] = 0.0
    phi = np.where(alpha > 0.5, 1.0, -1.0)
    return DesignState(alpha=alpha, phi=phi, designable=_interior_mask(dims))


def _freeze_apron(design: DesignState, sel):
    design.designable[sel] = False
    design.alpha[sel] = 1.0
    design.phi[sel] = 1.0


def _centered_range(extent: int, width: int, center_frac: float):
    center = center_frac * (extent - 1)
    lo = int(round(center - width / 2.0 + 0.5))
    lo = max(1, min(lo, extent - 1 - width))
    return lo, lo + width - 1


def build_pipe_bend_2d(
    config: CaseConfig,
    n: int = 100,
    port_width: int = 20,
    inlet_center: float = 0.75,
    outlet_center: float = 0.75,
    reynolds: float | None = None,
    apron: int = 2,
) -> Case:
    """Open square chamber, velocity inlet on the left face, fixed-density
    outlet on the bottom face (the 2D bend benchmark layout)."""
    config = _resolve_velocity_inflow(config, reynolds, float(port_width))
    geom = GridGeometry((n, n))
    iy0, iy1 = _centered_range(n, port_width, inlet_center)
    ox0, ox1 = _centered_range(n, port_width, outlet_center)
    segments = (
        BoundarySegment(NodeRole.INLET_VELOCITY, axis=0, side=0, lo=(iy0,), hi=(iy1,),
                        value=config.u_in),
        BoundarySegment(NodeRole.OUTLET_PRESSURE, axis=1, side=0, lo=(ox0,), hi=(ox1,),
                        value=config.rho0),
    )
    roles = classify_nodes(geom, segments)
    design = _base_design(roles)
    _freeze_apron(design, (slice(1, 1 + apron), slice(iy0, iy1 + 1)))
    _freeze_apron(design, (slice(ox0, ox1 + 1), slice(1, 1 + apron)))
    return Case(
        name="pipe_bend_2d",
        stencil=make_stencil("D2Q9"),
        geometry=geom,
        roles=roles,
        design=design,
        config=config,
        char_length=float(port_width),
        meta={
            "n": n, "port_width": port_width, "inlet_center": inlet_center,
            "outlet_center": outlet_center, "apron": apron,
            "inlet_span": [iy0, iy1], "outlet_span": [ox0, ox1],
        },
    )


def build_pipe_bend_3d(
    config: CaseConfig,
    n: int = 40,
    port_width: int = 8,
    inlet_center: float = 0.75,
    outlet_center: float = 0.75,
    reynolds: float | None = None,
    apron: int = 2,
) -> Case:
    """Cubic chamber, velocity inlet on the x=0 face, fixed-density outlet on
    the z=0 face; square ports centered on the transverse axis."""
    config = _resolve_velocity_inflow(config, reynolds, float(port_width))
    geom = GridGeometry((n, n, n))
    y0, y1 = _centered_range(n, port_width, 0.5)
    iz0, iz1 = _centered_range(n, port_width, inlet_center)
    ox0, ox1 = _centered_range(n, port_width, outlet_center)
    segments = (
        BoundarySegment(NodeRole.INLET_VELOCITY, axis=0, side=0,
                        lo=(y0, iz0), hi=(y1, iz1), value=config.u_in),
        BoundarySegment(NodeRole.OUTLET_PRESSURE, axis=2, side=0,
                        lo=(ox0, y0), hi=(ox1, y1), value=config.rho0),
    )
    roles = classify_nodes(geom, segments)
    design = _base_design(roles)
    _freeze_apron(design, (slice(1, 1 + apron), slice(y0, y1 + 1), slice(iz0, iz1 + 1)))
    _freeze_apron(design, (slice(ox0, ox1 + 1), slice(y0, y1 + 1), slice(1, 1 + apron)))
    return Case(
        name="pipe_bend_3d",
        stencil=make_stencil("D3Q19"),
        geometry=geom,
        roles=roles,
        design=design,
        config=config,
        char_length=float(port_width),
        meta={
            "n": n, "port_width": port_width, "inlet_center": inlet_center,
            "outlet_center": outlet_center, "apron": apron,
        },
    )


def build_heat_sink_3d(
    config: CaseConfig,
    dims=(32, 16, 16),
    reynolds: float | None = None,
    conductivity_ratio: float = 100.0,
    apron: int = 1,
) -> Case:
    """Quarter microchannel heat sink: pressure-driven flow along +x, cold
    inlet at x=0, outlet at x=max, symmetry planes at the high y/z faces,
    solid walls at the low y/z faces.  One-way coupled D3Q7 heat transfer
    with a volumetric source in the solid."""
    length = float(dims[0])
    if reynolds is not None:
        p1, p0 = pressure_pair_for_reynolds(reynolds, config, length)
        config = config_like(config, u_in=None, p1=p1, p0=p0)
    if config.p1 is None or config.p0 is None:
        raise ConfigError("heat sink is pressure-driven: set p1/p0 or reynolds")
    tg_f, tg_s = thermal_relaxation_pair(config.tau, config.Pr, conductivity_ratio)
    config = config_like(config, tau_g_fluid=tg_f, tau_g_solid=tg_s)

    geom = GridGeometry(dims)
    rho1 = 3.0 * config.p1
    rho_out = 3.0 * config.p0
    segments = (
        BoundarySegment(NodeRole.INLET_PRESSURE, axis=0, side=0, value=rho1),
        BoundarySegment(NodeRole.OUTLET_PRESSURE, axis=0, side=1, value=rho_out),
        BoundarySegment(NodeRole.SYMMETRY, axis=1, side=1),
        BoundarySegment(NodeRole.SYMMETRY, axis=2, side=1),
    )
    roles = classify_nodes(geom, segments)
    design = _base_design(roles)
    if apron:
        _freeze_apron(design, (slice(1, 1 + apron), slice(1, dims[1] - 1), slice(1, dims[2] - 1)))
        _freeze_apron(design, (slice(dims[0] - 1 - apron, dims[0] - 1),
                               slice(1, dims[1] - 1), slice(1, dims[2] - 1)))
    return Case(
        name="heat_sink_3d",
        stencil=make_stencil("D3Q19"),
        geometry=geom,
        roles=roles,
        design=design,
        config=config,
        char_length=length,
        thermal=True,
        thermal_stencil=make_stencil("D3Q7"),
        meta={"dims": list(dims), "conductivity_ratio": conductivity_ratio,
              "apron": apron},
    )


def build_channel_2d(
    config: CaseConfig,
    nx: int = 100,
    ny: int = 40,
    reynolds: float | None = None,
) -> Case:
    """Straight channel: uniform velocity inlet over the full left face,
    fixed-density outlet over the full right face, bounce-back walls top and
    bottom.  Validation case, not designable."""
    config = _resolve_velocity_inflow(config, reynolds, float(ny - 2))
    geom = GridGeometry((nx, ny))
    segments = (
        BoundarySegment(NodeRole.INLET_VELOCITY, axis=0, side=0, value=config.u_in),
        BoundarySegment(NodeRole.OUTLET_PRESSURE, axis=0, side=1, value=config.rho0),
    )
    roles = classify_nodes(geom, segments)
    design = _base_design(roles)
    design.designable[:] = False
    return Case(
        name="channel_2d",
        stencil=make_stencil("D2Q9"),
        geometry=geom,
        roles=roles,
        design=design,
        config=config,
        char_length=float(ny - 2),
        meta={"nx": nx, "ny": ny},
    )


def config_like(config: CaseConfig, **kwargs) -> CaseConfig:
    from dataclasses import replace

    return replace(config, **kwargs)


def _resolve_velocity_inflow(config, reynolds, length):
    if reynolds is not None:
        u = velocity_for_reynolds(reynolds, config, length)
        config = config_like(config, u_in=u, p1=None, p0=None)
    if config.u_in is None:
        raise ConfigError("velocity-driven case: set u_in or reynolds")
    return config


_BUILDERS = {
    "pipe_bend_2d": build_pipe_bend_2d,
    "pipe_bend_3d": build_pipe_bend_3d,
    "heat_sink_3d": build_heat_sink_3d,
    "channel_2d": build_channel_2d,
}

_GEOMETRY_KEYS = {
    "pipe_bend_2d": ("n", "port_width", "inlet_center", "outlet_center",
                     "reynolds", "apron"),
    "pipe_bend_3d": ("n", "port_width", "inlet_center", "outlet_center",
                     "reynolds", "apron"),
    "heat_sink_3d": ("dims", "reynolds", "conductivity_ratio", "apron"),
    "channel_2d": ("nx", "ny", "reynolds"),
}


def build_case(data: dict) -> Case:
    """Build a case from a parsed config mapping (see README for the schema)."""
    name = data.get("case")
    if name not in _BUILDERS:
        raise ConfigError(
            f"unknown or missing case {name!r}; expected one of {sorted(_BUILDERS)}"
        )
    config = config_from_mapping(data)
    kwargs = {}
    for key in _GEOMETRY_KEYS[name]:
        if key in data:
            val = data[key]
            kwargs[key] = tuple(val) if key == "dims" else val
    case = _BUILDERS[name](config, **kwargs)
    case.meta["requested"] = {k: data[k] for k in data if k != "case"}
    return case


def reynolds_number(case: Case) -> float:
    """Re = U L / nu with U = u_in (velocity-driven) or sqrt(dp/rho0)."""
    cfg = case.config
    if cfg.u_in is not None:
        ubar = cfg.u_in
    else:
        dp = (cfg.p1 or 0.0) - (cfg.p0 or 0.0)
        ubar = math.sqrt(max(dp, 0.0) / cfg.rho0)
    return ubar * case.char_length / cfg.nu
