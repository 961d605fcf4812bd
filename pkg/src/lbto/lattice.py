"""Discrete velocity stencils and direction algebra.

The direction ordering below is a frozen public contract: every boundary
closure (velocity/pressure Zou-He, bounce-back, symmetry) and every adjoint
boundary formula in this package is written against it.

D2Q9   index 0 rest, 1-4 axis (+x, +y, -x, -y), 5-8 diagonals.
D3Q19  index 0 rest, 1-6 axis (+x, -x, +y, -y, +z, -z), 7-18 diagonals
       grouped as xy (7-10), xz (11-14), yz (15-18).
D3Q7   index 0 rest, 1-6 axis in the same +x, -x, +y, -y, +z, -z order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

STENCIL_KINDS = ("D2Q9", "D3Q19", "D3Q7")

_Q9_E = (
    (0, 0),
    (1, 0), (0, 1), (-1, 0), (0, -1),
    (1, 1), (-1, 1), (-1, -1), (1, -1),
)
_Q9_W = (Fraction(4, 9),) + (Fraction(1, 9),) * 4 + (Fraction(1, 36),) * 4
_Q9_OPP = (0, 3, 4, 1, 2, 7, 8, 5, 6)

_Q19_E = (
    (0, 0, 0),
    (1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1),
    (1, 1, 0), (-1, 1, 0), (1, -1, 0), (-1, -1, 0),
    (1, 0, 1), (-1, 0, 1), (1, 0, -1), (-1, 0, -1),
    (0, 1, 1), (0, -1, 1), (0, 1, -1), (0, -1, -1),
)
_Q19_W = (Fraction(1, 3),) + (Fraction(1, 18),) * 6 + (Fraction(1, 36),) * 12
_Q19_OPP = (0, 2, 1, 4, 3, 6, 5, 10, 9, 8, 7, 14, 13, 12, 11, 18, 17, 16, 15)

_Q7_E = (
    (0, 0, 0),
    (1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1),
)
_Q7_W = (Fraction(1, 4),) + (Fraction(1, 8),) * 6
_Q7_OPP = (0, 2, 1, 4, 3, 6, 5)

_TABLES = {
    "D2Q9": (_Q9_E, _Q9_W, _Q9_OPP, Fraction(1, 3)),
    "D3Q19": (_Q19_E, _Q19_W, _Q19_OPP, Fraction(1, 3)),
    "D3Q7": (_Q7_E, _Q7_W, _Q7_OPP, Fraction(1, 4)),
}


class StencilError(ValueError):
    """Unknown stencil kind or direction index out of range."""


@dataclass(frozen=True)
class Stencil:
    """Immutable discrete velocity set.

    Attributes
    ----------
    e : (q, dim) int array of direction vectors, one lattice spacing per step.
    w : (q,) float array of quadrature weights.
    opposite : (q,) int array with ``e[opposite[i]] == -e[i]``.
    cs2 : lattice sound speed squared (1/3 for flow stencils, 1/4 for D3Q7).
    w_exact, cs2_exact : the same quantities as exact rationals.
    """

    kind: str
    dim: int
    q: int
    e: np.ndarray = field(repr=False)
    w: np.ndarray = field(repr=False)
    opposite: np.ndarray = field(repr=False)
    cs2: float
    w_exact: tuple = field(repr=False)
    cs2_exact: Fraction = field(repr=False)

    def __post_init__(self):
        self.e.setflags(write=False)
        self.w.setflags(write=False)
        self.opposite.setflags(write=False)

    @property
    def wq(self) -> np.ndarray:
        """Weights shaped (q, 1, ..., 1) for broadcasting over grid axes."""
        return self.w.reshape((self.q,) + (1,) * self.dim)


def make_stencil(kind: str) -> Stencil:
    """Build one of the supported stencils by name."""
    try:
        e_tab, w_tab, opp_tab, cs2 = _TABLES[kind]
    except KeyError:
        raise StencilError(
            f"unknown stencil kind {kind!r}; expected one of {STENCIL_KINDS}"
        ) from None
    e = np.array(e_tab, dtype=np.int64)
    return Stencil(
        kind=kind,
        dim=e.shape[1],
        q=e.shape[0],
        e=e,
        w=np.array([float(w) for w in w_tab]),
        opposite=np.array(opp_tab, dtype=np.int64),
        cs2=float(cs2),
        w_exact=tuple(w_tab),
        cs2_exact=cs2,
    )


def opposite_index(stencil: Stencil, i: int) -> int:
    """Index of the direction opposite to ``i``."""
    if not 0 <= i < stencil.q:
        raise StencilError(f"direction index {i} out of range for {stencil.kind}")
    return int(stencil.opposite[i])


def directions_on_face(stencil: Stencil, axis: int, sign: int):
    """Partition direction indices by their component along a face normal.

    ``axis``/``sign`` define the inward unit normal n = sign * e_axis of a
    domain face.  Returns (into, outof, inplane): indices with e.n > 0
    (pointing into the domain), e.n < 0, and e.n = 0.
    """
    comp = stencil.e[:, axis] * sign
    into = np.nonzero(comp > 0)[0]
    outof = np.nonzero(comp < 0)[0]
    inplane = np.nonzero(comp == 0)[0]
    return into, outof, inplane


def mirror_map(stencil: Stencil, axes: tuple) -> np.ndarray:
    """Direction permutation that flips the velocity components on ``axes``.

    Used for specular reflection at symmetry planes.
    """
    e_ref = stencil.e.copy()
    for a in axes:
        e_ref[:, a] *= -1
    out = np.empty(stencil.q, dtype=np.int64)
    for i in range(stencil.q):
        match = np.nonzero((stencil.e == e_ref[i]).all(axis=1))[0]
        out[i] = match[0]
    return out
