"""Domains with closed-form distance to the boundary, and boundary-graded meshes.

Coordinates near a boundary are never recovered by subtracting node positions:
every mesh keeps the exact offset of each node from its nearest boundary point,
and cell widths are differences of those offsets.  This is what allows cells
far below the float spacing of the node coordinates themselves (1e-30 next to
``x = 1`` is fine).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np
from scipy.optimize import brentq

INTERVAL = "interval"
RADIAL_BALL = "radial_ball"
RADIAL_ANNULUS = "radial_annulus"
DISC2D = "disc2d"

KINDS = (INTERVAL, RADIAL_BALL, RADIAL_ANNULUS, DISC2D)


class InvalidDomain(ValueError):
    pass


class TooCoarse(ValueError):
    pass


@dataclass(frozen=True)
class DomainSpec:
    """One of the four supported domains.

    Use the constructors rather than filling ``params`` by hand:

    >>> DomainSpec.interval(0.0, 1.0).half_width
    0.5
    """

    kind: str
    params: tuple

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidDomain(f"unknown domain kind {self.kind!r}")
        vals = self.params
        if not all(isinstance(v, (int, float)) and math.isfinite(v) for v in vals):
            raise InvalidDomain(f"non-finite domain parameters {vals}")
        if self.kind == INTERVAL:
            a, b = vals
            if not a < b:
                raise InvalidDomain(f"interval needs a < b, got ({a}, {b})")
        elif self.kind == RADIAL_BALL:
            n, R = vals
            if int(n) != n or n < 1:
                raise InvalidDomain(f"ball dimension must be an integer >= 1, got {n}")
            if R <= 0:
                raise InvalidDomain(f"ball radius must be positive, got {R}")
        elif self.kind == RADIAL_ANNULUS:
            n, r_in, r_out = vals
            if int(n) != n or n < 1:
                raise InvalidDomain(f"annulus dimension must be an integer >= 1, got {n}")
            if not 0 < r_in < r_out:
                raise InvalidDomain(f"annulus needs 0 < R_in < R_out, got ({r_in}, {r_out})")
        else:
            (R,) = vals
            if R <= 0:
                raise InvalidDomain(f"disc radius must be positive, got {R}")

    @classmethod
    def interval(cls, a: float = 0.0, b: float = 1.0) -> "DomainSpec":
        return cls(INTERVAL, (float(a), float(b)))

    @classmethod
    def radial_ball(cls, n: int, R: float = 1.0) -> "DomainSpec":
        return cls(RADIAL_BALL, (n, float(R)))

    @classmethod
    def radial_annulus(cls, n: int, r_in: float, r_out: float) -> "DomainSpec":
        return cls(RADIAL_ANNULUS, (n, float(r_in), float(r_out)))

    @classmethod
    def disc(cls, R: float = 1.0) -> "DomainSpec":
        return cls(DISC2D, (float(R),))

    @property
    def dimension(self) -> int:
        if self.kind == INTERVAL:
            return 1
        if self.kind == DISC2D:
            return 2
        return int(self.params[0])

    @property
    def half_width(self) -> float:
        """Largest distance to the boundary attained in the domain."""
        if self.kind in (INTERVAL,):
            a, b = self.params
            return 0.5 * (b - a)
        if self.kind == RADIAL_ANNULUS:
            _, r_in, r_out = self.params
            return 0.5 * (r_out - r_in)
        return float(self.params[-1])

    @property
    def is_convex(self) -> bool:
        return self.kind != RADIAL_ANNULUS

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": list(self.params)}

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        kind = d["kind"]
        params = tuple(d["params"])
        if kind in (RADIAL_BALL, RADIAL_ANNULUS):
            params = (int(params[0]),) + tuple(float(v) for v in params[1:])
        else:
            params = tuple(float(v) for v in params)
        return cls(kind, params)


def distance(spec: DomainSpec, x, theta=None):
    """Closed-form d_Omega at points given by their coordinate.

    ``x`` is the Cartesian coordinate for an interval and the radius otherwise;
    the disc distance does not depend on ``theta``.
    """
    x = np.asarray(x, dtype=float)
    if spec.kind == INTERVAL:
        a, b = spec.params
        return np.minimum(x - a, b - x)
    if spec.kind == RADIAL_ANNULUS:
        _, r_in, r_out = spec.params
        return np.minimum(r_out - x, x - r_in)
    R = spec.params[-1]
    return R - x


def _poly_offsets(n_cells: int, width: float, gamma: float) -> np.ndarray:
    xi = np.arange(n_cells + 1) / n_cells
    return width * xi**gamma


def _geometric_offsets(h_min: float, target: float, ratio: float, extra: int = 0) -> np.ndarray:
    """Offsets 0 < h_min < ... reaching ``target`` exactly with growth <= ratio.

    ``extra`` cells beyond the minimum count lower the growth factor."""
    n = int(math.ceil(math.log1p(target * (ratio - 1.0) / h_min) / math.log(ratio)))
    n = max(n, 1) + extra
    if n == 1:
        return np.array([0.0, target])

    def total(q):
        return h_min * (q**n - 1.0) / (q - 1.0) - target

    # total(ratio) >= 0 by choice of n; the sum is increasing in q
    q = brentq(total, 1.0 + 1e-12, ratio, xtol=1e-15, rtol=4 * np.finfo(float).eps)
    widths = h_min * q ** np.arange(n)
    off = np.concatenate(([0.0], np.cumsum(widths)))
    off[-1] = target
    return off


def graded_offsets(
    n_cells: int,
    width: float,
    gamma: float,
    layer_h_min: Optional[float] = None,
    layer_ratio: float = 1.1,
) -> np.ndarray:
    """Offsets from a boundary point, clustered toward it.

    The base map sends xi in [0, 1] to ``width * xi**gamma``.  With ``layer_h_min``
    the first polynomial cells are replaced by a geometric sequence starting at
    ``layer_h_min``; the switch happens where the polynomial cell width matches
    ``(layer_ratio - 1) * offset``, so widths stay monotone across the seam.
    """
    off = _poly_offsets(n_cells, width, gamma)
    if layer_h_min is None or off[1] <= layer_h_min:
        return off
    if layer_ratio <= 1.0:
        raise ValueError("layer_ratio must exceed 1")
    k_switch = int(math.ceil(gamma / (layer_ratio - 1.0)))
    k_switch = min(max(k_switch, 1), n_cells - 1)
    while off[k_switch] < 2.0 * layer_h_min and k_switch < n_cells:
        k_switch += 1
    next_width = off[k_switch + 1] - off[k_switch] if k_switch < n_cells else math.inf
    for extra in range(64):
        geo = _geometric_offsets(layer_h_min, off[k_switch], layer_ratio, extra)
        if geo[-1] - geo[-2] <= next_width:
            break
    return np.concatenate((geo, off[k_switch + 1 :]))


@dataclass(frozen=True, eq=False)
class Mesh:
    """Boundary-graded grid; immutable once built.

    ``nodes`` holds x (interval) or r (radial and disc).  For the disc the grid
    is the tensor product of ``nodes`` with the periodic ``theta`` array; node
    row 0 is the centre (one shared unknown) and the last row is the boundary.
    ``dist`` and ``spacing`` are per radial/x node and per cell.
    """

    spec: DomainSpec
    nodes: np.ndarray
    dist: np.ndarray
    spacing: np.ndarray
    grading_exponent: float
    boundary_layer_width: float
    cells_per_direction: int
    layer_h_min: Optional[float] = None
    layer_ratio: float = 1.1
    theta: Optional[np.ndarray] = None
    boundary_index: tuple = field(default=())

    @property
    def kind(self) -> str:
        return self.spec.kind

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def shape(self) -> tuple:
        """Shape of a field on this mesh."""
        if self.theta is None:
            return (len(self.nodes),)
        return (len(self.nodes), len(self.theta))

    @property
    def h_min(self) -> float:
        return float(self.spacing.min())

    @property
    def half_width(self) -> float:
        return self.spec.half_width

    @property
    def is_boundary(self) -> np.ndarray:
        """Boolean mask over the 1D node array."""
        mask = np.zeros(len(self.nodes), dtype=bool)
        mask[list(self.boundary_index)] = True
        return mask

    @property
    def inward_normal_index_map(self) -> dict:
        """For each boundary node index, node indices along the inward normal.

        Lines run from the boundary to the farthest point from it (midpoint of
        an interval or annulus, centre of a ball).  For the disc every angle
        shares the same radial line, keyed by the boundary row index.
        """
        i_far = int(np.argmax(self.dist))
        out = {}
        for ib in self.boundary_index:
            if ib < i_far:
                out[ib] = np.arange(ib, i_far + 1)
            else:
                out[ib] = np.arange(ib, i_far - 1, -1)
        return out

    def dist_field(self) -> np.ndarray:
        """d_Omega broadcast to the field shape."""
        if self.theta is None:
            return self.dist.copy()
        return np.repeat(self.dist[:, None], len(self.theta), axis=1)

    def layer_mask(self, delta: Optional[float] = None) -> np.ndarray:
        """Interior nodes with 0 < d < delta, in field shape."""
        delta = self.boundary_layer_width if delta is None else delta
        d = self.dist_field()
        return (d > 0) & (d < delta)

    @cached_property
    def ops(self):
        from .operators import build_operators

        return build_operators(self)

    def to_csv(self, path) -> None:
        widths = self.cell_widths()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            if self.theta is None:
                w.writerow(["index", "x" if self.kind == INTERVAL else "r", "dist", "cell_width"])
                for i, (x, d, cw) in enumerate(zip(self.nodes, self.dist, widths)):
                    w.writerow([i, repr(float(x)), repr(float(d)), repr(float(cw))])
            else:
                w.writerow(["index", "r", "theta", "dist", "cell_width"])
                idx = 0
                for j, (r, d, cw) in enumerate(zip(self.nodes, self.dist, widths)):
                    for th in self.theta:
                        w.writerow([idx, repr(float(r)), repr(float(th)), repr(float(d)), repr(float(cw))])
                        idx += 1

    def cell_widths(self) -> np.ndarray:
        """Control-volume width per node: half the sum of adjacent spacings."""
        s = self.spacing
        cw = np.zeros(len(self.nodes))
        cw[:-1] += 0.5 * s
        cw[1:] += 0.5 * s
        return cw


def build_mesh(
    spec: DomainSpec,
    cells_per_direction: int,
    grading_exponent: float = 2.0,
    *,
    layer_h_min: Optional[float] = None,
    layer_ratio: float = 1.1,
    n_theta: int = 32,
    layer_delta: Optional[float] = None,
) -> Mesh:
    """Build a mesh graded toward every Dirichlet boundary.

    Interval and annulus: ``cells_per_direction`` cells across, half of them on
    each side of the midpoint.  Ball and disc: that many cells along the radius,
    graded toward r = R only.
    """
    if not isinstance(spec, DomainSpec):
        raise InvalidDomain("spec must be a DomainSpec")
    if cells_per_direction < 8:
        raise TooCoarse(f"need at least 8 cells per direction, got {cells_per_direction}")
    if not 1.0 <= grading_exponent <= 4.0:
        raise ValueError(f"grading exponent must lie in [1, 4], got {grading_exponent}")
    if layer_h_min is not None and layer_h_min <= 0:
        raise ValueError("layer_h_min must be positive")

    H = spec.half_width
    delta = 0.2 * H if layer_delta is None else float(layer_delta)
    theta = None

    if spec.kind in (INTERVAL, RADIAL_ANNULUS):
        if cells_per_direction % 2:
            raise ValueError("cells_per_direction must be even for two-sided grading")
        off = graded_offsets(cells_per_direction // 2, H, grading_exponent, layer_h_min, layer_ratio)
        lo, hi = (spec.params if spec.kind == INTERVAL else spec.params[1:])
        left = lo + off
        right = (hi - off[::-1])[1:]
        nodes = np.concatenate((left, right))
        dist = np.concatenate((off, off[::-1][1:]))
        cells = np.diff(off)
        spacing = np.concatenate((cells, cells[::-1]))
        bidx = (0, len(nodes) - 1)
    else:
        R = spec.params[-1]
        off = graded_offsets(cells_per_direction, R, grading_exponent, layer_h_min, layer_ratio)
        dist = off[::-1].copy()
        nodes = R - dist
        nodes[0] = 0.0
        spacing = np.diff(off)[::-1].copy()
        bidx = (len(nodes) - 1,)
        if spec.kind == DISC2D:
            if n_theta < 4:
                raise TooCoarse("need at least 4 angular cells")
            theta = 2.0 * np.pi * np.arange(n_theta) / n_theta

    return Mesh(
        spec=spec,
        nodes=nodes,
        dist=dist,
        spacing=spacing,
        grading_exponent=float(grading_exponent),
        boundary_layer_width=delta,
        cells_per_direction=int(cells_per_direction),
        layer_h_min=layer_h_min,
        layer_ratio=layer_ratio,
        theta=theta,
        boundary_index=bidx,
    )


def distance_field(mesh: Mesh) -> np.ndarray:
    """Exact d_Omega at every node of ``mesh`` (field shape)."""
    return mesh.dist_field()


def resolving_h_min(p: float, G_max: float, factor: float = 0.05) -> float:
    """Smallest cell needed to resolve gradients up to ``G_max``.

    A quasi-stationary boundary layer with u_x(0) = m has width
    1 / ((p - 1) m**(p - 1)); ``factor`` cells of that width are asked for.
    """
    return factor / ((p - 1.0) * G_max ** (p - 1.0))
