"""Box geometry: grids, boundary bookkeeping, collar masks and cutoffs.

Everything downstream (solver, boundary maps, probes, inequality checks)
works on a vertex-centered uniform grid over a closed axis-aligned box.
This module owns the grid, the assignment of boundary nodes to faces,
the measurement patch on the boundary, and the family of shrinking
boundary collars with their smooth cutoff functions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

from .errors import ConfigError, GeometryError

# Face order doubles as the priority used to assign edge and corner nodes
# to exactly one face (first match wins).
FACES = ("x-", "x+", "y-", "y+", "z-", "z+")

# face -> (axis, side) with side 0 for the low face, 1 for the high face
_FACE_AXIS_SIDE = {
    "x-": (0, 0), "x+": (0, 1),
    "y-": (1, 0), "y+": (1, 1),
    "z-": (2, 0), "z+": (2, 1),
}

# Inner normal of each face (points into the box).
_FACE_INNER_NORMAL = {
    "x-": np.array([1.0, 0.0, 0.0]), "x+": np.array([-1.0, 0.0, 0.0]),
    "y-": np.array([0.0, 1.0, 0.0]), "y+": np.array([0.0, -1.0, 0.0]),
    "z-": np.array([0.0, 0.0, 1.0]), "z+": np.array([0.0, 0.0, -1.0]),
}


def smoothstep5(t):
    """Quintic smoothstep: 0 for t <= 0, 1 for t >= 1, C^2 in between."""
    t = np.clip(t, 0.0, 1.0)
    return t * t * t * (t * (6.0 * t - 15.0) + 10.0)


@dataclass(frozen=True)
class GridSpec:
    """Vertex-centered uniform grid over a closed cube.

    box_origin is the low corner, box_side the edge length, and
    points_per_axis the vertex count per axis (both endpoints included),
    so the spacing is box_side / (points_per_axis - 1).
    """

    box_origin: Tuple[float, float, float]
    box_side: float
    points_per_axis: int

    def __post_init__(self):
        if self.points_per_axis < 8:
            raise ConfigError(
                f"points_per_axis must be >= 8, got {self.points_per_axis}")
        if not (self.box_side > 0.0):
            raise ConfigError(f"box_side must be positive, got {self.box_side}")
        origin = tuple(float(c) for c in self.box_origin)
        if len(origin) != 3:
            raise ConfigError("box_origin must have three components")
        object.__setattr__(self, "box_origin", origin)

    @property
    def n(self) -> int:
        return self.points_per_axis

    @property
    def spacing(self) -> float:
        return self.box_side / (self.points_per_axis - 1)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return (self.n, self.n, self.n)

    @property
    def n_nodes(self) -> int:
        return self.n ** 3

    def axis(self, d: int) -> np.ndarray:
        """Node coordinates along axis d."""
        return self.box_origin[d] + self.spacing * np.arange(self.n)

    def coords(self):
        """Three (N,N,N) coordinate arrays, indexed [ix, iy, iz]."""
        return np.meshgrid(self.axis(0), self.axis(1), self.axis(2),
                           indexing="ij")

    def flat_index(self, ix, iy, iz):
        """Flat node id with x varying fastest."""
        n = self.n
        return ix + n * (iy + n * iz)

    def unflatten(self, flat):
        n = self.n
        ix = flat % n
        iy = (flat // n) % n
        iz = flat // (n * n)
        return ix, iy, iz

    def node_coords(self, flat):
        ix, iy, iz = self.unflatten(np.asarray(flat))
        h = self.spacing
        o = self.box_origin
        return np.stack([o[0] + h * ix, o[1] + h * iy, o[2] + h * iz], axis=-1)

    def enclosing_radius(self) -> float:
        """Radius of the smallest origin-centered ball containing the box."""
        lo = np.array(self.box_origin)
        hi = lo + self.box_side
        corners = np.array([[a, b, c] for a in (lo[0], hi[0])
                            for b in (lo[1], hi[1]) for c in (lo[2], hi[2])])
        return float(np.max(np.linalg.norm(corners, axis=1)))

    def same_layout(self, other: "GridSpec") -> bool:
        return (self.points_per_axis == other.points_per_axis
                and np.isclose(self.box_side, other.box_side)
                and np.allclose(self.box_origin, other.box_origin))


def _locked(values: np.ndarray) -> np.ndarray:
    out = np.array(values)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class ScalarField:
    """Real grid function. Values are copied and frozen on construction."""

    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != self.grid.shape:
            raise ConfigError(
                f"field shape {v.shape} does not match grid {self.grid.shape}")
        object.__setattr__(self, "values", _locked(v))

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.values)))


@dataclass(frozen=True)
class ComplexField:
    """Complex grid function. Values are copied and frozen on construction."""

    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.complex128)
        if v.shape != self.grid.shape:
            raise ConfigError(
                f"field shape {v.shape} does not match grid {self.grid.shape}")
        object.__setattr__(self, "values", _locked(v))

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.values)))


@dataclass(frozen=True)
class GammaSpec:
    """Measurement patch request: a disc on one face, or the whole boundary."""

    face: str = "all"
    center_uv: Tuple[float, float] = (0.5, 0.5)
    radius: float = 0.0

    def __post_init__(self):
        if self.face != "all" and self.face not in FACES:
            raise ConfigError(
                f"gamma.face must be one of {FACES + ('all',)}, got {self.face!r}")


@dataclass(frozen=True)
class BoundaryPatch:
    """Concrete node set of the measurement patch.

    positions indexes into the domain's boundary-node ordering;
    node_flat holds the corresponding flat grid ids.
    """

    face: str
    node_flat: np.ndarray
    positions: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "node_flat", _locked(np.asarray(self.node_flat, dtype=np.int64)))
        object.__setattr__(self, "positions", _locked(np.asarray(self.positions, dtype=np.int64)))

    @property
    def size(self) -> int:
        return int(self.node_flat.size)


@dataclass(frozen=True)
class DomainSpec:
    """The closed box with its boundary bookkeeping and measurement patch.

    boundary_flat / boundary_face / boundary_normal describe each boundary
    node exactly once: edge and corner nodes are assigned to a single face
    by the fixed priority order in FACES, and carry that face's unit inner
    normal. outward_mask[b, d] says whether direction d (ordered as FACES)
    points out of the box at boundary node b; edge and corner nodes have
    two or three outward directions even though only one face is assigned.
    """

    grid: GridSpec
    interior_mask: np.ndarray
    boundary_flat: np.ndarray
    boundary_face: np.ndarray
    boundary_normal: np.ndarray
    outward_mask: np.ndarray
    boundary_pos: np.ndarray
    face_grids: dict
    gamma: BoundaryPatch
    partial_data: bool = field(default=True)

    @property
    def n_boundary(self) -> int:
        return int(self.boundary_flat.size)

    def face_name(self, face_id: int) -> str:
        return FACES[face_id]

    def boundary_coords(self) -> np.ndarray:
        return self.grid.node_coords(self.boundary_flat)


def _boundary_bookkeeping(grid: GridSpec):
    n = grid.n
    idx = np.arange(n)
    ix, iy, iz = np.meshgrid(idx, idx, idx, indexing="ij")
    on_face = {
        "x-": ix == 0, "x+": ix == n - 1,
        "y-": iy == 0, "y+": iy == n - 1,
        "z-": iz == 0, "z+": iz == n - 1,
    }
    is_boundary = np.zeros(grid.shape, dtype=bool)
    for f in FACES:
        is_boundary |= on_face[f]

    flat_all = grid.flat_index(ix, iy, iz)
    boundary_flat = np.sort(flat_all[is_boundary].ravel())

    # Assigned face: first face (in priority order) containing the node.
    face_id = np.full(grid.shape, -1, dtype=np.int8)
    for fid in range(len(FACES) - 1, -1, -1):
        face_id[on_face[FACES[fid]]] = fid
    bx, by, bz = grid.unflatten(boundary_flat)
    boundary_face = face_id[bx, by, bz].astype(np.int8)

    normals = np.array([_FACE_INNER_NORMAL[f] for f in FACES])
    boundary_normal = normals[boundary_face]

    outward = np.zeros((boundary_flat.size, 6), dtype=bool)
    for fid, f in enumerate(FACES):
        outward[:, fid] = on_face[f][bx, by, bz]

    boundary_pos = np.full(grid.n_nodes, -1, dtype=np.int64)
    boundary_pos[boundary_flat] = np.arange(boundary_flat.size)

    face_grids = {}
    for f in FACES:
        axis, side = _FACE_AXIS_SIDE[f]
        other = [d for d in range(3) if d != axis]
        coord = [None, None, None]
        coord[axis] = np.full((n, n), 0 if side == 0 else n - 1, dtype=np.int64)
        iu, iv = np.meshgrid(idx, idx, indexing="ij")
        coord[other[0]] = iu
        coord[other[1]] = iv
        face_grids[f] = grid.flat_index(coord[0], coord[1], coord[2])

    return (boundary_flat, boundary_face, boundary_normal, outward,
            boundary_pos, face_grids)


def face_axes(face: str):
    """(normal axis, side index, in-face axes) for a named face."""
    axis, side = _FACE_AXIS_SIDE[face]
    other = tuple(d for d in range(3) if d != axis)
    return axis, side, other


def _gamma_nodes(grid: GridSpec, spec: GammaSpec, face_grids, boundary_pos):
    if spec.face == "all":
        flat = np.flatnonzero(boundary_pos >= 0)
        return flat.astype(np.int64)

    axis, side, other = face_axes(spec.face)
    fg = face_grids[spec.face]
    n = grid.n
    h = grid.spacing
    cu = grid.box_origin[other[0]] + spec.center_uv[0] * grid.box_side
    cv = grid.box_origin[other[1]] + spec.center_uv[1] * grid.box_side
    u = grid.box_origin[other[0]] + h * np.arange(n)
    v = grid.box_origin[other[1]] + h * np.arange(n)
    uu, vv = np.meshgrid(u, v, indexing="ij")
    dist = np.hypot(uu - cu, vv - cv)
    sel = dist <= spec.radius + 1e-12 * grid.box_side
    return np.sort(fg[sel].ravel()).astype(np.int64)


def build_box_domain(grid: GridSpec, gamma: GammaSpec) -> DomainSpec:
    """Construct the closed-box domain with its measurement patch.

    Raises GeometryError if the requested patch contains no grid node.
    """
    (boundary_flat, boundary_face, boundary_normal, outward,
     boundary_pos, face_grids) = _boundary_bookkeeping(grid)

    gamma_flat = _gamma_nodes(grid, gamma, face_grids, boundary_pos)
    if gamma_flat.size == 0:
        raise GeometryError(
            f"measurement patch is empty: face={gamma.face!r} "
            f"center_uv={gamma.center_uv} radius={gamma.radius}")
    positions = boundary_pos[gamma_flat]
    patch = BoundaryPatch(face=gamma.face, node_flat=gamma_flat,
                          positions=positions)

    interior_mask = np.ones(grid.shape, dtype=bool)

    return DomainSpec(
        grid=grid,
        interior_mask=_locked(interior_mask),
        boundary_flat=_locked(boundary_flat),
        boundary_face=_locked(boundary_face),
        boundary_normal=_locked(boundary_normal),
        outward_mask=_locked(outward),
        boundary_pos=_locked(boundary_pos),
        face_grids={f: _locked(g) for f, g in face_grids.items()},
        gamma=patch,
        partial_data=(gamma.face != "all"),
    )


def boundary_depth(grid: GridSpec) -> np.ndarray:
    """Distance of every node to the nearest box face."""
    x, y, z = grid.coords()
    lo = np.array(grid.box_origin)
    hi = lo + grid.box_side
    d = np.minimum(x - lo[0], hi[0] - x)
    d = np.minimum(d, np.minimum(y - lo[1], hi[1] - y))
    d = np.minimum(d, np.minimum(z - lo[2], hi[2] - z))
    return d


@dataclass(frozen=True)
class AnnulusFamily:
    """Four nested boundary collars with smooth transition cutoffs.

    masks[j] marks nodes within depth widths[j] of the boundary; the
    collars shrink strictly (each closure sits inside the previous collar
    with at least one grid cell to spare). chi vanishes on the thinnest
    collar and equals one outside the second collar; theta is one near the
    boundary and vanishes before the inner rim of the widest collar.
    """

    domain: DomainSpec
    widths: Tuple[float, float, float, float]
    masks: Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]
    chi: ScalarField
    theta: ScalarField

    def mask(self, j: int) -> np.ndarray:
        return self.masks[j]


def _dilate6(mask: np.ndarray) -> np.ndarray:
    """One-cell dilation with the 6-neighbor stencil, clipped at the box."""
    out = mask.copy()
    out[1:, :, :] |= mask[:-1, :, :]
    out[:-1, :, :] |= mask[1:, :, :]
    out[:, 1:, :] |= mask[:, :-1, :]
    out[:, :-1, :] |= mask[:, 1:, :]
    out[:, :, 1:] |= mask[:, :, :-1]
    out[:, :, :-1] |= mask[:, :, 1:]
    return out


def build_annuli(domain: DomainSpec, widths) -> AnnulusFamily:
    """Build the nested collar family for the given depth widths.

    widths must be strictly decreasing and positive, the widest collar
    must leave interior room, and consecutive collars must be separated
    by at least one grid cell so the closure inclusions are strict.
    """
    widths = tuple(float(w) for w in widths)
    if len(widths) != 4:
        raise GeometryError(f"need exactly 4 collar widths, got {len(widths)}")
    grid = domain.grid
    h = grid.spacing
    L = grid.box_side

    for j in range(3):
        if not widths[j] > widths[j + 1]:
            raise GeometryError(
                f"collar widths must decrease strictly: width[{j}]={widths[j]} "
                f"<= width[{j+1}]={widths[j+1]}")
    if widths[3] <= 0.0:
        raise GeometryError(f"thinnest collar width must be positive, got {widths[3]}")
    if widths[0] >= 0.5 * L:
        raise GeometryError(
            f"widest collar {widths[0]} leaves no interior in a box of side {L}")

    depth = boundary_depth(grid)
    masks = tuple(depth < w - 1e-12 * L for w in widths)

    # Strict nesting with one-cell collars, reported by the first violation.
    for j in range(1, 4):
        grown = _dilate6(masks[j])
        if np.any(grown & ~masks[j - 1]):
            raise GeometryError(
                f"collar {j} is not one full cell inside collar {j-1}: "
                f"widths {widths[j]} vs {widths[j-1]} at spacing {h}")

    w0, w1, w2, w3 = widths
    chi_vals = smoothstep5((depth - w3) / (w2 - w3))
    t1 = w1 + (w0 - w1) / 3.0
    t2 = w1 + 2.0 * (w0 - w1) / 3.0
    theta_vals = 1.0 - smoothstep5((depth - t1) / (t2 - t1))

    return AnnulusFamily(
        domain=domain,
        widths=widths,
        masks=tuple(_locked(m) for m in masks),
        chi=ScalarField(grid, chi_vals),
        theta=ScalarField(grid, theta_vals),
    )


def restrict_potential_support(q: ScalarField, family: AnnulusFamily) -> ScalarField:
    """Zero the potential on the widest collar so it lives deep inside."""
    if not q.grid.same_layout(family.domain.grid):
        raise ConfigError("potential grid does not match the collar family grid")
    out = q.values.copy()
    out[family.masks[0]] = 0.0
    return ScalarField(q.grid, out)
