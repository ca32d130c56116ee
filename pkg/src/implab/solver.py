"""Finite-difference solver for the lossy interior wave problem.

Discretizes (-Laplace - k^2 + q)u = F on the box with the impedance
condition (d_nu - ik)u = f on the boundary, nu the INNER normal. The
scheme is the 7-point Laplacian with centered ghost-node elimination of
the boundary condition, one elimination per outward direction, so edge
and corner nodes close two or three directions at once. Eliminating the
ghost in outward direction d turns the row into

  (6 u0 - sum_available u_nbr - sum_out u_opp)/dx^2
      + (2ik m/dx - k^2 + q) u0  =  F0 - (2/dx) sum_out f_d

with m the number of outward directions and f_d the Robin datum of the
face crossed in direction d. Supplying per-face data keeps the closure
second order at edges; per-node data degrades those nodes to first order.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConfigError, SolverConvergenceError
from .geometry import ComplexField, DomainSpec, FACES, GridSpec, ScalarField
from .norms import boundary_l2, grid_h1, grid_l2, h1_seminorm_sq
from .testfields import random_band_limited

_FACE_AXIS_SIDE = {
    "x-": (0, 0), "x+": (0, 1),
    "y-": (1, 0), "y+": (1, 1),
    "z-": (2, 0), "z+": (2, 1),
}

# direct factorization up to this many points per axis, Krylov above
DIRECT_N_LIMIT = 33


def flatten(values: np.ndarray) -> np.ndarray:
    """Grid cube -> vector in x-fastest order (matches flat_index)."""
    return np.asarray(values).ravel(order="F")


def unflatten_cube(vec: np.ndarray, grid: GridSpec) -> np.ndarray:
    return np.asarray(vec).reshape(grid.shape, order="F")


@dataclass(frozen=True)
class SolverParams:
    k: float = 1.0
    tolerance: float = 1e-10
    max_iterations: int = 2000
    method: Optional[str] = None  # None = pick by grid size

    def __post_init__(self):
        if self.k < 0:
            raise ConfigError(f"frequency must be nonnegative, got {self.k}")
        if not (0.0 < self.tolerance < 1.0):
            raise ConfigError(f"tolerance must lie in (0,1), got {self.tolerance}")
        if self.method not in (None, "direct", "iterative"):
            raise ConfigError(f"unknown solver method {self.method!r}")

    def resolved_method(self, grid: GridSpec) -> str:
        if self.method is not None:
            return self.method
        return "direct" if grid.n <= DIRECT_N_LIMIT else "iterative"


@dataclass(frozen=True)
class BoundaryTrace:
    """Robin datum f on the boundary.

    Either one value per boundary node (node_values, indexed by boundary
    position), or one (N,N) array per face (face_values), which is the
    accurate choice at box edges where the datum is direction dependent.
    """

    domain: DomainSpec
    node_values: Optional[np.ndarray] = None
    face_values: Optional[dict] = None

    def __post_init__(self):
        if (self.node_values is None) == (self.face_values is None):
            raise ConfigError("provide exactly one of node_values / face_values")
        if self.node_values is not None:
            v = np.asarray(self.node_values, dtype=np.complex128)
            if v.shape != (self.domain.n_boundary,):
                raise ConfigError(
                    f"node_values must have shape ({self.domain.n_boundary},)")
            object.__setattr__(self, "node_values", v)
        else:
            n = self.domain.grid.n
            fixed = {}
            for face, arr in self.face_values.items():
                if face not in FACES:
                    raise ConfigError(f"unknown face {face!r}")
                a = np.asarray(arr, dtype=np.complex128)
                if a.shape != (n, n):
                    raise ConfigError(f"face {face} values must be ({n},{n})")
                fixed[face] = a
            object.__setattr__(self, "face_values", fixed)

    @classmethod
    def zero(cls, domain: DomainSpec) -> "BoundaryTrace":
        return cls(domain, node_values=np.zeros(domain.n_boundary, dtype=complex))

    @classmethod
    def from_nodes(cls, domain: DomainSpec, values) -> "BoundaryTrace":
        return cls(domain, node_values=np.asarray(values, dtype=complex))

    @classmethod
    def from_function(cls, domain: DomainSpec, fn) -> "BoundaryTrace":
        """fn(points (...,3), inner_normal (3,)) -> complex values.

        Evaluated face by face, so edge nodes get the correct datum for
        each direction they close.
        """
        vals = {}
        for face in FACES:
            fg = domain.face_grids[face]
            pts = domain.grid.node_coords(fg)
            fid = FACES.index(face)
            normal = _inner_normal(fid)
            vals[face] = np.asarray(fn(pts, normal), dtype=complex)
        return cls(domain, face_values=vals)

    def values_for_face(self, face: str) -> np.ndarray:
        if self.face_values is not None:
            n = self.domain.grid.n
            return self.face_values.get(face, np.zeros((n, n), dtype=complex))
        w = np.zeros(self.domain.grid.n_nodes, dtype=complex)
        w[self.domain.boundary_flat] = self.node_values
        return w[self.domain.face_grids[face]]

    def as_node_values(self) -> np.ndarray:
        """One value per boundary node, taken from its assigned face."""
        if self.node_values is not None:
            return self.node_values.copy()
        out = np.zeros(self.domain.n_boundary, dtype=complex)
        for fid, face in enumerate(FACES):
            sel = self.domain.boundary_face == fid
            w = np.zeros(self.domain.grid.n_nodes, dtype=complex)
            w[self.domain.face_grids[face].ravel()] = self.values_for_face(face).ravel()
            out[sel] = w[self.domain.boundary_flat[sel]]
        return out

    def l2(self) -> float:
        return boundary_l2(self.domain, self.as_node_values())


def _inner_normal(fid: int) -> np.ndarray:
    n = np.zeros(3)
    axis, side = _FACE_AXIS_SIDE[FACES[fid]]
    n[axis] = 1.0 if side == 0 else -1.0
    return n


@dataclass
class ImpedanceSolution:
    u: ComplexField
    residual: float
    iterations: int
    method: str


class ImpedanceOperator:
    """Assembled discrete operator with shared lazy factorization.

    The matrix is complex non-Hermitian: the interior block is symmetric
    (mirroring the formal self-adjointness of the differential part), the
    boundary rows are not, because the one-sided Robin closure couples
    each boundary node to its inward neighbors asymmetrically.
    """

    def __init__(self, domain: DomainSpec, q: ScalarField, params: SolverParams,
                 matrix: sp.csr_matrix):
        self.domain = domain
        self.q = q
        self.params = params
        self.matrix = matrix
        self._lu = None
        self._precond = None

    @property
    def n_rows(self) -> int:
        return self.matrix.shape[0]

    def apply(self, vec: np.ndarray) -> np.ndarray:
        return self.matrix @ vec

    def rhs(self, F: ComplexField, f: BoundaryTrace) -> np.ndarray:
        domain = self.domain
        h = domain.grid.spacing
        b = flatten(F.values).astype(np.complex128)
        for face in FACES:
            fg = domain.face_grids[face].ravel()
            fv = f.values_for_face(face).ravel()
            b[fg] = b[fg] - (2.0 / h) * fv
        return b

    def _factor(self):
        if self._lu is None:
            self._lu = spla.splu(self.matrix.tocsc())
        return self._lu

    def _preconditioner(self):
        if self._precond is None:
            k = self.params.k
            shift = 0.5 * max(k * k, 1.0)
            shifted = (self.matrix + 1j * shift * sp.identity(
                self.n_rows, dtype=complex, format="csr")).tocsc()
            ilu = spla.spilu(shifted, drop_tol=1e-5, fill_factor=12)
            self._precond = spla.LinearOperator(
                self.matrix.shape, matvec=ilu.solve, dtype=complex)
        return self._precond

    def solve_vector(self, b: np.ndarray):
        """Returns (solution vector, relative residual, iterations)."""
        method = self.params.resolved_method(self.domain.grid)
        bnorm = float(np.linalg.norm(b))
        if bnorm == 0.0:
            return np.zeros_like(b), 0.0, 0
        if method == "direct":
            x = self._factor().solve(b)
            res = float(np.linalg.norm(self.matrix @ x - b) / bnorm)
            if res > self.params.tolerance:
                raise SolverConvergenceError(
                    f"direct solve residual {res:.3e} exceeds tolerance "
                    f"{self.params.tolerance:.3e}", iterations=0, residual=res)
            return x, res, 0
        count = [0]

        def cb(_):
            count[0] += 1

        x, info = spla.gmres(self.matrix, b, rtol=self.params.tolerance,
                             restart=60, maxiter=self.params.max_iterations,
                             M=self._preconditioner(), callback=cb,
                             callback_type="pr_norm")
        res = float(np.linalg.norm(self.matrix @ x - b) / bnorm)
        if info != 0 or res > self.params.tolerance:
            raise SolverConvergenceError(
                f"Krylov solve stopped after {count[0]} iterations at relative "
                f"residual {res:.3e} (target {self.params.tolerance:.3e}); near "
                f"resonance or weak preconditioning, not non-solvability",
                iterations=count[0], residual=res)
        return x, res, count[0]

    def solve(self, F: ComplexField, f: BoundaryTrace) -> ImpedanceSolution:
        b = self.rhs(F, f)
        x, res, its = self.solve_vector(b)
        u = ComplexField(self.domain.grid, unflatten_cube(x, self.domain.grid))
        return ImpedanceSolution(u=u, residual=res, iterations=its,
                                 method=self.params.resolved_method(self.domain.grid))


def assemble(domain: DomainSpec, q: ScalarField, params: SolverParams) -> ImpedanceOperator:
    """Assemble the sparse operator over all grid nodes of the closed box."""
    grid = domain.grid
    if not q.grid.same_layout(grid):
        raise ConfigError("potential grid does not match the domain grid")
    n = grid.n
    h = grid.spacing
    nn = grid.n_nodes
    k = params.k

    idx = np.arange(nn)
    ix, iy, iz = grid.unflatten(idx)
    coords3 = (ix, iy, iz)
    strides = (1, n, n * n)

    diag = np.full(nn, 6.0 / h ** 2, dtype=np.complex128)
    rows, cols, vals = [], [], []

    for face in FACES:
        axis, side = _FACE_AXIS_SIDE[face]
        step = strides[axis] if side == 1 else -strides[axis]
        on_face = coords3[axis] == (0 if side == 0 else n - 1)
        inner = ~on_face
        # regular neighbor coupling
        rows.append(idx[inner])
        cols.append(idx[inner] + step)
        vals.append(np.full(int(inner.sum()), -1.0 / h ** 2))
        # ghost elimination: reflect onto the opposite neighbor, absorb ik
        rows.append(idx[on_face])
        cols.append(idx[on_face] - step)
        vals.append(np.full(int(on_face.sum()), -1.0 / h ** 2))
        diag[on_face] += 2j * k / h

    diag += (-k * k) + flatten(q.values)

    a = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(nn, nn), dtype=np.complex128)
    a = a + sp.diags(diag)
    return ImpedanceOperator(domain, q, params, a.tocsr())


def solve(domain: DomainSpec, q: ScalarField, F: ComplexField, f: BoundaryTrace,
          params: SolverParams) -> ImpedanceSolution:
    return assemble(domain, q, params).solve(F, f)


# ---------------------------------------------------------------------------
# a priori bound checks

def _random_complex_field(grid: GridSpec, rng: np.random.Generator,
                          max_mode: int = 4) -> ComplexField:
    re = random_band_limited(grid, max_mode, 1.0, seed=int(rng.integers(2 ** 31)))
    im = random_band_limited(grid, max_mode, 1.0, seed=int(rng.integers(2 ** 31)))
    return ComplexField(grid, re.values + 1j * im.values)


def _random_trace(domain: DomainSpec, rng: np.random.Generator,
                  max_mode: int = 4) -> BoundaryTrace:
    g = _random_complex_field(domain.grid, rng, max_mode)
    w = flatten(g.values)
    return BoundaryTrace.from_nodes(domain, w[domain.boundary_flat])


def baskin_ratio(op: ImpedanceOperator, F: ComplexField, f: BoundaryTrace) -> float:
    """Energy ratio (|grad u| + k|u|) / (|F| + |f|) for one data pair.
    Zero data gives ratio 0 by convention."""
    grid = op.domain.grid
    den = grid_l2(F.values, grid) + f.l2()
    if den == 0.0:
        return 0.0
    sol = op.solve(F, f)
    num = np.sqrt(h1_seminorm_sq(sol.u.values, grid)) \
        + op.params.k * grid_l2(sol.u.values, grid)
    return float(num / den)


def check_baskin_bound(domain: DomainSpec, k_list, trial_count: int, seed: int) -> dict:
    """Max over seeded trials, per frequency, of the free-operator energy
    ratio. One assembly per frequency, shared across trials."""
    grid = domain.grid
    q0 = ScalarField(grid, np.zeros(grid.shape))
    rng = np.random.default_rng(seed)
    table = {}
    for k in k_list:
        op = assemble(domain, q0, SolverParams(k=float(k)))
        best = 0.0
        for _ in range(trial_count):
            F = _random_complex_field(grid, rng)
            f = _random_trace(domain, rng)
            best = max(best, baskin_ratio(op, F, f))
        table[float(k)] = best
    return table


def check_bounded_k_bound(domain: DomainSpec, q: ScalarField, K_interval,
                          trial_count: int, seed: int, k_samples: int = 6) -> float:
    """Max over sampled frequencies in the interval and random interior
    sources (f = 0) of |u|_H1 / |F|_2."""
    kmin, kmax = K_interval
    if not (0 < kmin <= kmax):
        raise ConfigError(f"invalid frequency interval {K_interval}")
    grid = domain.grid
    rng = np.random.default_rng(seed)
    f0 = BoundaryTrace.zero(domain)
    worst = 0.0
    for k in np.linspace(kmin, kmax, k_samples):
        op = assemble(domain, q, SolverParams(k=float(k)))
        for _ in range(trial_count):
            F = _random_complex_field(grid, rng)
            den = grid_l2(F.values, grid)
            if den == 0.0:
                continue
            sol = op.solve(F, f0)
            worst = max(worst, grid_h1(sol.u.values, grid) / den)
    return worst


# ---------------------------------------------------------------------------
# binary field dump

_MAGIC = b"IMPS"
_VERSION = 1


def dump_field(path, field: ComplexField) -> None:
    """Binary dump: magic, version, N, box side, complex64 x-fastest."""
    grid = field.grid
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(np.uint32(_VERSION).tobytes())
        fh.write(np.uint32(grid.n).tobytes())
        fh.write(np.float64(grid.box_side).tobytes())
        fh.write(flatten(field.values).astype(np.complex64).tobytes())


def load_field(path, box_origin=None) -> ComplexField:
    """Read an IMPS dump. The format does not store the origin; the box is
    centered at the coordinate origin unless one is given."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ConfigError(f"not an IMPS field dump: magic {magic!r}")
        version = int(np.frombuffer(fh.read(4), np.uint32)[0])
        if version != _VERSION:
            raise ConfigError(f"unsupported IMPS version {version}")
        n = int(np.frombuffer(fh.read(4), np.uint32)[0])
        side = float(np.frombuffer(fh.read(8), np.float64)[0])
        payload = np.frombuffer(fh.read(), np.complex64)
    if payload.size != n ** 3:
        raise ConfigError(f"IMPS payload has {payload.size} entries, expected {n ** 3}")
    if box_origin is None:
        box_origin = (-side / 2, -side / 2, -side / 2)
    grid = GridSpec(box_origin, side, n)
    return ComplexField(grid, unflatten_cube(payload.astype(np.complex128), grid))
