"""Boundary measurement maps: Robin data in, Dirichlet trace on the patch out.

The map is assembled column by column against the nodal hat basis on the
boundary, one impedance solve per column, all columns sharing a single
factorization. The distance between two maps is their largest singular
value as operators from dx^2-weighted boundary values to the patch
smoothness norm, computed by power iteration on the weighted normal
operator.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .errors import CacheCorruptionError, ConfigError, SolverConvergenceError
from .geometry import ComplexField, DomainSpec, FACES
from .norms import patch_h1_gram
from .solver import (
    BoundaryTrace,
    ImpedanceOperator,
    SolverParams,
    assemble,
    unflatten_cube,
)

# columns solved per factorized batch; bounds peak memory, not results
_BATCH = 256


@dataclass
class RtdMatrix:
    """Dense boundary map: |patch| rows by |boundary| columns.

    entries[i, j] is the patch trace at patch node i of the solution with
    the j-th boundary hat as Robin datum and zero interior source.
    h1_weight is the patch smoothness Gram, built lazily.
    """

    domain: DomainSpec
    k: float
    entries: np.ndarray
    _gram: Optional[sp.csr_matrix] = None

    @property
    def h1_weight(self) -> sp.csr_matrix:
        if self._gram is None:
            self._gram = patch_h1_gram(self.domain)
        return self._gram

    @property
    def shape(self):
        return self.entries.shape

    def copy_with(self, entries: np.ndarray) -> "RtdMatrix":
        return RtdMatrix(self.domain, self.k, entries, self._gram)


@dataclass
class DataDistance:
    delta: float
    iterations: int
    converged: bool


def _hat_rhs_matrix(domain: DomainSpec) -> sp.csr_matrix:
    """Right-hand sides of all boundary hats, as a sparse (nodes x |bd|)
    matrix. A hat at a node feeds -2/dx into that node's equation once per
    outward direction (faces containing the node)."""
    h = domain.grid.spacing
    rows, cols = [], []
    for face in FACES:
        fg = domain.face_grids[face].ravel()
        pos = domain.boundary_pos[fg]
        rows.append(fg)
        cols.append(pos)
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.full(rows.size, -2.0 / h, dtype=np.complex128)
    return sp.csr_matrix((vals, (rows, cols)),
                         shape=(domain.grid.n_nodes, domain.n_boundary))


def assemble_rtd(domain: DomainSpec, q, k: float,
                 params: Optional[SolverParams] = None) -> RtdMatrix:
    """One impedance solve per boundary hat; rows restricted to the patch."""
    if params is None:
        params = SolverParams(k=float(k))
    else:
        params = dataclasses.replace(params, k=float(k))
    op = assemble(domain, q, params)
    rhs_all = _hat_rhs_matrix(domain)
    n_b = domain.n_boundary
    gamma_flat = domain.gamma.node_flat
    entries = np.empty((gamma_flat.size, n_b), dtype=np.complex128)

    method = params.resolved_method(domain.grid)
    if method == "direct":
        lu = op._factor()
        for lo in range(0, n_b, _BATCH):
            hi = min(lo + _BATCH, n_b)
            block = np.asarray(rhs_all[:, lo:hi].todense())
            sols = lu.solve(block)
            entries[:, lo:hi] = sols[gamma_flat, :]
    else:
        for j in range(n_b):
            b = np.asarray(rhs_all[:, j].todense()).ravel()
            try:
                x, _, _ = op.solve_vector(b)
            except SolverConvergenceError as exc:
                raise SolverConvergenceError(
                    f"boundary map column {j} (boundary node "
                    f"{domain.boundary_flat[j]}): {exc}",
                    iterations=exc.iterations, residual=exc.residual) from exc
            entries[:, j] = x[gamma_flat]
    return RtdMatrix(domain=domain, k=float(k), entries=entries)


def solve_trace(op: ImpedanceOperator, f: BoundaryTrace) -> np.ndarray:
    """Patch trace of one impedance solve; the column definition, usable
    for spot checks against assembled columns."""
    zero = ComplexField(op.domain.grid, np.zeros(op.domain.grid.shape, complex))
    sol = op.solve(zero, f)
    return sol.u.values.ravel(order="F")[op.domain.gamma.node_flat]


def restrict_to_patch(matrix: RtdMatrix, sub_domain: DomainSpec) -> RtdMatrix:
    """Restrict a whole-boundary map to a smaller patch on the same grid."""
    if not matrix.domain.grid.same_layout(sub_domain.grid):
        raise ConfigError("patch restriction requires the same grid")
    if matrix.domain.gamma.face != "all":
        raise ConfigError("can only restrict a whole-boundary map")
    rows = sub_domain.gamma.positions
    return RtdMatrix(domain=sub_domain, k=matrix.k,
                     entries=matrix.entries[rows, :])


def operator_norm(diff: RtdMatrix, tol: float = 1e-8,
                  max_iterations: int = 500) -> DataDistance:
    """Largest singular value of a map difference, boundary-l2 to patch-H1.

    Power iteration on the weighted normal operator
    T = W^-1 D^H G D with W = dx^2 I; delta = sqrt(lambda_max).
    """
    d = diff.entries
    if d.size == 0 or np.max(np.abs(d)) == 0.0:
        return DataDistance(delta=0.0, iterations=0, converged=True)
    gram = diff.h1_weight
    h2 = diff.domain.grid.spacing ** 2

    rng = np.random.default_rng(12345)
    x = rng.standard_normal(d.shape[1]) + 1j * rng.standard_normal(d.shape[1])
    x /= np.linalg.norm(x)
    lam = 0.0
    for it in range(1, max_iterations + 1):
        y = d.conj().T @ (gram @ (d @ x)) / h2
        nrm = np.linalg.norm(y)
        if nrm == 0.0:
            return DataDistance(delta=0.0, iterations=it, converged=True)
        lam_new = float(np.real(np.vdot(x, y)))
        x = y / nrm
        if it > 1 and abs(lam_new - lam) <= tol * abs(lam_new):
            return DataDistance(delta=float(np.sqrt(max(lam_new, 0.0))),
                                iterations=it, converged=True)
        lam = lam_new
    return DataDistance(delta=float(np.sqrt(max(lam, 0.0))),
                        iterations=max_iterations, converged=False)


def difference(m1: RtdMatrix, m2: RtdMatrix) -> RtdMatrix:
    if m1.shape != m2.shape:
        raise ConfigError(f"map shapes differ: {m1.shape} vs {m2.shape}")
    if m1.k != m2.k:
        raise ConfigError(f"maps taken at different frequencies: {m1.k} vs {m2.k}")
    return m1.copy_with(m1.entries - m2.entries)


def data_distance(m1: RtdMatrix, m2: RtdMatrix) -> DataDistance:
    return operator_norm(difference(m1, m2))


def add_noise(matrix: RtdMatrix, level: float, seed: int) -> RtdMatrix:
    """Seeded complex Gaussian perturbation rescaled to the requested
    operator norm."""
    if level < 0:
        raise ConfigError(f"noise level must be nonnegative, got {level}")
    if level == 0.0:
        return matrix.copy_with(matrix.entries.copy())
    rng = np.random.default_rng(seed)
    pert = (rng.standard_normal(matrix.shape)
            + 1j * rng.standard_normal(matrix.shape)) / np.sqrt(2.0)
    raw = operator_norm(matrix.copy_with(pert))
    if raw.delta == 0.0:
        raise ConfigError("degenerate perturbation draw")
    return matrix.copy_with(matrix.entries + (level / raw.delta) * pert)


# ---------------------------------------------------------------------------
# persistence

_MAGIC = b"RTDM"
_VERSION = 1


def save_rtd(path, matrix: RtdMatrix) -> None:
    """Binary dump: magic, version, k, |patch|, |boundary|, complex64
    entries row-major."""
    m, n = matrix.shape
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(np.uint32(_VERSION).tobytes())
        fh.write(np.float64(matrix.k).tobytes())
        fh.write(np.uint32(m).tobytes())
        fh.write(np.uint32(n).tobytes())
        fh.write(np.ascontiguousarray(matrix.entries, dtype=np.complex64).tobytes())


def load_rtd(path, domain: DomainSpec) -> RtdMatrix:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise CacheCorruptionError(f"not a boundary-map dump: magic {magic!r}")
        version = int(np.frombuffer(fh.read(4), np.uint32)[0])
        if version != _VERSION:
            raise CacheCorruptionError(f"unsupported map dump version {version}")
        k = float(np.frombuffer(fh.read(8), np.float64)[0])
        m = int(np.frombuffer(fh.read(4), np.uint32)[0])
        n = int(np.frombuffer(fh.read(4), np.uint32)[0])
        payload = np.frombuffer(fh.read(), np.complex64)
    if (m, n) != (domain.gamma.size, domain.n_boundary):
        raise CacheCorruptionError(
            f"map dump shape ({m},{n}) does not match domain "
            f"({domain.gamma.size},{domain.n_boundary})")
    if payload.size != m * n:
        raise CacheCorruptionError("map dump payload truncated")
    entries = payload.astype(np.complex128).reshape(m, n)
    return RtdMatrix(domain=domain, k=k, entries=entries)
