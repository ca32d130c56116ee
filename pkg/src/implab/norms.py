"""Discrete norms and quadrature: volume, boundary, patch Sobolev, spectral.

Shared conventions, stated once and used by every module:

* the volume norm is the plain dx^3-weighted sum over all grid nodes,
  and the volume H1 norm adds one-sided (forward) difference gradients;
* boundary norms are plain dx^2-weighted sums over boundary nodes;
* the patch smoothness norm combines patch values with their in-face
  tangential derivatives (second order central differences, one sided
  at face rims), all dx^2-weighted;
* negative and fractional smoothness norms of a cube field are computed
  spectrally from the zero extension of the field to a doubled periodic
  box, weighting each mode by (1 + |frequency|^2)^s.

The trapezoid variants at the end exist for surface quadrature of smooth
integrands (the probe's boundary pairing); they are not the norm
convention.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .geometry import DomainSpec, FACES, GridSpec, ScalarField


# ---------------------------------------------------------------------------
# volume norms (plain sums)

def grid_l2(values: np.ndarray, grid: GridSpec) -> float:
    return float(np.sqrt(grid.spacing ** 3 * np.sum(np.abs(values) ** 2)))


def grid_integral(values: np.ndarray, grid: GridSpec) -> complex:
    return complex(grid.spacing ** 3 * np.sum(values))


def masked_l2(values: np.ndarray, mask: np.ndarray, grid: GridSpec) -> float:
    return float(np.sqrt(grid.spacing ** 3 * np.sum(np.abs(values[mask]) ** 2)))


def grad_forward(values: np.ndarray, grid: GridSpec):
    """Forward differences along each axis (arrays one shorter per axis)."""
    h = grid.spacing
    return (np.diff(values, axis=0) / h,
            np.diff(values, axis=1) / h,
            np.diff(values, axis=2) / h)


def h1_seminorm_sq(values: np.ndarray, grid: GridSpec) -> float:
    h3 = grid.spacing ** 3
    return float(sum(h3 * np.sum(np.abs(g) ** 2) for g in grad_forward(values, grid)))


def grid_h1(values: np.ndarray, grid: GridSpec) -> float:
    return float(np.sqrt(grid_l2(values, grid) ** 2 + h1_seminorm_sq(values, grid)))


def masked_h1(values: np.ndarray, mask: np.ndarray, grid: GridSpec) -> float:
    """H1 norm restricted to a node mask; a forward difference counts when
    both of its endpoints lie in the mask."""
    h = grid.spacing
    h3 = h ** 3
    total = h3 * np.sum(np.abs(values[mask]) ** 2)
    for ax in range(3):
        g = np.diff(values, axis=ax) / h
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[ax] = slice(None, -1)
        hi[ax] = slice(1, None)
        both = mask[tuple(lo)] & mask[tuple(hi)]
        total += h3 * np.sum(np.abs(g[both]) ** 2)
    return float(np.sqrt(total))


# ---------------------------------------------------------------------------
# boundary norms (plain dx^2 sums over boundary nodes)

def boundary_l2(domain: DomainSpec, trace: np.ndarray) -> float:
    """Plain dx^2-weighted l2 over all boundary nodes (trace indexed by
    boundary-node position)."""
    return float(np.sqrt(domain.grid.spacing ** 2 * np.sum(np.abs(trace) ** 2)))


def patch_l2(domain: DomainSpec, trace: np.ndarray) -> float:
    vals = trace[domain.gamma.positions]
    return float(np.sqrt(domain.grid.spacing ** 2 * np.sum(np.abs(vals) ** 2)))


# ---------------------------------------------------------------------------
# patch smoothness norm (intrinsic to the patch node set)

def _masked_tangential_diff(rows2, axis, h, n_rows):
    """Sparse first-derivative matrix along one in-face axis, defined only
    from patch values: central where both neighbors are in the patch,
    one-sided at the patch rim, zero where the node is isolated in that
    direction. rows2 holds the patch row index per face-grid node (-1 off
    the patch)."""
    here = rows2
    prev = np.full_like(rows2, -1)
    nxt = np.full_like(rows2, -1)
    if axis == 0:
        prev[1:, :] = rows2[:-1, :]
        nxt[:-1, :] = rows2[1:, :]
    else:
        prev[:, 1:] = rows2[:, :-1]
        nxt[:, :-1] = rows2[:, 1:]
    on = here >= 0
    both = on & (prev >= 0) & (nxt >= 0)
    fwd = on & (prev < 0) & (nxt >= 0)
    bwd = on & (prev >= 0) & (nxt < 0)

    r, c, v = [], [], []
    r += [here[both], here[both]]
    c += [nxt[both], prev[both]]
    v += [np.full(int(both.sum()), 0.5 / h), np.full(int(both.sum()), -0.5 / h)]
    r += [here[fwd], here[fwd]]
    c += [nxt[fwd], here[fwd]]
    v += [np.full(int(fwd.sum()), 1.0 / h), np.full(int(fwd.sum()), -1.0 / h)]
    r += [here[bwd], here[bwd]]
    c += [here[bwd], prev[bwd]]
    v += [np.full(int(bwd.sum()), 1.0 / h), np.full(int(bwd.sum()), -1.0 / h)]
    return sp.csr_matrix(
        (np.concatenate(v), (np.concatenate(r), np.concatenate(c))),
        shape=(n_rows, n_rows))


def patch_h1_gram(domain: DomainSpec) -> sp.csr_matrix:
    """Gram matrix of the patch smoothness norm on patch-ordered vectors.

    x^H G x = dx^2 * sum over patch nodes of (|x|^2 + |d_u x|^2 + |d_v x|^2)
    with tangential differences taken inside the patch (central where both
    neighbors exist, one sided at the patch rim). For the whole-boundary
    patch the derivatives stay within each face and an edge node's value
    is counted once per face containing it. Hermitian positive definite
    on patch vectors.
    """
    grid = domain.grid
    h = grid.spacing
    m = domain.gamma.size
    row_of = np.full(domain.n_boundary, -1, dtype=np.int64)
    row_of[domain.gamma.positions] = np.arange(m)

    faces = FACES if domain.gamma.face == "all" else (domain.gamma.face,)
    g = sp.csr_matrix((m, m))
    for f in faces:
        rows2 = row_of[domain.boundary_pos[domain.face_grids[f]]]
        on = rows2[rows2 >= 0]
        value_part = sp.csr_matrix(
            (np.ones(on.size), (on, on)), shape=(m, m))
        du = _masked_tangential_diff(rows2, 0, h, m)
        dv = _masked_tangential_diff(rows2, 1, h, m)
        g = g + (h ** 2) * (value_part + du.T @ du + dv.T @ dv)
    return g.tocsr()


def patch_h1_norm(domain: DomainSpec, gamma_values: np.ndarray,
                  gram: sp.csr_matrix | None = None) -> float:
    """Patch smoothness norm of patch-ordered values (the gamma ordering)."""
    if gram is None:
        gram = patch_h1_gram(domain)
    x = np.asarray(gamma_values)
    return float(np.sqrt(max(np.real(np.vdot(x, gram @ x)), 0.0)))


def trace_h1_gamma_norm(domain: DomainSpec, trace: np.ndarray,
                        gram: sp.csr_matrix | None = None) -> float:
    """Same norm, taking a full boundary trace and restricting it."""
    return patch_h1_norm(domain, np.asarray(trace)[domain.gamma.positions], gram)


# ---------------------------------------------------------------------------
# spectral smoothness norms on the cube

def extended_mode_grid(grid: GridSpec):
    """(mode count, extended period, 1-D frequency array) of the doubled box."""
    m = 2 * (grid.n - 1)
    side = m * grid.spacing
    k1 = 2.0 * np.pi / side * np.fft.fftfreq(m, d=1.0 / m)
    return m, side, k1


def weighted_mode_sum(coeff: np.ndarray, grid: GridSpec, s: float) -> float:
    """sqrt of side^-3 * sum (1+|xi|^2)^s |coeff|^2 over the extended lattice.

    coeff must be physical Fourier coefficients on the doubled box, i.e.
    dx^3 times the raw DFT of the zero-extended nodal values.
    """
    m, side, k1 = extended_mode_grid(grid)
    if coeff.shape != (m, m, m):
        raise ValueError(f"coefficient array must be shape {(m, m, m)}")
    k2 = k1 ** 2
    w = (1.0 + (k2[:, None, None] + k2[None, :, None] + k2[None, None, :])) ** s
    return float(np.sqrt(np.sum(w * np.abs(coeff) ** 2) / side ** 3))


def extended_coefficients(values: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Physical Fourier coefficients of the zero extension to the doubled box."""
    m, _, _ = extended_mode_grid(grid)
    ext = np.zeros((m, m, m), dtype=np.complex128)
    ext[:grid.n, :grid.n, :grid.n] = values
    return (grid.spacing ** 3) * np.fft.fftn(ext)


def hs_norm(field: ScalarField | np.ndarray, grid: GridSpec | None = None,
            s: float = -1.0) -> float:
    """Smoothness-s norm of a cube field via its doubled-box zero extension.

    For fields vanishing on the cube faces (the supported potentials this
    package works with) the s = 0 case reproduces the plain l2 sum exactly,
    by the discrete Parseval identity.
    """
    if isinstance(field, ScalarField):
        values, grid = field.values, field.grid
    else:
        if grid is None:
            raise ValueError("grid required when passing a bare array")
        values = np.asarray(field)
    return weighted_mode_sum(extended_coefficients(values, grid), grid, s)


def h_minus_1(field: ScalarField) -> float:
    return hs_norm(field, s=-1.0)


# ---------------------------------------------------------------------------
# trapezoid surface quadrature (probe pairing only, not the norm convention)

def _axis_trapezoid(n: int) -> np.ndarray:
    w = np.ones(n)
    w[0] = w[-1] = 0.5
    return w


def face_weights(grid: GridSpec) -> np.ndarray:
    """2-D trapezoid weights for one face, shape (N,N), summing to L^2."""
    w = _axis_trapezoid(grid.n)
    return (grid.spacing ** 2) * (w[:, None] * w[None, :])


def boundary_weights(domain: DomainSpec) -> np.ndarray:
    """Per boundary-node trapezoid surface weights over the whole boundary.

    Indexed by boundary-node position; sums to exactly 6 L^2. Edge and
    corner nodes accumulate the weight of every face containing them, so
    integrating 1 gives the exact surface area.
    """
    fw = face_weights(domain.grid)
    w = np.zeros(domain.n_boundary)
    for f in FACES:
        pos = domain.boundary_pos[domain.face_grids[f]]
        np.add.at(w, pos.ravel(), fw.ravel())
    return w


def patch_quadrature_weights(domain: DomainSpec) -> np.ndarray:
    """Trapezoid surface weights supported on the measurement patch,
    indexed by boundary-node position (zero off the patch)."""
    if domain.gamma.face == "all":
        return boundary_weights(domain)
    fw = face_weights(domain.grid)
    w_flat = np.zeros(domain.grid.n_nodes)
    fg = domain.face_grids[domain.gamma.face]
    w_flat[fg.ravel()] = fw.ravel()
    w = np.zeros(domain.n_boundary)
    w[domain.gamma.positions] = w_flat[domain.gamma.node_flat]
    return w
