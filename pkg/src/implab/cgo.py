"""Exponentially growing probe solutions u = e^{i zeta . x}(1 + r).

zeta is a complex vector with zeta . zeta = k^2 (bilinear dot), so u
solves the free equation exactly and the remainder r absorbs the
potential: (-Laplace - 2i zeta . grad + q) r = -q. The remainder is
computed on a periodized cube by the fixed point

    r_{m+1} = -G_zeta(q (1 + r_m)),   r_0 = 0,

where G_zeta inverts (-Laplace - 2i zeta . grad) as a Fourier multiplier
1/(|w|^2 + 2 zeta . w) over a frequency lattice shifted by a fraction of
a step along mu2 (the direction of Im zeta). The shift keeps the symbol
away from zero: on an axis-aligned mu2 the imaginary part alone gives
|symbol| >= 2 a tau (2 pi / period), so the iteration map is a
contraction with rate about sup|q| / min|symbol|.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np

from .errors import ConfigError, ContractionError, MultiplierError
from .geometry import ComplexField, DomainSpec, FACES, GridSpec, ScalarField
from .solver import BoundaryTrace

_DEFAULT_PAD = 2
# fallback shifts scanned when the half-step shift leaves the symbol
# too close to zero (only possible for oblique mu2)
_TAU_GRID = (0.5, 0.46, 0.54, 0.41, 0.59, 0.33, 0.67, 0.27, 0.73)


@dataclass(frozen=True)
class CgoFrame:
    xi: np.ndarray
    mu1: np.ndarray
    mu2: np.ndarray
    a: float
    k: float
    zeta1: np.ndarray
    zeta2: np.ndarray

    def zeta(self, which: int) -> np.ndarray:
        if which == 1:
            return self.zeta1
        if which == 2:
            return self.zeta2
        raise ConfigError(f"which must be 1 or 2, got {which}")


def build_frame(xi, k: float, a: float, orientation_seed: int = 0) -> CgoFrame:
    """Construct the probe frame for frequency xi.

    mu1, mu2 are unit vectors orthogonal to xi and each other; mu2 is
    axis-aligned whenever xi allows it (so the multiplier floor is
    guaranteed), otherwise both come from a seeded draw. Then

        zeta1 = -xi/2 + s mu1 + i a mu2,  zeta2 = -xi/2 - s mu1 - i a mu2

    with s = sqrt(k^2 + a^2 - |xi|^2/4), so zeta_j . zeta_j = k^2 and
    zeta1 + zeta2 = -xi exactly.
    """
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (3,):
        raise ConfigError("xi must be a 3-vector")
    if a < 1.0:
        raise ConfigError(f"decay parameter must satisfy a >= 1, got {a}")
    gap = k * k + a * a - 0.25 * float(xi @ xi)
    if gap < 0.0:
        raise ConfigError(
            f"frame precondition k^2 + a^2 >= |xi|^2/4 violated: "
            f"{k * k + a * a:.6g} < {0.25 * float(xi @ xi):.6g}")

    nxi = float(np.linalg.norm(xi))
    if nxi == 0.0:
        mu1 = np.array([0.0, 1.0, 0.0])
        mu2 = np.array([0.0, 0.0, 1.0])
    else:
        xhat = xi / nxi
        zero_axes = [i for i in range(3) if xi[i] == 0.0]
        if zero_axes:
            # aligned shift direction; highest free axis, so xi along e1
            # reproduces the canonical (mu1, mu2) = (e2, e3) pair
            mu2 = np.zeros(3)
            mu2[zero_axes[-1]] = 1.0
            mu1 = np.cross(mu2, xhat)
            mu1 /= np.linalg.norm(mu1)
        else:
            rng = np.random.default_rng(orientation_seed)
            while True:
                v = rng.standard_normal(3)
                u1 = v - (v @ xhat) * xhat
                n1 = np.linalg.norm(u1)
                if n1 > 1e-8:
                    break
            mu1 = u1 / n1
            mu2 = np.cross(xhat, mu1)
            mu2 /= np.linalg.norm(mu2)
        # one re-orthogonalization pass tightens to well below 1e-12
        mu1 = mu1 - (mu1 @ xhat) * xhat
        mu1 /= np.linalg.norm(mu1)
        mu2 = mu2 - (mu2 @ xhat) * xhat - (mu2 @ mu1) * mu1
        mu2 /= np.linalg.norm(mu2)

    s = np.sqrt(gap)
    zeta1 = -0.5 * xi + s * mu1 + 1j * a * mu2
    zeta2 = -0.5 * xi - s * mu1 - 1j * a * mu2

    for z in (zeta1, zeta2):
        dot = complex(z @ z)
        ref = max(k * k, 1.0)
        assert abs(dot - k * k) <= 1e-10 * ref, f"zeta.zeta={dot} vs k^2={k * k}"
        assert abs(np.linalg.norm(z.imag) - a) <= 1e-10 * a
    # bit-exact when the mu products carry no rounding (canonical and
    # axis-aligned branches); oblique frames cancel to machine precision
    sum_scale = np.abs(xi) + np.abs(zeta1) + s + a
    assert np.all(np.abs(zeta1 + zeta2 + xi) <= 1e-14 * sum_scale)
    assert abs(mu1 @ mu2) < 1e-12 and abs(mu1 @ xi) < 1e-12 * max(nxi, 1.0) \
        and abs(mu2 @ xi) < 1e-12 * max(nxi, 1.0)

    return CgoFrame(xi=xi, mu1=mu1, mu2=mu2, a=float(a), k=float(k),
                    zeta1=zeta1, zeta2=zeta2)


# ---------------------------------------------------------------------------
# periodization

def periodization_grid(grid: GridSpec, pad_factor: int = _DEFAULT_PAD) -> GridSpec:
    """Sampling grid of the periodization cube.

    Keeps the domain spacing and origin; pad_factor * (N - 1) samples per
    axis. The period is spacing * sample count, i.e. one step past the
    last node; the domain nodes are the leading block.
    """
    if pad_factor < 2:
        raise ConfigError(f"pad_factor must be at least 2, got {pad_factor}")
    m = pad_factor * (grid.n - 1)
    return GridSpec(grid.box_origin, grid.spacing * (m - 1), m)


def period_of(pgrid: GridSpec) -> float:
    return pgrid.spacing * pgrid.n


def extend_potential(q: ScalarField, pad_factor: int = _DEFAULT_PAD) -> ScalarField:
    """Zero extension of a domain potential to the periodization cube."""
    pgrid = periodization_grid(q.grid, pad_factor)
    vals = np.zeros(pgrid.shape)
    n = q.grid.n
    vals[:n, :n, :n] = q.values
    return ScalarField(pgrid, vals)


@dataclass
class CgoSolution:
    frame: CgoFrame
    which: int
    r: ComplexField
    remainder_l2: float
    residual: float
    iterations: int
    rate_estimate: float
    tau: float
    min_symbol: float

    @property
    def zeta(self) -> np.ndarray:
        return self.frame.zeta(self.which)


def _symbol_and_shift(pgrid: GridSpec, zeta: np.ndarray, mu2: np.ndarray,
                      a: float):
    """Choose the lattice shift and return (symbol array, omega0, tau, min|p|)."""
    m = pgrid.n
    period = period_of(pgrid)
    step = 2.0 * np.pi / period
    freqs = step * np.fft.fftfreq(m, d=1.0 / m)

    best = None
    for tau in _TAU_GRID:
        omega0 = tau * step * mu2
        w0 = freqs[:, None, None] + omega0[0]
        w1 = freqs[None, :, None] + omega0[1]
        w2 = freqs[None, None, :] + omega0[2]
        p = (w0 * w0 + w1 * w1 + w2 * w2
             + 2.0 * (zeta[0] * w0 + zeta[1] * w1 + zeta[2] * w2))
        mn = float(np.min(np.abs(p)))
        if best is None or mn > best[3]:
            best = (p, omega0, tau, mn)
        # aligned mu2 hits the guaranteed floor immediately
        if mn >= a * step * 0.999:
            best = (p, omega0, tau, mn)
            break
    p, omega0, tau, mn = best
    if mn <= 0.0:
        raise MultiplierError(
            f"shifted symbol vanishes on the lattice (min |p| = {mn}); "
            f"no shift in the scan grid separates it")
    return p, omega0, tau, mn


def solve_remainder(q_extended: ScalarField, frame: CgoFrame, which: int,
                    tolerance: float = 1e-10,
                    max_iterations: int = 200) -> CgoSolution:
    """Fixed-point solve of the remainder equation on the periodization cube."""
    pgrid = q_extended.grid
    zeta = frame.zeta(which)
    mu2 = frame.mu2 if which == 1 else -frame.mu2
    q = q_extended.values
    qmax = float(np.max(np.abs(q)))

    symbol, omega0, tau, min_p = _symbol_and_shift(pgrid, zeta, np.asarray(mu2), frame.a)

    rate = qmax / min_p
    if rate >= 1.0:
        raise ContractionError(
            f"contraction estimate sup|q|/min|symbol| = {rate:.3g} >= 1; "
            f"increase the decay parameter a (currently {frame.a})", rate=rate)

    x, y, z = pgrid.coords()
    phase = omega0[0] * x + omega0[1] * y + omega0[2] * z
    mod = np.exp(-1j * phase)
    demod = np.conj(mod)

    def green(v):
        return demod * np.fft.ifftn(np.fft.fftn(v * mod) / symbol)

    h3 = pgrid.spacing ** 3
    if qmax == 0.0:
        r = np.zeros(pgrid.shape, dtype=complex)
        return CgoSolution(frame=frame, which=which,
                           r=ComplexField(pgrid, r), remainder_l2=0.0,
                           residual=0.0, iterations=1, rate_estimate=0.0,
                           tau=tau, min_symbol=min_p)

    r = np.zeros(pgrid.shape, dtype=complex)
    prev_diff = None
    grew = 0
    for it in range(1, max_iterations + 1):
        r_new = -green(q * (1.0 + r))
        diff = float(np.sqrt(h3 * np.sum(np.abs(r_new - r) ** 2)))
        r_norm = float(np.sqrt(h3 * np.sum(np.abs(r_new) ** 2)))
        r = r_new
        if diff <= tolerance * max(r_norm, 1e-300):
            break
        if prev_diff is not None and diff >= prev_diff:
            grew += 1
            if grew >= 2:
                raise ContractionError(
                    f"iterate differences stopped decreasing at step {it} "
                    f"({prev_diff:.3e} -> {diff:.3e}); the fixed point is "
                    f"diverging, increase a", rate=diff / prev_diff)
        else:
            grew = 0
        prev_diff = diff
    else:
        raise ContractionError(
            f"remainder iteration did not meet tolerance {tolerance} in "
            f"{max_iterations} steps (last update {diff:.3e})", rate=rate)

    # forward application: the same multiplier is the exact discrete operator
    forward = demod * np.fft.ifftn(np.fft.fftn(r * mod) * symbol)
    resid_field = forward + q * r + q
    drive = float(np.sqrt(h3 * np.sum(np.abs(q * (1.0 + r)) ** 2)))
    residual = float(np.sqrt(h3 * np.sum(np.abs(resid_field) ** 2)) / max(drive, 1e-300))
    remainder_l2 = float(np.sqrt(h3 * np.sum(np.abs(r) ** 2)))

    return CgoSolution(frame=frame, which=which, r=ComplexField(pgrid, r),
                       remainder_l2=remainder_l2, residual=residual,
                       iterations=it, rate_estimate=rate, tau=tau,
                       min_symbol=min_p)


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class CgoEvaluation:
    u: ComplexField
    l2_periodization: float
    growth_bound: Optional[float]
    within_growth: Optional[bool]


def _check_subgrid(grid: GridSpec, pgrid: GridSpec):
    if grid.n > pgrid.n or not np.allclose(grid.box_origin, pgrid.box_origin) \
            or not np.isclose(grid.spacing, pgrid.spacing):
        raise ConfigError("evaluation grid is not a leading block of the "
                          "periodization grid")


def evaluate_cgo(solution: CgoSolution, grid: Optional[GridSpec] = None,
                 growth_constant: Optional[float] = None) -> CgoEvaluation:
    """Pointwise e^{i zeta . x}(1 + r) on the requested grid (default: the
    full periodization cube), with the periodization-cube l2 norm and, when
    a constant is supplied, the exponential growth bound C e^{a R}."""
    pgrid = solution.r.grid
    zeta = solution.zeta
    xp, yp, zp = pgrid.coords()
    dot = zeta[0] * xp + zeta[1] * yp + zeta[2] * zp
    u_full = np.exp(1j * dot) * (1.0 + solution.r.values)
    l2_full = float(np.sqrt(pgrid.spacing ** 3 * np.sum(np.abs(u_full) ** 2)))

    if grid is None:
        u = ComplexField(pgrid, u_full)
    else:
        _check_subgrid(grid, pgrid)
        n = grid.n
        u = ComplexField(grid, u_full[:n, :n, :n])

    bound = ok = None
    if growth_constant is not None:
        bound = float(growth_constant * np.exp(solution.frame.a
                                               * pgrid.enclosing_radius()))
        ok = l2_full <= bound
    return CgoEvaluation(u=u, l2_periodization=l2_full,
                         growth_bound=bound, within_growth=ok)


def cgo_dirichlet_trace(solution: CgoSolution, domain: DomainSpec) -> np.ndarray:
    """u on the boundary nodes (by boundary position)."""
    ev = evaluate_cgo(solution, domain.grid)
    return ev.u.values.ravel(order="F")[domain.boundary_flat]


def cgo_robin_trace(solution: CgoSolution, domain: DomainSpec) -> BoundaryTrace:
    """(d_nu - ik)u on the boundary, face-resolved.

    The exponential part differentiates exactly; the remainder part uses a
    second-order one-sided difference along the inner normal, which the
    periodization grid always has room for.
    """
    pgrid = solution.r.grid
    _check_subgrid(domain.grid, pgrid)
    zeta = solution.zeta
    k = solution.frame.k
    rvals = solution.r.values
    h = domain.grid.spacing
    n = domain.grid.n

    face_data = {}
    for fid, face in enumerate(FACES):
        fg = domain.face_grids[face]
        pts = domain.grid.node_coords(fg)
        axis = fid // 2
        side = fid % 2
        nu = np.zeros(3)
        nu[axis] = 1.0 if side == 0 else -1.0

        dot = pts @ zeta
        expo = np.exp(1j * dot)

        # one-sided second-order normal difference of r, stepping inward
        ixg, iyg, izg = domain.grid.unflatten(fg)
        stepv = [0, 0, 0]
        stepv[axis] = 1 if side == 0 else -1
        i0 = (ixg, iyg, izg)
        i1 = (ixg + stepv[0], iyg + stepv[1], izg + stepv[2])
        i2 = (ixg + 2 * stepv[0], iyg + 2 * stepv[1], izg + 2 * stepv[2])
        r0 = rvals[i0]
        r1 = rvals[i1]
        r2 = rvals[i2]
        sign = 1.0 if side == 0 else -1.0
        dr_dn = sign * (-3.0 * r0 + 4.0 * r1 - r2) / (2.0 * h)

        u0 = expo * (1.0 + r0)
        du_dn = 1j * complex(zeta @ nu) * u0 + expo * dr_dn
        face_data[face] = du_dn - 1j * k * u0
    return BoundaryTrace(domain, face_values=face_data)


# ---------------------------------------------------------------------------
# H2-type curvature bound

def _h2_norm_sq(values: np.ndarray, grid: GridSpec) -> float:
    """Bessel-style squared H2 norm: |u|^2 + 2|Du|^2 + |D^2 u|^2 with
    forward differences, all ordered second-difference pairs counted."""
    h = grid.spacing
    h3 = h ** 3
    total = h3 * np.sum(np.abs(values) ** 2)
    firsts = []
    for ax in range(3):
        d = np.diff(values, axis=ax) / h
        firsts.append(d)
        total += 2.0 * h3 * np.sum(np.abs(d) ** 2)
    for ax1 in range(3):
        for ax2 in range(3):
            dd = np.diff(firsts[ax1], axis=ax2) / h
            total += h3 * np.sum(np.abs(dd) ** 2)
    return float(total)


def check_h2_bound(solution: CgoSolution, domain: DomainSpec) -> float:
    """Ratio of the domain H2 norm of u to (1 + k^2) times its
    periodization-cube l2 norm; zero solution gives 0 by convention."""
    ev = evaluate_cgo(solution, domain.grid)
    if ev.l2_periodization == 0.0:
        return 0.0
    k = solution.frame.k
    h2 = np.sqrt(_h2_norm_sq(ev.u.values, domain.grid))
    return float(h2 / ((1.0 + k * k) * ev.l2_periodization))


def h2_ratio_of_field(u: ComplexField, k: float, l2_reference: float) -> float:
    """Same ratio for an explicit field; used by closed-form oracles."""
    if l2_reference == 0.0:
        return 0.0
    return float(np.sqrt(_h2_norm_sq(u.values, u.grid)) / ((1.0 + k * k) * l2_reference))


# ---------------------------------------------------------------------------
# constant calibration

@dataclass
class CgoConstants:
    C0: float
    C1: float
    calibration_log: list = dc_field(default_factory=list)


def calibrate_constants(domain: DomainSpec, q_family, a_grid, k_grid,
                        seed: int = 0, pad_factor: int = _DEFAULT_PAD,
                        tolerance: float = 1e-10) -> CgoConstants:
    """Measure the remainder constants over a family of potentials.

    C1 = 1.5 * max of |r|_2 * a / sup|q| over all converged solves;
    C0 = 1.5 * max over the family of (smallest a that contracted)/sup|q|.
    Both floored at 1. Divergent solves are excluded and logged.
    """
    log = []
    c1_raw = 0.0
    c0_raw = 0.0
    any_member = False
    for qi, q in enumerate(q_family):
        qmax = float(np.max(np.abs(q.values)))
        if qmax == 0.0:
            log.append({"q_index": qi, "a": None, "k": None,
                        "ratio": 0.0, "accepted": True, "note": "zero potential"})
            continue
        any_member = True
        qe = extend_potential(q, pad_factor)
        smallest_ok_a = None
        for a in sorted(a_grid):
            converged_this_a = True
            for k in k_grid:
                frame = build_frame(np.zeros(3), float(k), float(a),
                                    orientation_seed=seed)
                try:
                    sol = solve_remainder(qe, frame, which=1, tolerance=tolerance)
                except ContractionError as exc:
                    converged_this_a = False
                    log.append({"q_index": qi, "a": float(a), "k": float(k),
                                "ratio": None, "accepted": False,
                                "note": f"excluded: {exc}"})
                    continue
                ratio = sol.remainder_l2 * a / qmax
                c1_raw = max(c1_raw, ratio)
                log.append({"q_index": qi, "a": float(a), "k": float(k),
                            "ratio": ratio, "accepted": True, "note": ""})
            if converged_this_a and smallest_ok_a is None:
                smallest_ok_a = float(a)
        if smallest_ok_a is not None:
            c0_raw = max(c0_raw, smallest_ok_a / qmax)

    c1 = max(1.0, 1.5 * c1_raw) if any_member else 1.0
    c0 = max(1.0, 1.5 * c0_raw) if any_member else 1.0
    return CgoConstants(C0=c0, C1=c1, calibration_log=log)


def save_constants(path, constants: CgoConstants) -> None:
    """Small structured text file consumed by the probe stage."""
    import json

    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"C0 = {constants.C0!r}\n")
        fh.write(f"C1 = {constants.C1!r}\n")
        fh.write(f"entries = {len(constants.calibration_log)}\n")
        for row in constants.calibration_log:
            fh.write("log: " + json.dumps(row) + "\n")


def load_constants(path) -> CgoConstants:
    import json

    c0 = c1 = None
    log = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line.startswith("C0 ="):
                c0 = float(line.split("=", 1)[1])
            elif line.startswith("C1 ="):
                c1 = float(line.split("=", 1)[1])
            elif line.startswith("log: "):
                log.append(json.loads(line[5:]))
    if c0 is None or c1 is None:
        raise ConfigError(f"calibration file {path} is missing C0/C1")
    return CgoConstants(C0=c0, C1=c1, calibration_log=log)
