"""Frequency probing of a potential difference from boundary data.

The pipeline pairs the unknown difference against products of oscillatory
solutions. One probe fills one Fourier mode: the volume pairing equals a
boundary functional of the data maps, so each mode of the difference's
transform is estimated without interior access to the unknown potential.
A hard low-pass cutoff then inverts the band |xi| <= rho, and the (a, rho)
schedule ties the band and the oscillation depth to the data accuracy.

Frequencies live on the native DFT lattice of the doubled box used for
the oscillatory solves, so inversion is a plain truncated inverse
transform and the negative-order norms share the same Parseval measure.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, Optional, Sequence

import numpy as np

from .cgo import (CgoConstants, CgoSolution, build_frame, cgo_robin_trace,
                  extend_potential, solve_remainder)
from .errors import (ConfigError, ContractionError, NumericalError,
                     SolverConvergenceError)
from .geometry import (
    AnnulusFamily,
    DomainSpec,
    FACES,
    GridSpec,
    ScalarField,
    restrict_potential_support,
)
from .norms import (extended_coefficients, extended_mode_grid, face_weights,
                    hs_norm)
from .rtd import RtdMatrix, add_noise, assemble_rtd, data_distance, difference
from .solver import SolverParams

log = logging.getLogger(__name__)

# the schedule and the frame construction both live in this regime
_DELTA_CEILING = 1.0 / math.e


# ---------------------------------------------------------------------------
# schedule

@dataclass(frozen=True)
class ScheduleParams:
    """Derived probing parameters for one frequency/data-accuracy pair."""

    h0_gamma: float
    alpha4: float
    delta: float
    k: float
    a: float
    rho: float


def make_schedule(k: float, delta: float, h0_gamma: float = 1.0,
                  alpha4: float = 1.0, c0m: float = 1.0) -> ScheduleParams:
    """Decay parameter and cutoff radius from frequency and data distance.

    a = k/h0_gamma + log(1/delta)/(4 alpha4), clamped upward to
    max(c0m, 1) so every oscillatory solve contracts; rho = a^{2/5}.
    c0m is the calibrated product C0 * sup|q| of the solve machinery.
    """
    if k < 1.0:
        raise ConfigError(f"frequency must satisfy k >= 1, got {k}")
    if h0_gamma <= 0.0 or alpha4 <= 0.0:
        raise ConfigError("h0_gamma and alpha4 must be positive")
    if not (0.0 < delta < _DELTA_CEILING):
        raise ConfigError(
            f"data distance {delta} is outside the admissible regime "
            f"0 < delta < 1/e")
    a = k / h0_gamma + math.log(1.0 / delta) / (4.0 * alpha4)
    a = max(a, c0m, 1.0)
    rho = a ** 0.4
    return ScheduleParams(h0_gamma=float(h0_gamma), alpha4=float(alpha4),
                          delta=float(delta), k=float(k), a=float(a),
                          rho=float(rho))


def _zero_delta_schedule(k: float, h0_gamma: float, c0m: float):
    # exact data: the log term drops and only the frequency term remains
    a = max(k / h0_gamma, c0m, 1.0)
    return a, a ** 0.4


# ---------------------------------------------------------------------------
# probe lattice

def probe_lattice(grid: GridSpec, rho: float):
    """Integer modes and frequencies of the doubled-box lattice inside the
    closed ball |xi| <= rho, ordered lexicographically by mode."""
    if rho <= 0.0:
        raise ConfigError(f"cutoff radius must be positive, got {rho}")
    m, side, _ = extended_mode_grid(grid)
    step = 2.0 * math.pi / side
    mmax = int(math.floor(rho / step + 1e-9))
    if mmax > m // 2 - 1:
        raise ConfigError(
            f"cutoff {rho} exceeds the symmetric half-width of the "
            f"{m}-point lattice (step {step:.3g})")
    out = []
    r2 = (rho / step) ** 2 + 1e-9
    for i in range(-mmax, mmax + 1):
        for j in range(-mmax, mmax + 1):
            for l in range(-mmax, mmax + 1):
                if i * i + j * j + l * l <= r2:
                    out.append(((i, j, l),
                                step * np.array([i, j, l], dtype=float)))
    return out


def dft_reference(field: ScalarField, modes) -> Dict[tuple, complex]:
    """Exact lattice transform of a cube field, zero-extended: the oracle
    the probe estimates are judged against."""
    coeff = extended_coefficients(field.values, field.grid)
    m, side, _ = extended_mode_grid(field.grid)
    step = 2.0 * math.pi / side
    origin = np.asarray(field.grid.box_origin)
    out = {}
    for mode in modes:
        mode = tuple(int(v) for v in mode)
        xi = step * np.array(mode, dtype=float)
        idx = tuple(np.mod(mode, m))
        out[mode] = complex(np.exp(-1j * float(xi @ origin)) * coeff[idx])
    return out


# ---------------------------------------------------------------------------
# pairings

def alessandrini_pairing(q1, q2, u1, u2, domain: DomainSpec) -> complex:
    """Plain-cell quadrature of the difference paired with a solution
    product; no conjugation anywhere."""
    g = domain.grid
    q1v = q1.values if hasattr(q1, "values") else np.asarray(q1)
    q2v = q2.values if hasattr(q2, "values") else np.asarray(q2)
    u1v = u1.values if hasattr(u1, "values") else np.asarray(u1)
    u2v = u2.values if hasattr(u2, "values") else np.asarray(u2)
    return complex(g.spacing ** 3 * np.sum((q1v - q2v) * u1v * u2v))


def _lap7(values: np.ndarray, h: float) -> np.ndarray:
    out = np.zeros_like(values)
    c = (slice(1, -1),) * 3
    out[c] = (values[2:, 1:-1, 1:-1] + values[:-2, 1:-1, 1:-1]
              + values[1:-1, 2:, 1:-1] + values[1:-1, :-2, 1:-1]
              + values[1:-1, 1:-1, 2:] + values[1:-1, 1:-1, :-2]
              - 6.0 * values[c]) / (h * h)
    return out


def cutoff_commutator_pairing(u, u1, family: AnnulusFamily) -> complex:
    """Quadrature of [-Lap, chi]u against u1.

    The commutator is formed by the same seven-point stencil as the
    solver, so the pairing closes the discrete integration-by-parts
    identity at discretization order. Supported where chi transitions.
    """
    g = family.domain.grid
    uv = np.asarray(u.values if hasattr(u, "values") else u, dtype=complex)
    u1v = np.asarray(u1.values if hasattr(u1, "values") else u1, dtype=complex)
    chi = family.chi.values
    comm = -_lap7(chi * uv, g.spacing) + chi * _lap7(uv, g.spacing)
    return complex(g.spacing ** 3 * np.sum(comm * u1v))


# ---------------------------------------------------------------------------
# per-mode estimation

@dataclass
class ProbeResult:
    xi: np.ndarray
    mode: tuple
    fourier_estimate: complex
    identity_residual: float
    cgo_norms: dict


def _surface_pairing(domain: DomainSpec, gamma_values: np.ndarray,
                     trace) -> complex:
    # u is known on the patch only; elsewhere it enters as zero
    g = domain.grid
    cube = np.zeros(g.n_nodes, dtype=complex)
    cube[domain.gamma.node_flat] = gamma_values
    fw = face_weights(g)
    total = 0.0 + 0.0j
    for face in FACES:
        total += np.sum(fw * cube[domain.face_grids[face]]
                        * trace.values_for_face(face))
    return complex(total)


def fourier_estimate(m1: RtdMatrix, m2: RtdMatrix, sol2: CgoSolution,
                     sol1: CgoSolution, xi, domain: DomainSpec,
                     mode: Optional[tuple] = None) -> ProbeResult:
    """One mode of the difference's transform, from boundary data alone.

    The trace of the auxiliary solution difference on the patch is the map
    difference applied to the known oscillatory Robin datum; pairing that
    trace against the other solution's Robin datum over the boundary gives
    the volume pairing, whose leading term is the transform at xi. The
    unknown potential enters only through m1 — this function never sees
    interior values of it. The same functional with the two solutions'
    roles exchanged must agree at discretization order; the gap is
    reported as identity_residual on every probe.
    """
    xi = np.asarray(xi, dtype=float)
    if sol1.which != 1 or sol2.which != 2:
        raise ConfigError("pass the oscillation pair as (sol2, sol1) with "
                          "which = 2 and 1 respectively")
    for sol in (sol1, sol2):
        if not np.allclose(sol.frame.xi, xi, rtol=0.0, atol=1e-12):
            raise ConfigError("solution frame was built for a different "
                              "probe frequency")
    if sol1.frame.a != sol2.frame.a or sol1.frame.k != sol2.frame.k:
        raise ConfigError("the two solutions must share one (k, a) frame")
    k = float(sol1.frame.k)
    if m1.k != k or m2.k != k:
        raise ConfigError(
            f"maps taken at k = {m1.k}, {m2.k} but frames at k = {k}")
    if not np.array_equal(m1.domain.gamma.node_flat, domain.gamma.node_flat):
        raise ConfigError("map patch does not match the probing domain")
    a = float(sol1.frame.a)
    if float(xi @ xi) > 4.0 * (k * k + a * a) + 1e-9:
        raise ConfigError("probe frequency outside the admissible ball "
                          "|xi| <= 2 sqrt(k^2 + a^2)")
    # boundary-data discipline: the unknown side may arrive only as a map
    # and a probe field, never as a potential payload
    assert not hasattr(m1, "potential") and not hasattr(sol1, "potential")

    f1 = cgo_robin_trace(sol1, domain)
    f2 = cgo_robin_trace(sol2, domain)
    d = difference(m1, m2)
    trace_from_2 = d.entries @ f2.as_node_values()
    trace_from_1 = d.entries @ f1.as_node_values()

    est = _surface_pairing(domain, trace_from_2, f1)
    swapped = _surface_pairing(domain, trace_from_1, f2)
    return ProbeResult(
        xi=xi, mode=tuple(int(v) for v in mode) if mode is not None else None,
        fourier_estimate=est,
        identity_residual=float(abs(est - swapped)),
        cgo_norms={"r1_l2": sol1.remainder_l2, "r2_l2": sol2.remainder_l2,
                   "residual1": sol1.residual, "residual2": sol2.residual})


# ---------------------------------------------------------------------------
# low-pass inversion

@dataclass
class StabilityRecord:
    k: float
    delta: float
    a: float
    rho: float
    n_probes: int
    h_minus1_err: float
    linf_err: float
    identity_residual_max: float
    wall_seconds: float
    seed: int


@dataclass
class ReconstructionResult:
    lowpass_field: ScalarField
    h_minus1_error: Optional[float] = None
    linf_error: Optional[float] = None
    record: Optional[StabilityRecord] = None
    # band-limited values on the full enclosing box; the cube field is its
    # restriction, so the plain transform of this array returns the ball
    # coefficients exactly (the restriction alone does not)
    extended_values: Optional[np.ndarray] = None


def lowpass_reconstruct(estimates: Dict[tuple, complex], domain: DomainSpec,
                        rho: float,
                        reference: Optional[ScalarField] = None
                        ) -> ReconstructionResult:
    """Truncated inverse transform of per-mode estimates on the ball.

    The estimate set must cover the lattice ball exactly. Conjugate modes
    are averaged first (the target is real), and the inverse is evaluated
    on the doubled box, then restricted to the cube. When a reference
    field is supplied, smoothness -1 and sup errors against it are
    attached.
    """
    g = domain.grid
    ball = probe_lattice(g, rho)
    required = {mode for mode, _ in ball}
    got = {tuple(int(v) for v in mode) for mode in estimates}
    if got != required:
        missing = sorted(required - got)[:4]
        extra = sorted(got - required)[:4]
        raise ConfigError(
            f"estimate set does not tile the lattice ball: "
            f"missing {missing}, off-ball {extra}")

    m, side, _ = extended_mode_grid(g)
    step = 2.0 * math.pi / side
    origin = np.asarray(g.box_origin)
    spectrum = np.zeros((m, m, m), dtype=complex)
    for mode, _xi in ball:
        partner = tuple(-v for v in mode)
        sym = 0.5 * (complex(estimates[mode])
                     + np.conj(complex(estimates[partner])))
        xi = step * np.array(mode, dtype=float)
        # back to index-space coefficients before the inverse transform
        spectrum[tuple(np.mod(mode, m))] = sym * np.exp(1j * float(xi @ origin))

    vals = np.fft.ifftn(spectrum) * (m ** 3 / side ** 3)
    scale = float(np.max(np.abs(vals.real)))
    residue = float(np.max(np.abs(vals.imag)))
    if scale > 0.0 and residue > 1e-8 * scale:
        raise NumericalError(
            f"reconstruction carries imaginary residue {residue:.3g} "
            f"against scale {scale:.3g}", stage="probe")
    n = g.n
    field = ScalarField(g, np.ascontiguousarray(vals.real[:n, :n, :n]))

    h_err = linf = None
    if reference is not None:
        diff = field.values - reference.values
        h_err = hs_norm(diff, g, s=-1.0)
        linf = float(np.max(np.abs(diff)))
    return ReconstructionResult(lowpass_field=field, h_minus1_error=h_err,
                                linf_error=linf, extended_values=vals.real)


def h_minus1_norm(field: ScalarField) -> float:
    """Negative-order Parseval norm of a cube field (zero-extended)."""
    return hs_norm(field, s=-1.0)


# ---------------------------------------------------------------------------
# interpolation report

@dataclass(frozen=True)
class InterpolationReport:
    s: float
    eps: float
    exponent_low: float
    exponent_high: float
    linf: float
    h_minus1: float
    hs: float
    c_emp: float


def interpolation_check(field: ScalarField, s: float) -> InterpolationReport:
    """Empirical constant of the sup-norm interpolation inequality.

    The sup norm is bounded by the product of the smoothness -1 norm to
    the power eps/(1+s) and the smoothness s norm to the power
    (1-eps+s)/(s+1), with s = 3/2 + 2 eps. The two exponents sum to one.
    """
    if s <= 1.5:
        raise ConfigError(
            f"interpolation needs smoothness above 3/2, got s = {s}")
    eps = (s - 1.5) / 2.0
    e_low = eps / (1.0 + s)
    e_high = (1.0 - eps + s) / (s + 1.0)
    linf = float(np.max(np.abs(field.values)))
    low = hs_norm(field, s=-1.0)
    high = hs_norm(field, s=s)
    if linf == 0.0:
        c = 0.0
    else:
        c = linf / (low ** e_low * high ** e_high)
    return InterpolationReport(s=float(s), eps=eps, exponent_low=e_low,
                               exponent_high=e_high, linf=linf,
                               h_minus1=low, hs=high, c_emp=float(c))


# ---------------------------------------------------------------------------
# the stability experiment

def _solve_probe(qe1, qe2, m1, m2, domain, mode, xi, k, a, tolerance):
    frame = build_frame(xi, k, a)
    sol1 = solve_remainder(qe1, frame, which=1, tolerance=tolerance)
    sol2 = solve_remainder(qe2, frame, which=2, tolerance=tolerance)
    return fourier_estimate(m1, m2, sol2, sol1, xi, domain, mode=mode)


def run_stability_experiment(domain: DomainSpec, family: AnnulusFamily,
                             q1: ScalarField, q2: ScalarField,
                             k_list: Sequence[float], noise_delta: float,
                             h0_gamma: float = 1.0, alpha4: float = 1.0,
                             synthetic_delta: Optional[float] = None,
                             constants: Optional[CgoConstants] = None,
                             solver_params: Optional[SolverParams] = None,
                             cgo_tolerance: float = 1e-10,
                             seed: int = 0, jobs: int = 1):
    """Assemble data maps per frequency, probe the cutoff ball, invert,
    and record errors against the known difference.

    Noise is injected into the first map only (that is the measured one;
    the second potential is the known reference). The schedule runs on the
    measured data distance unless synthetic_delta pins it; a pinned value
    of exactly zero drops the log term and probes at a = k/h0_gamma. A
    failed frequency is logged and skipped, the sweep continues.
    """
    g = domain.grid
    for k in k_list:
        if float(k) * g.spacing > 0.5 + 1e-12:
            raise ConfigError(
                f"frequency {k} under-resolved: k dx = {float(k) * g.spacing:.3g} "
                f"exceeds 0.5")
    if np.any((q1.values - q2.values)[family.mask(0)] != 0.0):
        raise ConfigError(
            "potentials differ on the outermost collar; build the inputs "
            "with restrict_potential_support")
    qd_true = ScalarField(g, q1.values - q2.values)
    m_sup = max(float(np.max(np.abs(q1.values))),
                float(np.max(np.abs(q2.values))))
    c0m = (constants.C0 if constants is not None else 1.0) * max(m_sup, 1e-30)

    qe1 = extend_potential(q1)
    qe2 = extend_potential(q2)

    records = []
    for ki, k in enumerate(k_list):
        k = float(k)
        t0 = time.perf_counter()
        try:
            m1 = assemble_rtd(domain, q1, k, solver_params)
            m2 = assemble_rtd(domain, q2, k, solver_params)
            if noise_delta > 0.0:
                m1 = add_noise(m1, noise_delta, seed + 7919 * ki)
            measured = data_distance(m1, m2).delta
            delta_used = measured if synthetic_delta is None else float(synthetic_delta)
            if delta_used == 0.0:
                a, rho = _zero_delta_schedule(k, h0_gamma, c0m)
            else:
                sch = make_schedule(k, delta_used, h0_gamma, alpha4, c0m=c0m)
                a, rho = sch.a, sch.rho

            ball = probe_lattice(g, rho)
            if jobs > 1:
                with ThreadPoolExecutor(max_workers=jobs) as pool:
                    results = list(pool.map(
                        lambda mx: _solve_probe(qe1, qe2, m1, m2, domain,
                                                mx[0], mx[1], k, a,
                                                cgo_tolerance), ball))
            else:
                results = [_solve_probe(qe1, qe2, m1, m2, domain, mode, xi,
                                        k, a, cgo_tolerance)
                           for mode, xi in ball]
            estimates = {pr.mode: pr.fourier_estimate for pr in results}
            recon = lowpass_reconstruct(estimates, domain, rho,
                                        reference=qd_true)
            rec = StabilityRecord(
                k=k, delta=float(delta_used), a=float(a), rho=float(rho),
                n_probes=len(ball),
                h_minus1_err=float(recon.h_minus1_error),
                linf_err=float(recon.linf_error),
                identity_residual_max=max(pr.identity_residual
                                          for pr in results),
                wall_seconds=time.perf_counter() - t0, seed=int(seed))
            recon.record = rec
            records.append(rec)
        except (ConfigError, NumericalError, ContractionError,
                SolverConvergenceError) as exc:
            log.warning("frequency %s skipped: %s", k, exc)
    return records


_STABILITY_COLUMNS = ["k", "delta", "a", "rho", "n_probes", "h_minus1_err",
                      "linf_err", "identity_residual_max", "wall_seconds",
                      "seed"]


def write_stability_csv(path, records) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=_STABILITY_COLUMNS)
        writer.writeheader()
        for rec in records:
            row = {name: getattr(rec, name) for name in _STABILITY_COLUMNS}
            writer.writerow({key: repr(val) if isinstance(val, float) else val
                             for key, val in row.items()})
