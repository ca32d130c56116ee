"""Compact cross-module check suite behind the `selftest` subcommand.

Each check is cheap enough for the default 17-point grid and exercises
one slice of the pipeline end to end. A failed check aborts the suite
with the check's name in the error, so the exit code carries the stage.
"""

from __future__ import annotations

import csv
import math
import time
from pathlib import Path

import numpy as np

from ..carleman import build_gamma_weight, verify_weight
from ..cgo import build_frame, extend_potential, solve_remainder
from ..errors import CacheCorruptionError, ConfigError, ImplabError, NumericalError
from ..geometry import ComplexField, ScalarField
from ..norms import grid_l2
from ..probe import (
    StabilityRecord,
    fourier_estimate,
    h_minus1_norm,
    interpolation_check,
    make_schedule,
    probe_lattice,
    write_stability_csv,
)
from ..rtd import assemble_rtd, data_distance, load_rtd, save_rtd
from ..solver import BoundaryTrace, check_baskin_bound, solve
from .cache import ArtifactCache
from .presets import default_potentials

# measured 3e-3 on the default geometry (side 2, 17 points, k = 2); the
# margin leaves room for coarser user configs without hiding real breakage
_PLANE_WAVE_TOL = 0.05


def _check_grid_and_collars(ctx):
    domain, family = ctx["domain"], ctx["family"]
    chi = family.chi.values
    if not (chi.min() >= 0.0 and chi.max() <= 1.0):
        raise NumericalError("cutoff leaves the unit interval")
    for j in range(1, 4):
        if np.any(family.mask(j) & ~family.mask(j - 1)):
            raise NumericalError(f"collar {j} escapes collar {j - 1}")
    g = domain.grid
    return f"N={g.n}, dx={g.spacing:.4g}, |patch|={domain.gamma.size}"


def _check_plane_wave(ctx):
    domain = ctx["domain"]
    g = domain.grid
    params = ctx["params"]
    k = params.k
    d = np.array([1.0, 2.0, -0.5])
    d /= np.linalg.norm(d)

    def fn(pts, nu):
        u = np.exp(1j * k * (pts @ d))
        return 1j * k * (float(d @ nu) - 1.0) * u

    f = BoundaryTrace.from_function(domain, fn)
    x, y, z = g.coords()
    exact = np.exp(1j * k * (d[0] * x + d[1] * y + d[2] * z))
    zero_q = ScalarField(g, np.zeros(g.shape))
    zero_f = ComplexField(g, np.zeros(g.shape, complex))
    sol = solve(domain, zero_q, zero_f, f, params)
    rel = grid_l2(sol.u.values - exact, g) / grid_l2(exact, g)
    if rel > _PLANE_WAVE_TOL:
        raise NumericalError(
            f"plane-wave error {rel:.3g} exceeds {_PLANE_WAVE_TOL}")
    return f"rel err {rel:.3g} ({sol.method})"


def _check_energy_ratio(ctx):
    table = check_baskin_bound(ctx["domain"], [1.0, 2.0], trial_count=2,
                               seed=ctx["seed"])
    worst = max(table.values())
    if not (0.0 < worst < 1e4) or not all(np.isfinite(v)
                                          for v in table.values()):
        raise NumericalError(f"energy ratios out of range: {table}")
    return f"max ratio {worst:.3g}"


def _check_boundary_map(ctx):
    domain, out = ctx["domain"], ctx["out"]
    m2 = assemble_rtd(domain, ctx["q2"], ctx["params"].k, ctx["params"])
    ctx["m2"] = m2
    tmp = out / "selftest_rtd.bin"
    save_rtd(tmp, m2)
    back = load_rtd(tmp, domain)
    tmp.unlink()
    gap = data_distance(m2, back).delta
    scale = float(np.max(np.abs(m2.entries)))
    if gap > 1e-4 * max(scale, 1e-30):
        raise NumericalError(
            f"map round trip drifted: gap {gap:.3g} vs scale {scale:.3g}")
    return f"{m2.shape[0]}x{m2.shape[1]} map, round-trip gap {gap:.2e}"


def _check_cgo_contraction(ctx):
    cgo_cfg = ctx["cfg"].cgo
    k = ctx["params"].k
    qe2 = extend_potential(ctx["q2"], cgo_cfg.pad_factor)
    frame = build_frame((0.0, 0.0, 0.0), k, cgo_cfg.a, cgo_cfg.seed)
    sol2 = solve_remainder(qe2, frame, which=2, tolerance=cgo_cfg.tolerance)
    sol1 = solve_remainder(qe2, frame, which=1, tolerance=cgo_cfg.tolerance)
    ctx["cgo_pair"] = (sol1, sol2)
    for sol in (sol1, sol2):
        if not (sol.rate_estimate < 1.0):
            raise NumericalError(f"contraction ratio {sol.rate_estimate}")
        if sol.residual > 10.0 * cgo_cfg.tolerance:
            raise NumericalError(f"oscillatory residual {sol.residual:.3g}")
    return (f"a={cgo_cfg.a:g}, |r|={sol2.remainder_l2:.3g}, "
            f"{sol2.iterations} iters")


def _check_schedule_lattice(ctx):
    sch = make_schedule(1.0, math.exp(-4.0))
    if abs(sch.a - 2.0) > 1e-12 or abs(sch.rho - 2.0 ** 0.4) > 1e-12:
        raise NumericalError(f"schedule arithmetic drifted: {sch}")
    g = ctx["domain"].grid
    step = 2.0 * math.pi / (2.0 * g.box_side)
    ball = probe_lattice(g, 1.05 * step)
    if len(ball) != 7:
        raise NumericalError(f"unit ball holds {len(ball)} modes, wanted 7")
    try:
        make_schedule(1.0, 0.5)
    except ConfigError:
        pass
    else:
        raise NumericalError("inadmissible data distance was accepted")
    return f"a=2 check, 7-mode ball at step {step:.3g}"


def _check_zero_difference(ctx):
    m2 = ctx["m2"]
    sol1, sol2 = ctx["cgo_pair"]
    result = fourier_estimate(m2, m2, sol2, sol1,
                              np.zeros(3), ctx["domain"], mode=(0, 0, 0))
    if result.fourier_estimate != 0.0 or result.identity_residual != 0.0:
        raise NumericalError(
            f"identical maps gave estimate {result.fourier_estimate}, "
            f"residual {result.identity_residual}")
    return "identical maps: estimate and residual exactly zero"


def _check_interpolation(ctx):
    qd = ctx["qd"]
    rep = interpolation_check(qd, s=2.5)
    if abs(rep.exponent_low - 1.0 / 7.0) > 1e-15 \
            or abs(rep.exponent_high - 6.0 / 7.0) > 1e-15:
        raise NumericalError(
            f"exponents {rep.exponent_low}, {rep.exponent_high}")
    low = h_minus1_norm(qd)
    if not (0.0 < low <= grid_l2(qd.values, qd.grid) * (1.0 + 1e-12)):
        raise NumericalError(f"negative-order norm {low} out of bounds")
    return f"exponents 1/7 and 6/7, c_emp={rep.c_emp:.3g}"


def _check_carleman_weight(ctx):
    cfg = ctx["cfg"].carleman
    domain, family = ctx["domain"], ctx["family"]
    weight = build_gamma_weight(domain, family, domain.gamma,
                                seed=ctx["seed"], beta0=cfg.beta0,
                                g_min=cfg.g_min,
                                retry_budget=cfg.retry_budget)
    verify_weight(weight, cfg.g_min)
    return f"kappa={weight.kappa:.3g}, beta0={cfg.beta0:g}"


def _check_cache(ctx):
    cache: ArtifactCache = ctx["cache"]
    key = "selftest-" + format(ctx["seed"], "016x")
    payload = b"integrity probe " + bytes(range(64))
    cache.put_bytes(key, "bin", payload)
    path = cache.fetch_path(key, "bin")
    if path is None or path.read_bytes() != payload:
        raise NumericalError("stored payload did not come back")
    corrupted = bytearray(payload)
    corrupted[7] ^= 0xFF
    path.write_bytes(bytes(corrupted))
    try:
        cache.fetch_path(key, "bin")
    except CacheCorruptionError:
        pass
    else:
        raise NumericalError("corrupted payload passed verification")
    if cache.fetch_path(key, "bin") is not None:
        raise NumericalError("corrupted entry was not evicted")
    cache.put_bytes(key, "bin", payload)
    if cache.fetch_path(key, "bin") is None:
        raise NumericalError("re-stored payload missed")
    return "store, verify, evict, restore: ok"


def _check_csv_round_trip(ctx):
    out: Path = ctx["out"]
    rec = StabilityRecord(k=2.0, delta=1e-6, a=3.0, rho=3.0 ** 0.4,
                          n_probes=7, h_minus1_err=0.01, linf_err=0.1,
                          identity_residual_max=1e-5, wall_seconds=0.0,
                          seed=ctx["seed"])
    path = out / "selftest_roundtrip.csv"
    write_stability_csv(path, [rec])
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    path.unlink()
    if len(rows) != 1 or float(rows[0]["h_minus1_err"]) != rec.h_minus1_err \
            or float(rows[0]["rho"]) != rec.rho:
        raise NumericalError(f"row came back altered: {rows}")
    return "float columns reproduce exactly"


_CHECKS = (
    ("grid-and-collars", _check_grid_and_collars),
    ("plane-wave-solve", _check_plane_wave),
    ("energy-ratio-bound", _check_energy_ratio),
    ("boundary-map-roundtrip", _check_boundary_map),
    ("cgo-contraction", _check_cgo_contraction),
    ("schedule-and-lattice", _check_schedule_lattice),
    ("zero-difference-probe", _check_zero_difference),
    ("lowpass-interpolation", _check_interpolation),
    ("carleman-weight", _check_carleman_weight),
    ("cache-integrity", _check_cache),
    ("csv-round-trip", _check_csv_round_trip),
)


def run_selftest(cfg, out: Path, cache: ArtifactCache, clock) -> int:
    domain, family = cfg.geometry.build()
    q1, q2, qd = default_potentials(domain.grid, family)
    ctx = {"cfg": cfg, "domain": domain, "family": family, "out": out,
           "cache": cache, "seed": cfg.seed, "params": cfg.solver.params(),
           "q1": q1, "q2": q2, "qd": qd}
    failures = 0
    for name, fn in _CHECKS:
        t0 = time.perf_counter()
        with clock.stage(f"selftest:{name}"):
            try:
                detail = fn(ctx)
            except ImplabError as exc:
                failures += 1
                print(f"selftest: {name:<24} FAIL  {exc}")
                raise NumericalError(
                    f"selftest check '{name}' failed: {exc}") from exc
        dt = time.perf_counter() - t0
        print(f"selftest: {name:<24} ok    {dt:6.2f}s  {detail}")
    print(f"selftest: {len(_CHECKS)} checks passed")
    return 0
