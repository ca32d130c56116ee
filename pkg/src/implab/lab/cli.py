"""Command-line shell: one subcommand per experiment stage.

Exit codes: 0 success, 1 configuration or geometry error, 2 numerical
failure (the message names the stage), 3 cache corruption.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .. import __version__
from ..carleman import (
    CarlemanCheckParams,
    build_gamma_weight,
    build_simple_weight,
    check_fursikov_imanuvilov,
    check_robin_carleman,
    verify_weight,
    write_ratio_csv,
)
from ..cgo import build_frame, calibrate_constants, extend_potential, \
    load_constants, save_constants, solve_remainder
from ..errors import CacheCorruptionError, ConfigError, NumericalError
from ..geometry import ComplexField
from ..probe import (
    _zero_delta_schedule,
    dft_reference,
    fourier_estimate,
    make_schedule,
    run_stability_experiment,
    write_stability_csv,
)
from ..rtd import add_noise, assemble_rtd, data_distance, save_rtd
from ..solver import BoundaryTrace, dump_field, solve
from ..testfields import random_band_limited
from .cache import ArtifactCache, cgo_cache_key, cgo_to_bytes, \
    resolve_cache_dir, rtd_cache_key
from .config import LabConfig, config_digest, load_config, with_overrides
from .manifest import write_manifest
from .plots import emit_plot_scripts
from .presets import default_potentials
from .selftest import run_selftest

log = logging.getLogger("implab.lab")

# the schedule is only meaningful below this data-error ceiling
_DELTA_CEILING = 1.0 / math.e


class StageClock:
    """Wall-time bookkeeping per stage, plus the name of whichever stage
    is running when an error escapes."""

    def __init__(self):
        self.times = {}
        self.current = "startup"

    @contextmanager
    def stage(self, name: str):
        self.current = name
        t0 = time.perf_counter()
        yield
        self.times[name] = time.perf_counter() - t0


# ---------------------------------------------------------------------------
# shared helpers

def _maps_for(cfg: LabConfig, domain, q, cache: ArtifactCache):
    """Assembled boundary map through the cache; returns (map, hit flag)."""
    params = cfg.solver.params()
    key = rtd_cache_key(domain, q, params.k, params)
    cached = cache.fetch_rtd(key, domain)
    if cached is not None:
        return cached, True
    matrix = assemble_rtd(domain, q, params.k, params)
    cache.store_rtd(key, matrix)
    return matrix, False


def _cgo_through_cache(cfg: LabConfig, q, xi, a: float, which: int,
                       cache: ArtifactCache):
    key = cgo_cache_key(q, xi, cfg.solver.k, a, which, cfg.cgo.tolerance,
                        cfg.cgo.pad_factor, cfg.cgo.seed)
    cached = cache.fetch_cgo(key)
    if cached is not None:
        return cached, True
    frame = build_frame(xi, cfg.solver.k, a, cfg.cgo.seed)
    qe = extend_potential(q, cfg.cgo.pad_factor)
    sol = solve_remainder(qe, frame, which=which, tolerance=cfg.cgo.tolerance)
    cache.store_cgo(key, sol)
    return sol, False


def _constants_for(cfg: LabConfig, out: Path):
    """Calibrated constants if a previous `calibrate` left them here."""
    path = out / "cgo_constants.txt"
    if path.is_file():
        constants = load_constants(path)
        log.info("using calibrated constants C0=%.3g C1=%.3g from %s",
                 constants.C0, constants.C1, path.name)
        return constants
    return None


# ---------------------------------------------------------------------------
# subcommands

def cmd_solve(cfg, args, out, cache, clock):
    domain, family = cfg.geometry.build()
    _, q2, _ = default_potentials(domain.grid, family)
    grid = domain.grid
    params = cfg.solver.params()
    with clock.stage("impedance-solve"):
        re = random_band_limited(grid, 3, 1.0, seed=cfg.seed)
        im = random_band_limited(grid, 3, 1.0, seed=cfg.seed + 1)
        F = ComplexField(grid, re.values + 1j * im.values)
        sol = solve(domain, q2, F, BoundaryTrace.zero(domain), params)
    path = out / "field.imps"
    dump_field(path, sol.u)
    print(f"solve: k={params.k:g}, {sol.method} method, "
          f"{sol.iterations} iterations, residual {sol.residual:.3e}")
    print(f"solve: field written to {path}")


def cmd_rtd(cfg, args, out, cache, clock):
    domain, family = cfg.geometry.build()
    _, q2, _ = default_potentials(domain.grid, family)
    with clock.stage("boundary-map"):
        matrix, hit = _maps_for(cfg, domain, q2, cache)
    if hit:
        print(f"rtd: cache hit, zero solves performed "
              f"({matrix.shape[0]}x{matrix.shape[1]} map)")
    else:
        print(f"rtd: assembled {matrix.shape[1]} boundary columns "
              f"({matrix.shape[0]} patch rows) at k={matrix.k:g}")
    path = out / "rtd.bin"
    save_rtd(path, matrix)
    print(f"rtd: map written to {path}")


def cmd_cgo(cfg, args, out, cache, clock):
    domain, family = cfg.geometry.build()
    _, q2, _ = default_potentials(domain.grid, family)
    with clock.stage("cgo-solve"):
        sol, hit = _cgo_through_cache(cfg, q2, np.zeros(3), cfg.cgo.a, 1,
                                      cache)
    if sol.residual > 10.0 * cfg.cgo.tolerance:
        raise NumericalError(
            f"certification failed: residual {sol.residual:.3e} exceeds "
            f"10x tolerance {cfg.cgo.tolerance:.1e}", stage="cgo-solve")
    origin = "cache hit" if hit else f"{sol.iterations} iterations"
    print(f"cgo: a={cfg.cgo.a:g}, k={cfg.solver.k:g} ({origin})")
    print(f"cgo: remainder norm {sol.remainder_l2:.6g}, contraction "
          f"{sol.rate_estimate:.3f}, residual {sol.residual:.3e}, "
          f"symbol floor {sol.min_symbol:.3g}")
    (out / "cgo.npz").write_bytes(cgo_to_bytes(sol))
    print(f"cgo: solution written to {out / 'cgo.npz'}")


def cmd_calibrate(cfg, args, out, cache, clock):
    domain, family = cfg.geometry.build()
    q1, q2, qd = default_potentials(domain.grid, family)
    a_grid = (cfg.cgo.a, 2.0 * cfg.cgo.a)
    with clock.stage("calibration"):
        constants = calibrate_constants(domain, (q2, q1, qd), a_grid,
                                        (cfg.solver.k,), seed=cfg.cgo.seed,
                                        pad_factor=cfg.cgo.pad_factor,
                                        tolerance=cfg.cgo.tolerance)
    path = out / "cgo_constants.txt"
    save_constants(path, constants)
    accepted = sum(1 for entry in constants.calibration_log
                   if entry["accepted"])
    print(f"calibrate: C0={constants.C0:.6g} C1={constants.C1:.6g} "
          f"({accepted}/{len(constants.calibration_log)} solves accepted)")
    print(f"calibrate: constants written to {path}")


def cmd_carleman(cfg, args, out, cache, clock):
    domain, family = cfg.geometry.build()
    car = cfg.carleman
    with clock.stage("weight-construction"):
        weight = build_gamma_weight(domain, family, domain.gamma,
                                    seed=cfg.seed, beta0=car.beta0,
                                    g_min=car.g_min,
                                    retry_budget=car.retry_budget)
        verify_weight(weight, car.g_min)
    print(f"carleman: patch weight verified (kappa={weight.kappa:.3g})")

    params = CarlemanCheckParams(h_sequence=car.h_sequence,
                                 gamma_grid=car.gamma_grid,
                                 trial_count=car.trials, seed=cfg.seed)
    with clock.stage("interior-inequality"):
        simple = build_simple_weight(domain, beta0=car.beta0)
        fi = check_fursikov_imanuvilov(simple, params)
    write_ratio_csv(out / "fi_ratios.csv", fi.rows)
    for key, slope in sorted(fi.slope_of_log_ratio().items()):
        print(f"carleman: interior ratio slope at gamma={key:g}: {slope:+.3f}")

    with clock.stage("boundary-inequality"):
        robin = check_robin_carleman(weight, params)
    write_ratio_csv(out / "robin_ratios.csv", robin.rows)
    for key, slope in sorted(robin.slope_of_log_ratio().items()):
        print(f"carleman: boundary ratio slope at k={key:g}: {slope:+.3f}")
    print(f"carleman: ratio tables written to {out}")


def cmd_probe(cfg, args, out, cache, clock):
    domain, family = cfg.geometry.build()
    q1, q2, qd = default_potentials(domain.grid, family)
    params = cfg.solver.params()
    k = params.k
    pr = cfg.probe

    with clock.stage("boundary-maps"):
        m1, hit1 = _maps_for(cfg, domain, q1, cache)
        m2, hit2 = _maps_for(cfg, domain, q2, cache)
    log.info("maps ready (cache hits: %s, %s)", hit1, hit2)

    if pr.use_synthetic_delta:
        delta = pr.noise_delta
    else:
        m1 = add_noise(m1, pr.noise_delta, cfg.seed)
        delta = data_distance(m1, m2).delta
    if delta >= _DELTA_CEILING:
        raise ConfigError(
            f"data error delta={delta:.3g} is outside the admissible "
            f"regime 0 <= delta < 1/e of the stability schedule")

    constants = _constants_for(cfg, out)
    sup_q = max(q1.max_abs(), q2.max_abs())
    c0m = (constants.C0 if constants is not None else 1.0) * sup_q
    if delta == 0.0:
        a, rho = _zero_delta_schedule(k, pr.h0_gamma, c0m)
    else:
        sch = make_schedule(k, delta, pr.h0_gamma, pr.alpha4, c0m=c0m)
        a, rho = sch.a, sch.rho

    mode = tuple(int(v) for v in args.mode)
    step = 2.0 * math.pi / (2.0 * domain.grid.box_side)
    xi = step * np.array(mode, dtype=float)

    with clock.stage("cgo-solves"):
        sol1, _ = _cgo_through_cache(cfg, q1, xi, a, 1, cache)
        sol2, _ = _cgo_through_cache(cfg, q2, xi, a, 2, cache)
    with clock.stage("probe-estimate"):
        result = fourier_estimate(m1, m2, sol2, sol1, xi, domain, mode=mode)
    oracle = dft_reference(qd, [mode])[mode]
    err = abs(result.fourier_estimate - oracle)

    lines = [
        f"mode = {mode}, |xi| = {float(np.linalg.norm(xi)):.6g}",
        f"delta = {delta!r}, a = {a!r}, rho = {rho!r}",
        f"estimate  = {result.fourier_estimate!r}",
        f"reference = {oracle!r}",
        f"abs error = {err!r} ({err / max(qd.max_abs(), 1e-30):.3%} of sup)",
        f"identity residual = {result.identity_residual!r}",
    ]
    for line in lines:
        print(f"probe: {line}")
    (out / "probe.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_sweep(cfg, args, out, cache, clock):
    pr = cfg.probe
    if pr.noise_delta < 0.0:
        raise ConfigError(f"noise_delta must be nonnegative, got "
                          f"{pr.noise_delta}")
    if pr.noise_delta >= _DELTA_CEILING:
        raise ConfigError(
            f"noise_delta={pr.noise_delta:g} is outside the admissible "
            f"regime 0 <= delta < 1/e; the stability schedule is not "
            f"defined there")
    domain, family = cfg.geometry.build()
    q1, q2, qd = default_potentials(domain.grid, family)
    constants = _constants_for(cfg, out)

    synthetic = pr.noise_delta if pr.use_synthetic_delta else None
    noise = 0.0 if pr.use_synthetic_delta else pr.noise_delta
    with clock.stage("stability-sweep"):
        records = run_stability_experiment(
            domain, family, q1, q2, pr.k_list, noise,
            h0_gamma=pr.h0_gamma, alpha4=pr.alpha4,
            synthetic_delta=synthetic, constants=constants,
            solver_params=cfg.solver.params(),
            cgo_tolerance=cfg.cgo.tolerance, seed=cfg.seed, jobs=args.jobs)
    if not records:
        raise NumericalError(
            "every frequency in the sweep failed; see the warnings above",
            stage="stability-sweep")
    path = out / "stability.csv"
    write_stability_csv(path, records)
    for rec in records:
        print(f"sweep: k={rec.k:g} delta={rec.delta:.3g} a={rec.a:.3g} "
              f"probes={rec.n_probes} h-1 err={rec.h_minus1_err:.4g} "
              f"sup err={rec.linf_err:.4g} ({rec.wall_seconds:.1f}s)")
    print(f"sweep: {len(records)}/{len(pr.k_list)} frequencies "
          f"written to {path}")


def cmd_plot(cfg, args, out, cache, clock):
    with clock.stage("plot-emission"):
        written = emit_plot_scripts(out)
    for path in written:
        print(f"plot: wrote {path}")


def cmd_selftest(cfg, args, out, cache, clock):
    run_selftest(cfg, out, cache, clock)


_COMMANDS = {
    "solve": (cmd_solve, "one impedance solve on the default potential; "
                         "dumps the field"),
    "rtd": (cmd_rtd, "assemble the boundary map through the cache"),
    "cgo": (cmd_cgo, "build and certify one oscillatory solution"),
    "calibrate": (cmd_calibrate, "measure the oscillatory-solve constants"),
    "carleman": (cmd_carleman, "weighted inequality checks; ratio CSVs"),
    "probe": (cmd_probe, "single-frequency estimate against the known "
                         "difference"),
    "sweep": (cmd_sweep, "full stability experiment; stability.csv"),
    "plot": (cmd_plot, "emit gnuplot scripts for the CSVs present"),
    "selftest": (cmd_selftest, "run the compact cross-module check suite"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default="configs/default.cfg",
                        help="run configuration file")
    common.add_argument("--seed", type=int, default=None,
                        help="override the configured seed")
    common.add_argument("--jobs", type=int, default=1,
                        help="worker threads for independent units")
    common.add_argument("--out", default=None,
                        help="override the configured output directory")
    common.add_argument("--cache", default=None,
                        help="override the cache directory")
    common.add_argument("--quiet", action="store_true",
                        help="suppress progress logging")

    parser = argparse.ArgumentParser(
        prog="implab",
        description="desk-scale laboratory for impedance boundary data: "
                    "maps, oscillatory probes, weighted inequalities, and "
                    "low-pass recovery")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (fn, help_text) in _COMMANDS.items():
        sp = sub.add_parser(name, parents=[common], help=help_text)
        sp.set_defaults(handler=fn)
        if name == "probe":
            sp.add_argument("--mode", type=int, nargs=3, default=(0, 0, 0),
                            metavar=("I", "J", "K"),
                            help="integer lattice mode to probe")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        print("implab: config error: --jobs must be at least 1",
              file=sys.stderr)
        return 1

    clock = StageClock()
    try:
        cfg = load_config(args.config)
        cfg = with_overrides(cfg, seed=args.seed, out=args.out,
                             cache=args.cache)
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        cache = ArtifactCache(resolve_cache_dir(args.cache, cfg.cache_dir,
                                                out))
        args.handler(cfg, args, out, cache, clock)
        write_manifest(out, config_digest(cfg), args.command, clock.times)
        return 0
    except CacheCorruptionError as exc:
        print(f"implab: cache corruption: {exc}", file=sys.stderr)
        return 3
    except ConfigError as exc:
        print(f"implab: config error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        stage = getattr(exc, "stage", "") or clock.current
        print(f"implab: numerical failure in stage '{stage}': {exc}",
              file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
