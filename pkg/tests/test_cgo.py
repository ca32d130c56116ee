import numpy as np
import pytest

from implab.cgo import (
    CgoConstants,
    CgoFrame,
    CgoSolution,
    build_frame,
    calibrate_constants,
    cgo_robin_trace,
    check_h2_bound,
    evaluate_cgo,
    extend_potential,
    h2_ratio_of_field,
    load_constants,
    period_of,
    periodization_grid,
    save_constants,
    solve_remainder,
)
from implab.errors import ConfigError, ContractionError
from implab.geometry import ComplexField, GammaSpec, GridSpec, ScalarField, build_box_domain
from implab.norms import grid_l2
from implab.solver import SolverParams, assemble
from implab.testfields import bump


GRID = GridSpec((-1.0, -1.0, -1.0), 2.0, 17)


def zero_potential():
    return ScalarField(GRID, np.zeros(GRID.shape))


# ---------------------------------------------------------------------------
# frames


def test_frame_hand_values():
    fr = build_frame(np.array([2.0, 0.0, 0.0]), k=2.0, a=3.0)
    assert np.allclose(fr.mu1, [0.0, 1.0, 0.0])
    assert np.allclose(fr.mu2, [0.0, 0.0, 1.0])
    s = np.sqrt(2.0**2 + 3.0**2 - 1.0)
    assert np.allclose(fr.zeta1, np.array([-1.0, s, 3.0j]))
    assert np.allclose(fr.zeta2, np.array([-1.0, -s, -3.0j]))
    assert abs(complex(fr.zeta1 @ fr.zeta1) - 4.0) < 1e-12


def test_frame_canonical_at_zero_frequency():
    fr = build_frame(np.zeros(3), k=1.0, a=2.0)
    assert np.array_equal(fr.mu1, [0.0, 1.0, 0.0])
    assert np.array_equal(fr.mu2, [0.0, 0.0, 1.0])


@pytest.mark.parametrize("xi", [
    np.zeros(3),
    np.array([3.0, 0.0, 0.0]),
    np.array([0.0, -2.0, 1.0]),
    np.array([1.2, -0.7, 2.1]),
    np.array([4.0, 4.0, 4.0]),
])
def test_frame_invariants(xi):
    k, a = 2.0, 5.0
    fr = build_frame(xi, k=k, a=a, orientation_seed=7)
    for u, v in ((fr.mu1, fr.mu1), (fr.mu2, fr.mu2)):
        assert abs(u @ v - 1.0) < 1e-12
    assert abs(fr.mu1 @ fr.mu2) < 1e-12
    assert abs(fr.mu1 @ xi) < 1e-12 * max(1.0, np.linalg.norm(xi))
    assert abs(fr.mu2 @ xi) < 1e-12 * max(1.0, np.linalg.norm(xi))
    for z in (fr.zeta1, fr.zeta2):
        assert abs(complex(z @ z) - k * k) < 1e-10 * max(k * k, 1.0)
        assert abs(np.linalg.norm(z.imag) - a) < 1e-10 * a
    scale = np.linalg.norm(xi) + np.linalg.norm(fr.zeta1) + 1.0
    assert np.max(np.abs(fr.zeta1 + fr.zeta2 + xi)) <= 1e-13 * scale
    if np.count_nonzero(xi) <= 1:
        # exact arithmetic on these branches, so the sum is bit-exact
        assert np.all(fr.zeta1 + fr.zeta2 == -xi)


def test_frame_rejects_small_a():
    with pytest.raises(ConfigError, match="a >= 1"):
        build_frame(np.zeros(3), k=1.0, a=0.5)


def test_frame_rejects_large_frequency():
    with pytest.raises(ConfigError, match=r"k\^2 \+ a\^2"):
        build_frame(np.array([10.0, 0.0, 0.0]), k=1.0, a=1.0)


def test_frame_which_selector():
    fr = build_frame(np.zeros(3), k=1.0, a=2.0)
    assert np.array_equal(fr.zeta(1), fr.zeta1)
    assert np.array_equal(fr.zeta(2), fr.zeta2)
    with pytest.raises(ConfigError):
        fr.zeta(3)


# ---------------------------------------------------------------------------
# periodization


def test_periodization_grid_keeps_spacing_and_doubles_period():
    pgrid = periodization_grid(GRID, 2)
    assert pgrid.n == 2 * (GRID.n - 1)
    assert np.isclose(pgrid.spacing, GRID.spacing)
    assert np.isclose(period_of(pgrid), 2.0 * GRID.box_side)
    assert np.allclose(pgrid.box_origin, GRID.box_origin)


def test_extend_potential_zero_pads():
    q = bump(GRID, (0.0, 0.0, 0.0), 0.5, 1.0)
    qe = extend_potential(q)
    n = GRID.n
    assert np.array_equal(qe.values[:n, :n, :n], q.values)
    assert np.all(qe.values[n:, :, :] == 0.0)
    assert np.all(qe.values[:, n:, :] == 0.0)
    assert np.all(qe.values[:, :, n:] == 0.0)


def test_pad_factor_below_two_rejected():
    with pytest.raises(ConfigError):
        periodization_grid(GRID, 1)


# ---------------------------------------------------------------------------
# remainder solves


def test_zero_potential_gives_zero_remainder_in_one_iteration():
    qe = extend_potential(zero_potential())
    fr = build_frame(np.zeros(3), k=1.0, a=2.0)
    sol = solve_remainder(qe, fr, which=1)
    assert sol.iterations == 1
    assert sol.r.max_abs() == 0.0
    assert sol.residual == 0.0
    assert sol.remainder_l2 == 0.0


def test_aligned_shift_reaches_guaranteed_floor():
    qe = extend_potential(bump(GRID, (0.0, 0.0, 0.0), 0.6, 1.0))
    fr = build_frame(np.zeros(3), k=2.0, a=4.0)
    sol = solve_remainder(qe, fr, which=1)
    step = 2.0 * np.pi / period_of(qe.grid)
    assert sol.tau == 0.5
    assert sol.min_symbol >= 0.999 * fr.a * step


def test_remainder_decay_with_a():
    q = bump(GRID, (0.1, -0.05, 0.0), 0.6, 1.0)
    qe = extend_potential(q)
    qmax = q.max_abs()
    scaled = []
    for a in (4.0, 8.0, 16.0):
        fr = build_frame(np.zeros(3), k=2.0, a=a)
        sol = solve_remainder(qe, fr, which=1, tolerance=1e-10)
        assert sol.rate_estimate < 1.0
        assert sol.residual <= 10.0 * 1e-10
        scaled.append(sol.remainder_l2 * a / qmax)
    assert max(scaled) / min(scaled) < 1.5
    assert max(scaled) < 1.0


def test_both_zeta_choices_converge_and_differ():
    q = bump(GRID, (0.2, 0.0, -0.1), 0.5, 0.8)
    qe = extend_potential(q)
    fr = build_frame(np.array([2.0, 0.0, 0.0]), k=2.0, a=4.0)
    s1 = solve_remainder(qe, fr, which=1)
    s2 = solve_remainder(qe, fr, which=2)
    assert s1.residual < 1e-9 and s2.residual < 1e-9
    assert np.max(np.abs(s1.r.values - s2.r.values)) > 1e-6


def test_oblique_frame_solve_converges():
    q = bump(GRID, (0.0, 0.0, 0.0), 0.5, 0.5)
    qe = extend_potential(q)
    fr = build_frame(np.array([1.0, 1.0, 1.0]), k=2.0, a=6.0, orientation_seed=3)
    sol = solve_remainder(qe, fr, which=1)
    assert sol.min_symbol > 0.0
    assert sol.residual < 1e-9


def test_contraction_error_for_large_potential():
    q = bump(GRID, (0.0, 0.0, 0.0), 0.6, 1.0e6)
    qe = extend_potential(q)
    fr = build_frame(np.zeros(3), k=2.0, a=4.0)
    with pytest.raises(ContractionError, match="increase the decay"):
        solve_remainder(qe, fr, which=1)


# ---------------------------------------------------------------------------
# evaluation


def test_product_completeness():
    # e^{i zeta1 x} e^{i zeta2 x} must collapse to e^{-i xi x} exactly
    qe = extend_potential(zero_potential())
    xi = np.array([2.0, 0.0, 0.0])
    fr = build_frame(xi, k=2.0, a=4.0)
    u1 = evaluate_cgo(solve_remainder(qe, fr, which=1), GRID).u.values
    u2 = evaluate_cgo(solve_remainder(qe, fr, which=2), GRID).u.values
    x, y, z = GRID.coords()
    target = np.exp(-1j * (xi[0] * x + xi[1] * y + xi[2] * z))
    assert np.max(np.abs(u1 * u2 - target)) < 1e-12


def test_growth_bound_reported():
    q = bump(GRID, (0.0, 0.0, 0.0), 0.5, 0.5)
    sol = solve_remainder(extend_potential(q), build_frame(np.zeros(3), 2.0, 4.0), 1)
    ev = evaluate_cgo(sol, growth_constant=2.0)
    assert ev.l2_periodization > 0.0
    assert ev.growth_bound is not None
    assert ev.within_growth


def test_evaluate_rejects_foreign_grid():
    q = bump(GRID, (0.0, 0.0, 0.0), 0.5, 0.5)
    sol = solve_remainder(extend_potential(q), build_frame(np.zeros(3), 2.0, 4.0), 1)
    other = GridSpec((0.0, 0.0, 0.0), 2.0, 17)
    with pytest.raises(ConfigError):
        evaluate_cgo(sol, other)


def test_robin_trace_cross_check_against_impedance_solver():
    # with q = 0 the probe field is explicit; feeding its impedance data to
    # the finite-difference solver must reproduce it at second order
    k = 2.0
    fr = build_frame(np.zeros(3), k=k, a=1.5)
    errs = []
    for n in (17, 33):
        grid = GridSpec((-1.0, -1.0, -1.0), 2.0, n)
        dom = build_box_domain(grid, GammaSpec())
        q = ScalarField(grid, np.zeros(grid.shape))
        sol = solve_remainder(extend_potential(q), fr, which=1)
        trace = cgo_robin_trace(sol, dom)
        op = assemble(dom, q, SolverParams(k=k))
        numeric = op.solve(ScalarField(grid, np.zeros(grid.shape)), trace)
        exact = evaluate_cgo(sol, grid).u.values
        errs.append(grid_l2(numeric.u.values - exact, grid) / grid_l2(exact, grid))
    assert errs[0] / errs[1] > 3.3  # order two in the step halving


# ---------------------------------------------------------------------------
# curvature bound


def plane_wave_solution(grid, k, direction):
    d = np.asarray(direction, dtype=float)
    d /= np.linalg.norm(d)
    frame = CgoFrame(xi=np.zeros(3), mu1=np.array([0.0, 1.0, 0.0]),
                     mu2=np.array([0.0, 0.0, 1.0]), a=0.0, k=k,
                     zeta1=(k * d).astype(complex), zeta2=(-k * d).astype(complex))
    pgrid = periodization_grid(grid)
    r0 = ComplexField(pgrid, np.zeros(pgrid.shape, dtype=complex))
    return CgoSolution(frame=frame, which=1, r=r0, remainder_l2=0.0,
                       residual=0.0, iterations=0, rate_estimate=0.0,
                       tau=0.5, min_symbol=1.0)


@pytest.mark.parametrize("k,direction", [(1.0, (1.0, 0.0, 0.0)),
                                         (2.0, (1.0, 1.0, 1.0))])
def test_h2_ratio_plane_wave_closed_form(k, direction):
    grid = GridSpec((-1.0, -1.0, -1.0), 2.0, 33)
    sol = plane_wave_solution(grid, k, direction)
    u = evaluate_cgo(sol, grid).u
    ref = grid_l2(u.values, grid)
    ratio = h2_ratio_of_field(u, k, ref)
    closed = np.sqrt(1.0 + 2.0 * k**2 + k**4) / (1.0 + k**2)
    assert closed <= np.sqrt(3.0)
    assert abs(ratio - closed) < 0.1 * closed


def test_h2_bound_on_genuine_solution():
    k, a = 2.0, 4.0
    q = bump(GRID, (0.0, 0.0, 0.0), 0.6, 1.0)
    dom = build_box_domain(GRID, GammaSpec())
    sol = solve_remainder(extend_potential(q), build_frame(np.zeros(3), k, a), 1)
    ratio = check_h2_bound(sol, dom)
    cap = 1.5 * (1.0 + k * k + 2.0 * a * a) / (1.0 + k * k)
    assert 0.0 < ratio < cap


# ---------------------------------------------------------------------------
# calibration


def test_calibrate_constants_and_roundtrip(tmp_path):
    family = [bump(GRID, (0.0, 0.0, 0.0), 0.6, 1.0),
              bump(GRID, (0.3, -0.2, 0.1), 0.5, 0.7)]
    consts = calibrate_constants(build_box_domain(GRID, GammaSpec()),
                                 family, a_grid=[4.0, 8.0], k_grid=[1.0, 2.0],
                                 seed=11)
    assert consts.C0 >= 1.0
    assert consts.C1 >= 1.0
    accepted = [row for row in consts.calibration_log if row["accepted"]]
    assert len(accepted) == len(family) * 2 * 2

    path = tmp_path / "constants.txt"
    save_constants(path, consts)
    loaded = load_constants(path)
    assert loaded.C0 == consts.C0
    assert loaded.C1 == consts.C1
    assert loaded.calibration_log == consts.calibration_log


def test_divergent_calibration_entries_are_excluded():
    family = [bump(GRID, (0.0, 0.0, 0.0), 0.6, 60.0)]
    consts = calibrate_constants(build_box_domain(GRID, GammaSpec()),
                                 family, a_grid=[4.0, 64.0], k_grid=[2.0],
                                 seed=0)
    rejected = [row for row in consts.calibration_log if not row["accepted"]]
    assert rejected, "the small-a solve should have been excluded"
    assert any("excluded" in row["note"] for row in rejected)
    assert consts.C0 >= 1.0
