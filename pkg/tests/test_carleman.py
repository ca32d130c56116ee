import csv
import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from implab.carleman import (
    CarlemanCheckParams,
    apply_conjugated,
    apply_decomposed,
    build_gamma_weight,
    build_simple_weight,
    check_fursikov_imanuvilov,
    check_robin_carleman,
    check_ucp_bound,
    fursikov_imanuvilov_ratio,
    nodal_gradient,
    reweight,
    robin_carleman_ratio,
    robin_test_field,
    steepest_slope,
    ucp_theory_scale,
    verify_weight,
    write_ratio_csv,
)
from implab.errors import (
    ConfigError,
    NumericalError,
    RangeError,
    WeightConstructionError,
)
from implab.geometry import GammaSpec, GridSpec, ScalarField, build_annuli, build_box_domain
from implab.testfields import bump, random_band_limited


WIDTHS = (0.55, 0.4, 0.25, 0.12)


@pytest.fixture(scope="module")
def setup():
    g = GridSpec((-1.0, -1.0, -1.0), 2.0, 17)
    dom = build_box_domain(g, GammaSpec(face="x+", radius=3.0))
    fam = build_annuli(dom, WIDTHS)
    w = build_gamma_weight(dom, fam, dom.gamma, seed=0)
    return g, dom, fam, w


@pytest.fixture(scope="module")
def bandfield(setup):
    g = setup[0]
    re = random_band_limited(g, 4, 1.0, seed=3).values
    im = random_band_limited(g, 4, 1.0, seed=4).values
    return re + 1j * im + 0.2


@pytest.fixture(scope="module")
def interior_table(setup):
    _, dom, _, _ = setup
    wsim = build_simple_weight(dom, beta0=2.0)
    params = CarlemanCheckParams(h_sequence=(0.4, 0.2, 0.1), gamma_grid=(0.6, 1.0),
                                 e_values=(0.0, 0.5, 1.0), k_values=(1.0, 2.0),
                                 trial_count=2, seed=5)
    return check_fursikov_imanuvilov(wsim, params), params


@pytest.fixture(scope="module")
def robin_table(setup):
    w = setup[3]
    params = CarlemanCheckParams(h_sequence=(0.5, 0.35, 0.25), gamma_grid=(1.0,),
                                 e_values=(0.0, 0.5, 1.0), k_values=(1.0, 2.0),
                                 trial_count=2, seed=3)
    return check_robin_carleman(w, params), params


@pytest.fixture(scope="module")
def ucp_fit(setup):
    g, dom, fam, w = setup
    q = bump(g, (0.2, -0.1, 0.0), 0.5, 1.5)
    fit = check_ucp_bound(dom, fam, w, q, k=2.0,
                          h_sequence=(0.5, 0.35, 0.25, 0.18, 0.125),
                          member_count=6, seed=1)
    return fit


# ---------------------------------------------------------------------------
# weight construction and verification


def test_simple_weight_is_affine(setup):
    g, dom, _, _ = setup
    ws = build_simple_weight(dom, beta0=2.0)
    psi = ws.psi.values
    assert psi.min() == pytest.approx(1.0)
    assert psi.max() == pytest.approx(3.0)
    grad = nodal_gradient(psi, g)
    assert np.allclose(grad[0], 1.0)
    assert np.allclose(grad[1:], 0.0)
    # exponential spans e^{beta0 * (span of psi)}
    ratio = ws.phi.values.max() / ws.phi.values.min()
    assert ratio == pytest.approx(np.exp(2.0 * 2.0), rel=1e-12)


def test_collar_weight_construction(setup):
    g, dom, fam, w = setup
    psi = w.psi.values
    gx, gy, gz = g.unflatten(dom.gamma.node_flat)
    assert np.max(np.abs(psi[gx, gy, gz] - 1.0)) <= 1e-12
    annulus = fam.mask(2) & ~fam.mask(3)
    assert w.kappa == pytest.approx(0.5 * float(psi[annulus].min()))
    assert w.kappa > 0.0
    assert np.array_equal(w.region_mask, fam.mask(0))


def test_collar_weight_passes_verification(setup):
    g, _, fam, w = setup
    verify_weight(w)
    # the floor is measured on the steepest one-sided lattice slope; plain
    # axis gradients vanish identically along box edges where psi = 0 on
    # both adjacent faces
    slopes = steepest_slope(w.psi.values, g, fam.mask(0))
    assert float(slopes[fam.mask(0)].min()) >= 1e-3


def test_rescaled_weight_still_verifies(setup):
    """The four verified properties are sign conditions, invariant under
    multiplying psi by a positive constant."""
    g, _, _, w = setup
    psi2 = 2.0 * w.psi.values
    scaled = dataclasses.replace(w, psi=ScalarField(g, psi2),
                                 phi=ScalarField(g, np.exp(w.beta0 * psi2)),
                                 kappa=2.0 * w.kappa)
    verify_weight(scaled)


def test_verification_requires_collar_weight(setup):
    ws = build_simple_weight(setup[1])
    with pytest.raises(ConfigError, match="collar"):
        verify_weight(ws)


def test_construction_failure_names_property(setup):
    _, dom, fam, _ = setup
    # an unattainable gradient floor exhausts the retry budget
    with pytest.raises(WeightConstructionError) as err:
        build_gamma_weight(dom, fam, dom.gamma, seed=0, g_min=10.0,
                           retry_budget=2)
    assert err.value.failed_property == "gradient lower bound"
    assert len(err.value.location) == 3
    assert "2" in str(err.value)


def test_steepest_slope_sees_diagonals():
    g = GridSpec((-1.0, -1.0, -1.0), 2.0, 9)
    x, y, z = g.coords()
    v = (x + 1.0) * (y + 1.0) * (z + 1.0)
    # at the corner every axis difference is zero but the body diagonal
    # is not
    assert (v[1, 0, 0] - v[0, 0, 0]) == 0.0
    slopes = steepest_slope(v, g, np.ones(g.shape, dtype=bool))
    dx = g.spacing
    assert slopes[0, 0, 0] == pytest.approx(dx * dx / np.sqrt(3.0), rel=1e-12)


def test_reweight_changes_only_the_exponent(setup):
    _, _, _, w = setup
    mild = reweight(w, 0.75)
    assert mild.beta0 == 0.75
    assert np.array_equal(mild.psi.values, w.psi.values)
    assert np.allclose(mild.phi.values, np.exp(0.75 * w.psi.values), rtol=1e-15)
    assert mild.kappa == w.kappa


# ---------------------------------------------------------------------------
# conjugated operator


def test_constant_weight_reduces_to_plain_operator(setup, bandfield):
    g, dom, _, _ = setup
    ws = build_simple_weight(dom, beta0=0.0)
    h, e = 0.3, 0.7
    pu = apply_conjugated(bandfield, ws, h, e).values
    lap = np.zeros_like(bandfield)
    c = (slice(1, -1),) * 3
    dx = g.spacing
    lap[c] = (bandfield[2:, 1:-1, 1:-1] + bandfield[:-2, 1:-1, 1:-1]
              + bandfield[1:-1, 2:, 1:-1] + bandfield[1:-1, :-2, 1:-1]
              + bandfield[1:-1, 1:-1, 2:] + bandfield[1:-1, 1:-1, :-2]
              - 6.0 * bandfield[c]) / (dx * dx)
    plain = -(h * h) * lap - e * bandfield
    edge = np.ones(g.shape, dtype=bool)
    edge[c] = False
    plain[edge] = 0.0
    assert np.max(np.abs(pu - plain)) <= 1e-12 * np.max(np.abs(plain))


def test_decomposition_reassembles_the_operator(setup, bandfield):
    _, dom, _, _ = setup
    ws = build_simple_weight(dom, beta0=2.0)
    a2, a1 = apply_decomposed(bandfield, ws, 0.35, 0.5)
    direct = apply_conjugated(bandfield, ws, 0.35, 0.5).values
    err = np.max(np.abs(a2.values + 1j * a1.values - direct))
    assert err <= 1e-9 * np.max(np.abs(direct))


@settings(max_examples=10, deadline=None)
@given(beta=st.floats(0.3, 1.5), h=st.floats(0.25, 1.0), e=st.floats(0.0, 1.0))
def test_decomposition_identity_property(beta, h, e):
    g = GridSpec((-1.0, -1.0, -1.0), 2.0, 9)
    dom = build_box_domain(g, GammaSpec(face="x+", radius=3.0))
    ws = build_simple_weight(dom, beta0=beta)
    u = (random_band_limited(g, 2, 1.0, seed=11).values
         + 1j * random_band_limited(g, 2, 1.0, seed=12).values + 0.1)
    a2, a1 = apply_decomposed(u, ws, h, e)
    direct = apply_conjugated(u, ws, h, e).values
    scale = np.max(np.abs(direct))
    assert np.max(np.abs(a2.values + 1j * a1.values - direct)) <= 1e-9 * scale


def test_weighted_affine_function_is_annihilated(setup):
    """With E = 0 the conjugated operator kills e^{phi/h} (affine), since
    the plain five-point Laplacian is exact on affine functions."""
    g, dom, _, _ = setup
    ws = build_simple_weight(dom, beta0=2.0)
    h = 0.35
    x, y, z = g.coords()
    v = 0.7 * x - 0.3 * y + 0.1 * z + 0.5
    phi = ws.phi.values
    u = np.exp((phi - phi.max()) / h) * v
    out = apply_conjugated(u, ws, h, 0.0).values
    scale = np.max(np.abs(u)) * (h / g.spacing) ** 2
    assert np.max(np.abs(out)) <= 1e-10 * scale


def test_principal_symbol_at_unit_frequency(setup):
    # oscillation e^{i x/h} resolves the symbol at xi = e_1: the quotient
    # approaches 1 + 2i phi'_1 - |phi'|^2 - E away from the boundary
    g, dom, _, _ = setup
    h = 0.5
    wlow = build_simple_weight(dom, beta0=0.3)
    x = g.coords()[0]
    u0 = np.exp(1j * x / h)
    applied = apply_conjugated(u0, wlow, h, 1.0).values
    dphi = nodal_gradient(wlow.phi.values, g)
    symbol = 1.0 + 2j * dphi[0] - np.sum(dphi ** 2, axis=0) - 1.0
    core = (slice(2, -2),) * 3
    rel = np.abs(applied[core] / u0[core] - symbol[core]) / np.abs(symbol[core])
    assert float(np.max(rel)) <= 0.15


def test_full_range_overflow_guard(setup, bandfield):
    _, dom, _, _ = setup
    ws = build_simple_weight(dom, beta0=2.0)
    apply_conjugated(bandfield, ws, 0.35, 0.0)
    with pytest.raises(RangeError, match="range"):
        apply_conjugated(bandfield, ws, 0.2, 0.0)


def test_per_cell_guard_is_weaker_than_full_range(setup, bandfield):
    # the decomposed form only exponentiates neighbor increments, so it
    # admits h well below the full-range cutoff
    _, dom, _, _ = setup
    ws = build_simple_weight(dom, beta0=2.0)
    apply_decomposed(bandfield, ws, 0.2, 0.0)
    with pytest.raises(RangeError, match="per-cell"):
        apply_decomposed(bandfield, ws, 0.1, 0.0)


def test_nonpositive_h_rejected(setup, bandfield):
    ws = build_simple_weight(setup[1], beta0=1.0)
    with pytest.raises(ConfigError):
        apply_conjugated(bandfield, ws, 0.0, 0.0)
    with pytest.raises(ConfigError):
        apply_decomposed(bandfield, ws, -0.1, 0.0)


# ---------------------------------------------------------------------------
# check parameters


def test_params_require_strictly_decreasing_h():
    with pytest.raises(ConfigError, match="decreasing"):
        CarlemanCheckParams(h_sequence=(0.1, 0.2))
    with pytest.raises(ConfigError, match="decreasing"):
        CarlemanCheckParams(h_sequence=(0.2, 0.2, 0.1))
    with pytest.raises(ConfigError, match="positive"):
        CarlemanCheckParams(h_sequence=(0.2, -0.1))


def test_params_validate_regime():
    with pytest.raises(ConfigError, match="outside"):
        CarlemanCheckParams(h_sequence=(0.4, 0.2), e_values=(0.0, 1.5))
    with pytest.raises(ConfigError, match="k >= 1"):
        CarlemanCheckParams(h_sequence=(0.4, 0.2), k_values=(0.5,))
    with pytest.raises(ConfigError, match="hk"):
        CarlemanCheckParams(h_sequence=(0.6, 0.2), k_values=(2.0,))
    with pytest.raises(ConfigError, match="trial_count"):
        CarlemanCheckParams(h_sequence=(0.4, 0.2), trial_count=0)


# ---------------------------------------------------------------------------
# interior inequality


def test_interior_ratio_skips_zero_field(setup):
    _, dom, _, _ = setup
    ws = build_simple_weight(dom, beta0=2.0)
    zero = np.zeros(dom.grid.shape, dtype=complex)
    assert fursikov_imanuvilov_ratio(ws, zero, 0.3, 0.8, 0.0) is None


def test_interior_ratios_bounded_below(interior_table):
    tab, params = interior_table
    assert len(tab.rows) == 2 * 3 * 3 * 2
    assert all(v > 0.0 for v in tab.min_ratio.values())
    # the weighted volume term on the right carries an extra factor of h,
    # so the ratio grows as h shrinks; the criterion only needs no decay
    for slope in tab.slope_of_log_ratio().values():
        assert slope >= -0.1


def test_interior_ratio_uniform_over_spectral_parameter(interior_table):
    tab, params = interior_table
    per_e = {}
    for row in tab.rows:
        if row["gamma_or_k"] == 0.6 and row["h"] == 0.2:
            per_e[row["E"]] = min(per_e.get(row["E"], np.inf), row["ratio"])
    assert set(per_e) == {0.0, 0.5, 1.0}
    vals = list(per_e.values())
    assert max(vals) / min(vals) <= 3.0


def test_interior_rows_schema(interior_table):
    tab, params = interior_table
    for row in tab.rows:
        assert set(row) == {"h", "gamma_or_k", "E", "trial", "lhs", "rhs", "ratio"}
        assert row["h"] in params.h_sequence
        assert row["gamma_or_k"] in params.gamma_grid
        assert row["ratio"] == pytest.approx(row["lhs"] / row["rhs"])


# ---------------------------------------------------------------------------
# Robin boundary inequality


def test_robin_field_satisfies_discrete_condition(setup):
    g, dom, fam, _ = setup
    k = 2.0
    u = robin_test_field(dom, fam, k, seed=77)
    assert np.all(u[~fam.mask(0)] == 0.0)
    bx, by, bz = g.unflatten(dom.boundary_flat)
    nrm = dom.boundary_normal.astype(int)
    inner = u[bx + nrm[:, 0], by + nrm[:, 1], bz + nrm[:, 2]]
    resid = (inner - u[bx, by, bz]) / g.spacing - 1j * k * u[bx, by, bz]
    assert np.max(np.abs(resid)) <= 1e-12 * np.max(np.abs(u))


def test_robin_ratios_bounded_below(robin_table):
    tab, _ = robin_table
    assert all(v >= 1.0 for v in tab.min_ratio.values())
    for slope in tab.slope_of_log_ratio().values():
        assert slope >= -0.1


def test_robin_ratio_saturates_at_inverse_spacing(setup, robin_table):
    """With the default exponent the weight concentrates on the patch node
    layer and both sides reduce to the same boundary sum; the surviving
    factor is the surface-to-volume cell ratio 1/dx."""
    g = setup[0]
    tab, _ = robin_table
    for v in tab.min_ratio.values():
        assert v == pytest.approx(1.0 / g.spacing, rel=1e-9)


def test_milder_exponent_is_not_degenerate(setup):
    # spreading the exponential over several layers activates the volume
    # terms and lifts the ratio strictly above the saturated value
    g, dom, fam, w = setup
    mild = reweight(w, 0.75)
    u = robin_test_field(dom, fam, 1.0, seed=77)
    sample = robin_carleman_ratio(mild, u, 0.5, 0.5, 1.0)
    assert sample is not None
    assert sample[2] > 1.0 / g.spacing


def test_enlarging_the_patch_does_not_decrease_ratio(setup):
    _, dom, fam, w = setup
    u = robin_test_field(dom, fam, 2.0, seed=77)
    r_patch = robin_carleman_ratio(w, u, 0.3, 0.5, 2.0)
    r_all = robin_carleman_ratio(w, u, 0.3, 0.5, 2.0,
                                 gamma_nodes=dom.boundary_flat)
    # only nonnegative terms are added on the left; allow summation-order
    # noise when the additions are below resolution
    assert r_all[2] >= r_patch[2] * (1.0 - 1e-12)


# ---------------------------------------------------------------------------
# quantitative unique continuation


def test_theory_scale_matches_weight_attributes(setup):
    _, _, _, w = setup
    b, kap = w.beta0, w.kappa
    sup = float(np.max(w.psi.values[w.region_mask]))
    a1 = 0.5 * (np.exp(2.0 * b * kap) - np.exp(b * kap))
    a2 = 2.0 * (np.exp(b * sup) - np.exp(2.0 * b * kap))
    assert ucp_theory_scale(w) == pytest.approx(a1 + a2, rel=1e-12)
    assert a1 > 0.0 and a2 > 0.0


def test_ucp_fit_produces_positive_exponents(ucp_fit):
    fit = ucp_fit
    assert 0.0 < fit.theta < 1.0
    assert fit.alpha1 > 0.0
    assert fit.alpha2 > 0.0
    assert fit.alpha1 + fit.alpha2 == pytest.approx(fit.scale, rel=1e-12)
    assert fit.c_emp > 0.0


def test_ucp_trace_term_controls_near_member(ucp_fit):
    # the member concentrated nearest the patch is bounded by the trace
    # term alone, within a small factor of the fitted envelope
    fit = ucp_fit
    m0 = fit.member_norms[0]
    h_max = max(row["h"] for row in fit.rows)
    log_bound = np.log(10.0 * fit.c_emp) + fit.alpha2 / h_max + np.log(m0["trace"])
    assert np.log(m0["mid"]) <= log_bound


def test_ucp_members_sweep_away_from_patch(ucp_fit):
    fit = ucp_fit
    fracs = [m["trace"] / m["global"] for m in fit.member_norms]
    assert fracs[0] > fracs[-1]


def test_ucp_rows_schema(ucp_fit):
    fit = ucp_fit
    assert len(fit.rows) == 5 * 6
    for row in fit.rows:
        assert row["gamma_or_k"] == 2.0
        assert row["E"] == pytest.approx((row["h"] * 2.0) ** 2)
        assert row["ratio"] <= fit.c_emp * (1.0 + 1e-12)


def test_ucp_rejects_mismatched_patch(setup):
    g, _, _, w = setup
    dom2 = build_box_domain(g, GammaSpec(face="y+", radius=3.0))
    fam2 = build_annuli(dom2, WIDTHS)
    q = bump(g, (0.2, -0.1, 0.0), 0.5, 1.5)
    with pytest.raises(ConfigError, match="patch must match"):
        check_ucp_bound(dom2, fam2, w, q, k=2.0, h_sequence=(0.5, 0.25))


def test_ucp_rejects_large_hk(setup):
    g, dom, fam, w = setup
    q = bump(g, (0.2, -0.1, 0.0), 0.5, 1.5)
    with pytest.raises(ConfigError, match="hk"):
        check_ucp_bound(dom, fam, w, q, k=2.0, h_sequence=(0.6, 0.25))


def test_ucp_rejects_sources_leaking_into_collar(setup, monkeypatch):
    g, dom, fam, w = setup
    q = bump(g, (0.2, -0.1, 0.0), 0.5, 1.5)
    leaky = bump(g, (0.9, 0.0, 0.0), 0.6, 1.0)
    assert np.any(leaky.values[fam.mask(0)] != 0.0)
    monkeypatch.setattr("implab.carleman._ucp_sources",
                        lambda *a, **kw: [leaky, leaky])
    with pytest.raises(ConfigError, match="leaks"):
        check_ucp_bound(dom, fam, w, q, k=2.0, h_sequence=(0.5, 0.25))


def test_ucp_degenerate_traces_raise(setup, monkeypatch):
    g, dom, fam, w = setup
    q = bump(g, (0.2, -0.1, 0.0), 0.5, 1.5)
    monkeypatch.setattr("implab.carleman.trace_h1_gamma_norm",
                        lambda domain, trace: 0.0)
    with pytest.raises(NumericalError, match="degenerate"):
        check_ucp_bound(dom, fam, w, q, k=2.0, h_sequence=(0.5, 0.25),
                        member_count=3, seed=1)


# ---------------------------------------------------------------------------
# CSV emission


def test_ratio_csv_roundtrip(tmp_path, interior_table):
    tab, _ = interior_table
    path = tmp_path / "ratios.csv"
    write_ratio_csv(path, tab.rows)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        assert reader.fieldnames == ["h", "gamma_or_k", "E", "trial",
                                     "lhs", "rhs", "ratio"]
        back = list(reader)
    assert len(back) == len(tab.rows)
    for row, orig in zip(back, tab.rows):
        # repr round-trips doubles exactly
        assert float(row["ratio"]) == orig["ratio"]
        assert float(row["h"]) == orig["h"]
