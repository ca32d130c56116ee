import json
import math
import os
from pathlib import Path

import numpy as np
import pytest

from implab.errors import CacheCorruptionError, ConfigError
from implab.geometry import ScalarField
from implab.cgo import build_frame, extend_potential, solve_remainder
from implab.lab import (
    ArtifactCache,
    LabConfig,
    cgo_cache_key,
    collect_artifacts,
    config_digest,
    default_potentials,
    emit_plot_scripts,
    load_config,
    read_manifest,
    resolve_cache_dir,
    rtd_cache_key,
    with_overrides,
    write_manifest,
)
from implab.lab.cache import cgo_from_bytes, cgo_to_bytes
from implab.lab.cli import main
from implab.rtd import assemble_rtd, data_distance
from implab.solver import SolverParams

REPO_CFG = Path(__file__).resolve().parents[1] / "configs" / "default.cfg"


def write_cfg(path: Path, out_dir: Path, extra: str = "") -> Path:
    path.write_text(
        "[lab]\n"
        f"output_dir = {out_dir}\n"
        "seed = 0\n"
        + extra,
        encoding="utf-8")
    return path


@pytest.fixture(scope="module")
def setup(tmp_path_factory):
    cfg = load_config(REPO_CFG)
    domain, family = cfg.geometry.build()
    q1, q2, qd = default_potentials(domain.grid, family)
    return cfg, domain, family, q1, q2, qd


# --- config -------------------------------------------------------------------

def test_default_file_matches_builtin_defaults():
    cfg = load_config(REPO_CFG)
    assert cfg == LabConfig()
    assert config_digest(cfg) == config_digest(LabConfig())


def test_loaded_values_are_typed():
    cfg = load_config(REPO_CFG)
    assert cfg.geometry.box_side == 2.0
    assert cfg.geometry.points_per_axis == 17
    assert cfg.geometry.annulus_widths == (0.55, 0.4, 0.25, 0.12)
    assert cfg.solver.method is None
    assert cfg.probe.k_list == (2.0,)
    assert cfg.probe.use_synthetic_delta is True
    assert cfg.cache_dir is None


def test_partial_config_fills_defaults(tmp_path):
    path = tmp_path / "partial.cfg"
    path.write_text("[solver]\nk = 4.0\n", encoding="utf-8")
    cfg = load_config(path)
    assert cfg.solver.k == 4.0
    assert cfg.solver.tolerance == 1e-10
    assert cfg.geometry.box_side == 2.0


def test_missing_file_rejected(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.cfg")


def test_unknown_section_rejected(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("[plotting]\nstyle = fancy\n", encoding="utf-8")
    with pytest.raises(ConfigError, match=r"unknown config section"):
        load_config(path)


@pytest.mark.parametrize("section,key", [
    ("geometry", "spacing"),
    ("geometry", "dx"),
    ("probe", "a"),
    ("probe", "rho"),
    ("solver", "tol"),
])
def test_derived_or_misspelled_keys_rejected(tmp_path, section, key):
    # derived quantities are recomputed, never configured
    path = tmp_path / "bad.cfg"
    path.write_text(f"[{section}]\n{key} = 1.0\n", encoding="utf-8")
    with pytest.raises(ConfigError, match=f"unknown key '{key}'"):
        load_config(path)


def test_default_section_rejected(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("[DEFAULT]\nk = 2.0\n[solver]\nk = 2.0\n",
                    encoding="utf-8")
    with pytest.raises(ConfigError, match=r"DEFAULT"):
        load_config(path)


@pytest.mark.parametrize("body,fragment", [
    ("[solver]\nk = fast\n", "expected a number"),
    ("[geometry]\npoints_per_axis = 16.5\n", "expected an integer"),
    ("[probe]\nuse_synthetic_delta = maybe\n", "expected a boolean"),
    ("[geometry]\nannulus_widths = 0.5 0.4\n", "exactly 4 numbers"),
    ("[geometry]\ngamma.face = top\n", "expected one of"),
    ("[solver]\nmethod = multigrid\n", "auto, direct, or iterative"),
    ("[lab]\nseed = -3\n", "64 unsigned bits"),
])
def test_typed_parse_errors(tmp_path, body, fragment):
    path = tmp_path / "bad.cfg"
    path.write_text(body, encoding="utf-8")
    with pytest.raises(ConfigError, match=fragment):
        load_config(path)


def test_overrides_replace_without_mutation():
    cfg = LabConfig()
    out = with_overrides(cfg, seed=7, out="elsewhere", cache="cdir")
    assert (out.seed, out.output_dir, out.cache_dir) == (7, "elsewhere", "cdir")
    assert (cfg.seed, cfg.output_dir, cfg.cache_dir) == (0, "runs/default", None)
    assert with_overrides(cfg) is cfg
    with pytest.raises(ConfigError):
        with_overrides(cfg, seed=-1)


def test_digest_tracks_every_section(tmp_path):
    base = config_digest(LabConfig())
    for body in ("[solver]\nk = 3.0\n", "[cgo]\nseed = 5\n",
                 "[probe]\nalpha4 = 2.0\n", "[lab]\nseed = 9\n"):
        path = tmp_path / "one.cfg"
        path.write_text(body, encoding="utf-8")
        assert config_digest(load_config(path)) != base


# --- presets ------------------------------------------------------------------

def test_default_potentials_structure(setup):
    _, domain, family, q1, q2, qd = setup
    assert qd.max_abs() == pytest.approx(1.0)
    assert np.all(qd.values[family.mask(0)] == 0.0)
    assert np.array_equal(q1.values - q2.values, qd.values)
    # deterministic: same grid gives bit-identical fields
    r1, r2, rd = default_potentials(domain.grid, family)
    assert np.array_equal(rd.values, qd.values)


# --- cache --------------------------------------------------------------------

def test_cache_bytes_round_trip(tmp_path):
    cache = ArtifactCache(tmp_path / "c")
    payload = b"\x00\x01payload\xff"
    cache.put_bytes("k1", "bin", payload)
    hit = cache.fetch_path("k1", "bin")
    assert hit is not None and hit.read_bytes() == payload
    assert cache.fetch_path("k2", "bin") is None


def test_cache_corruption_detected_and_evicted(tmp_path):
    cache = ArtifactCache(tmp_path / "c")
    payload = bytes(range(200))
    path = cache.put_bytes("k1", "bin", payload)
    raw = bytearray(payload)
    raw[13] ^= 0x20
    path.write_bytes(bytes(raw))
    with pytest.raises(CacheCorruptionError, match="evicted"):
        cache.fetch_path("k1", "bin")
    assert not path.exists()
    assert not path.with_suffix(path.suffix + ".sha256").exists()
    assert cache.fetch_path("k1", "bin") is None


def test_cache_payload_without_sidecar_is_corruption(tmp_path):
    cache = ArtifactCache(tmp_path / "c")
    path = cache.put_bytes("k1", "bin", b"data")
    path.with_suffix(path.suffix + ".sha256").unlink()
    with pytest.raises(CacheCorruptionError, match="sidecar"):
        cache.fetch_path("k1", "bin")
    assert not path.exists()


def test_cache_stray_sidecar_is_a_miss(tmp_path):
    cache = ArtifactCache(tmp_path / "c")
    path = cache.put_bytes("k1", "bin", b"data")
    path.unlink()
    assert cache.fetch_path("k1", "bin") is None
    assert not path.with_suffix(path.suffix + ".sha256").exists()


def test_rtd_keys_separate_inputs(setup):
    _, domain, _, q1, q2, _ = setup
    params = SolverParams(k=2.0)
    base = rtd_cache_key(domain, q2, 2.0, params)
    assert rtd_cache_key(domain, q2, 2.0, params) == base
    assert rtd_cache_key(domain, q2, 4.0, params) != base
    assert rtd_cache_key(domain, q1, 2.0, params) != base
    assert rtd_cache_key(domain, q2, 2.0, SolverParams(k=2.0, tolerance=1e-8)) != base


def test_rtd_cache_round_trip(setup, tmp_path):
    _, domain, _, _, q2, _ = setup
    cache = ArtifactCache(tmp_path / "c")
    matrix = assemble_rtd(domain, q2, 2.0)
    key = rtd_cache_key(domain, q2, 2.0, SolverParams(k=2.0))
    cache.store_rtd(key, matrix)
    back = cache.fetch_rtd(key, domain)
    assert back is not None and back.k == matrix.k
    # single-precision storage: operator-norm gap tiny against the entries
    gap = data_distance(matrix, back).delta
    assert gap <= 1e-5 * float(np.max(np.abs(matrix.entries)))


def test_cgo_serialization_round_trip(setup, tmp_path):
    cfg, _, _, _, q2, _ = setup
    qe = extend_potential(q2, cfg.cgo.pad_factor)
    frame = build_frame(np.zeros(3), 2.0, 2.0)
    sol = solve_remainder(qe, frame, which=1, tolerance=1e-10)
    back = cgo_from_bytes(cgo_to_bytes(sol))
    assert np.array_equal(back.r.values, sol.r.values)
    assert back.frame.zeta1 == pytest.approx(sol.frame.zeta1)
    assert (back.which, back.iterations) == (sol.which, sol.iterations)
    assert back.remainder_l2 == sol.remainder_l2
    cache = ArtifactCache(tmp_path / "c")
    key = cgo_cache_key(q2, np.zeros(3), 2.0, 2.0, 1, 1e-10,
                        cfg.cgo.pad_factor)
    cache.store_cgo(key, sol)
    again = cache.fetch_cgo(key)
    assert again is not None
    assert np.array_equal(again.r.values, sol.r.values)


def test_resolve_cache_dir_precedence(tmp_path, monkeypatch):
    monkeypatch.delenv("IMPLAB_CACHE", raising=False)
    out = tmp_path / "out"
    assert resolve_cache_dir("flag", "cfg", out) == Path("flag")
    assert resolve_cache_dir(None, "cfg", out) == Path("cfg")
    assert resolve_cache_dir(None, None, out) == out / "cache"
    monkeypatch.setenv("IMPLAB_CACHE", str(tmp_path / "env"))
    assert resolve_cache_dir(None, None, out) == tmp_path / "env"
    assert resolve_cache_dir(None, "cfg", out) == Path("cfg")


# --- manifest -----------------------------------------------------------------

def test_manifest_lists_every_file(tmp_path):
    out = tmp_path / "run"
    (out / "sub").mkdir(parents=True)
    (out / "a.csv").write_text("x\n1\n")
    (out / "sub" / "b.bin").write_bytes(b"\x00\x01")
    write_manifest(out, "deadbeef", "sweep", {"stage": 1.25})
    man = read_manifest(out)
    assert man.command == "sweep" and man.config_sha256 == "deadbeef"
    assert man.stage_seconds == {"stage": 1.25}
    listed = {a["path"] for a in man.artifacts}
    assert listed == {"a.csv", "sub/b.bin"}
    for entry in man.artifacts:
        assert len(entry["sha256"]) == 64 and entry["bytes"] >= 0
    # scan-based: a file added later shows up on the next write
    (out / "late.txt").write_text("late")
    write_manifest(out, "deadbeef", "sweep", {})
    assert {a["path"] for a in read_manifest(out).artifacts} == \
        {"a.csv", "sub/b.bin", "late.txt"}


def test_collect_artifacts_skips_manifest_only(tmp_path):
    (tmp_path / "manifest.json").write_text("{}")
    (tmp_path / "data.csv").write_text("x")
    assert [a["path"] for a in collect_artifacts(tmp_path)] == ["data.csv"]


# --- plots --------------------------------------------------------------------

def test_plot_emission_requires_csvs(tmp_path):
    with pytest.raises(ConfigError, match="stability.csv"):
        emit_plot_scripts(tmp_path)
    (tmp_path / "stability.csv").write_text("k\n1\n")
    written = emit_plot_scripts(tmp_path)
    assert [p.name for p in written] == ["stability.gp"]
    body = written[0].read_text()
    assert "stability.csv" in body and "set logscale y" in body


# --- cli ----------------------------------------------------------------------

def run_cli(*argv) -> int:
    return main(list(argv))


def test_cli_missing_config_exits_1(tmp_path, capsys):
    rc = run_cli("solve", "--config", str(tmp_path / "no.cfg"), "--quiet")
    assert rc == 1
    assert "config error" in capsys.readouterr().err


def test_cli_unknown_key_exits_1(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("[probe]\nrho = 2.0\n", encoding="utf-8")
    rc = run_cli("sweep", "--config", str(cfg), "--quiet")
    assert rc == 1
    assert "unknown key 'rho'" in capsys.readouterr().err


def test_cli_numerical_failure_exits_2_with_stage(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "run.cfg", tmp_path / "out",
                    "[solver]\nmethod = iterative\nmax_iterations = 1\n")
    rc = run_cli("solve", "--config", str(cfg), "--quiet")
    assert rc == 2
    err = capsys.readouterr().err
    assert "numerical failure" in err and "stage" in err


def test_cli_sweep_rejects_large_delta(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "run.cfg", tmp_path / "out",
                    "[probe]\nnoise_delta = 0.4\nuse_synthetic_delta = true\n")
    rc = run_cli("sweep", "--config", str(cfg), "--quiet")
    assert rc == 1
    assert "1/e" in capsys.readouterr().err
    assert 0.4 >= 1.0 / math.e  # the gate value really is inadmissible


def test_cli_plot_without_csvs_exits_1(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "run.cfg", tmp_path / "out")
    rc = run_cli("plot", "--config", str(cfg), "--quiet")
    assert rc == 1
    err = capsys.readouterr().err
    assert "expected any of" in err


def test_cli_rtd_caches_and_reports_hit(tmp_path, capsys):
    out = tmp_path / "out"
    cfg = write_cfg(tmp_path / "run.cfg", out)
    assert run_cli("rtd", "--config", str(cfg), "--quiet") == 0
    first = capsys.readouterr().out
    assert "assembled" in first
    assert run_cli("rtd", "--config", str(cfg), "--quiet") == 0
    second = capsys.readouterr().out
    assert "cache hit" in second and "zero solves" in second
    # identical bytes on the rewrite: single-precision dump is idempotent
    man = read_manifest(out)
    paths = {a["path"]: a["sha256"] for a in man.artifacts}
    assert "rtd.bin" in paths


def test_cli_cache_corruption_exits_3_then_recovers(tmp_path, capsys):
    out = tmp_path / "out"
    cfg = write_cfg(tmp_path / "run.cfg", out)
    assert run_cli("rtd", "--config", str(cfg), "--quiet") == 0
    capsys.readouterr()
    cached = [p for p in (out / "cache").iterdir() if p.suffix == ".rtd"]
    assert len(cached) == 1
    raw = bytearray(cached[0].read_bytes())
    raw[50] ^= 0xFF
    cached[0].write_bytes(bytes(raw))
    rc = run_cli("rtd", "--config", str(cfg), "--quiet")
    assert rc == 3
    assert "cache corruption" in capsys.readouterr().err
    assert not cached[0].exists()
    # eviction cleared the way: the rerun recomputes and succeeds
    assert run_cli("rtd", "--config", str(cfg), "--quiet") == 0
    assert "assembled" in capsys.readouterr().out


def test_cli_out_and_cache_flags_override(tmp_path, monkeypatch, capsys):
    monkeypatch.delenv("IMPLAB_CACHE", raising=False)
    cfg = write_cfg(tmp_path / "run.cfg", tmp_path / "cfgout")
    out = tmp_path / "flagout"
    cache = tmp_path / "flagcache"
    rc = run_cli("solve", "--config", str(cfg), "--out", str(out),
                 "--cache", str(cache), "--quiet")
    assert rc == 0
    assert (out / "field.imps").exists()
    assert (out / "manifest.json").exists()
    assert not (tmp_path / "cfgout").exists()
    assert cache.is_dir()


def test_cli_manifest_complete_after_command(tmp_path, capsys):
    out = tmp_path / "out"
    cfg = write_cfg(tmp_path / "run.cfg", out)
    assert run_cli("solve", "--config", str(cfg), "--quiet") == 0
    listed = {a["path"] for a in read_manifest(out).artifacts}
    actual = {p.relative_to(out).as_posix()
              for p in out.rglob("*") if p.is_file()}
    actual.discard("manifest.json")
    assert listed == actual and "field.imps" in listed


def test_cli_probe_writes_result(tmp_path, capsys):
    out = tmp_path / "out"
    cfg = write_cfg(tmp_path / "run.cfg", out)
    rc = run_cli("probe", "--config", str(cfg), "--quiet",
                 "--mode", "0", "0", "0")
    assert rc == 0
    text = (out / "probe.txt").read_text()
    assert "estimate" in text and "mode = (0, 0, 0)" in text
    assert "probe:" in capsys.readouterr().out
