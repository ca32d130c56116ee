"""Structured run configuration: strict-schema INI with typed sections.

Configs hold primitives only. Grid spacing, cutoff radii, and probe
schedules are recomputed from those primitives when a command needs them,
so a stale derived value can never leak in through a config file.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
from dataclasses import dataclass
from typing import Optional, Tuple

from ..errors import ConfigError
from ..geometry import (
    FACES,
    AnnulusFamily,
    DomainSpec,
    GammaSpec,
    GridSpec,
    build_annuli,
    build_box_domain,
)
from ..solver import SolverParams

# One entry per section; every key a config file may set. Anything else is
# rejected, including keys for quantities the code derives itself.
_SCHEMA = {
    "geometry": ("box_side", "points_per_axis", "gamma.face",
                 "gamma.center_uv", "gamma.radius", "annulus_widths"),
    "solver": ("method", "tolerance", "max_iterations", "k"),
    "cgo": ("a", "tolerance", "pad_factor", "seed"),
    "carleman": ("beta0", "gamma_grid", "h_sequence", "trials", "g_min",
                 "retry_budget"),
    "probe": ("h0_gamma", "alpha4", "noise_delta", "k_list",
              "use_synthetic_delta"),
    "lab": ("output_dir", "seed", "cache_dir"),
}

_BOOL_WORDS = {"1": True, "true": True, "yes": True, "on": True,
               "0": False, "false": False, "no": False, "off": False}


@dataclass(frozen=True)
class GeometryConfig:
    box_side: float = 2.0
    points_per_axis: int = 17
    gamma_face: str = "x+"
    gamma_center_uv: Tuple[float, float] = (0.5, 0.5)
    gamma_radius: float = 3.0
    annulus_widths: Tuple[float, float, float, float] = (0.55, 0.4, 0.25, 0.12)

    def grid(self) -> GridSpec:
        # centered box; the origin is not a config primitive
        half = 0.5 * self.box_side
        return GridSpec((-half, -half, -half), self.box_side,
                        self.points_per_axis)

    def build(self) -> Tuple[DomainSpec, AnnulusFamily]:
        gamma = GammaSpec(face=self.gamma_face,
                          center_uv=self.gamma_center_uv,
                          radius=self.gamma_radius)
        domain = build_box_domain(self.grid(), gamma)
        return domain, build_annuli(domain, self.annulus_widths)


@dataclass(frozen=True)
class SolverConfig:
    method: Optional[str] = None
    tolerance: float = 1e-10
    max_iterations: int = 2000
    k: float = 2.0

    def params(self) -> SolverParams:
        return SolverParams(k=self.k, tolerance=self.tolerance,
                            max_iterations=self.max_iterations,
                            method=self.method)


@dataclass(frozen=True)
class CgoConfig:
    a: float = 2.0
    tolerance: float = 1e-10
    pad_factor: int = 2
    seed: int = 0


@dataclass(frozen=True)
class CarlemanConfig:
    beta0: float = 3.0
    gamma_grid: Tuple[float, ...] = (0.6, 0.8, 1.0)
    h_sequence: Tuple[float, ...] = (0.5, 0.35, 0.25)
    trials: int = 2
    g_min: float = 1e-3
    retry_budget: int = 8


@dataclass(frozen=True)
class ProbeConfig:
    h0_gamma: float = 1.0
    alpha4: float = 1.0
    noise_delta: float = 1e-6
    k_list: Tuple[float, ...] = (2.0,)
    use_synthetic_delta: bool = True


@dataclass(frozen=True)
class LabConfig:
    geometry: GeometryConfig = GeometryConfig()
    solver: SolverConfig = SolverConfig()
    cgo: CgoConfig = CgoConfig()
    carleman: CarlemanConfig = CarlemanConfig()
    probe: ProbeConfig = ProbeConfig()
    output_dir: str = "runs/default"
    seed: int = 0
    cache_dir: Optional[str] = None


# ---------------------------------------------------------------------------
# parsing

def _parse_float(raw: str) -> float:
    try:
        return float(raw)
    except ValueError:
        raise ValueError(f"expected a number, got {raw!r}") from None


def _parse_int(raw: str) -> int:
    try:
        return int(raw, 0)
    except ValueError:
        raise ValueError(f"expected an integer, got {raw!r}") from None


def _parse_bool(raw: str) -> bool:
    word = raw.strip().lower()
    if word not in _BOOL_WORDS:
        raise ValueError(f"expected a boolean, got {raw!r}")
    return _BOOL_WORDS[word]


def _parse_floats(raw: str, count: Optional[int] = None) -> Tuple[float, ...]:
    parts = raw.replace(",", " ").split()
    if not parts:
        raise ValueError("expected a list of numbers, got an empty value")
    vals = tuple(_parse_float(p) for p in parts)
    if count is not None and len(vals) != count:
        raise ValueError(f"expected exactly {count} numbers, got {len(vals)}")
    return vals


def _parse_method(raw: str) -> Optional[str]:
    word = raw.strip().lower()
    if word in ("", "auto"):
        return None
    if word in ("direct", "iterative"):
        return word
    raise ValueError(f"expected auto, direct, or iterative, got {raw!r}")


def _parse_face(raw: str) -> str:
    word = raw.strip()
    if word != "all" and word not in FACES:
        raise ValueError(f"expected one of {FACES + ('all',)}, got {raw!r}")
    return word


class _SectionReader:
    """Typed access to one section with per-key error context."""

    def __init__(self, parser: configparser.ConfigParser, section: str):
        self.parser = parser
        self.section = section

    def get(self, key: str, default, conv):
        if not self.parser.has_option(self.section, key):
            return default
        raw = self.parser.get(self.section, key)
        try:
            return conv(raw)
        except ValueError as exc:
            raise ConfigError(f"[{self.section}] {key}: {exc}") from None


def load_config(path) -> LabConfig:
    """Read and validate a run configuration file.

    Unknown sections and unknown keys are errors: a misspelled key must
    fail loudly rather than silently fall back to a default.
    """
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",),
                                       inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    loaded = parser.read(str(path), encoding="utf-8")
    if not loaded:
        raise ConfigError(f"config file not found: {path}")
    if parser.defaults():
        raise ConfigError("a [DEFAULT] section is not supported; put every "
                          "key under its own section")
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(
                f"unknown config section [{section}]; known sections: "
                f"{', '.join(sorted(_SCHEMA))}")
        for key in parser[section]:
            if key not in _SCHEMA[section]:
                raise ConfigError(
                    f"unknown key {key!r} in section [{section}]; known "
                    f"keys: {', '.join(_SCHEMA[section])}")

    geo = _SectionReader(parser, "geometry")
    geometry = GeometryConfig(
        box_side=geo.get("box_side", 2.0, _parse_float),
        points_per_axis=geo.get("points_per_axis", 17, _parse_int),
        gamma_face=geo.get("gamma.face", "x+", _parse_face),
        gamma_center_uv=geo.get("gamma.center_uv", (0.5, 0.5),
                                lambda raw: _parse_floats(raw, 2)),
        gamma_radius=geo.get("gamma.radius", 3.0, _parse_float),
        annulus_widths=geo.get("annulus_widths", (0.55, 0.4, 0.25, 0.12),
                               lambda raw: _parse_floats(raw, 4)),
    )

    sol = _SectionReader(parser, "solver")
    solver = SolverConfig(
        method=sol.get("method", None, _parse_method),
        tolerance=sol.get("tolerance", 1e-10, _parse_float),
        max_iterations=sol.get("max_iterations", 2000, _parse_int),
        k=sol.get("k", 2.0, _parse_float),
    )

    cg = _SectionReader(parser, "cgo")
    cgo = CgoConfig(
        a=cg.get("a", 2.0, _parse_float),
        tolerance=cg.get("tolerance", 1e-10, _parse_float),
        pad_factor=cg.get("pad_factor", 2, _parse_int),
        seed=cg.get("seed", 0, _parse_int),
    )

    car = _SectionReader(parser, "carleman")
    carleman = CarlemanConfig(
        beta0=car.get("beta0", 3.0, _parse_float),
        gamma_grid=car.get("gamma_grid", (0.6, 0.8, 1.0), _parse_floats),
        h_sequence=car.get("h_sequence", (0.5, 0.35, 0.25), _parse_floats),
        trials=car.get("trials", 2, _parse_int),
        g_min=car.get("g_min", 1e-3, _parse_float),
        retry_budget=car.get("retry_budget", 8, _parse_int),
    )

    pr = _SectionReader(parser, "probe")
    probe = ProbeConfig(
        h0_gamma=pr.get("h0_gamma", 1.0, _parse_float),
        alpha4=pr.get("alpha4", 1.0, _parse_float),
        noise_delta=pr.get("noise_delta", 1e-6, _parse_float),
        k_list=pr.get("k_list", (2.0,), _parse_floats),
        use_synthetic_delta=pr.get("use_synthetic_delta", True, _parse_bool),
    )

    lab = _SectionReader(parser, "lab")
    cache_dir = lab.get("cache_dir", None, str)
    if cache_dir is not None and not cache_dir.strip():
        cache_dir = None
    seed = lab.get("seed", 0, _parse_int)
    if not (0 <= seed < 2 ** 64):
        raise ConfigError(f"[lab] seed: must fit in 64 unsigned bits, "
                          f"got {seed}")

    return LabConfig(
        geometry=geometry, solver=solver, cgo=cgo, carleman=carleman,
        probe=probe,
        output_dir=lab.get("output_dir", "runs/default", str),
        seed=seed,
        cache_dir=cache_dir,
    )


def with_overrides(cfg: LabConfig, seed: Optional[int] = None,
                   out: Optional[str] = None,
                   cache: Optional[str] = None) -> LabConfig:
    """Apply command-line overrides without mutating the loaded config."""
    updates = {}
    if seed is not None:
        if not (0 <= seed < 2 ** 64):
            raise ConfigError(f"--seed must fit in 64 unsigned bits, got {seed}")
        updates["seed"] = seed
    if out is not None:
        updates["output_dir"] = out
    if cache is not None:
        updates["cache_dir"] = cache
    return dataclasses.replace(cfg, **updates) if updates else cfg


def _canonical_items(cfg: LabConfig):
    for section, obj in (("geometry", cfg.geometry), ("solver", cfg.solver),
                         ("cgo", cfg.cgo), ("carleman", cfg.carleman),
                         ("probe", cfg.probe)):
        for field in dataclasses.fields(obj):
            yield f"{section}.{field.name}", getattr(obj, field.name)
    yield "lab.output_dir", cfg.output_dir
    yield "lab.seed", cfg.seed
    yield "lab.cache_dir", cfg.cache_dir


def config_digest(cfg: LabConfig) -> str:
    """Hash of the effective configuration, defaults included.

    Two configs that resolve to the same values digest identically even if
    one spelled a value out and the other relied on the default.
    """
    digest = hashlib.sha256()
    for key, value in sorted(_canonical_items(cfg)):
        digest.update(f"{key}={value!r}\n".encode("utf-8"))
    return digest.hexdigest()
