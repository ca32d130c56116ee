"""Operational shell: configuration, caching, orchestration, manifests."""

from .cache import (
    ArtifactCache,
    cgo_cache_key,
    resolve_cache_dir,
    rtd_cache_key,
)
from .config import (
    CarlemanConfig,
    CgoConfig,
    GeometryConfig,
    LabConfig,
    ProbeConfig,
    SolverConfig,
    config_digest,
    load_config,
    with_overrides,
)
from .manifest import (
    MANIFEST_NAME,
    RunManifest,
    collect_artifacts,
    read_manifest,
    write_manifest,
)
from .plots import emit_plot_scripts
from .presets import default_potentials

__all__ = [
    "ArtifactCache",
    "CarlemanConfig",
    "CgoConfig",
    "GeometryConfig",
    "LabConfig",
    "MANIFEST_NAME",
    "ProbeConfig",
    "RunManifest",
    "SolverConfig",
    "cgo_cache_key",
    "collect_artifacts",
    "config_digest",
    "default_potentials",
    "emit_plot_scripts",
    "load_config",
    "read_manifest",
    "resolve_cache_dir",
    "rtd_cache_key",
    "with_overrides",
    "write_manifest",
]
