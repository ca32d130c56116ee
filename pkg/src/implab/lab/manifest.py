"""Run manifest: what a command produced, under which configuration.

The artifact list is built by scanning the output directory after the
command finishes, not by collecting paths along the way, so completeness
holds by construction: a file that exists but is unlisted cannot happen.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List

MANIFEST_NAME = "manifest.json"


@dataclass
class RunManifest:
    config_sha256: str
    code_version: str
    command: str
    created_utc: str
    stage_seconds: Dict[str, float] = field(default_factory=dict)
    artifacts: List[dict] = field(default_factory=list)


def file_sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def collect_artifacts(output_dir) -> List[dict]:
    """Every file under the output directory except the manifest itself,
    in sorted path order."""
    out = Path(output_dir)
    rows = []
    for path in sorted(out.rglob("*")):
        if not path.is_file():
            continue
        rel = path.relative_to(out).as_posix()
        if rel == MANIFEST_NAME:
            continue
        rows.append({"path": rel, "sha256": file_sha256(path),
                     "bytes": path.stat().st_size})
    return rows


def write_manifest(output_dir, config_sha256: str, command: str,
                   stage_seconds: Dict[str, float]) -> Path:
    from .. import __version__

    manifest = RunManifest(
        config_sha256=config_sha256,
        code_version=__version__,
        command=command,
        created_utc=datetime.now(timezone.utc).isoformat(timespec="seconds"),
        stage_seconds={name: round(float(sec), 6)
                       for name, sec in stage_seconds.items()},
        artifacts=collect_artifacts(output_dir),
    )
    path = Path(output_dir) / MANIFEST_NAME
    path.write_text(json.dumps(dataclasses.asdict(manifest), indent=2,
                               sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_manifest(output_dir) -> RunManifest:
    path = Path(output_dir) / MANIFEST_NAME
    data = json.loads(path.read_text(encoding="utf-8"))
    return RunManifest(**data)
