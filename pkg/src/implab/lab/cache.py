"""Content-addressed artifact cache for boundary maps and CGO solutions.

Every payload carries a sha256 sidecar written at store time. A fetch
re-hashes the payload and compares; on mismatch both files are evicted
before the corruption error propagates, so the next run starts from a
clean miss instead of tripping over the same bytes again.
"""

from __future__ import annotations

import hashlib
import io
import os
from pathlib import Path
from typing import Optional

import numpy as np

from ..cgo import CgoFrame, CgoSolution
from ..errors import CacheCorruptionError
from ..geometry import ComplexField, DomainSpec, GridSpec, ScalarField
from ..rtd import RtdMatrix, load_rtd, save_rtd
from ..solver import SolverParams

_ENV_VAR = "IMPLAB_CACHE"


def resolve_cache_dir(flag: Optional[str], config_value: Optional[str],
                      output_dir) -> Path:
    """--cache flag, then config, then the environment, then a run-local
    default under the output directory."""
    if flag:
        return Path(flag)
    if config_value:
        return Path(config_value)
    env = os.environ.get(_ENV_VAR)
    if env:
        return Path(env)
    return Path(output_dir) / "cache"


def _hash_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _hash_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


class ArtifactCache:
    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _payload(self, key: str, ext: str) -> Path:
        return self.root / f"{key}.{ext}"

    def _sidecar(self, key: str, ext: str) -> Path:
        return self.root / f"{key}.{ext}.sha256"

    def fetch_path(self, key: str, ext: str) -> Optional[Path]:
        """Verified payload path, or None on a miss."""
        payload = self._payload(key, ext)
        sidecar = self._sidecar(key, ext)
        if not payload.exists():
            # a stray sidecar is harmless; clear it and report a miss
            sidecar.unlink(missing_ok=True)
            return None
        if not sidecar.exists():
            payload.unlink(missing_ok=True)
            raise CacheCorruptionError(
                f"cache entry {key} has no integrity sidecar; payload "
                f"evicted")
        expected = sidecar.read_text(encoding="utf-8").strip()
        actual = _hash_file(payload)
        if actual != expected:
            payload.unlink(missing_ok=True)
            sidecar.unlink(missing_ok=True)
            raise CacheCorruptionError(
                f"cache entry {key} failed hash verification "
                f"({actual[:12]} != {expected[:12]}); entry evicted")
        return payload

    def put_bytes(self, key: str, ext: str, data: bytes) -> Path:
        payload = self._payload(key, ext)
        tmp = payload.with_suffix(payload.suffix + f".tmp{os.getpid()}")
        tmp.write_bytes(data)
        os.replace(tmp, payload)
        self._sidecar(key, ext).write_text(_hash_bytes(data) + "\n",
                                           encoding="utf-8")
        return payload

    def put_file(self, key: str, ext: str, writer) -> Path:
        """Store via a writer(path) callback; hashed after the write so the
        sidecar always matches what landed on disk."""
        payload = self._payload(key, ext)
        tmp = payload.with_suffix(payload.suffix + f".tmp{os.getpid()}")
        writer(tmp)
        digest = _hash_file(tmp)
        os.replace(tmp, payload)
        self._sidecar(key, ext).write_text(digest + "\n", encoding="utf-8")
        return payload

    # -- boundary maps ------------------------------------------------------

    def store_rtd(self, key: str, matrix: RtdMatrix) -> Path:
        return self.put_file(key, "rtd", lambda path: save_rtd(path, matrix))

    def fetch_rtd(self, key: str, domain: DomainSpec) -> Optional[RtdMatrix]:
        path = self.fetch_path(key, "rtd")
        if path is None:
            return None
        return load_rtd(path, domain)

    # -- CGO solutions ------------------------------------------------------

    def store_cgo(self, key: str, solution: CgoSolution) -> Path:
        return self.put_bytes(key, "npz", cgo_to_bytes(solution))

    def fetch_cgo(self, key: str) -> Optional[CgoSolution]:
        path = self.fetch_path(key, "npz")
        if path is None:
            return None
        return cgo_from_bytes(path.read_bytes())


def cgo_to_bytes(solution: CgoSolution) -> bytes:
    """Self-contained dump: the frame travels with the remainder, so a
    load needs no reconstruction call."""
    pgrid = solution.r.grid
    buf = io.BytesIO()
    np.savez(buf,
             xi=solution.frame.xi, mu1=solution.frame.mu1,
             mu2=solution.frame.mu2, a=solution.frame.a,
             k=solution.frame.k, zeta1=solution.frame.zeta1,
             zeta2=solution.frame.zeta2, which=solution.which,
             r=solution.r.values, origin=np.asarray(pgrid.box_origin),
             side=pgrid.box_side, n=pgrid.n,
             remainder_l2=solution.remainder_l2,
             residual=solution.residual, iterations=solution.iterations,
             rate_estimate=solution.rate_estimate, tau=solution.tau,
             min_symbol=solution.min_symbol)
    return buf.getvalue()


def cgo_from_bytes(data: bytes) -> CgoSolution:
    with np.load(io.BytesIO(data)) as npz:
        frame = CgoFrame(xi=npz["xi"], mu1=npz["mu1"], mu2=npz["mu2"],
                         a=float(npz["a"]), k=float(npz["k"]),
                         zeta1=npz["zeta1"], zeta2=npz["zeta2"])
        pgrid = GridSpec(tuple(npz["origin"]), float(npz["side"]),
                         int(npz["n"]))
        return CgoSolution(
            frame=frame, which=int(npz["which"]),
            r=ComplexField(pgrid, npz["r"]),
            remainder_l2=float(npz["remainder_l2"]),
            residual=float(npz["residual"]),
            iterations=int(npz["iterations"]),
            rate_estimate=float(npz["rate_estimate"]),
            tau=float(npz["tau"]),
            min_symbol=float(npz["min_symbol"]))


# ---------------------------------------------------------------------------
# cache keys

def _update_grid(digest, grid: GridSpec) -> None:
    digest.update(repr(grid.box_origin).encode())
    digest.update(repr(grid.box_side).encode())
    digest.update(str(grid.points_per_axis).encode())


def rtd_cache_key(domain: DomainSpec, q: ScalarField, k: float,
                  params: Optional[SolverParams] = None) -> str:
    """Key over everything an assembled map depends on: grid, patch,
    potential bytes, frequency, and solver settings."""
    digest = hashlib.sha256(b"rtd-v1")
    _update_grid(digest, domain.grid)
    digest.update(domain.gamma.face.encode())
    digest.update(domain.gamma.node_flat.tobytes())
    digest.update(q.values.tobytes())
    digest.update(repr(float(k)).encode())
    if params is not None:
        digest.update(repr((params.method, params.tolerance,
                            params.max_iterations)).encode())
    return digest.hexdigest()


def cgo_cache_key(q: ScalarField, xi, k: float, a: float, which: int,
                  tolerance: float, pad_factor: int,
                  orientation_seed: int = 0) -> str:
    digest = hashlib.sha256(b"cgo-v1")
    _update_grid(digest, q.grid)
    digest.update(q.values.tobytes())
    digest.update(np.asarray(xi, dtype=float).tobytes())
    digest.update(repr((float(k), float(a), int(which), float(tolerance),
                        int(pad_factor), int(orientation_seed))).encode())
    return digest.hexdigest()
