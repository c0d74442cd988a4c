"""Storage initializer: resolve a storageUri and stage model artifacts.

Artifacts land in a local model directory before a replica may report
ready.  Supported backends are local files (``file://``, copied as a
directory tree) and plain HTTP (``http(s)://``, single-file download from
the harness's artifact server).  Cloud schemes from the serving convention
(``gs``, ``s3``, ``azure-blob``) are recognized but refused explicitly:
honest failure over fake success.

Fetches are atomic (staging directory, then rename) and verified with a
content checksum over all staged files.  In simulation, a configured
transfer duration is charged on the virtual clock; otherwise the duration
follows a bytes/bandwidth model.
"""

from __future__ import annotations

import asyncio
import hashlib
import logging
import shutil
import urllib.error
import urllib.request
import uuid
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from urllib.parse import urlparse

from miniserve.clock import Clock

logger = logging.getLogger(__name__)

DEFAULT_BANDWIDTH_BYTES_PER_SEC = 100e6  # 100 MB/s virtual transfer


class StorageError(Exception):
    pass


class UnknownScheme(StorageError):
    pass


class UnsupportedScheme(StorageError):
    def __init__(self, scheme: str):
        super().__init__(
            f"scheme '{scheme}' is recognized but not backed by a real client; "
            "use file:// or http://"
        )
        self.scheme = scheme


class FetchFailed(StorageError):
    pass


class ChecksumMismatch(StorageError):
    pass


class StorageBackendKind(Enum):
    FILE = "file"
    HTTP = "http"
    GS = "gs"
    S3 = "s3"
    AZURE_BLOB = "azure-blob"

    @property
    def supported(self) -> bool:
        return self in (StorageBackendKind.FILE, StorageBackendKind.HTTP)


_SCHEME_TO_BACKEND = {
    "file": StorageBackendKind.FILE,
    "http": StorageBackendKind.HTTP,
    "https": StorageBackendKind.HTTP,
    "gs": StorageBackendKind.GS,
    "s3": StorageBackendKind.S3,
    "azure-blob": StorageBackendKind.AZURE_BLOB,
}


@dataclass(frozen=True)
class ArtifactManifest:
    uri: str
    local_path: Path
    total_bytes: int
    checksum: str
    fetch_duration: float


def resolve_scheme(uri: str) -> StorageBackendKind:
    """Map a storageUri onto a backend kind.

    Cloud schemes return their (unsupported) marker member; anything not in
    the registry raises :class:`UnknownScheme`.
    """
    if not uri:
        raise UnknownScheme("empty uri")
    scheme = urlparse(uri).scheme.lower()
    if scheme not in _SCHEME_TO_BACKEND:
        raise UnknownScheme(f"no storage backend registered for scheme '{scheme or uri}'")
    return _SCHEME_TO_BACKEND[scheme]


def directory_checksum(root: Path) -> tuple[int, str]:
    """(total bytes, content hash) over all files below ``root``.

    Hash covers (relative path, file content hash) pairs sorted by path, so
    it is sensitive to renames and to any flipped byte.
    """
    digest = hashlib.sha256()
    total = 0
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        rel = path.relative_to(root).as_posix()
        content_hash = hashlib.sha256(path.read_bytes()).hexdigest()
        digest.update(f"{rel}\n{content_hash}\n".encode())
        total += path.stat().st_size
    return total, digest.hexdigest()


class StorageInitializer:
    """Fetch coordinator with a keyed in-process lock per (uri, dest)."""

    def __init__(self, bandwidth_bytes_per_sec: float = DEFAULT_BANDWIDTH_BYTES_PER_SEC):
        self.bandwidth = bandwidth_bytes_per_sec
        self._locks: dict[tuple[str, str], asyncio.Lock] = {}

    async def fetch(
        self,
        uri: str,
        dest: Path,
        clock: Clock,
        simulated_seconds: float | None = None,
    ) -> ArtifactManifest:
        """Stage the artifacts behind ``uri`` into directory ``dest``.

        ``simulated_seconds``, when set, is charged on the clock as the
        transfer time; otherwise total_bytes / bandwidth is.  A failed
        fetch leaves nothing at ``dest``.
        """
        backend = resolve_scheme(uri)
        if not backend.supported:
            raise UnsupportedScheme(backend.value)
        dest = Path(dest)
        key = (uri, str(dest))
        lock = self._locks.setdefault(key, asyncio.Lock())
        async with lock:
            started = clock.now()
            staging = dest.parent / f".{dest.name}.staging-{uuid.uuid4().hex[:8]}"
            try:
                try:
                    staging.mkdir(parents=True, exist_ok=False)
                except OSError as exc:
                    raise FetchFailed(f"cannot stage into {dest.parent}: {exc}") from exc
                if backend is StorageBackendKind.FILE:
                    source_checksum = self._copy_tree(uri, staging)
                else:
                    source_checksum = self._download_file(uri, staging)
                total_bytes, staged_checksum = directory_checksum(staging)
                if staged_checksum != source_checksum:
                    raise ChecksumMismatch(
                        f"staged content hash {staged_checksum} != source {source_checksum}"
                    )
                duration = (
                    simulated_seconds
                    if simulated_seconds is not None
                    else total_bytes / self.bandwidth
                )
                if duration > 0:
                    await clock.sleep(duration)
                if dest.exists():
                    shutil.rmtree(dest)
                staging.rename(dest)
            except Exception:
                shutil.rmtree(staging, ignore_errors=True)
                raise
            manifest = ArtifactManifest(
                uri=uri,
                local_path=dest,
                total_bytes=total_bytes,
                checksum=staged_checksum,
                fetch_duration=clock.now() - started,
            )
            logger.debug("fetched %s -> %s (%d bytes, %.3fs)",
                         uri, dest, total_bytes, manifest.fetch_duration)
            return manifest

    def _copy_tree(self, uri: str, staging: Path) -> str:
        parsed = urlparse(uri)
        source = Path(parsed.path)
        if not source.is_dir():
            raise FetchFailed(f"source directory not found: {source}")
        _, source_checksum = directory_checksum(source)
        for path in sorted(p for p in source.rglob("*") if p.is_file()):
            rel = path.relative_to(source)
            target = staging / rel
            target.parent.mkdir(parents=True, exist_ok=True)
            shutil.copyfile(path, target)
        return source_checksum

    def _download_file(self, uri: str, staging: Path) -> str:
        filename = Path(urlparse(uri).path).name or "model.json"
        try:
            with urllib.request.urlopen(uri, timeout=30) as response:
                body = response.read()
        except (urllib.error.URLError, OSError, ValueError) as exc:
            raise FetchFailed(f"download failed for {uri}: {exc}") from exc
        (staging / filename).write_bytes(body)
        content_hash = hashlib.sha256(body).hexdigest()
        digest = hashlib.sha256(f"{filename}\n{content_hash}\n".encode())
        return digest.hexdigest()


def verify(manifest: ArtifactManifest) -> bool:
    """True iff the on-disk content still matches the manifest checksum."""
    root = Path(manifest.local_path)
    if not root.is_dir():
        return False
    total, checksum = directory_checksum(root)
    return total == manifest.total_bytes and checksum == manifest.checksum
