import hashlib
import http.server
import threading

import pytest

from miniserve.clock import LoopClock, run_simulation
from miniserve.storage import (
    ChecksumMismatch,
    FetchFailed,
    StorageBackendKind,
    StorageInitializer,
    UnknownScheme,
    UnsupportedScheme,
    directory_checksum,
    resolve_scheme,
    verify,
)


def test_resolve_file_scheme():
    assert resolve_scheme("file:///tmp/models/m1") is StorageBackendKind.FILE
    assert resolve_scheme("http://localhost:9999/m.json") is StorageBackendKind.HTTP


def test_resolve_cloud_schemes_are_unsupported_markers():
    kind = resolve_scheme("gs://kfserving-samples/models/tensorflow/flowers")
    assert kind is StorageBackendKind.GS
    assert not kind.supported
    assert not resolve_scheme("s3://bucket/key").supported
    assert not resolve_scheme("azure-blob://container/path").supported


def test_resolve_unknown_scheme():
    with pytest.raises(UnknownScheme):
        resolve_scheme("ftp://x")
    with pytest.raises(UnknownScheme):
        resolve_scheme("")


def test_fetch_refuses_cloud_scheme(tmp_path):
    async def main():
        await StorageInitializer().fetch(
            "gs://kfserving-samples/models/tensorflow/flowers",
            tmp_path / "model",
            LoopClock(),
        )

    with pytest.raises(UnsupportedScheme):
        run_simulation(main())


def _model_dir(tmp_path, name="src"):
    src = tmp_path / name
    src.mkdir()
    (src / "model.json").write_text('{"weights": [2, 0, 1], "bias": 0.5}')
    (src / "labels.txt").write_text("a\nb\nc\n")
    return src


def test_file_fetch_copies_and_counts_bytes(tmp_path):
    src = _model_dir(tmp_path)
    dest = tmp_path / "replica" / "model"
    expected_bytes = sum(p.stat().st_size for p in src.rglob("*") if p.is_file())

    async def main():
        return await StorageInitializer().fetch(f"file://{src}", dest, LoopClock())

    manifest = run_simulation(main())
    assert manifest.total_bytes == expected_bytes
    assert (dest / "model.json").read_text() == (src / "model.json").read_text()
    assert (dest / "labels.txt").exists()
    assert verify(manifest)


def test_fetch_charges_simulated_transfer_time(tmp_path):
    src = _model_dir(tmp_path)

    async def main():
        clock = LoopClock()
        manifest = await StorageInitializer().fetch(
            f"file://{src}", tmp_path / "model", clock, simulated_seconds=2.0
        )
        return manifest, clock.now()

    manifest, elapsed = run_simulation(main())
    assert manifest.fetch_duration == 2.0
    assert elapsed == 2.0


def test_fetch_uses_bandwidth_model_when_unconfigured(tmp_path):
    src = _model_dir(tmp_path)
    total = sum(p.stat().st_size for p in src.rglob("*") if p.is_file())

    async def main():
        return await StorageInitializer(bandwidth_bytes_per_sec=100.0).fetch(
            f"file://{src}", tmp_path / "model", LoopClock()
        )

    manifest = run_simulation(main())
    assert manifest.fetch_duration == pytest.approx(total / 100.0)


def test_fetch_missing_source(tmp_path):
    async def main():
        await StorageInitializer().fetch(
            f"file://{tmp_path}/nope", tmp_path / "model", LoopClock()
        )

    with pytest.raises(FetchFailed):
        run_simulation(main())
    assert not (tmp_path / "model").exists()


def test_fetch_into_unwritable_dest(tmp_path):
    # Root ignores permission bits, so force unwritability structurally:
    # the destination parent is a regular file, not a directory.
    src = _model_dir(tmp_path)
    parent = tmp_path / "blocked"
    parent.write_text("not a directory")

    async def main():
        await StorageInitializer().fetch(f"file://{src}", parent / "model", LoopClock())

    with pytest.raises(FetchFailed):
        run_simulation(main())


def test_verify_detects_flipped_byte(tmp_path):
    src = _model_dir(tmp_path)
    dest = tmp_path / "model"

    async def main():
        return await StorageInitializer().fetch(f"file://{src}", dest, LoopClock())

    manifest = run_simulation(main())
    assert verify(manifest)
    raw = bytearray((dest / "model.json").read_bytes())
    raw[0] ^= 0xFF
    (dest / "model.json").write_bytes(bytes(raw))
    assert not verify(manifest)


def test_verify_empty_dir_against_nonempty_manifest(tmp_path):
    src = _model_dir(tmp_path)
    dest = tmp_path / "model"

    async def main():
        return await StorageInitializer().fetch(f"file://{src}", dest, LoopClock())

    manifest = run_simulation(main())
    for p in dest.iterdir():
        p.unlink()
    assert not verify(manifest)


def test_http_fetch_matches_served_content_hash(tmp_path):
    serve_root = tmp_path / "www"
    serve_root.mkdir()
    body = b'{"weights": [1.0, 2.0], "bias": 0.0, "load_seconds": 0}'
    (serve_root / "model.json").write_bytes(body)

    handler = lambda *a, **kw: http.server.SimpleHTTPRequestHandler(
        *a, directory=str(serve_root), **kw
    )
    server = http.server.ThreadingHTTPServer(("127.0.0.1", 0), handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        port = server.server_address[1]
        dest = tmp_path / "model"

        async def main():
            return await StorageInitializer().fetch(
                f"http://127.0.0.1:{port}/model.json", dest, LoopClock()
            )

        manifest = run_simulation(main())
        assert (dest / "model.json").read_bytes() == body
        expected = hashlib.sha256(
            f"model.json\n{hashlib.sha256(body).hexdigest()}\n".encode()
        ).hexdigest()
        assert manifest.checksum == expected
        assert verify(manifest)
    finally:
        server.shutdown()
        thread.join()


def test_http_fetch_unreachable(tmp_path):
    async def main():
        await StorageInitializer().fetch(
            "http://127.0.0.1:1/model.json", tmp_path / "model", LoopClock()
        )

    with pytest.raises(FetchFailed):
        run_simulation(main())


def test_directory_checksum_is_order_independent(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    for root, order in ((a, ("x", "y")), (b, ("y", "x"))):
        root.mkdir()
        for name in order:
            (root / f"{name}.txt").write_text(name)
    assert directory_checksum(a) == directory_checksum(b)
