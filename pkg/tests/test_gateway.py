"""Tests for the single-endpoint gateway: uploads, routing, proxying, handoff."""

from __future__ import annotations

import json
import socket
import threading
import time

import pytest
import requests

from detbox.errors import BadFormat, EmptyUpload, TooLarge, WrongState
from detbox.gateway import (
    IMAGE_FILENAME,
    QCOW2_MIN_HEADER_BYTES,
    Gateway,
    handle_upload,
)
from detbox.hypervisor import MockBackend, MockScript
from detbox.lifecycle import SessionState, new_session, on_upload_complete, on_vm_exit

from helpers import free_port, make_config, make_qcow2_bytes


@pytest.fixture
def gw(tmp_path):
    session = new_session(tmp_path)
    session.config = make_config("c")
    gateway = Gateway(port=0)
    gateway.start(session)
    yield gateway, session
    gateway.stop()


def url(gateway: Gateway, path: str) -> str:
    return f"http://127.0.0.1:{gateway.port}{path}"


def raw_request(
    port: int,
    payload: bytes,
    *,
    chunk: int = 65536,
    delay: float = 0.0,
    content_length: int | None = None,
    abort: bool = False,
) -> tuple[int, bytes] | None:
    """Hand-rolled POST /upload for abort/throttle scenarios."""
    length = content_length if content_length is not None else len(payload)
    sock = socket.create_connection(("127.0.0.1", port), timeout=10)
    try:
        head = (
            f"POST /upload HTTP/1.1\r\nHost: test\r\nContent-Length: {length}\r\n"
            "Content-Type: application/octet-stream\r\n\r\n"
        ).encode()
        sock.sendall(head)
        for i in range(0, len(payload), chunk):
            sock.sendall(payload[i : i + chunk])
            if delay:
                time.sleep(delay)
        if abort:
            return None
        response = b""
        sock.settimeout(10)
        while b"\r\n\r\n" not in response:
            data = sock.recv(65536)
            if not data:
                break
            response += data
        status = int(response.split(b" ", 2)[1])
        return status, response
    finally:
        sock.close()


class TestLoaderRoute:
    def test_index_serves_upload_page(self, gw):
        gateway, session = gw
        resp = requests.get(url(gateway, "/"), timeout=5)
        assert resp.status_code == 200
        assert "Drop a QCOW2" in resp.text
        assert resp.headers["X-Session-Id"] == session.id
        assert resp.headers["X-Dispatch-State"] == "loader"

    def test_unknown_path_404(self, gw):
        gateway, _ = gw
        assert requests.get(url(gateway, "/nope"), timeout=5).status_code == 404

    def test_status_endpoint(self, gw):
        gateway, session = gw
        resp = requests.get(url(gateway, "/status"), timeout=5)
        assert resp.status_code == 200
        payload = resp.json()
        assert payload["state"] == "loader"
        assert payload["session_id"] == session.id
        assert payload["config_id"] == "c"

    def test_ui_dir_overrides_builtin_page(self, tmp_path):
        ui = tmp_path / "ui"
        ui.mkdir()
        (ui / "index.html").write_text("<html>custom ui</html>")
        (ui / "app.js").write_text("console.log(1)")
        session = new_session(tmp_path / "ws")
        gateway = Gateway(port=0, ui_dir=ui)
        gateway.start(session)
        try:
            assert "custom ui" in requests.get(url(gateway, "/"), timeout=5).text
            js = requests.get(url(gateway, "/app.js"), timeout=5)
            assert js.status_code == 200
            assert "javascript" in js.headers["Content-Type"]
            # No path traversal out of the bundle dir.
            assert (
                requests.get(url(gateway, "/../secret"), timeout=5).status_code == 404
            )
        finally:
            gateway.stop()


class TestUploadValidation:
    def test_valid_magic_accepted_and_staged(self, gw):
        gateway, session = gw
        data = make_qcow2_bytes(1 << 20)
        resp = requests.post(url(gateway, "/upload"), data=data, timeout=10)
        assert resp.status_code == 200
        body = resp.json()
        assert body["accepted"] is True
        assert body["size_bytes"] == len(data)
        staged = session.workspace / IMAGE_FILENAME
        assert staged.is_file()
        assert staged.stat().st_size == len(data)
        assert staged.read_bytes()[:4] == b"QFI\xfb"
        image = gateway.wait_for_upload(1.0)
        assert image is not None and image.size_bytes == len(data)

    def test_multipart_accepted(self, gw):
        gateway, session = gw
        data = make_qcow2_bytes(200_000)
        resp = requests.post(
            url(gateway, "/upload"),
            files={"image": ("win.qcow2", data, "application/octet-stream")},
            timeout=10,
        )
        assert resp.status_code == 200
        assert (session.workspace / IMAGE_FILENAME).stat().st_size == len(data)

    def test_multipart_without_image_field(self, gw):
        gateway, session = gw
        resp = requests.post(
            url(gateway, "/upload"),
            files={"other": ("a.bin", b"QFI\xfb" + b"\x00" * 100)},
            timeout=10,
        )
        assert resp.status_code == 415
        assert not (session.workspace / IMAGE_FILENAME).exists()

    def test_wrong_magic_rejected(self, gw):
        gateway, session = gw
        resp = requests.post(
            url(gateway, "/upload"), data=b"MZ" + b"\x00" * 5000, timeout=10
        )
        assert resp.status_code == 415
        assert resp.json()["error"] == "bad_format"
        assert not (session.workspace / IMAGE_FILENAME).exists()

    def test_zero_byte_rejected(self, gw):
        gateway, _ = gw
        resp = requests.post(url(gateway, "/upload"), data=b"", timeout=10)
        assert resp.status_code == 400
        assert resp.json()["error"] == "empty_upload"

    def test_magic_but_shorter_than_header_rejected(self, gw):
        gateway, _ = gw
        resp = requests.post(url(gateway, "/upload"), data=b"QFI\xfb123", timeout=10)
        assert resp.status_code == 415

    def test_cap_enforced(self, tmp_path):
        session = new_session(tmp_path)
        gateway = Gateway(port=0, upload_cap_bytes=1024)
        gateway.start(session)
        try:
            resp = requests.post(
                url(gateway, "/upload"), data=make_qcow2_bytes(4096), timeout=10
            )
            assert resp.status_code == 413
            assert not (session.workspace / IMAGE_FILENAME).exists()
            assert not (session.workspace / (IMAGE_FILENAME + ".partial")).exists()
        finally:
            gateway.stop()

    def test_crash_mid_upload_leaves_no_partial_at_known_path(self, gw):
        gateway, session = gw
        raw_request(
            gateway.port,
            make_qcow2_bytes(10_000),
            content_length=1 << 20,  # promise more than we send
            abort=True,
        )
        time.sleep(0.3)
        assert not (session.workspace / IMAGE_FILENAME).exists()
        assert not (session.workspace / (IMAGE_FILENAME + ".partial")).exists()
        # Server is still healthy afterwards.
        assert requests.get(url(gateway, "/"), timeout=5).status_code == 200

    def test_second_upload_after_accept_rejected(self, gw):
        gateway, _ = gw
        assert (
            requests.post(
                url(gateway, "/upload"), data=make_qcow2_bytes(4096), timeout=10
            ).status_code
            == 200
        )
        resp = requests.post(
            url(gateway, "/upload"), data=make_qcow2_bytes(4096), timeout=10
        )
        assert resp.status_code == 409

    def test_concurrent_upload_busy(self, gw):
        gateway, _ = gw
        results = {}

        def slow_upload():
            results["slow"] = raw_request(
                gateway.port, make_qcow2_bytes(256 * 1024), chunk=16 * 1024, delay=0.05
            )

        thread = threading.Thread(target=slow_upload)
        thread.start()
        time.sleep(0.15)  # slow upload is mid-flight now
        fast = requests.post(
            url(gateway, "/upload"), data=make_qcow2_bytes(4096), timeout=10
        )
        thread.join(timeout=10)
        assert fast.status_code == 409
        assert fast.json()["error"] == "busy"
        assert results["slow"][0] == 200

    def test_upload_seconds_tracks_rate_limited_stream(self, gw):
        gateway, _ = gw
        size = 256 * 1024
        chunk = 32 * 1024
        delay = 0.05
        status, _ = raw_request(
            gateway.port, make_qcow2_bytes(size), chunk=chunk, delay=delay
        )
        assert status == 200
        image = gateway.wait_for_upload(1.0)
        effective_throughput = chunk / delay
        expected = size / effective_throughput
        assert image.upload_seconds == pytest.approx(expected, rel=0.2, abs=0.1)

    def test_handle_upload_direct_wrong_state(self, tmp_path):
        session = new_session(tmp_path)
        session.config = make_config("c")
        backend = MockBackend(MockScript(boot_delay=0.0))
        image = handle_upload([make_qcow2_bytes(4096)], session)
        on_upload_complete(session, image, backend)
        with pytest.raises(WrongState):
            handle_upload([make_qcow2_bytes(4096)], session)
        backend.terminate(session.guest)

    def test_handle_upload_direct_errors(self, tmp_path):
        session = new_session(tmp_path)
        with pytest.raises(EmptyUpload):
            handle_upload([], session)
        with pytest.raises(BadFormat):
            handle_upload([b"MZ junk everywhere"], session)
        with pytest.raises(BadFormat):
            handle_upload([b"QFI\xfb", b"tiny"], session)
        with pytest.raises(TooLarge):
            handle_upload([make_qcow2_bytes(2048)], session, cap_bytes=1024)
        assert QCOW2_MIN_HEADER_BYTES == 72


class TestHandoffAndProxy:
    def _upload_and_launch(self, gateway: Gateway, session, backend: MockBackend):
        resp = requests.post(
            url(gateway, "/upload"), data=make_qcow2_bytes(1 << 20), timeout=10
        )
        assert resp.status_code == 200
        image = gateway.wait_for_upload(2.0)
        on_upload_complete(
            session,
            image,
            backend,
            stop_loader=gateway.loader_self_terminate,
            switch_proxy=gateway.switch_to_guest,
        )

    def test_full_handoff_flow(self, gw):
        gateway, session = gw
        backend = MockBackend(MockScript(boot_delay=0.0))
        self._upload_and_launch(gateway, session, backend)

        # Same endpoint now proxies the guest desktop.
        desktop = requests.get(url(gateway, "/"), timeout=5)
        assert desktop.status_code == 200
        assert "mock guest desktop" in desktop.text
        assert desktop.headers["X-Dispatch-State"] == "vm_running"
        assert desktop.headers["X-Session-Id"] == session.id

        # Status still served by the gateway itself.
        assert requests.get(url(gateway, "/status"), timeout=5).json()["state"] == "vm_running"

        # Loader retired: further uploads refused.
        retry = requests.post(
            url(gateway, "/upload"), data=make_qcow2_bytes(4096), timeout=10
        )
        assert retry.status_code == 409

        # WebSocket path relays opaque bytes to the guest display endpoint.
        with socket.create_connection(("127.0.0.1", gateway.port), timeout=5) as conn:
            conn.sendall(
                b"GET /ws/display HTTP/1.1\r\nHost: t\r\n"
                b"Upgrade: websocket\r\nConnection: Upgrade\r\n\r\n"
            )
            conn.settimeout(5)
            reply = conn.recv(65536)
            assert b"101" in reply
            conn.sendall(b"vnc-frame-data")
            assert conn.recv(65536) == b"vnc-frame-data"

        on_vm_exit(session, backend)
        gone = requests.get(url(gateway, "/"), timeout=5)
        assert gone.status_code == 410
        assert gone.headers["X-Dispatch-State"] == "terminated"

    def test_unreachable_display_endpoint_yields_502(self, gw):
        gateway, session = gw
        backend = MockBackend(MockScript(boot_delay=0.0))
        self._upload_and_launch(gateway, session, backend)
        backend.terminate(session.guest)  # display endpoint goes away
        time.sleep(0.05)
        resp = requests.get(url(gateway, "/"), timeout=5)
        assert resp.status_code == 502
        # State unchanged by proxy errors.
        assert session.state is SessionState.VM_RUNNING
        on_vm_exit(session, backend)

    def test_proxy_before_switch_yields_502(self, gw):
        gateway, session = gw
        backend = MockBackend(MockScript(boot_delay=0.0))
        resp = requests.post(
            url(gateway, "/upload"), data=make_qcow2_bytes(4096), timeout=10
        )
        assert resp.status_code == 200
        image = gateway.wait_for_upload(2.0)
        on_upload_complete(session, image, backend)  # no switch callback wired
        assert requests.get(url(gateway, "/"), timeout=5).status_code == 502
        on_vm_exit(session, backend)

    def test_loader_self_terminate_is_idempotent_and_keeps_endpoint(self, gw):
        gateway, session = gw
        gateway.loader_self_terminate()
        gateway.loader_self_terminate()
        # Endpoint still bound and serving (route still LOADER).
        assert requests.get(url(gateway, "/"), timeout=5).status_code == 200
        # But the loader's upload route refuses new work.
        resp = requests.post(
            url(gateway, "/upload"), data=make_qcow2_bytes(4096), timeout=10
        )
        assert resp.status_code == 409

    def test_route_state_consistency_header(self, gw):
        gateway, session = gw
        resp = requests.get(url(gateway, "/"), timeout=5)
        served_loader_page = "Drop a QCOW2" in resp.text
        assert served_loader_page == (resp.headers["X-Dispatch-State"] == "loader")
