"""Single external endpoint: upload loader, status, and guest display proxy.

One listening socket serves the whole session. Every request consults the
session's routing target at dispatch time: the loader UI and upload
endpoint while in LOADER, a reverse proxy (HTTP plus raw WebSocket relay)
to the guest display endpoint while in VM_RUNNING, and a 410 page once
TERMINATED. The socket itself never moves, so the analyst stays on one
host:port across the loader-to-hypervisor handoff.

Control endpoints ``/status`` (all states) and ``POST /upload`` (LOADER
only) are reserved; everything else follows the route.
"""

from __future__ import annotations

import json
import logging
import mimetypes
import os
import re
import socket
import threading
import time
from dataclasses import dataclass
from http.client import HTTPConnection
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator
from urllib.parse import urlsplit

from .errors import BadFormat, EmptyUpload, TooLarge, UploadError, WrongState
from .lifecycle import STAGED_IMAGE_FILENAME, RouteTarget, Session, SessionState, route

log = logging.getLogger(__name__)

QCOW2_MAGIC = b"QFI\xfb"
QCOW2_MIN_HEADER_BYTES = 72
DEFAULT_UPLOAD_CAP_BYTES = 64 * 2**30
DEFAULT_PORT = 8080
IMAGE_FILENAME = STAGED_IMAGE_FILENAME
SESSION_ID_HEADER = "X-Session-Id"
STATE_HEADER = "X-Dispatch-State"

_HOP_BY_HOP = {
    "connection",
    "keep-alive",
    "proxy-authenticate",
    "proxy-authorization",
    "te",
    "trailers",
    "transfer-encoding",
    "upgrade",
    "host",
}


@dataclass(frozen=True)
class ImageRef:
    """A validated, staged disk image inside the session workspace."""

    stored_path: Path
    size_bytes: int
    format: str
    upload_seconds: float


class _BoundedReader:
    """Reads at most the declared request length; early EOF is a client abort."""

    def __init__(self, raw, remaining: int):
        self._raw = raw
        self.remaining = remaining

    def read(self, n: int) -> bytes:
        if self.remaining <= 0:
            return b""
        data = self._raw.read(min(n, self.remaining))
        if not data:
            raise ConnectionError("client aborted upload stream")
        self.remaining -= len(data)
        return data


class _MultipartScanner:
    """Minimal streaming scanner over a bounded reader."""

    def __init__(self, reader: _BoundedReader):
        self._reader = reader
        self._buf = bytearray()

    def _fill(self) -> bool:
        data = self._reader.read(65536)
        if not data:
            return False
        self._buf += data
        return True

    def read_line(self) -> bytes:
        while True:
            idx = self._buf.find(b"\n")
            if idx != -1:
                line = bytes(self._buf[: idx + 1])
                del self._buf[: idx + 1]
                return line
            if not self._fill():
                line = bytes(self._buf)
                self._buf.clear()
                return line

    def iter_until(self, marker: bytes) -> Iterator[bytes]:
        """Yield chunks preceding ``marker``, consuming the marker itself."""
        keep = len(marker)
        while True:
            idx = self._buf.find(marker)
            if idx != -1:
                if idx:
                    yield bytes(self._buf[:idx])
                del self._buf[: idx + keep]
                return
            if len(self._buf) > keep:
                out = bytes(self._buf[:-keep])
                del self._buf[:-keep]
                yield out
            if not self._fill():
                raise BadFormat("multipart part not terminated by boundary")


def _iter_multipart_image(reader: _BoundedReader, boundary: bytes) -> Iterator[bytes]:
    """Stream the bytes of the multipart field named "image"."""
    scanner = _MultipartScanner(reader)
    delim = b"--" + boundary
    while True:
        line = scanner.read_line()
        if not line:
            raise BadFormat("multipart body has no boundary")
        stripped = line.rstrip(b"\r\n")
        if stripped == delim + b"--":
            raise BadFormat("multipart body closed before any part")
        if stripped == delim:
            break
    while True:
        disposition = b""
        while True:
            line = scanner.read_line()
            if not line:
                raise BadFormat("truncated multipart part headers")
            if line in (b"\r\n", b"\n"):
                break
            if line.lower().startswith(b"content-disposition:"):
                disposition = line
        if b'name="image"' in disposition:
            yield from scanner.iter_until(b"\r\n" + delim)
            return
        for _ in scanner.iter_until(b"\r\n" + delim):
            pass
        trailer = scanner.read_line()
        if trailer.startswith(b"--"):
            raise BadFormat('multipart body has no part named "image"')


def handle_upload(
    chunks: Iterable[bytes],
    session: Session,
    *,
    cap_bytes: int = DEFAULT_UPLOAD_CAP_BYTES,
    image_filename: str = IMAGE_FILENAME,
) -> ImageRef:
    """Stream an upload to a temp file, validate, and atomically stage it.

    Validation is magic bytes plus a minimum header length; the image is
    untrusted input to the hypervisor, so the gateway deliberately avoids a
    structural parse. The temp-then-rename discipline guarantees a crash
    mid-upload leaves nothing at the staged path.
    """
    if session.state is not SessionState.LOADER:
        raise WrongState(f"upload in state {session.state.value}")
    if session.workspace is None:
        raise ValueError("session has no workspace to stage the image into")
    start = time.monotonic()
    final_path = session.workspace / image_filename
    tmp_path = session.workspace / (image_filename + ".partial")
    total = 0
    head = b""
    try:
        with open(tmp_path, "wb") as out:
            for chunk in chunks:
                if not chunk:
                    continue
                if len(head) < QCOW2_MIN_HEADER_BYTES:
                    head += chunk[: QCOW2_MIN_HEADER_BYTES - len(head)]
                    if len(head) >= len(QCOW2_MAGIC) and not head.startswith(QCOW2_MAGIC):
                        raise BadFormat("upload does not start with the QCOW2 magic")
                total += len(chunk)
                if total > cap_bytes:
                    raise TooLarge(f"upload exceeds cap of {cap_bytes} bytes")
                out.write(chunk)
        if total == 0:
            raise EmptyUpload("upload stream contained no bytes")
        if total < QCOW2_MIN_HEADER_BYTES or not head.startswith(QCOW2_MAGIC):
            raise BadFormat("upload shorter than a QCOW2 header")
        os.replace(tmp_path, final_path)
    except BaseException:
        tmp_path.unlink(missing_ok=True)
        raise
    return ImageRef(
        stored_path=final_path,
        size_bytes=total,
        format="qcow2",
        upload_seconds=time.monotonic() - start,
    )


def _load_builtin_loader_page() -> bytes:
    return resources.files("detbox.data").joinpath("loader.html").read_bytes()


class Gateway:
    """Owns the listening socket and the loader/proxy/status dispatch."""

    def __init__(
        self,
        host: str = "127.0.0.1",
        port: int = DEFAULT_PORT,
        upload_cap_bytes: int = DEFAULT_UPLOAD_CAP_BYTES,
        ui_dir: Path | None = None,
    ):
        self.host = host
        self.requested_port = port
        self.upload_cap_bytes = upload_cap_bytes
        self.ui_dir = Path(ui_dir) if ui_dir else None
        self._session: Session | None = None
        self._httpd: ThreadingHTTPServer | None = None
        self._thread: threading.Thread | None = None
        self._lock = threading.Lock()
        self._upload_event = threading.Event()
        self._image: ImageRef | None = None
        self._upload_in_flight = False
        self._loader_active = True
        self._guest_endpoint: tuple[str, int] | None = None
        self._loader_page = _load_builtin_loader_page()

    # --- lifecycle-facing controls -------------------------------------------

    def start(self, session: Session) -> None:
        if self._httpd is not None:
            raise RuntimeError("gateway already started")
        self._session = session
        handler = _build_handler(self)
        self._httpd = ThreadingHTTPServer((self.host, self.requested_port), handler)
        self._httpd.daemon_threads = True
        self._thread = threading.Thread(
            target=self._httpd.serve_forever, daemon=True, name="gateway"
        )
        self._thread.start()
        log.info("gateway listening on %s:%d", self.host, self.port)

    @property
    def port(self) -> int:
        if self._httpd is None:
            return self.requested_port
        return self._httpd.server_address[1]

    def wait_for_upload(self, timeout: float) -> ImageRef | None:
        """Block until a validated upload arrives, or return None on timeout."""
        if self._upload_event.wait(timeout):
            return self._image
        return None

    def loader_self_terminate(self) -> None:
        """Retire the loader component; the listening socket stays up.

        Idempotent. Subsequent upload requests are refused while the
        external endpoint keeps serving the current route.
        """
        if self._loader_active:
            self._loader_active = False
            log.info("loader retired; endpoint remains bound")

    def switch_to_guest(self, endpoint: tuple[str, int]) -> None:
        self._guest_endpoint = (endpoint[0], int(endpoint[1]))
        log.info("proxy switched to guest display at %s:%d", *self._guest_endpoint)

    def stop(self) -> None:
        httpd, self._httpd = self._httpd, None
        if httpd is not None:
            httpd.shutdown()
            httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)
            self._thread = None


def _build_handler(gw: Gateway) -> type[BaseHTTPRequestHandler]:
    class _Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt: str, *args) -> None:
            log.debug("gateway: " + fmt, *args)

        # --- plumbing ---------------------------------------------------------

        def _send(
            self,
            status: int,
            body: bytes,
            state: SessionState,
            content_type: str = "text/html; charset=utf-8",
        ) -> None:
            self.send_response(status)
            self.send_header("Content-Type", content_type)
            self.send_header("Content-Length", str(len(body)))
            self.send_header(SESSION_ID_HEADER, gw._session.id if gw._session else "")
            self.send_header(STATE_HEADER, state.value)
            if self.close_connection:
                self.send_header("Connection", "close")
            self.end_headers()
            if self.command != "HEAD":
                self.wfile.write(body)

        def _send_json(self, status: int, payload: dict, state: SessionState) -> None:
            self._send(
                status,
                json.dumps(payload).encode("utf-8"),
                state,
                content_type="application/json",
            )

        # --- dispatch ----------------------------------------------------------

        def do_GET(self) -> None:
            self._dispatch()

        def do_HEAD(self) -> None:
            self._dispatch()

        def do_POST(self) -> None:
            self._dispatch()

        def _dispatch(self) -> None:
            session = gw._session
            if session is None:
                self._send(503, b"no session", SessionState.TERMINATED)
                return
            state = session.state  # one snapshot per request
            path = urlsplit(self.path).path
            try:
                if path == "/status" and self.command in ("GET", "HEAD"):
                    self._send_json(200, session.snapshot(), state)
                elif path == "/upload" and self.command == "POST":
                    self._handle_upload(session, state)
                else:
                    target = route(state)
                    if target is RouteTarget.ROUTE_LOADER:
                        self._serve_loader(path, state)
                    elif target is RouteTarget.ROUTE_VNC:
                        self._proxy(path, state)
                    else:
                        self._send(
                            410,
                            b"<html><body><h1>session ended</h1>"
                            b"<p>This detonation session has terminated.</p></body></html>",
                            state,
                        )
            except (BrokenPipeError, ConnectionResetError):
                self.close_connection = True

        # --- loader route ------------------------------------------------------

        def _serve_loader(self, path: str, state: SessionState) -> None:
            if self.command not in ("GET", "HEAD"):
                self._send(405, b"method not allowed", state)
                return
            if path in ("/", "/index.html"):
                self._send(200, self._loader_index(), state)
                return
            if gw.ui_dir is not None:
                asset = (gw.ui_dir / path.lstrip("/")).resolve()
                if asset.is_file() and str(asset).startswith(str(gw.ui_dir.resolve())):
                    ctype = mimetypes.guess_type(str(asset))[0] or "application/octet-stream"
                    self._send(200, asset.read_bytes(), state, content_type=ctype)
                    return
            self._send(404, b"not found", state)

        def _loader_index(self) -> bytes:
            if gw.ui_dir is not None:
                index = gw.ui_dir / "index.html"
                if index.is_file():
                    return index.read_bytes()
            return gw._loader_page

        # --- upload endpoint ---------------------------------------------------

        def _handle_upload(self, session: Session, state: SessionState) -> None:
            self.close_connection = True
            if (
                state is not SessionState.LOADER
                or not gw._loader_active
                or gw._image is not None
            ):
                self._send_json(
                    409, {"error": "wrong_state", "state": state.value}, state
                )
                return
            with gw._lock:
                if gw._upload_in_flight:
                    self._send_json(409, {"error": "busy"}, state)
                    return
                gw._upload_in_flight = True
            try:
                length = int(self.headers.get("Content-Length") or 0)
                reader = _BoundedReader(self.rfile, length)
                ctype = self.headers.get("Content-Type", "")
                if ctype.startswith("multipart/form-data"):
                    match = re.search(r'boundary="?([^";]+)"?', ctype)
                    if match is None:
                        raise BadFormat("multipart content without a boundary")
                    chunks: Iterable[bytes] = _iter_multipart_image(
                        reader, match.group(1).encode("latin-1")
                    )
                else:
                    chunks = iter(lambda: reader.read(65536), b"")
                image = handle_upload(chunks, session, cap_bytes=gw.upload_cap_bytes)
            except UploadError as exc:
                log.info("upload rejected: %s", exc)
                self._send_json(exc.http_status, {"error": exc.code, "detail": str(exc)}, state)
                return
            except (ConnectionError, OSError) as exc:
                log.info("upload aborted: %s", exc)
                return
            finally:
                with gw._lock:
                    gw._upload_in_flight = False
            with gw._lock:
                gw._image = image
            gw._upload_event.set()  # the upload/validation event
            self._send_json(
                200,
                {
                    "accepted": True,
                    "size_bytes": image.size_bytes,
                    "upload_seconds": image.upload_seconds,
                },
                state,
            )

        # --- guest display proxy -------------------------------------------------

        def _proxy(self, path: str, state: SessionState) -> None:
            endpoint = gw._guest_endpoint
            if endpoint is None:
                self._send(502, b"guest display unavailable", state)
                return
            if path == "/ws" or path.startswith("/ws/"):
                self._relay_ws(endpoint)
                return
            body = None
            length = int(self.headers.get("Content-Length") or 0)
            if length:
                body = self.rfile.read(length)
            headers = {
                k: v for k, v in self.headers.items() if k.lower() not in _HOP_BY_HOP
            }
            try:
                conn = HTTPConnection(endpoint[0], endpoint[1], timeout=10)
                conn.request(self.command, self.path, body=body, headers=headers)
                resp = conn.getresponse()
                data = resp.read()
                conn.close()
            except OSError as exc:
                log.warning("proxy to %s failed: %s", endpoint, exc)
                self._send(502, b"guest display unavailable", state)
                return
            self.send_response(resp.status)
            for key, value in resp.getheaders():
                if key.lower() in _HOP_BY_HOP or key.lower() == "content-length":
                    continue
                self.send_header(key, value)
            self.send_header("Content-Length", str(len(data)))
            self.send_header(SESSION_ID_HEADER, gw._session.id)
            self.send_header(STATE_HEADER, state.value)
            self.end_headers()
            if self.command != "HEAD":
                self.wfile.write(data)

        def _relay_ws(self, endpoint: tuple[str, int]) -> None:
            """Opaque byte relay: replay the upgrade request, then pump both ways."""
            try:
                upstream = socket.create_connection(endpoint, timeout=5)
            except OSError:
                self._send(502, b"guest display unavailable", gw._session.state)
                return
            raw = f"{self.command} {self.path} HTTP/1.1\r\n"
            raw += "".join(f"{k}: {v}\r\n" for k, v in self.headers.items())
            raw += "\r\n"
            client = self.connection
            self.close_connection = True
            try:
                upstream.sendall(raw.encode("latin-1"))

                def _pump_down() -> None:
                    try:
                        while True:
                            data = upstream.recv(65536)
                            if not data:
                                break
                            client.sendall(data)
                    except OSError:
                        pass
                    finally:
                        try:
                            client.shutdown(socket.SHUT_WR)
                        except OSError:
                            pass

                down = threading.Thread(target=_pump_down, daemon=True, name="ws-down")
                down.start()
                try:
                    while True:
                        data = self.rfile.read1(65536)
                        if not data:
                            break
                        upstream.sendall(data)
                except OSError:
                    pass
                finally:
                    try:
                        upstream.shutdown(socket.SHUT_WR)
                    except OSError:
                        pass
                down.join(timeout=5)
            finally:
                upstream.close()

    return _Handler
