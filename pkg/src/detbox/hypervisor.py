"""Hypervisor invocation synthesis and guest process supervision.

Two backends share one duck-typed contract:

    launch(config, image_path, workspace=None) -> handle
    is_alive(handle) -> bool            # one liveness poll
    await_boot_marker(handle, timeout) -> BootResult
    terminate(handle) -> int            # graceful, then forced; always reaps

``QemuBackend`` spawns the real hypervisor binary; ``MockBackend`` runs a
scriptable in-process stand-in (with a real TCP display endpoint) so the
full lifecycle is exercisable at desk scale. Both must pass the same
black-box test suite.
"""

from __future__ import annotations

import logging
import os
import shutil
import signal
import socket
import subprocess
import threading
import time
from dataclasses import dataclass
from pathlib import Path

from .config_core import AccelMode, Arch, LaunchConfig
from .errors import GuestDied, InvalidConfig, SpawnFailed

log = logging.getLogger(__name__)

GRACE_SECONDS_DEFAULT = 10.0
VNC_BASE_PORT = 5900
VNC_DISPLAY_INDEX = 0
MARKER_DISPLAY_HANDSHAKE = "display-handshake"
MARKER_SCRIPTED_DELAY = "scripted-delay"
_POLL_STEP = 0.01


@dataclass(frozen=True)
class CommandLine:
    """An exact hypervisor invocation; argument order is significant."""

    program: str
    args: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "args", tuple(self.args))
        if not self.program:
            raise ValueError("program must be non-empty")

    def as_lines(self) -> str:
        return "\n".join((self.program, *self.args))


@dataclass(frozen=True)
class BootResult:
    """Outcome of waiting for the guest's boot completion marker."""

    booted: bool
    boot_seconds: float | None
    marker: str | None

    def __post_init__(self) -> None:
        if self.booted != (self.boot_seconds is not None):
            raise ValueError("boot_seconds must be present iff booted")


def _accel_args(config: LaunchConfig) -> list[str]:
    if config.accel is AccelMode.KVM:
        if config.target_arch is Arch.X86_64:
            return ["-enable-kvm"]
        return ["-accel", "kvm"]
    return ["-accel", "tcg"]


def _display_args(display: str) -> list[str]:
    if display == "vnc":
        return ["-display", "none", "-vnc", f":{VNC_DISPLAY_INDEX}"]
    if display in ("", "none"):
        return ["-display", "none"]
    raise InvalidConfig(f"unknown display profile {display!r}")


def _network_args(config: LaunchConfig) -> list[str]:
    return {
        "isolated": ["-nic", "none"],
        "nat": ["-nic", "user"],
        "restricted": ["-nic", "user,restrict=on"],
    }[config.network.value]


def synth_cmdline(config: LaunchConfig, image_path: str) -> CommandLine:
    """Translate a launch config into the exact hypervisor command line.

    The core sequence (machine type, cpu, acceleration flags, devices,
    drive) is fixed; resource, display, and network arguments are appended
    after it so the core stays stable as profiles grow.
    """
    if not image_path:
        raise ValueError("image_path must be non-empty")
    if not config.qemu_binary.endswith(config.target_arch.value):
        raise InvalidConfig(
            f"binary {config.qemu_binary!r} does not target {config.target_arch}"
        )
    args: list[str] = []
    if config.machine_type:
        args += ["-M", config.machine_type]
    args += ["-cpu", "host"]
    args += _accel_args(config)
    for dev in config.devices:
        args += ["-device", dev]
    args += ["-drive", f"file={image_path},format=qcow2"]
    args += ["-smp", str(config.vcpus), "-m", f"{config.mem_bytes // 2**20}M"]
    args += _display_args(config.display)
    args += _network_args(config)
    return CommandLine(program=config.qemu_binary, args=tuple(args))


# --- mock backend -------------------------------------------------------------

@dataclass(frozen=True)
class MockScript:
    """Scripted behavior for the mock guest.

    ``exit_after_polls`` counts public liveness polls (monitor ticks);
    ``exit_after_seconds`` and ``crash_after_seconds`` are wall-clock from
    launch. A crash is an abnormal exit that may precede the boot marker.
    """

    boot_delay: float = 0.05
    exit_after_seconds: float | None = None
    exit_after_polls: int | None = None
    crash_after_seconds: float | None = None
    ignore_graceful: bool = False
    fail_launch: bool = False


class _MockDisplayServer:
    """Stand-in guest display: HTTP page on any path, byte echo under /ws.

    A plain accept loop rather than socketserver so that stopping is
    immediate (closing the listening socket unblocks accept).
    """

    def __init__(self):
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind(("127.0.0.1", 0))
        self._sock.listen(8)
        self.address: tuple[str, int] = self._sock.getsockname()[:2]
        self._stopped = threading.Event()
        threading.Thread(
            target=self._accept_loop, daemon=True, name="mock-display"
        ).start()

    def _accept_loop(self) -> None:
        while not self._stopped.is_set():
            try:
                conn, _ = self._sock.accept()
            except OSError:
                return
            threading.Thread(
                target=self._serve, args=(conn,), daemon=True, name="mock-display-conn"
            ).start()

    def _serve(self, conn: socket.socket) -> None:
        try:
            buffer = b""
            while b"\r\n\r\n" not in buffer:
                data = conn.recv(65536)
                if not data:
                    return
                buffer += data
            request_line = buffer.split(b"\r\n", 1)[0].decode("latin-1")
            parts = request_line.split()
            path = parts[1] if len(parts) >= 2 else "/"
            if path.startswith("/ws"):
                conn.sendall(
                    b"HTTP/1.1 101 Switching Protocols\r\n"
                    b"Upgrade: websocket\r\nConnection: Upgrade\r\n\r\n"
                )
                leftover = buffer.split(b"\r\n\r\n", 1)[1]
                if leftover:
                    conn.sendall(leftover)
                while True:
                    data = conn.recv(65536)
                    if not data:
                        break
                    conn.sendall(data)
            else:
                body = b"<html><body>mock guest desktop</body></html>"
                head = (
                    "HTTP/1.1 200 OK\r\nContent-Type: text/html\r\n"
                    f"Content-Length: {len(body)}\r\nConnection: close\r\n\r\n"
                ).encode("latin-1")
                conn.sendall(head + body)
        except OSError:
            pass
        finally:
            try:
                conn.close()
            except OSError:
                pass

    def stop(self) -> None:
        self._stopped.set()
        # shutdown() is required: close() alone leaves a thread blocked in
        # accept() holding the port open.
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        try:
            self._sock.close()
        except OSError:
            pass


class MockGuest:
    """Handle for one scripted mock guest."""

    def __init__(self, config: LaunchConfig, image_path: str, script: MockScript):
        self.config = config
        self.image_path = image_path
        self.script = script
        self.started_at = time.monotonic()
        self._lock = threading.Lock()
        self._poll_count = 0
        self._exit_status: int | None = None
        self._server = _MockDisplayServer()
        self.display_endpoint: tuple[str, int] = self._server.address

    def _scripted_exit_status(self, now: float) -> int | None:
        """Exit status implied by the script at time ``now``, else None."""
        elapsed = now - self.started_at
        if self.script.crash_after_seconds is not None and elapsed >= self.script.crash_after_seconds:
            return 1
        if self.script.exit_after_seconds is not None and elapsed >= self.script.exit_after_seconds:
            return 0
        return None

    def _alive_now(self) -> bool:
        with self._lock:
            if self._exit_status is not None:
                return False
            status = self._scripted_exit_status(time.monotonic())
            if status is not None:
                self._exit_status = status
                return False
            return True

    def _count_poll(self) -> bool:
        with self._lock:
            if self._exit_status is not None:
                return False
            status = self._scripted_exit_status(time.monotonic())
            if status is None and self.script.exit_after_polls is not None:
                self._poll_count += 1
                if self._poll_count > self.script.exit_after_polls:
                    status = 0
            if status is not None:
                self._exit_status = status
                return False
            return True

    def _stop_display(self) -> None:
        self._server.stop()


class MockBackend:
    """In-process scriptable backend honoring the launch/await/terminate contract."""

    def __init__(
        self,
        script: MockScript | None = None,
        grace_seconds: float = GRACE_SECONDS_DEFAULT,
    ):
        self.script = script or MockScript()
        self.grace_seconds = grace_seconds

    def launch(
        self,
        config: LaunchConfig,
        image_path: str,
        workspace: Path | None = None,
    ) -> MockGuest:
        # The mock still validates the config by synthesizing the command line.
        synth_cmdline(config, image_path)
        if self.script.fail_launch:
            raise SpawnFailed("mock scripted launch failure")
        return MockGuest(config, image_path, self.script)

    def is_alive(self, handle: MockGuest) -> bool:
        return handle._count_poll()

    def await_boot_marker(self, handle: MockGuest, timeout: float) -> BootResult:
        deadline = time.monotonic() + timeout
        while True:
            now = time.monotonic()
            elapsed = now - handle.started_at
            if not handle._alive_now():
                if elapsed < handle.script.boot_delay:
                    raise GuestDied("mock guest exited before boot marker")
                return BootResult(True, elapsed, MARKER_SCRIPTED_DELAY)
            if elapsed >= handle.script.boot_delay:
                return BootResult(True, elapsed, MARKER_SCRIPTED_DELAY)
            if now >= deadline:
                return BootResult(False, None, None)
            time.sleep(_POLL_STEP)

    def terminate(self, handle: MockGuest) -> int:
        with handle._lock:
            already = handle._exit_status
        if already is None and handle.script.ignore_graceful:
            # Graceful request ignored by script; force kill after the grace period.
            time.sleep(self.grace_seconds)
            with handle._lock:
                if handle._exit_status is None:
                    handle._exit_status = -int(signal.SIGKILL)
        else:
            with handle._lock:
                if handle._exit_status is None:
                    handle._exit_status = 0
        handle._stop_display()
        with handle._lock:
            assert handle._exit_status is not None
            return handle._exit_status


# --- real backend -------------------------------------------------------------

class QemuGuest:
    """Handle for one spawned hypervisor process."""

    def __init__(
        self,
        config: LaunchConfig,
        process: subprocess.Popen,
        display_endpoint: tuple[str, int] | None,
        log_paths: tuple[Path, Path],
    ):
        self.config = config
        self.process = process
        self.started_at = time.monotonic()
        self.display_endpoint = display_endpoint
        self.log_paths = log_paths


class QemuBackend:
    """Spawns and supervises real hypervisor processes."""

    def __init__(
        self,
        binary_dir: Path | None = None,
        grace_seconds: float = GRACE_SECONDS_DEFAULT,
    ):
        self.binary_dir = Path(binary_dir) if binary_dir else None
        self.grace_seconds = grace_seconds

    def _resolve_binary(self, name: str) -> str:
        if self.binary_dir is not None:
            candidate = self.binary_dir / name
            if candidate.is_file() and os.access(candidate, os.X_OK):
                return str(candidate)
            raise SpawnFailed(f"hypervisor binary not found: {candidate}")
        found = shutil.which(name)
        if found is None:
            raise SpawnFailed(f"hypervisor binary not found on PATH: {name}")
        return found

    def launch(
        self,
        config: LaunchConfig,
        image_path: str,
        workspace: Path | None = None,
    ) -> QemuGuest:
        cmdline = synth_cmdline(config, image_path)
        if not Path(image_path).is_file():
            raise SpawnFailed(f"image not found: {image_path}")
        program = self._resolve_binary(cmdline.program)
        log_dir = (workspace or Path(image_path).parent) / "logs"
        log_dir.mkdir(parents=True, exist_ok=True)
        out_path, err_path = log_dir / "hypervisor-stdout.log", log_dir / "hypervisor-stderr.log"
        with open(out_path, "ab") as out, open(err_path, "ab") as err:
            try:
                process = subprocess.Popen(
                    [program, *cmdline.args], stdout=out, stderr=err, stdin=subprocess.DEVNULL
                )
            except OSError as exc:
                raise SpawnFailed(f"cannot spawn {program}: {exc}") from exc
        time.sleep(0.05)
        if process.poll() is not None:
            tail = err_path.read_text(errors="replace")[-500:]
            raise SpawnFailed(
                f"hypervisor exited immediately with {process.returncode}: {tail}"
            )
        endpoint = None
        if config.display == "vnc":
            endpoint = ("127.0.0.1", VNC_BASE_PORT + VNC_DISPLAY_INDEX)
        log.info("guest launched pid=%d display=%s", process.pid, endpoint)
        return QemuGuest(config, process, endpoint, (out_path, err_path))

    def is_alive(self, handle: QemuGuest) -> bool:
        return handle.process.poll() is None

    def await_boot_marker(self, handle: QemuGuest, timeout: float) -> BootResult:
        """First completed display-endpoint handshake counts as booted.

        This fires earlier than the guest OS login screen; it is the
        closest marker observable without an in-guest agent.
        """
        if handle.display_endpoint is None:
            raise InvalidConfig("config has no display endpoint to handshake with")
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            if handle.process.poll() is not None:
                raise GuestDied(
                    f"guest exited with {handle.process.returncode} before boot marker"
                )
            try:
                with socket.create_connection(handle.display_endpoint, timeout=1.0) as conn:
                    conn.settimeout(1.0)
                    banner = conn.recv(12)
                if banner:
                    return BootResult(
                        True, time.monotonic() - handle.started_at, MARKER_DISPLAY_HANDSHAKE
                    )
            except OSError:
                pass
            time.sleep(0.1)
        return BootResult(False, None, None)

    def terminate(self, handle: QemuGuest) -> int:
        process = handle.process
        if process.poll() is None:
            process.terminate()
            try:
                process.wait(timeout=self.grace_seconds)
            except subprocess.TimeoutExpired:
                process.kill()
                process.wait()
        return process.returncode
