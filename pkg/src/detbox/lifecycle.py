"""Session finite-state machine, artifact manifest, teardown, and orchestration.

A session moves along exactly one path: LOADER, then VM_RUNNING once the
backend confirms the guest started, then TERMINATED. Failure paths jump
straight from LOADER to TERMINATED so the display route never points at a
dead guest. One logical owner serializes transitions per session; readers
consume immutable snapshots.

The writable workspace directory is the session's ephemeral boundary: it
is recursively deleted on teardown and the deletion is verified by
re-listing. Artifact manifests (injected records plus a boundary scan)
support the cross-run sanitization check.
"""

from __future__ import annotations

import hashlib
import json
import logging
import shutil
import threading
import time
import uuid
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable

from .config_core import (
    ALL_NETWORK_POLICIES,
    Catalog,
    HostCaps,
    LaunchConfig,
    NetworkPolicy,
    ObjectiveWeights,
    PerfTable,
    cfg_map,
)
from .errors import DetboxError, IllegalTransition, LaunchFailed, SameRun, WipeIncomplete

log = logging.getLogger(__name__)

LOADER_TIMEOUT_SECONDS = 1800.0
MONITOR_INTERVAL_SECONDS = 1.0
GATEWAY_LINGER_SECONDS = 2.0
DIGEST_HEX_LENGTH = 64
# The staged analyst-provided image is immutable baseline input, not an
# introduced artifact; boundary scans skip it.
STAGED_IMAGE_FILENAME = "image.qcow2"


class SessionState(Enum):
    LOADER = "loader"
    VM_RUNNING = "vm_running"
    TERMINATED = "terminated"


class RouteTarget(Enum):
    ROUTE_LOADER = "route_loader"
    ROUTE_VNC = "route_vnc"
    ROUTE_GONE = "route_gone"


_ALLOWED_EDGES = {
    (SessionState.LOADER, SessionState.VM_RUNNING),
    (SessionState.VM_RUNNING, SessionState.TERMINATED),
    # Failure/timeout paths terminate without ever running a guest.
    (SessionState.LOADER, SessionState.TERMINATED),
}


def route(state: SessionState) -> RouteTarget:
    """Routing policy: loader UI, guest display, or a gone page."""
    if state is SessionState.LOADER:
        return RouteTarget.ROUTE_LOADER
    if state is SessionState.VM_RUNNING:
        return RouteTarget.ROUTE_VNC
    return RouteTarget.ROUTE_GONE


class ArtifactKind(Enum):
    FILE = "file"
    REGISTRY = "registry"
    CONFIG = "config"


@dataclass(frozen=True)
class ArtifactRecord:
    """One observable artifact introduced inside the ephemeral boundary."""

    path: str
    kind: ArtifactKind
    digest: str
    run_id: str

    def __post_init__(self) -> None:
        if not self.path:
            raise ValueError("artifact path must be non-empty")
        if len(self.digest) != DIGEST_HEX_LENGTH or any(
            c not in "0123456789abcdef" for c in self.digest
        ):
            raise ValueError(
                f"digest must be {DIGEST_HEX_LENGTH} lowercase hex chars"
            )

    def identity(self) -> tuple[str, ArtifactKind, str]:
        """Equality key for sanitization: run id deliberately excluded."""
        return (self.path, self.kind, self.digest)


@dataclass(frozen=True)
class SanitizationReport:
    run_prev: str
    run_next: str
    intersection: frozenset[ArtifactRecord]
    clean: bool


@dataclass(frozen=True)
class TransitionRecord:
    timestamp: float
    session_id: str
    from_state: SessionState
    event: str
    to_state: SessionState
    cause: str | None


class Session:
    """One detonation lifecycle. Mutate only through the module functions."""

    def __init__(self, workspace: Path | None):
        self.id = uuid.uuid4().hex[:12]
        self.run_id = self.id
        self.workspace = workspace
        self.image_ref = None
        self.guest = None
        self.config: LaunchConfig | None = None
        self.manifest: set[ArtifactRecord] = set()
        self.baseline_manifest: frozenset[ArtifactRecord] = frozenset()
        self.timestamps: dict[str, float] = {"created": time.time()}
        self.cause: str | None = None
        self.transitions: list[TransitionRecord] = []
        self._state = SessionState.LOADER
        self._lock = threading.RLock()
        self._torn_down = False

    @property
    def state(self) -> SessionState:
        return self._state

    def snapshot(self) -> dict:
        """Immutable, JSON-ready view served by the gateway's status endpoint."""
        with self._lock:
            image = None
            if self.image_ref is not None:
                image = {
                    "size_bytes": self.image_ref.size_bytes,
                    "upload_seconds": self.image_ref.upload_seconds,
                    "format": self.image_ref.format,
                }
            return {
                "session_id": self.id,
                "state": self._state.value,
                "config_id": self.config.id if self.config else None,
                "cause": self.cause,
                "timestamps": dict(self.timestamps),
                "image": image,
                "transitions": [
                    {
                        "timestamp": t.timestamp,
                        "from": t.from_state.value,
                        "event": t.event,
                        "to": t.to_state.value,
                        "cause": t.cause,
                    }
                    for t in self.transitions
                ],
            }


def new_session(workspace_root: Path | None = None) -> Session:
    """Create a LOADER-state session, with a fresh workspace if a root is given."""
    if workspace_root is None:
        session = Session(workspace=None)
    else:
        workspace_root = Path(workspace_root)
        workspace_root.mkdir(parents=True, exist_ok=True)
        session = Session(workspace=None)
        workspace = workspace_root / session.id
        workspace.mkdir()
        session.workspace = workspace
    log.info("session %s created (workspace=%s)", session.id, session.workspace)
    return session


def _transition(
    session: Session, to_state: SessionState, event: str, cause: str | None = None
) -> None:
    with session._lock:
        edge = (session._state, to_state)
        if edge not in _ALLOWED_EDGES:
            raise IllegalTransition(
                f"no edge {session._state.value} -> {to_state.value} (event {event!r})"
            )
        record = TransitionRecord(
            timestamp=time.time(),
            session_id=session.id,
            from_state=session._state,
            event=event,
            to_state=to_state,
            cause=cause,
        )
        session._state = to_state
        session.timestamps[to_state.value] = record.timestamp
        if cause is not None:
            session.cause = cause
        session.transitions.append(record)
    log.info(
        "%s",
        json.dumps(
            {
                "ts": record.timestamp,
                "session": record.session_id,
                "from": record.from_state.value,
                "event": record.event,
                "to": record.to_state.value,
                "cause": record.cause,
            }
        ),
    )


def on_upload_complete(
    session: Session,
    image_ref,
    backend,
    *,
    stop_loader: Callable[[], None] | None = None,
    switch_proxy: Callable[[tuple[str, int]], None] | None = None,
) -> Session:
    """Handle the upload event: stop the loader, launch, then commit VM_RUNNING.

    The state flips only after the backend confirms the guest started; a
    launch failure drives the session straight to TERMINATED (wiping the
    workspace) and raises LaunchFailed.
    """
    with session._lock:
        if session._state is not SessionState.LOADER:
            raise IllegalTransition(
                f"upload completion in state {session._state.value}"
            )
        if session.config is None:
            raise ValueError("session has no launch config selected")
        if stop_loader is not None:
            stop_loader()
        try:
            guest = backend.launch(
                session.config, str(image_ref.stored_path), workspace=session.workspace
            )
        except Exception as exc:
            session.image_ref = image_ref
            _transition(
                session, SessionState.TERMINATED, "launch_failed", cause=f"launch_failed: {exc}"
            )
            teardown(session)
            raise LaunchFailed(str(exc)) from exc
        session.image_ref = image_ref
        session.guest = guest
        _transition(session, SessionState.VM_RUNNING, "upload_complete")
    if switch_proxy is not None:
        switch_proxy(guest.display_endpoint)
    return session


def record_artifact(session: Session, record: ArtifactRecord) -> Session:
    """Append an artifact to the manifest; only legal while the guest runs."""
    with session._lock:
        if session._state is not SessionState.VM_RUNNING:
            raise IllegalTransition(
                f"cannot record artifacts in state {session._state.value}"
            )
        session.manifest.add(record)
    return session


def scan_workspace(session: Session) -> frozenset[ArtifactRecord]:
    """Hash regular files in the session workspace into artifact records.

    Paths are workspace-relative so records compare across sessions. The
    staged disk image is excluded: it is baseline input, not state the
    detonation introduced.
    """
    workspace = session.workspace
    if workspace is None or not workspace.exists():
        return frozenset()
    records = []
    for path in sorted(workspace.rglob("*")):
        if not path.is_file() or path.is_symlink():
            continue
        if path.relative_to(workspace).as_posix() == STAGED_IMAGE_FILENAME:
            continue
        digest = hashlib.sha256()
        try:
            with open(path, "rb") as fh:
                for block in iter(lambda: fh.read(1 << 20), b""):
                    digest.update(block)
        except OSError:
            continue
        records.append(
            ArtifactRecord(
                path=path.relative_to(workspace).as_posix(),
                kind=ArtifactKind.FILE,
                digest=digest.hexdigest(),
                run_id=session.run_id,
            )
        )
    return frozenset(records)


def teardown(
    session: Session, *, _rmtree: Callable[..., None] = shutil.rmtree
) -> Session:
    """Wipe the session workspace and verify the wipe by re-listing.

    Idempotent: the second call is a no-op. Entries that survive one
    deletion retry are reported via WipeIncomplete; the session is
    TERMINATED either way.
    """
    with session._lock:
        if session._torn_down:
            return session
        if session._state is not SessionState.TERMINATED:
            _transition(session, SessionState.TERMINATED, "teardown")
        session._torn_down = True
        session.guest = None
        workspace = session.workspace
        if workspace is None or not workspace.exists():
            return session
        _rmtree(workspace, ignore_errors=True)
        if workspace.exists():
            _rmtree(workspace, ignore_errors=True)
        if workspace.exists():
            leftovers = [str(p) for p in workspace.rglob("*")] or [str(workspace)]
            raise WipeIncomplete(leftovers)
    return session


def on_vm_exit(session: Session, backend=None) -> Session:
    """Handle guest exit: reap, append the boundary scan, terminate, tear down."""
    with session._lock:
        if session._state is not SessionState.VM_RUNNING:
            raise IllegalTransition(f"vm exit in state {session._state.value}")
        if backend is not None and session.guest is not None:
            backend.terminate(session.guest)
        session.manifest |= scan_workspace(session)
        _transition(session, SessionState.TERMINATED, "vm_exit")
        teardown(session)
    return session


def _single_run_id(manifest: Iterable[ArtifactRecord]) -> str:
    ids = {r.run_id for r in manifest}
    if not ids:
        return ""
    if len(ids) > 1:
        raise ValueError(f"manifest mixes run ids: {sorted(ids)}")
    return next(iter(ids))


def sanitization_check(
    manifest_prev: Iterable[ArtifactRecord], manifest_next: Iterable[ArtifactRecord]
) -> SanitizationReport:
    """Intersect two runs' manifests on (path, kind, digest), ignoring run id.

    Clean means the next run shares no artifact with the previous one,
    i.e. nothing introduced earlier survived the ephemeral boundary.
    """
    prev = frozenset(manifest_prev)
    nxt = frozenset(manifest_next)
    run_prev = _single_run_id(prev)
    run_next = _single_run_id(nxt)
    if run_prev and run_next and run_prev == run_next:
        raise SameRun(f"both manifests come from run {run_prev}")
    prev_ids = {r.identity() for r in prev}
    intersection = frozenset(r for r in nxt if r.identity() in prev_ids)
    return SanitizationReport(
        run_prev=run_prev,
        run_next=run_next,
        intersection=intersection,
        clean=not intersection,
    )


def verify_sanitization(prev: Session, nxt: Session) -> SanitizationReport:
    """Cross-run check: nothing the previous run introduced is observable now.

    The next run's observed set is its baseline scan (pre-existing state in
    its workspace) plus anything recorded during the run; comparing that
    against the previous run's manifest is deliberately conservative.
    """
    observed_next = nxt.baseline_manifest | frozenset(nxt.manifest)
    return sanitization_check(prev.manifest, observed_next)


def _fail(session: Session, cause: str) -> None:
    """Drive a non-VM_RUNNING session to TERMINATED with a recorded cause."""
    with session._lock:
        if session._state is not SessionState.TERMINATED:
            _transition(session, SessionState.TERMINATED, "aborted", cause=cause)
        try:
            teardown(session)
        except WipeIncomplete as exc:
            session.cause = f"{cause}; wipe_incomplete: {exc.leftovers}"


def run_orchestration(
    host: HostCaps,
    catalog: Catalog,
    weights: ObjectiveWeights,
    perf: PerfTable,
    backend,
    gateway,
    *,
    workspace_root: Path | None = None,
    loader_timeout: float = LOADER_TIMEOUT_SECONDS,
    monitor_interval: float = MONITOR_INTERVAL_SECONDS,
    gateway_linger: float = GATEWAY_LINGER_SECONDS,
    env_id: str | None = None,
    allowed_networks: frozenset[NetworkPolicy] = ALL_NETWORK_POLICIES,
) -> Session:
    """Full control loop: select config, serve the loader, launch, monitor, wipe.

    Always returns a TERMINATED session with any failure cause recorded;
    never leaves a guest process unreaped. The endpoint lingers for
    ``gateway_linger`` seconds after termination so clients can observe the
    final route and status before the socket goes away.
    """
    session = new_session(workspace_root)
    try:
        try:
            session.config = cfg_map(
                host, catalog, weights, perf, env_id=env_id, allowed_networks=allowed_networks
            )
        except DetboxError as exc:
            _fail(session, f"config_error: {exc}")
            return session
        session.baseline_manifest = scan_workspace(session)

        gateway.start(session)
        try:
            image = gateway.wait_for_upload(loader_timeout)
            if image is None:
                _fail(session, "loader_timeout")
                return session
            try:
                on_upload_complete(
                    session,
                    image,
                    backend,
                    stop_loader=gateway.loader_self_terminate,
                    switch_proxy=gateway.switch_to_guest,
                )
            except LaunchFailed:
                return session

            while backend.is_alive(session.guest):
                log.debug("monitor: %s", json.dumps(session.snapshot()))
                time.sleep(monitor_interval)
            try:
                on_vm_exit(session, backend)
            except WipeIncomplete as exc:
                session.cause = f"wipe_incomplete: {exc.leftovers}"
            return session
        finally:
            if gateway_linger > 0:
                time.sleep(gateway_linger)
            gateway.stop()
    finally:
        if session.guest is not None:
            backend.terminate(session.guest)
        if session.state is not SessionState.TERMINATED:
            _fail(session, "orchestration_error")
