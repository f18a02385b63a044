"""Ephemeral hypervisor-backed detonation sessions behind a single endpoint."""

from .config_core import (
    AccelMode,
    Arch,
    Catalog,
    DeviceComponent,
    HostCaps,
    LaunchConfig,
    NetworkPolicy,
    ObjectiveWeights,
    PerfTable,
    VolumePolicy,
    accel_select,
    cfg_map,
    check_feasibility,
    load_catalog,
    objective,
    robust_select,
    select_config,
    surface_score,
)
from .gateway import Gateway, ImageRef, handle_upload
from .hypervisor import (
    BootResult,
    CommandLine,
    MockBackend,
    MockScript,
    QemuBackend,
    synth_cmdline,
)
from .lifecycle import (
    ArtifactKind,
    ArtifactRecord,
    RouteTarget,
    SanitizationReport,
    Session,
    SessionState,
    new_session,
    on_upload_complete,
    on_vm_exit,
    record_artifact,
    route,
    run_orchestration,
    sanitization_check,
    teardown,
    verify_sanitization,
)

__version__ = "0.1.0"
