"""Host environment detection: ISA and hardware-acceleration availability.

Probes are injectable callables so everything downstream is testable
without privileged hardware. The real acceleration probe opens the KVM
device node read-write: a node that exists but cannot be opened (common
when a container runtime exposes it without permissions) counts as
unavailable.
"""

from __future__ import annotations

import logging
import os
import platform
import threading
from dataclasses import dataclass
from typing import Callable

from .config_core import Arch, HostCaps
from .errors import UnsupportedArch

log = logging.getLogger(__name__)

PROBE_TIMEOUT_SECONDS = 2.0
KVM_DEVICE_NODE = "/dev/kvm"
FORCE_ARCH_ENV = "SANDBOX_FORCE_ARCH"
FORCE_ACCEL_ENV = "SANDBOX_FORCE_ACCEL"


@dataclass(frozen=True)
class ProbeSource:
    """Pair of callables answering "what machine" and "is acceleration usable"."""

    arch_reader: Callable[[], str]
    accel_checker: Callable[[], bool]


def _open_device_node(path: str = KVM_DEVICE_NODE) -> bool:
    # Presence alone is insufficient; the node must be openable read-write.
    fd = os.open(path, os.O_RDWR)
    os.close(fd)
    return True


def system_probe_source() -> ProbeSource:
    """Real probes, honoring the SANDBOX_FORCE_ARCH / SANDBOX_FORCE_ACCEL overrides."""
    forced_arch = os.environ.get(FORCE_ARCH_ENV)
    forced_accel = os.environ.get(FORCE_ACCEL_ENV)

    if forced_arch is not None:
        log.warning("host probe override: %s=%s", FORCE_ARCH_ENV, forced_arch)
        arch_reader: Callable[[], str] = lambda: forced_arch
    else:
        arch_reader = platform.machine

    if forced_accel is not None:
        if forced_accel not in ("0", "1"):
            raise ValueError(
                f'{FORCE_ACCEL_ENV} must be "0" or "1", got {forced_accel!r}'
            )
        log.warning("host probe override: %s=%s", FORCE_ACCEL_ENV, forced_accel)
        accel_checker: Callable[[], bool] = lambda: forced_accel == "1"
    else:
        accel_checker = _open_device_node

    return ProbeSource(arch_reader=arch_reader, accel_checker=accel_checker)


def detect_arch(source: ProbeSource) -> Arch:
    """Map the machine string to a supported ISA, or raise UnsupportedArch."""
    return Arch.parse(source.arch_reader())


def probe_accel(source: ProbeSource, timeout: float = PROBE_TIMEOUT_SECONDS) -> bool:
    """Check acceleration availability; any failure or timeout yields False.

    The checker runs on a daemon thread so a hung device open cannot block
    the caller beyond ``timeout`` seconds.
    """
    result: list[bool] = []
    failure: list[BaseException] = []

    def _invoke() -> None:
        try:
            result.append(bool(source.accel_checker()))
        except BaseException as exc:  # noqa: BLE001 - reason is logged, probe yields False
            failure.append(exc)

    worker = threading.Thread(target=_invoke, daemon=True, name="accel-probe")
    worker.start()
    worker.join(timeout)
    if worker.is_alive():
        log.warning("acceleration probe timed out after %.1fs; assuming unavailable", timeout)
        return False
    if failure:
        log.info("acceleration probe failed (%s); assuming unavailable", failure[0])
        return False
    return result[0]


def host_capabilities(source: ProbeSource, cpu_limit: int, mem_limit: int) -> HostCaps:
    """Compose arch detection and the acceleration probe into HostCaps."""
    if cpu_limit < 1:
        raise ValueError(f"cpu_limit must be >= 1, got {cpu_limit}")
    if mem_limit <= 0:
        raise ValueError(f"mem_limit must be > 0, got {mem_limit}")
    return HostCaps(
        arch=detect_arch(source),
        accel_available=probe_accel(source),
        cpu_limit=cpu_limit,
        mem_limit=mem_limit,
    )
