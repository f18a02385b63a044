"""Shared test fixtures: catalog factories, random instance generation, and
independent brute-force oracles for the selection operators.

The oracles re-derive feasibility, surface scores, and objectives directly
from the constraint definitions; they never call the selectors they check.
"""

from __future__ import annotations

import math
import random
import socket
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from detbox.config_core import (
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
)
from detbox.gateway import ImageRef, handle_upload

QCOW2_MAGIC = b"QFI\xfb"


def make_qcow2_bytes(size: int = 1 << 20, fill: bytes = b"\x00") -> bytes:
    assert size >= 4
    return QCOW2_MAGIC + fill * (size - 4)


def free_port() -> int:
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


def make_config(
    config_id: str,
    arch: Arch = Arch.AARCH64,
    accel: AccelMode = AccelMode.KVM,
    devices: tuple[str, ...] = (),
    network: NetworkPolicy = NetworkPolicy.ISOLATED,
    vcpus: int = 2,
    mem_bytes: int = 4 * 2**30,
    machine_type: str | None = None,
) -> LaunchConfig:
    if machine_type is None:
        machine_type = "virt,highmem=off" if arch is Arch.AARCH64 else ""
    return LaunchConfig(
        id=config_id,
        qemu_binary=f"qemu-system-{arch.value}",
        machine_type=machine_type,
        accel=accel,
        devices=devices,
        network=network,
        volume=VolumePolicy.NONE,
        display="vnc",
        target_arch=arch,
        vcpus=vcpus,
        mem_bytes=mem_bytes,
    )


def make_catalog(
    configs: list[LaunchConfig], components: dict[str, float] | None = None
) -> Catalog:
    components = components if components is not None else {}
    by_arch: dict[Arch, list[LaunchConfig]] = {Arch.X86_64: [], Arch.AARCH64: []}
    for cfg in configs:
        by_arch[cfg.target_arch].append(cfg)
    # The catalog type requires a non-empty list per arch; pad with a filler.
    for arch, pool in by_arch.items():
        if not pool:
            pool.append(make_config(f"filler-{arch.value}", arch=arch))
    return Catalog(
        components={cid: DeviceComponent(cid, w) for cid, w in components.items()},
        candidates={a: tuple(pool) for a, pool in by_arch.items()},
    )


# --- random instances for selector/oracle comparison ---------------------------


@dataclass
class SelectorInstance:
    catalog: Catalog
    host: HostCaps
    weights: ObjectiveWeights
    perf: PerfTable
    env_id: str
    envs: list[tuple[str, float]]
    component_weights: dict[str, float]


def random_instance(rng: random.Random, max_candidates: int = 16) -> SelectorInstance:
    n_comp = rng.randint(1, 6)
    component_weights = {
        f"dev{i}": round(rng.uniform(0.0, 2.0), 3) for i in range(n_comp)
    }
    comp_ids = list(component_weights)

    n_cand = rng.randint(2, max_candidates)
    configs = []
    for i in range(n_cand):
        # Guarantee at least one candidate per arch (catalog invariant).
        if i == 0:
            arch = Arch.AARCH64
        elif i == 1:
            arch = Arch.X86_64
        else:
            arch = rng.choice((Arch.AARCH64, Arch.X86_64))
        configs.append(
            make_config(
                f"cfg{i:02d}",
                arch=arch,
                accel=rng.choice((AccelMode.KVM, AccelMode.TCG)),
                devices=tuple(rng.sample(comp_ids, k=rng.randint(0, n_comp))),
                network=rng.choice(tuple(NetworkPolicy)),
                vcpus=rng.randint(1, 8),
                mem_bytes=rng.randint(1, 16) * 2**30,
            )
        )
    catalog = make_catalog(configs, component_weights)

    host = HostCaps(
        arch=rng.choice((Arch.AARCH64, Arch.X86_64)),
        accel_available=rng.random() < 0.5,
        cpu_limit=rng.randint(1, 8),
        mem_limit=rng.randint(1, 16) * 2**30,
    )

    weights = ObjectiveWeights(
        w_latency=round(rng.uniform(0.0, 10.0), 3),
        w_surface=round(rng.uniform(0.0, 10.0), 3) or 1.0,
        w_variance=round(rng.uniform(0.0, 5.0), 3),
    )

    n_envs = rng.randint(1, 4)
    env_ids = [f"env{j}" for j in range(n_envs)]
    raw = [rng.random() + 1e-6 for _ in env_ids]
    total = sum(raw)
    envs = [(env, p / total) for env, p in zip(env_ids, raw)]

    all_candidates = [c for pool in catalog.candidates.values() for c in pool]
    tti = {}
    boots = {}
    for cand in all_candidates:
        for env in env_ids:
            tti[(cand.id, env)] = round(rng.uniform(0.0, 500.0), 3)
            boots[(cand.id, env)] = tuple(
                round(rng.uniform(0.0, 400.0), 3) for _ in range(rng.randint(1, 4))
            )
    perf = PerfTable(tti_seconds=tti, boot_samples=boots)

    return SelectorInstance(
        catalog=catalog,
        host=host,
        weights=weights,
        perf=perf,
        env_id=env_ids[0],
        envs=envs,
        component_weights=component_weights,
    )


# --- independent oracles --------------------------------------------------------


def oracle_feasible(
    config: LaunchConfig, host: HostCaps, allowed: frozenset[NetworkPolicy]
) -> bool:
    if config.target_arch != host.arch:
        return False
    if config.accel == AccelMode.KVM and not host.accel_available:
        return False
    if config.vcpus > host.cpu_limit:
        return False
    if config.mem_bytes > host.mem_limit:
        return False
    if config.network not in allowed:
        return False
    return True


def oracle_surface(config: LaunchConfig, component_weights: dict[str, float]) -> float:
    total = 0.0
    for dev in config.devices:
        total += component_weights[dev]
    return total


def _oracle_argmin(scored: list[tuple[float, float, str, LaunchConfig]]):
    if not scored:
        return None
    return min(scored, key=lambda item: item[:3])[3]


def oracle_select(
    inst: SelectorInstance,
    allowed: frozenset[NetworkPolicy] = frozenset(NetworkPolicy),
) -> LaunchConfig | None:
    scored = []
    for cand in inst.catalog.candidates[inst.host.arch]:
        if not oracle_feasible(cand, inst.host, allowed):
            continue
        s = oracle_surface(cand, inst.component_weights)
        j = (
            inst.weights.w_latency * inst.perf.tti_seconds[(cand.id, inst.env_id)]
            + inst.weights.w_surface * s
        )
        scored.append((j, s, cand.id, cand))
    return _oracle_argmin(scored)


def oracle_robust(
    inst: SelectorInstance,
    allowed: frozenset[NetworkPolicy] = frozenset(NetworkPolicy),
) -> LaunchConfig | None:
    scored = []
    for cand in inst.catalog.candidates[inst.host.arch]:
        if not oracle_feasible(cand, inst.host, allowed):
            continue
        s = oracle_surface(cand, inst.component_weights)
        mean_tti = sum(
            p * inst.perf.tti_seconds[(cand.id, env)] for env, p in inst.envs
        )
        boot_means = [
            math.fsum(inst.perf.boot_samples[(cand.id, env)])
            / len(inst.perf.boot_samples[(cand.id, env)])
            for env, _ in inst.envs
        ]
        mean_boot = sum(p * m for (_, p), m in zip(inst.envs, boot_means))
        var_boot = sum(
            p * (m - mean_boot) ** 2 for (_, p), m in zip(inst.envs, boot_means)
        )
        j = (
            inst.weights.w_latency * mean_tti
            + inst.weights.w_surface * s
            + inst.weights.w_variance * var_boot
        )
        scored.append((j, s, cand.id, cand))
    return _oracle_argmin(scored)


def oracle_cfg_map(
    inst: SelectorInstance,
    allowed: frozenset[NetworkPolicy] = frozenset(NetworkPolicy),
) -> LaunchConfig | None:
    wanted = AccelMode.KVM if inst.host.accel_available else AccelMode.TCG
    scored = []
    for cand in inst.catalog.candidates[inst.host.arch]:
        if cand.accel != wanted:
            continue
        if not oracle_feasible(cand, inst.host, allowed):
            continue
        s = oracle_surface(cand, inst.component_weights)
        env = f"{inst.host.arch.value}-{wanted.value}"
        key = (cand.id, env)
        if key not in inst.perf.tti_seconds:
            continue
        j = inst.weights.w_latency * inst.perf.tti_seconds[key] + inst.weights.w_surface * s
        scored.append((j, s, cand.id, cand))
    return _oracle_argmin(scored)


# --- scripted gateway stub for orchestration tests -------------------------------


@dataclass
class ScriptedGateway:
    """Gateway stand-in: stages a synthetic image instead of serving HTTP."""

    image_bytes: bytes | None = field(default_factory=lambda: make_qcow2_bytes(4096))
    upload_delay: float = 0.0
    session: object = None
    started: bool = False
    stopped: bool = False
    loader_retired: bool = False
    switched_to: list = field(default_factory=list)
    events: list = field(default_factory=list)

    def start(self, session) -> None:
        self.session = session
        self.started = True
        self.events.append("start")

    def wait_for_upload(self, timeout: float):
        if self.upload_delay:
            time.sleep(min(self.upload_delay, timeout))
        if self.image_bytes is None or self.upload_delay > timeout:
            return None
        self.events.append("upload")
        return handle_upload([self.image_bytes], self.session)

    def loader_self_terminate(self) -> None:
        self.loader_retired = True
        self.events.append("stop_loader")

    def switch_to_guest(self, endpoint) -> None:
        self.switched_to.append(endpoint)
        self.events.append("switch")

    def stop(self) -> None:
        self.stopped = True
        self.events.append("stop")
