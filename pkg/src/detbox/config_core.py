"""Launch-configuration model: feasibility, surface scoring, and selection.

A launch configuration bundles the hypervisor binary, machine type,
acceleration mode, device/network profile, and display profile for one
guest launch. Selection picks, from a small pre-validated candidate set,
the feasible configuration minimizing a weighted sum of predicted
time-to-interaction and attack-surface score; a robust variant adds a
boot-time variance penalty over a distribution of environments.

All functions here are pure over immutable inputs and safe to call
concurrently.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from statistics import fmean
from typing import Callable, Iterable, Mapping, Sequence

import jsonschema

from .errors import (
    BadDistribution,
    CatalogError,
    MissingPerfEntry,
    NoFeasibleCandidate,
    UnknownComponent,
    UnsupportedArch,
)

PROB_SUM_TOLERANCE = 1e-9


class Arch(Enum):
    """Supported host/guest instruction-set architectures."""

    X86_64 = "x86_64"
    AARCH64 = "aarch64"

    @classmethod
    def parse(cls, text: str) -> "Arch":
        for member in cls:
            if member.value == text:
                return member
        raise UnsupportedArch(text)

    def __str__(self) -> str:
        return self.value


class AccelMode(Enum):
    """Hardware-accelerated virtualization vs software translation fallback."""

    KVM = "kvm"
    TCG = "tcg"

    def __str__(self) -> str:
        return self.value


class NetworkPolicy(Enum):
    ISOLATED = "isolated"
    NAT = "nat"
    RESTRICTED = "restricted"


class VolumePolicy(Enum):
    """Host-mount policy. There is deliberately no writable variant."""

    NONE = "none"
    READ_ONLY = "read_only"


ALL_NETWORK_POLICIES = frozenset(NetworkPolicy)


@dataclass(frozen=True)
class HostCaps:
    """Detected host capabilities plus resource bounds for feasibility."""

    arch: Arch
    accel_available: bool
    cpu_limit: int
    mem_limit: int

    def __post_init__(self) -> None:
        if self.cpu_limit < 1:
            raise ValueError(f"cpu_limit must be >= 1, got {self.cpu_limit}")
        if self.mem_limit <= 0:
            raise ValueError(f"mem_limit must be > 0, got {self.mem_limit}")


@dataclass(frozen=True)
class DeviceComponent:
    """One exposed hypervisor/IO component with its exposure weight."""

    id: str
    weight: float

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("component id must be non-empty")
        if self.weight < 0:
            raise ValueError(f"component weight must be >= 0, got {self.weight}")


@dataclass(frozen=True)
class LaunchConfig:
    """A validated guest launch profile.

    ``machine_type`` may be empty, meaning the ISA default machine.
    ``devices`` holds catalog component ids enabled for this profile.
    """

    id: str
    qemu_binary: str
    machine_type: str
    accel: AccelMode
    devices: tuple[str, ...]
    network: NetworkPolicy
    volume: VolumePolicy
    display: str
    target_arch: Arch
    vcpus: int
    mem_bytes: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "devices", tuple(self.devices))
        if not self.id:
            raise ValueError("config id must be non-empty")
        if self.vcpus < 1:
            raise ValueError(f"vcpus must be >= 1, got {self.vcpus}")
        if self.mem_bytes <= 0:
            raise ValueError(f"mem_bytes must be > 0, got {self.mem_bytes}")


@dataclass(frozen=True)
class Catalog:
    """Device components plus per-architecture validated candidate sets."""

    components: Mapping[str, DeviceComponent]
    candidates: Mapping[Arch, tuple[LaunchConfig, ...]]

    def __post_init__(self) -> None:
        object.__setattr__(self, "components", dict(self.components))
        object.__setattr__(
            self, "candidates", {a: tuple(cs) for a, cs in self.candidates.items()}
        )
        for comp_id, comp in self.components.items():
            if comp_id != comp.id:
                raise CatalogError(f"component keyed {comp_id!r} has id {comp.id!r}")
        seen_ids: set[str] = set()
        for arch in Arch:
            pool = self.candidates.get(arch, ())
            if not pool:
                raise CatalogError(f"catalog has no candidates for {arch}")
            for cand in pool:
                if cand.target_arch is not arch:
                    raise CatalogError(
                        f"candidate {cand.id!r} filed under {arch} targets {cand.target_arch}"
                    )
                if cand.id in seen_ids:
                    raise CatalogError(f"duplicate config id {cand.id!r}")
                seen_ids.add(cand.id)
                for dev in cand.devices:
                    if dev not in self.components:
                        raise CatalogError(
                            f"candidate {cand.id!r} enables unknown component {dev!r}"
                        )

    def candidates_for(self, arch: Arch) -> tuple[LaunchConfig, ...]:
        return self.candidates[arch]

    def find(self, config_id: str) -> LaunchConfig:
        for pool in self.candidates.values():
            for cand in pool:
                if cand.id == config_id:
                    return cand
        raise CatalogError(f"no config with id {config_id!r} in catalog")


@dataclass(frozen=True)
class ObjectiveWeights:
    """Scalarization weights: latency, attack surface, boot-time variance."""

    w_latency: float
    w_surface: float
    w_variance: float = 0.0

    def __post_init__(self) -> None:
        for name in ("w_latency", "w_surface", "w_variance"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.w_latency == 0 and self.w_surface == 0 and self.w_variance == 0:
            raise ValueError("at least one objective weight must be positive")


@dataclass(frozen=True)
class PerfTable:
    """Empirical predictions per (config id, environment id).

    ``tti_seconds`` feeds the scalarized objective; ``boot_samples`` feeds
    the robust selector's variance penalty. Missing lookups raise
    :class:`MissingPerfEntry` rather than defaulting, because a silent zero
    would always win the argmin.
    """

    tti_seconds: Mapping[tuple[str, str], float]
    boot_samples: Mapping[tuple[str, str], tuple[float, ...]] = field(
        default_factory=dict
    )

    def __post_init__(self) -> None:
        object.__setattr__(self, "tti_seconds", dict(self.tti_seconds))
        object.__setattr__(
            self, "boot_samples", {k: tuple(v) for k, v in self.boot_samples.items()}
        )
        for key, value in self.tti_seconds.items():
            if value < 0:
                raise ValueError(f"negative tti prediction for {key}: {value}")
        for key, samples in self.boot_samples.items():
            if any(s < 0 for s in samples):
                raise ValueError(f"negative boot sample for {key}")

    def tti(self, config_id: str, env_id: str) -> float:
        try:
            return self.tti_seconds[(config_id, env_id)]
        except KeyError:
            raise MissingPerfEntry(
                f"no tti prediction for config {config_id!r} in env {env_id!r}"
            ) from None

    def boots(self, config_id: str, env_id: str) -> tuple[float, ...]:
        try:
            samples = self.boot_samples[(config_id, env_id)]
        except KeyError:
            raise MissingPerfEntry(
                f"no boot samples for config {config_id!r} in env {env_id!r}"
            ) from None
        if not samples:
            raise MissingPerfEntry(
                f"empty boot samples for config {config_id!r} in env {env_id!r}"
            )
        return samples


@dataclass(frozen=True)
class FeasibilityResult:
    feasible: bool
    violations: tuple[str, ...]


def accel_select(accel_available: bool) -> AccelMode:
    """Pick the acceleration mode: hardware if available, else translation."""
    return AccelMode.KVM if accel_available else AccelMode.TCG


def surface_score(config: LaunchConfig, catalog: Catalog) -> float:
    """Sum of exposure weights over the config's enabled components."""
    total = 0.0
    for dev in config.devices:
        comp = catalog.components.get(dev)
        if comp is None:
            raise UnknownComponent(f"component {dev!r} not in catalog")
        total += comp.weight
    return total


def check_feasibility(
    config: LaunchConfig,
    host: HostCaps,
    allowed_networks: frozenset[NetworkPolicy] = ALL_NETWORK_POLICIES,
) -> FeasibilityResult:
    """Evaluate the five launch constraints; infeasibility is a result, not an error.

    C1 architecture match, C2 acceleration availability, C3 resource
    bounds, C4 volume policy (structurally guaranteed by the type, always
    passes), C5 network policy membership.
    """
    violations: list[str] = []
    if config.target_arch is not host.arch:
        violations.append("C1")
    if config.accel is AccelMode.KVM and not host.accel_available:
        violations.append("C2")
    if config.vcpus > host.cpu_limit or config.mem_bytes > host.mem_limit:
        violations.append("C3")
    if config.network not in allowed_networks:
        violations.append("C5")
    return FeasibilityResult(not violations, tuple(violations))


def objective(
    config: LaunchConfig,
    tti_estimate: float,
    catalog: Catalog,
    weights: ObjectiveWeights,
) -> float:
    """Scalarized objective: w_latency * tti + w_surface * surface score."""
    if tti_estimate < 0:
        raise ValueError(f"tti_estimate must be >= 0, got {tti_estimate}")
    return weights.w_latency * tti_estimate + weights.w_surface * surface_score(
        config, catalog
    )


def _pick(
    pool: Iterable[LaunchConfig],
    catalog: Catalog,
    host: HostCaps,
    allowed_networks: frozenset[NetworkPolicy],
    score: Callable[[LaunchConfig], float],
) -> LaunchConfig:
    """Feasibility-filtered argmin with deterministic tie-breaking.

    Ties on the objective break toward the lowest surface score, then the
    lexicographically smallest config id.
    """
    best_key: tuple[float, float, str] | None = None
    best: LaunchConfig | None = None
    for cand in pool:
        if not check_feasibility(cand, host, allowed_networks).feasible:
            continue
        key = (score(cand), surface_score(cand, catalog), cand.id)
        if best_key is None or key < best_key:
            best_key, best = key, cand
    if best is None:
        raise NoFeasibleCandidate(
            f"no feasible candidate for arch={host.arch} accel={host.accel_available}"
        )
    return best


def select_config(
    catalog: Catalog,
    host: HostCaps,
    weights: ObjectiveWeights,
    perf: PerfTable,
    env_id: str,
    allowed_networks: frozenset[NetworkPolicy] = ALL_NETWORK_POLICIES,
) -> LaunchConfig:
    """Argmin of the scalarized objective over the host's candidate set.

    Evaluation cost is linear in the candidate list and independent of
    image size.
    """
    return _pick(
        catalog.candidates_for(host.arch),
        catalog,
        host,
        allowed_networks,
        lambda c: objective(c, perf.tti(c.id, env_id), catalog, weights),
    )


def _validate_distribution(envs: Sequence[tuple[str, float]]) -> None:
    if not envs:
        raise BadDistribution("environment distribution is empty")
    if any(p < 0 for _, p in envs):
        raise BadDistribution("environment probabilities must be >= 0")
    total = sum(p for _, p in envs)
    if abs(total - 1.0) > PROB_SUM_TOLERANCE:
        raise BadDistribution(f"environment probabilities sum to {total}, expected 1")


def robust_select(
    catalog: Catalog,
    host: HostCaps,
    weights: ObjectiveWeights,
    perf: PerfTable,
    envs: Sequence[tuple[str, float]],
    allowed_networks: frozenset[NetworkPolicy] = ALL_NETWORK_POLICIES,
) -> LaunchConfig:
    """Environment-robust selection.

    Minimizes ``w_latency * E[tti] + w_surface * S + w_variance * Var(boot)``
    with the expectation and the population variance taken under the
    supplied (environment, probability) distribution. Boot-time per
    environment is the mean of that environment's samples; tti and boot
    entries must exist for every listed environment.
    """
    _validate_distribution(envs)

    def score(cand: LaunchConfig) -> float:
        mean_tti = sum(p * perf.tti(cand.id, env) for env, p in envs)
        boot_means = [fmean(perf.boots(cand.id, env)) for env, _ in envs]
        mean_boot = sum(p * m for (_, p), m in zip(envs, boot_means))
        var_boot = sum(p * (m - mean_boot) ** 2 for (_, p), m in zip(envs, boot_means))
        return (
            weights.w_latency * mean_tti
            + weights.w_surface * surface_score(cand, catalog)
            + weights.w_variance * var_boot
        )

    return _pick(catalog.candidates_for(host.arch), catalog, host, allowed_networks, score)


def default_env_id(host: HostCaps) -> str:
    """Canonical environment id for a host: ``<arch>-<accel>``."""
    return f"{host.arch.value}-{accel_select(host.accel_available).value}"


def cfg_map(
    host: HostCaps,
    catalog: Catalog,
    weights: ObjectiveWeights,
    perf: PerfTable,
    env_id: str | None = None,
    allowed_networks: frozenset[NetworkPolicy] = ALL_NETWORK_POLICIES,
) -> LaunchConfig:
    """Single entry point mapping (arch, accel availability) to a launch config.

    Restricts the host's candidate set to those matching
    ``accel_select(host.accel_available)``, then runs the scalarized
    selection. The returned config's accel mode therefore always equals the
    accel decision for the host. ``env_id`` defaults to the host's
    canonical environment.
    """
    mode = accel_select(host.accel_available)
    env = env_id if env_id is not None else default_env_id(host)
    pool = tuple(c for c in catalog.candidates_for(host.arch) if c.accel is mode)
    if not pool:
        raise NoFeasibleCandidate(
            f"no candidate with accel={mode} for arch={host.arch}"
        )
    return _pick(
        pool,
        catalog,
        host,
        allowed_networks,
        lambda c: objective(c, perf.tti(c.id, env), catalog, weights),
    )


# --- catalog / perf file loading ---------------------------------------------

def _load_schema(name: str) -> dict:
    with resources.files("detbox.data").joinpath(name).open("r", encoding="utf-8") as fh:
        return json.load(fh)


def _validate_against_schema(document: object, schema_name: str) -> None:
    schema = _load_schema(schema_name)
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(document), key=lambda e: list(e.absolute_path))
    if errors:
        first = errors[0]
        path = "$" + "".join(
            f"[{p}]" if isinstance(p, int) else f".{p}" for p in first.absolute_path
        )
        raise CatalogError(f"{path}: {first.message}")


def _parse_candidate(raw: Mapping, arch: Arch) -> LaunchConfig:
    declared = raw.get("target_arch")
    if declared is not None and declared != arch.value:
        raise CatalogError(
            f"candidate {raw.get('id')!r} declares target_arch {declared!r} "
            f"under the {arch.value!r} key"
        )
    return LaunchConfig(
        id=raw["id"],
        qemu_binary=raw["qemu_binary"],
        machine_type=raw.get("machine_type", ""),
        accel=AccelMode(raw["accel"]),
        devices=tuple(raw.get("devices", ())),
        network=NetworkPolicy(raw["network"]),
        volume=VolumePolicy(raw.get("volume", "none")),
        display=raw.get("display", "vnc"),
        target_arch=arch,
        vcpus=int(raw["vcpus"]),
        mem_bytes=int(raw["mem_bytes"]),
    )


def parse_perf(raw: Mapping) -> PerfTable:
    tti = {
        (entry["config"], entry["env"]): float(entry["seconds"])
        for entry in raw.get("tti", ())
    }
    boots = {
        (entry["config"], entry["env"]): tuple(float(s) for s in entry["samples"])
        for entry in raw.get("boot_samples", ())
    }
    return PerfTable(tti_seconds=tti, boot_samples=boots)


def parse_catalog(document: Mapping) -> tuple[Catalog, PerfTable]:
    """Build a validated Catalog and PerfTable from a parsed JSON document."""
    _validate_against_schema(document, "catalog.schema.json")
    try:
        components = {
            entry["id"]: DeviceComponent(id=entry["id"], weight=float(entry["weight"]))
            for entry in document["components"]
        }
        candidates: dict[Arch, tuple[LaunchConfig, ...]] = {}
        for arch_key, entries in document["candidates"].items():
            arch = Arch.parse(arch_key)
            candidates[arch] = tuple(_parse_candidate(e, arch) for e in entries)
        catalog = Catalog(components=components, candidates=candidates)
        perf = parse_perf(document.get("perf", {}))
    except UnsupportedArch as exc:
        raise CatalogError(str(exc)) from exc
    except (KeyError, ValueError) as exc:
        raise CatalogError(f"invalid catalog document: {exc}") from exc
    return catalog, perf


def load_catalog(path: str | Path) -> tuple[Catalog, PerfTable]:
    """Load catalog + perf table from a JSON file (see data/catalog.schema.json)."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            document = json.load(fh)
    except OSError as exc:
        raise CatalogError(f"cannot read catalog {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CatalogError(f"catalog {path} is not valid JSON: {exc}") from exc
    return parse_catalog(document)


def load_perf(path: str | Path) -> PerfTable:
    """Load a standalone perf table file (same shape as the catalog's "perf" key)."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            document = json.load(fh)
    except OSError as exc:
        raise CatalogError(f"cannot read perf table {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CatalogError(f"perf table {path} is not valid JSON: {exc}") from exc
    _validate_against_schema(document, "perf.schema.json")
    try:
        return parse_perf(document)
    except (KeyError, ValueError) as exc:
        raise CatalogError(f"invalid perf document: {exc}") from exc


def default_catalog_path() -> Path:
    """Path of the packaged default catalog (placeholder weights, documented)."""
    return Path(str(resources.files("detbox.data").joinpath("catalog.json")))
