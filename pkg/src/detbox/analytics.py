"""Closed-form performance, risk, and capacity models, plus a simulation oracle.

Covers the time-to-interaction decomposition, boot-time mixtures and the
virtualization efficiency ratio, multiplicative risk decompositions with a
Poisson-model escape bound, M/M/1 utilization/waiting formulas with a
discrete-event cross-check, worker provisioning, and the all-environments
portability predicate.

Everything here is pure; the simulator takes an explicit seed.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from statistics import fmean
from typing import Mapping, Sequence

from .config_core import Arch
from .errors import (
    BadDistribution,
    EmptyCell,
    Unachievable,
    Unstable,
    ZeroBaseline,
    ZeroThroughput,
)

PROB_SUM_TOLERANCE = 1e-9
PROVISION_SCAN_LIMIT = 10**6


@dataclass(frozen=True)
class TtiBreakdown:
    """Additive time-to-interaction components, all in seconds.

    ``t_vnc`` (first-frame latency) is optional; when omitted the total is
    the four-term form.
    """

    t_up: float
    t_cfg: float
    t_boot: float
    t_handoff: float
    t_vnc: float | None = None

    def __post_init__(self) -> None:
        for name in ("t_up", "t_cfg", "t_boot", "t_handoff"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.t_vnc is not None and self.t_vnc < 0:
            raise ValueError("t_vnc must be >= 0")


def tti_total(b: TtiBreakdown) -> float:
    """Sum of the present components."""
    total = b.t_up + b.t_cfg + b.t_boot + b.t_handoff
    if b.t_vnc is not None:
        total += b.t_vnc
    return total


def upload_time(
    size_bytes: float, throughput_bytes_per_s: float, fs_overhead_s: float = 0.0
) -> float:
    """I/O-dominated upload model: size / throughput + filesystem overhead."""
    if throughput_bytes_per_s <= 0:
        raise ZeroThroughput(
            f"throughput must be > 0, got {throughput_bytes_per_s}"
        )
    if size_bytes < 0 or fs_overhead_s < 0:
        raise ValueError("size and overhead must be >= 0")
    return size_bytes / throughput_bytes_per_s + fs_overhead_s


@dataclass(frozen=True)
class BootTable:
    """Boot-time samples per (arch, acceleration) cell.

    ``probabilities`` is the joint weight of each cell; required by
    :func:`expected_boot`, unused by :func:`efficiency_ratio`.
    """

    samples: Mapping[tuple[Arch, bool], tuple[float, ...]]
    probabilities: Mapping[tuple[Arch, bool], float] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "samples", {k: tuple(v) for k, v in self.samples.items()}
        )
        for cell, samples in self.samples.items():
            if any(s < 0 for s in samples):
                raise ValueError(f"negative boot sample in cell {cell}")
        if self.probabilities is not None:
            object.__setattr__(self, "probabilities", dict(self.probabilities))
            probs = self.probabilities.values()
            if any(p < 0 for p in probs):
                raise BadDistribution("cell probabilities must be >= 0")
            total = sum(probs)
            if abs(total - 1.0) > PROB_SUM_TOLERANCE:
                raise BadDistribution(f"cell probabilities sum to {total}, expected 1")

    def cell_mean(self, arch: Arch, accel: bool) -> float:
        samples = self.samples.get((arch, accel), ())
        if not samples:
            raise EmptyCell(f"no boot samples for ({arch}, accel={accel})")
        return fmean(samples)


def expected_boot(table: BootTable) -> float:
    """Mixture expectation: sum of cell probability times cell mean.

    Cells with zero probability are ignored and may be empty; a positively
    weighted empty cell is an error.
    """
    if table.probabilities is None:
        raise BadDistribution("boot table has no cell probabilities")
    total = 0.0
    for cell, prob in table.probabilities.items():
        if prob == 0:
            continue
        total += prob * table.cell_mean(*cell)
    return total


def efficiency_ratio(table: BootTable, arch: Arch, accel: bool) -> float:
    """Mean boot time of (arch, accel) relative to the accelerated baseline.

    Values above 1 quantify the slowdown paid when hardware acceleration
    is not in use.
    """
    numerator = table.cell_mean(arch, accel)
    baseline = table.cell_mean(arch, True)
    if baseline == 0:
        raise ZeroBaseline(f"accelerated baseline mean for {arch} is zero")
    return numerator / baseline


@dataclass(frozen=True)
class RiskInputs:
    """Probabilities for the containment decomposition plus the vulnerability rate."""

    p_escape: float
    p_reach: float
    p_persist: float
    p_externalized: float
    p_reattach: float
    lambda_vuln: float

    def __post_init__(self) -> None:
        for name in ("p_escape", "p_reach", "p_persist", "p_externalized", "p_reattach"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {value}")
        if self.lambda_vuln < 0:
            raise ValueError(f"lambda_vuln must be >= 0, got {self.lambda_vuln}")


def host_compromise_prob(r: RiskInputs) -> float:
    """Escape times reach-given-escape times persist-given-both."""
    return r.p_escape * r.p_reach * r.p_persist


def escape_bound(lambda_vuln: float, surface: float) -> float:
    """Upper bound on escape probability: 1 - exp(-rate * surface).

    This is a bound under a Poisson vulnerability model, not an estimate of
    real-world probabilities.
    """
    if lambda_vuln < 0 or surface < 0:
        raise ValueError("rate and surface must be >= 0")
    return 1.0 - math.exp(-lambda_vuln * surface)


def persistence_prob(p_externalized: float, p_reattach: float) -> float:
    """Persistence beyond teardown: externalized-state times re-attachment."""
    for name, value in (("p_externalized", p_externalized), ("p_reattach", p_reattach)):
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"{name} must be in [0, 1], got {value}")
    return p_externalized * p_reattach


@dataclass(frozen=True)
class CapacityQuery:
    """Arrival rate and service rate (1 / mean session duration), same time unit."""

    arrival_rate: float
    service_rate: float

    def __post_init__(self) -> None:
        if self.arrival_rate <= 0 or self.service_rate <= 0:
            raise ValueError("arrival and service rates must be > 0")


def _require_stable(q: CapacityQuery) -> None:
    if q.arrival_rate >= q.service_rate:
        raise Unstable(
            f"queue unstable: arrival rate {q.arrival_rate} >= service rate "
            f"{q.service_rate} (utilization must stay below 1)"
        )


def mm1_utilization(q: CapacityQuery) -> float:
    """Single-server utilization: arrival rate over service rate."""
    _require_stable(q)
    return q.arrival_rate / q.service_rate


def mm1_wait(q: CapacityQuery) -> float:
    """Expected waiting time in queue: lambda / (mu * (mu - lambda))."""
    _require_stable(q)
    return q.arrival_rate / (q.service_rate * (q.service_rate - q.arrival_rate))


def mm1_simulate(q: CapacityQuery, n_jobs: int, seed: int) -> float:
    """Discrete-event simulation of a FIFO single-server queue.

    Exponential interarrival and service times; returns the empirical mean
    wait in queue over ``n_jobs`` jobs. Deterministic for a fixed seed.
    Serves as the independent cross-check for :func:`mm1_wait`.
    """
    _require_stable(q)
    if n_jobs < 1:
        raise ValueError(f"n_jobs must be >= 1, got {n_jobs}")
    rng = random.Random(seed)
    lam, mu = q.arrival_rate, q.service_rate
    # Lindley recursion: the first job never queues.
    wait = 0.0
    total_wait = 0.0
    for _ in range(n_jobs - 1):
        service = rng.expovariate(mu)
        interarrival = rng.expovariate(lam)
        wait = max(0.0, wait + service - interarrival)
        total_wait += wait
    return total_wait / n_jobs


def provision_for_wait(
    target_wait: float, arrival_rate: float, service_rate_per_worker: float
) -> int:
    """Smallest worker count keeping the expected queue wait under target.

    Models k workers as k independent single-server queues with arrivals
    split evenly; this is a conservative approximation, not an M/M/k model.
    """
    if target_wait <= 0:
        raise ValueError(f"target_wait must be > 0, got {target_wait}")
    if arrival_rate < 0 or service_rate_per_worker <= 0:
        raise ValueError("rates must be non-negative (service rate positive)")
    if arrival_rate == 0:
        return 1
    for k in range(1, PROVISION_SCAN_LIMIT + 1):
        split = arrival_rate / k
        if split >= service_rate_per_worker:
            continue
        wait = mm1_wait(CapacityQuery(split, service_rate_per_worker))
        if wait <= target_wait:
            return k
    raise Unachievable(
        f"no worker count up to {PROVISION_SCAN_LIMIT} meets wait target {target_wait}"
    )


def portability_check(results: Sequence[tuple[str, bool]]) -> bool:
    """True iff every tested environment reported a successful bring-up."""
    if not results:
        raise ValueError("portability check needs at least one environment result")
    return all(ok for _, ok in results)
