"""Tests for the closed-form models and the queueing simulation oracle."""

from __future__ import annotations

import itertools
import math
import random

import pytest

from detbox.analytics import (
    BootTable,
    CapacityQuery,
    RiskInputs,
    TtiBreakdown,
    efficiency_ratio,
    escape_bound,
    expected_boot,
    host_compromise_prob,
    mm1_simulate,
    mm1_utilization,
    mm1_wait,
    persistence_prob,
    portability_check,
    provision_for_wait,
    tti_total,
    upload_time,
)
from detbox.config_core import Arch
from detbox.errors import (
    BadDistribution,
    EmptyCell,
    Unstable,
    ZeroBaseline,
    ZeroThroughput,
)

A64, X64 = Arch.AARCH64, Arch.X86_64


class TestTtiTotal:
    def test_all_zero(self):
        assert tti_total(TtiBreakdown(0, 0, 0, 0, 0)) == 0.0

    def test_hand_sum_with_first_frame_term(self):
        b = TtiBreakdown(t_up=104.0, t_cfg=0.01, t_boot=25.0, t_handoff=1.0, t_vnc=0.5)
        assert tti_total(b) == pytest.approx(130.51)

    def test_four_term_form_when_vnc_omitted(self):
        four = TtiBreakdown(104.0, 0.01, 25.0, 1.0)
        five = TtiBreakdown(104.0, 0.01, 25.0, 1.0, 0.0)
        assert tti_total(four) == tti_total(five)

    def test_permutation_invariance(self):
        values = (3.5, 11.25, 0.125, 42.0)
        totals = {
            tti_total(TtiBreakdown(*perm))
            for perm in itertools.permutations(values)
        }
        reference = sum(values)
        for total in totals:
            assert total == pytest.approx(reference, rel=1e-12)

    def test_negative_component_rejected(self):
        with pytest.raises(ValueError):
            TtiBreakdown(-1, 0, 0, 0)


class TestUploadTime:
    def test_zero_size_is_pure_overhead(self):
        assert upload_time(0, 100.0, 2.0) == 2.0

    def test_ten_gib_at_hundred_mib(self):
        assert upload_time(10 * 2**30, 100 * 2**20, 2.0) == pytest.approx(104.4)

    def test_linearity_in_size(self):
        base = upload_time(2**20, 50.0, 0.0)
        assert upload_time(2**21, 50.0, 0.0) == pytest.approx(2 * base)
        with_fs = upload_time(2**21, 50.0, 3.0)
        assert with_fs == pytest.approx(2 * base + 3.0)

    def test_zero_throughput(self):
        with pytest.raises(ZeroThroughput):
            upload_time(1, 0.0)

    def test_negative_inputs(self):
        with pytest.raises(ValueError):
            upload_time(-1, 1.0)


class TestExpectedBoot:
    def test_point_mass_equals_cell_mean(self):
        table = BootTable(
            samples={(A64, True): (25.0,)}, probabilities={(A64, True): 1.0}
        )
        assert expected_boot(table) == 25.0

    def test_two_cell_mixture(self):
        table = BootTable(
            samples={(A64, True): (25.0,), (A64, False): (100.0,)},
            probabilities={(A64, True): 0.5, (A64, False): 0.5},
        )
        assert expected_boot(table) == pytest.approx(62.5)

    def test_point_mass_identity_with_many_samples(self):
        samples = (20.0, 30.0, 24.0, 26.0)
        table = BootTable(
            samples={(X64, True): samples}, probabilities={(X64, True): 1.0}
        )
        assert expected_boot(table) == sum(samples) / len(samples)

    def test_zero_probability_empty_cell_ignored(self):
        table = BootTable(
            samples={(A64, True): (25.0,)},
            probabilities={(A64, True): 1.0, (X64, False): 0.0},
        )
        assert expected_boot(table) == 25.0

    def test_weighted_empty_cell_is_an_error(self):
        table = BootTable(
            samples={(A64, True): (25.0,)},
            probabilities={(A64, True): 0.5, (X64, False): 0.5},
        )
        with pytest.raises(EmptyCell):
            expected_boot(table)

    def test_missing_probabilities(self):
        table = BootTable(samples={(A64, True): (25.0,)})
        with pytest.raises(BadDistribution):
            expected_boot(table)

    def test_probabilities_must_sum_to_one(self):
        with pytest.raises(BadDistribution):
            BootTable(
                samples={(A64, True): (25.0,)}, probabilities={(A64, True): 0.9}
            )


class TestEfficiencyRatio:
    def test_baseline_is_one(self):
        table = BootTable(samples={(A64, True): (25.0, 26.0)})
        assert efficiency_ratio(table, A64, True) == 1.0

    def test_tenfold_slowdown(self):
        table = BootTable(samples={(A64, True): (25.0,), (A64, False): (250.0,)})
        assert efficiency_ratio(table, A64, False) == pytest.approx(10.0)

    def test_ratio_exceeds_one_iff_software_mode_slower(self):
        rng = random.Random(5)
        for _ in range(100):
            kvm = rng.uniform(1.0, 100.0)
            tcg = rng.uniform(1.0, 1000.0)
            table = BootTable(samples={(A64, True): (kvm,), (A64, False): (tcg,)})
            ratio = efficiency_ratio(table, A64, False)
            assert (ratio > 1) == (tcg > kvm)

    def test_empty_cell(self):
        table = BootTable(samples={(A64, True): (25.0,)})
        with pytest.raises(EmptyCell):
            efficiency_ratio(table, A64, False)

    def test_zero_baseline(self):
        table = BootTable(samples={(A64, True): (0.0,), (A64, False): (1.0,)})
        with pytest.raises(ZeroBaseline):
            efficiency_ratio(table, A64, False)


class TestRiskModels:
    def test_compromise_annihilator(self):
        r = RiskInputs(0.0, 0.9, 0.9, 0.1, 0.1, 1.0)
        assert host_compromise_prob(r) == 0.0

    def test_compromise_hand_product(self):
        r = RiskInputs(0.1, 0.5, 0.2, 0.0, 0.0, 1.0)
        assert host_compromise_prob(r) == pytest.approx(0.01)

    def test_compromise_identity(self):
        r = RiskInputs(1.0, 1.0, 1.0, 1.0, 1.0, 0.0)
        assert host_compromise_prob(r) == 1.0

    def test_probability_fields_validated(self):
        with pytest.raises(ValueError):
            RiskInputs(1.5, 0, 0, 0, 0, 0)
        with pytest.raises(ValueError):
            RiskInputs(0, 0, 0, 0, 0, -1.0)

    def test_escape_bound_zero_rate(self):
        assert escape_bound(0.0, 123.0) == 0.0

    def test_escape_bound_zero_surface(self):
        assert escape_bound(3.0, 0.0) == 0.0

    def test_escape_bound_reference_value(self):
        assert escape_bound(1.0, 0.8) == pytest.approx(1 - math.exp(-0.8), abs=1e-15)

    def test_escape_bound_monotone_and_bounded(self):
        rng = random.Random(17)
        previous_grid = None
        for _ in range(50):
            lam = rng.uniform(0, 5)
            s = rng.uniform(0, 5)
            value = escape_bound(lam, s)
            assert 0.0 <= value < 1.0
            assert escape_bound(lam + 0.5, s) >= value
            assert escape_bound(lam, s + 0.5) >= value

    def test_persistence_cases(self):
        assert persistence_prob(0.0, 1.0) == 0.0
        assert persistence_prob(0.05, 0.5) == pytest.approx(0.025)
        assert persistence_prob(1.0, 1.0) == 1.0
        with pytest.raises(ValueError):
            persistence_prob(2.0, 0.5)


class TestQueueing:
    def test_utilization(self):
        assert mm1_utilization(CapacityQuery(0.5, 1.0)) == 0.5

    def test_utilization_vanishes_with_load(self):
        assert mm1_utilization(CapacityQuery(1e-9, 1.0)) == pytest.approx(0.0, abs=1e-8)

    def test_equal_rates_unstable(self):
        with pytest.raises(Unstable):
            mm1_utilization(CapacityQuery(1.0, 1.0))
        with pytest.raises(Unstable):
            mm1_wait(CapacityQuery(1.0, 1.0))

    def test_wait_half_load(self):
        assert mm1_wait(CapacityQuery(0.5, 1.0)) == pytest.approx(1.0)

    def test_wait_high_load(self):
        assert mm1_wait(CapacityQuery(0.9, 1.0)) == pytest.approx(9.0)

    def test_wait_light_load_tends_to_zero(self):
        assert mm1_wait(CapacityQuery(1e-6, 1.0)) == pytest.approx(0.0, abs=1e-5)

    def test_simulation_single_job_never_queues(self):
        assert mm1_simulate(CapacityQuery(0.5, 1.0), 1, seed=42) == 0.0

    def test_simulation_seed_determinism(self):
        q = CapacityQuery(0.5, 1.0)
        first = mm1_simulate(q, 10_000, seed=7)
        second = mm1_simulate(q, 10_000, seed=7)
        assert first == second

    def test_simulation_agrees_with_formula_at_half_load(self):
        q = CapacityQuery(0.5, 1.0)
        simulated = mm1_simulate(q, 200_000, seed=1)
        assert simulated == pytest.approx(mm1_wait(q), rel=0.05)

    def test_simulation_rejects_unstable(self):
        with pytest.raises(Unstable):
            mm1_simulate(CapacityQuery(2.0, 1.0), 10, seed=0)

    def test_simulation_rejects_zero_jobs(self):
        with pytest.raises(ValueError):
            mm1_simulate(CapacityQuery(0.5, 1.0), 0, seed=0)


class TestProvisioning:
    def test_single_worker_suffices(self):
        wait = mm1_wait(CapacityQuery(0.5, 1.0))
        assert provision_for_wait(wait + 0.1, 0.5, 1.0) == 1

    def test_matches_bruteforce_scan(self):
        def brute(target: float, lam: float, mu: float) -> int:
            for k in range(1, 10_000):
                split = lam / k
                if split >= mu:
                    continue
                if split / (mu * (mu - split)) <= target:
                    return k
            raise AssertionError("scan exhausted")

        assert provision_for_wait(1.0, 1.8, 1.0) == brute(1.0, 1.8, 1.0)
        for lam, mu, target in ((3.7, 1.0, 0.5), (10.0, 2.5, 0.05), (0.9, 1.0, 4.0)):
            assert provision_for_wait(target, lam, mu) == brute(target, lam, mu)

    def test_zero_load_still_needs_one_worker(self):
        assert provision_for_wait(1.0, 0.0, 1.0) == 1

    def test_monotone_in_target(self):
        counts = [
            provision_for_wait(target, 5.0, 1.0)
            for target in (0.01, 0.1, 0.5, 1.0, 10.0)
        ]
        assert counts == sorted(counts, reverse=True)

    def test_target_must_be_positive(self):
        with pytest.raises(ValueError):
            provision_for_wait(0.0, 1.0, 2.0)


class TestPortability:
    def test_all_environments_ok(self):
        assert portability_check([("arm64", True), ("amd64", True)]) is True

    def test_any_failure_breaks_it(self):
        assert portability_check([("arm64", True), ("amd64", False)]) is False

    def test_singleton(self):
        assert portability_check([("arm64", True)]) is True

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            portability_check([])
