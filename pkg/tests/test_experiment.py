"""Attribution, summary statistics, and the end-to-end experiment runner."""

from __future__ import annotations

import math
import os
import random
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from manai.clock import DeadlineStop, VirtualScheduler
from manai.errors import EmptyInput, InvalidConfig, LockHeld
from manai.experiment import (
    BaselineSetting,
    ExperimentConfig,
    config_digest,
    run_experiment,
)
from manai.harness import TestId, TestStatus
from manai.probe import ProbeBackend, ScenarioSegment, SimulatedProbe, SimulationScenario
from manai.results import attribute, compute_stats, summarize
from manai.sampler import EnergySample, SamplerConfig, sample_stream
from manai.store import Store

from conftest import PKG, fixture_harness_command, make_result, write_plan, write_scenario

NS = 10**9


class TestAttribute:
    def test_pro_rata_half_window(self):
        # 10 J over [0, 1s]; the window [0.25s, 0.75s] covers half of it.
        sample = EnergySample(0, NS, {PKG: 10_000_000})
        energy = attribute([sample], NS // 4, 3 * NS // 4)
        assert energy[PKG] == 5

    def test_full_window_telescopes_to_total(self):
        samples = [
            EnergySample(0, NS, {PKG: 10_000_000}),
            EnergySample(NS, 2 * NS, {PKG: 4_000_000}),
        ]
        assert attribute(samples, 0, 2 * NS)[PKG] == 14

    def test_disjoint_sample_contributes_nothing(self):
        sample = EnergySample(0, NS, {PKG: 10_000_000})
        assert attribute([sample], 2 * NS, 3 * NS)[PKG] == 0

    def test_empty_samples_zero_map(self):
        assert attribute([], 0, NS) == {}

    def test_invalid_window_rejected(self):
        with pytest.raises(ValueError):
            attribute([], NS, NS)


@st.composite
def sample_runs(draw):
    rng_boundaries = sorted(
        draw(
            st.lists(st.integers(1, 10_000), min_size=2, max_size=12, unique=True)
        )
    )
    samples = []
    for lo, hi in zip(rng_boundaries, rng_boundaries[1:]):
        samples.append(
            EnergySample(
                lo * 1000, hi * 1000, {PKG: draw(st.integers(0, 10_000_000))}
            )
        )
    return samples


@settings(max_examples=60, deadline=None)
@given(
    samples=sample_runs(),
    cuts=st.lists(st.integers(1, 9_999_999), min_size=0, max_size=5, unique=True),
)
def test_attribution_conserved_over_any_partition(samples, cuts):
    # Splitting a window into sub-windows and summing the attributions
    # must reproduce the whole-window attribution exactly (rationals).
    begin_ns = samples[0].start_ns
    end_ns = samples[-1].end_ns
    bounds = [begin_ns] + sorted(c for c in cuts if begin_ns < c < end_ns) + [end_ns]
    whole = attribute(samples, begin_ns, end_ns)
    partial_sum: dict = {}
    for lo, hi in zip(bounds, bounds[1:]):
        for domain, value in attribute(samples, lo, hi).items():
            partial_sum[domain] = partial_sum.get(domain, Fraction(0)) + value
    assert partial_sum == whole


@settings(max_examples=40, deadline=None)
@given(
    power_uw=st.integers(1_000_000, 40_000_000),
    window=st.tuples(st.integers(0, 800), st.integers(100, 1200)),
)
def test_attribution_against_reintegration_oracle(power_uw, window):
    # Stream a constant-power scenario on an update-aligned grid, then
    # attribute an arbitrary interior window; re-integrating the power
    # function over that window must agree within one update quantum.
    scenario = SimulationScenario(
        segments=(ScenarioSegment(3600 * NS, {PKG: power_uw}),),
        max_range_uj=10**12,
        update_interval_ns=1_000_000,
    )
    sched = VirtualScheduler()
    probe = SimulatedProbe(scenario, clock=sched.now)
    stop = DeadlineStop(sched.now, 2 * NS)
    samples = sample_stream(probe, SamplerConfig(rate_hz=100.0), stop, sched)

    begin_ms, length_ms = window
    begin_ns = begin_ms * 1_000_000
    end_ns = begin_ns + length_ms * 1_000_000
    end_ns = min(end_ns, samples[-1].end_ns)
    if end_ns <= begin_ns:
        return
    attributed = float(attribute(samples, begin_ns, end_ns)[PKG])
    oracle_j = (
        scenario.energy_fj(PKG, end_ns) - scenario.energy_fj(PKG, begin_ns)
    ) / 1e15
    quantum_j = (power_uw / 1e6) * (scenario.update_interval_ns / 1e9)
    assert attributed == pytest.approx(oracle_j, abs=quantum_j + 1e-12)


class TestSummarize:
    def _results(self, energies_uj, **kwargs):
        test = TestId("demo", "case")
        return [
            make_result(test, iteration=i, energy_uj=uj, **kwargs)
            for i, uj in enumerate(energies_uj)
        ]

    def test_textbook_values(self):
        summary = summarize(self._results([1_000_000, 2_000_000, 3_000_000]))
        stats = summary.energy_stats[PKG]
        assert stats.mean == pytest.approx(2.0)
        assert stats.median == pytest.approx(2.0)
        assert stats.stddev == pytest.approx(1.0)
        assert stats.min == pytest.approx(1.0)
        assert stats.max == pytest.approx(3.0)

    def test_single_iteration_convention(self):
        summary = summarize(self._results([5_000_000]))
        stats = summary.energy_stats[PKG]
        assert stats.mean == stats.median == stats.min == stats.max == 5.0
        assert stats.stddev == 0.0

    def test_median_is_lower_middle_for_even_counts(self):
        summary = summarize(self._results([1_000_000, 2_000_000, 3_000_000, 10_000_000]))
        assert summary.energy_stats[PKG].median == 2.0

    def test_against_two_pass_oracle(self):
        rng = random.Random(42)
        values = [rng.uniform(0.1, 50.0) for _ in range(100)]
        stats = compute_stats(values)
        mean = sum(values) / len(values)
        variance = sum((v - mean) ** 2 for v in values) / (len(values) - 1)
        assert stats.mean == pytest.approx(mean, rel=1e-9)
        assert stats.stddev == pytest.approx(math.sqrt(variance), rel=1e-9)

    def test_status_counts(self):
        test = TestId("demo", "case")
        results = [
            make_result(test, 0, status=TestStatus.PASS),
            make_result(test, 1, status=TestStatus.FAIL),
            make_result(test, 2, status=TestStatus.SKIP),
            make_result(test, 3, status=TestStatus.PASS),
        ]
        summary = summarize(results)
        assert (summary.pass_count, summary.fail_count, summary.skip_count) == (2, 1, 1)
        assert summary.iterations == 4

    def test_empty_input_rejected(self):
        with pytest.raises(EmptyInput):
            summarize([])

    def test_mixed_tests_rejected(self):
        with pytest.raises(ValueError):
            summarize([make_result(TestId("a", "x")), make_result(TestId("b", "y"))])


@pytest.fixture
def sim_experiment(tmp_path):
    """A ready-to-run simulated experiment over two fixture tests."""
    plan = write_plan(
        tmp_path / "plan.txt",
        ["test demo::slow sleep_ms=80", "test demo::fast sleep_ms=40"],
    )
    scenario = write_scenario(
        tmp_path / "scenario.txt", [(3600 * NS, {"package": "10"})]
    )

    def build(**overrides):
        kwargs = dict(
            harness=fixture_harness_command(plan),
            sampling_rate_hz=100.0,
            iterations=2,
            revision_label="rev-1",
            probe_backend=ProbeBackend.SIMULATED,
            scenario_path=scenario,
            test_timeout_s=30.0,
        )
        kwargs.update(overrides)
        return ExperimentConfig(**kwargs)

    return tmp_path, plan, scenario, build


class TestRunExperiment:
    def test_record_structure_and_energy(self, sim_experiment):
        tmp_path, _, _, build = sim_experiment
        record = run_experiment(build(), data_dir=tmp_path / "data")

        slow = TestId("demo", "slow")
        fast = TestId("demo", "fast")
        assert set(record.summaries) == {slow, fast}
        assert record.summaries[slow].iterations == 2
        assert all(r.status is TestStatus.PASS for r in record.results[slow])
        # 10 W for ~80 ms and ~40 ms.
        assert record.summaries[slow].energy_stats[PKG].mean == pytest.approx(0.8, abs=0.15)
        assert record.summaries[fast].energy_stats[PKG].mean == pytest.approx(0.4, abs=0.15)
        # Persisted and loadable.
        stored = Store(tmp_path / "data").load("rev-1")
        assert len(stored) == 1
        assert stored[0].summaries.keys() == record.summaries.keys()

    def test_single_iteration_single_test(self, sim_experiment):
        tmp_path, _, _, build = sim_experiment
        config = build(iterations=1, selection=(TestId("demo", "fast"),))
        record = run_experiment(config, data_dir=tmp_path / "data")
        assert list(record.summaries) == [TestId("demo", "fast")]
        assert record.summaries[TestId("demo", "fast")].iterations == 1

    def test_sub_interval_run_is_low_confidence(self, tmp_path):
        # busy_ms, not sleep_ms: sub-millisecond sleeps overshoot past the
        # 1 ms update interval on coarse-timer kernels.
        plan = write_plan(tmp_path / "plan.txt", ["test demo::blink busy_ms=0.5"])
        scenario = write_scenario(
            tmp_path / "scenario.txt",
            [(3600 * NS, {"package": "10"})],
            update_interval_ns=1_000_000,
        )
        config = ExperimentConfig(
            harness=fixture_harness_command(plan),
            sampling_rate_hz=100.0,
            iterations=2,
            revision_label="rev-lc",
            probe_backend=ProbeBackend.SIMULATED,
            scenario_path=scenario,
            test_timeout_s=30.0,
        )
        record = run_experiment(config, data_dir=tmp_path / "data")
        results = record.results[TestId("demo", "blink")]
        assert all(r.low_confidence for r in results)
        assert record.summaries[TestId("demo", "blink")].any_low_confidence

    def test_replicable_on_simulated_probe(self, tmp_path):
        # Coarse update grid (20 ms) absorbs scheduling jitter; durations
        # land on the same grid point in both runs, so every stored
        # number matches bit for bit.
        plan = write_plan(
            tmp_path / "plan.txt",
            ["test demo::a sleep_ms=100", "test demo::b sleep_ms=60"],
        )
        scenario = write_scenario(
            tmp_path / "scenario.txt",
            [(3600 * NS, {"package": "7.5", "dram": "1.25"})],
            update_interval_ns=20_000_000,
        )
        config = ExperimentConfig(
            harness=fixture_harness_command(plan),
            sampling_rate_hz=50.0,
            iterations=2,
            revision_label="rev-repl",
            probe_backend=ProbeBackend.SIMULATED,
            scenario_path=scenario,
            test_timeout_s=30.0,
        )
        record_a = run_experiment(config, data_dir=tmp_path / "data-a")
        record_b = run_experiment(config, data_dir=tmp_path / "data-b")

        from manai.store import record_to_doc

        doc_a, doc_b = record_to_doc(record_a), record_to_doc(record_b)
        assert doc_a.pop("created_at") != ""
        assert doc_b.pop("created_at") != ""
        assert doc_a == doc_b

    def test_protocol_violation_recorded_and_run_continues(self, sim_experiment):
        tmp_path, plan, scenario, build = sim_experiment
        write_plan(
            plan,
            ["test demo::broken no_begin=1 sleep_ms=1", "test demo::good sleep_ms=10"],
        )
        record = run_experiment(build(iterations=2), data_dir=tmp_path / "data")
        broken = record.results[TestId("demo", "broken")]
        assert len(broken) == 1  # remaining iterations skipped
        assert broken[0].status is TestStatus.FAIL
        assert "protocol violation" in broken[0].error
        good = record.summaries[TestId("demo", "good")]
        assert good.iterations == 2
        assert good.pass_count == 2

    def test_crash_recorded_as_failed_iteration(self, sim_experiment):
        tmp_path, plan, scenario, build = sim_experiment
        write_plan(plan, ["test demo::boom sleep_ms=5 crash_after_begin=1"])
        record = run_experiment(build(iterations=2), data_dir=tmp_path / "data")
        results = record.results[TestId("demo", "boom")]
        assert len(results) == 2
        assert all(r.crashed and r.status is TestStatus.FAIL for r in results)
        assert record.summaries[TestId("demo", "boom")].fail_count == 2

    def test_failed_tests_still_get_energy(self, sim_experiment):
        tmp_path, plan, scenario, build = sim_experiment
        write_plan(plan, ["test demo::fails sleep_ms=50 status=FAIL"])
        record = run_experiment(build(iterations=1), data_dir=tmp_path / "data")
        result = record.results[TestId("demo", "fails")][0]
        assert result.status is TestStatus.FAIL
        assert result.energy_j[PKG] > 0.0

    def test_baseline_calibration_cancels_constant_power(self, sim_experiment):
        tmp_path, _, _, build = sim_experiment
        config = build(baseline=BaselineSetting(mode="calibrate", calibrate_duration_s=2.0))
        record = run_experiment(config, data_dir=tmp_path / "data")
        for results in record.results.values():
            for result in results:
                assert result.baseline_applied
                assert result.energy_j[PKG] == pytest.approx(0.0, abs=0.02)

    def test_lock_refused_while_held(self, sim_experiment):
        tmp_path, _, _, build = sim_experiment
        data_dir = tmp_path / "data"
        data_dir.mkdir()
        (data_dir / "lock").write_text(str(os.getpid()))
        with pytest.raises(LockHeld):
            run_experiment(build(), data_dir=data_dir)

    def test_stale_lock_is_replaced(self, sim_experiment):
        tmp_path, _, _, build = sim_experiment
        data_dir = tmp_path / "data"
        data_dir.mkdir()
        (data_dir / "lock").write_text("999999999")
        record = run_experiment(build(iterations=1), data_dir=data_dir)
        assert record.summaries
        assert not (data_dir / "lock").exists()

    def test_spawn_failure_aborts_without_persisting(self, sim_experiment):
        tmp_path, _, scenario, build = sim_experiment
        from manai.errors import HarnessSpawnFailed
        from manai.harness import HarnessCommand

        config = build(
            harness=HarnessCommand(program="/nonexistent/harness", list_args=("--list",)),
            selection=(TestId("demo", "slow"),),
        )
        data_dir = tmp_path / "data"
        with pytest.raises(HarnessSpawnFailed):
            run_experiment(config, data_dir=data_dir)
        assert not (data_dir / "revisions").exists()
        assert not (data_dir / "lock").exists()

    def test_empty_selection_rejected(self, tmp_path):
        plan = write_plan(tmp_path / "plan.txt", ["# no tests declared"])
        scenario = write_scenario(tmp_path / "s.txt", [(NS, {"package": "1"})])
        config = ExperimentConfig(
            harness=fixture_harness_command(plan),
            sampling_rate_hz=10.0,
            iterations=1,
            revision_label="r",
            probe_backend=ProbeBackend.SIMULATED,
            scenario_path=scenario,
        )
        with pytest.raises(InvalidConfig):
            run_experiment(config, data_dir=tmp_path / "data")

    def test_config_digest_tracks_content(self, sim_experiment):
        _, _, _, build = sim_experiment
        assert config_digest(build()) == config_digest(build())
        assert config_digest(build()) != config_digest(build(iterations=5))


class TestConfigValidation:
    def test_bad_values_rejected(self, tmp_path):
        plan = write_plan(tmp_path / "plan.txt", ["test a::b"])
        cmd = fixture_harness_command(plan)
        with pytest.raises(InvalidConfig):
            ExperimentConfig(harness=cmd, sampling_rate_hz=0, iterations=1, revision_label="r")
        with pytest.raises(InvalidConfig):
            ExperimentConfig(harness=cmd, sampling_rate_hz=1, iterations=0, revision_label="r")
        with pytest.raises(InvalidConfig):
            ExperimentConfig(harness=cmd, sampling_rate_hz=1, iterations=1, revision_label="")
        with pytest.raises(InvalidConfig):
            ExperimentConfig(
                harness=cmd,
                sampling_rate_hz=1,
                iterations=1,
                revision_label="r",
                probe_backend=ProbeBackend.SIMULATED,
            )
