"""Experiment runner: replicable per-test energy experiments.

Binds a harness command, a probe and a sampler configuration, executes
each selected test for a configured number of iterations, attributes
energy to each execution window, aggregates statistics and persists the
outcome keyed by revision label.

Execution timing depends on the probe backend:

* RAPL: a sampling thread polls the live counters while the test child
  runs; execution windows are the marker arrival timestamps.
* Simulated: the child still runs for real (its status and measured
  duration are real), but samples are then generated on a virtual clock
  over the scenario, with the window anchored at the scenario origin and
  the duration floored to the counter refresh grid. Re-running the same
  configuration therefore reproduces every stored number bit-exactly, as
  long as test durations exceed the refresh interval and scheduling
  jitter stays below it. Sub-interval durations are kept as measured
  (they are low-confidence either way).

Exactly one experiment may run per data directory; a lock file holding
the owner's process id enforces that. Note that RAPL counters are
machine-wide: anything else running on the host during an experiment
contaminates the readings, so results carry the probe backend used.
"""

from __future__ import annotations

import hashlib
import logging
import os
import shlex
import subprocess
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Mapping

from manai.clock import DeadlineStop, VirtualScheduler
from manai.errors import (
    InvalidConfig,
    LockHeld,
    ProbeLost,
    ProtocolViolation,
    TestCrashed,
)
from manai.harness import HarnessCommand, TestId, TestStatus, discover, run_one
from manai.probe import (
    Probe,
    ProbeBackend,
    ProbeDescriptor,
    RaplProbe,
    SimulatedProbe,
    SimulationScenario,
    load_scenario,
)
from manai.results import TestExecutionResult, TestSummary, attribute, summarize
from manai.sampler import BaselineProfile, SamplerConfig, calibrate_baseline, sample_stream
from manai.store import RevisionRecord, Store

__all__ = [
    "BaselineSetting",
    "ExperimentConfig",
    "attribute",
    "summarize",
    "resolve_revision_label",
    "run_experiment",
]

logger = logging.getLogger(__name__)

DEFAULT_DATA_DIR = Path(".manai")


@dataclass(frozen=True)
class BaselineSetting:
    """Idle-power handling: off, calibrate before the run, or a fixed profile."""

    mode: str = "off"
    calibrate_duration_s: float | None = None
    profile: BaselineProfile | None = None

    def __post_init__(self):
        if self.mode not in ("off", "calibrate", "fixed"):
            raise InvalidConfig(f"unknown baseline mode {self.mode!r}")
        if self.mode == "calibrate" and (self.calibrate_duration_s or 0) < 1.0:
            raise InvalidConfig("baseline calibration needs a duration of at least 1 s")
        if self.mode == "fixed" and self.profile is None:
            raise InvalidConfig("fixed baseline requires a profile")

    def describe(self) -> str:
        if self.mode == "calibrate":
            return f"calibrate:{self.calibrate_duration_s:g}"
        if self.mode == "fixed":
            powers = ",".join(
                f"{d}={w!r}" for d, w in sorted(self.profile.powers_w.items(), key=lambda kv: str(kv[0]))
            )
            return f"fixed:{powers}"
        return "off"


@dataclass(frozen=True)
class ExperimentConfig:
    """The replicable unit: what to run, how often, and how to measure it."""

    harness: HarnessCommand
    sampling_rate_hz: float
    iterations: int
    revision_label: str
    selection: tuple[TestId, ...] = ()
    probe_backend: ProbeBackend = ProbeBackend.RAPL
    scenario_path: Path | None = None
    baseline: BaselineSetting = field(default_factory=BaselineSetting)
    update_interval_ns: int | None = None
    test_timeout_s: float | None = 120.0

    def __post_init__(self):
        if self.sampling_rate_hz <= 0:
            raise InvalidConfig("sampling rate must be positive")
        if self.iterations < 1:
            raise InvalidConfig("iterations must be at least 1")
        if not self.revision_label:
            raise InvalidConfig("revision label must be non-empty (no VCS head found?)")
        if self.probe_backend is ProbeBackend.SIMULATED and self.scenario_path is None:
            raise InvalidConfig("simulated probe requires a scenario path")
        object.__setattr__(self, "selection", tuple(self.selection))


def effective_config_items(config: ExperimentConfig, data_dir: Path | None = None) -> list[tuple[str, str]]:
    """Canonical key=value view of a config.

    This is what `run` echoes, what the record stores, and what the
    config digest hashes (minus the data directory, which does not alter
    the experiment itself).
    """
    items = [
        ("experiment.baseline", config.baseline.describe()),
        ("experiment.iterations", str(config.iterations)),
        ("experiment.rate_hz", f"{config.sampling_rate_hz!r}"),
        ("experiment.revision", config.revision_label),
        (
            "experiment.selection",
            ",".join(str(t) for t in config.selection) if config.selection else "<discovered>",
        ),
        ("experiment.timeout_s", f"{config.test_timeout_s!r}"),
        ("harness.args", shlex.join(config.harness.args)),
        (
            "harness.env",
            ",".join(f"{k}={v}" for k, v in sorted(config.harness.env.items())),
        ),
        ("harness.list_args", shlex.join(config.harness.list_args)),
        ("harness.program", config.harness.program),
        ("harness.working_dir", str(config.harness.working_dir or "")),
        ("probe.backend", config.probe_backend.value),
        ("probe.scenario", str(config.scenario_path or "")),
        ("probe.update_interval_ns", str(config.update_interval_ns or "default")),
    ]
    if data_dir is not None:
        items.append(("store.data_dir", str(data_dir)))
    return items


def config_digest(config: ExperimentConfig) -> str:
    text = "\n".join(f"{k}={v}" for k, v in effective_config_items(config))
    return "sha256:" + hashlib.sha256(text.encode("utf-8")).hexdigest()


def resolve_revision_label(explicit: str | None, cwd: Path | None = None) -> str:
    """Explicit label, or the VCS head hash of ``cwd`` when available.

    Raises:
        InvalidConfig: Neither an explicit label nor a git head exists.
    """
    if explicit:
        return explicit
    try:
        proc = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            cwd=cwd,
            capture_output=True,
            text=True,
            timeout=10,
        )
    except (OSError, subprocess.TimeoutExpired):
        proc = None
    if proc is not None and proc.returncode == 0 and proc.stdout.strip():
        return proc.stdout.strip()
    raise InvalidConfig("no revision label given and no git HEAD found; pass --revision")


class _DataDirLock:
    """Pid-stamped lock file allowing one experiment per data directory."""

    def __init__(self, data_dir: Path):
        self.path = data_dir / "lock"

    def acquire(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        for _ in range(2):
            try:
                fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
                with os.fdopen(fd, "w") as handle:
                    handle.write(str(os.getpid()))
                return
            except FileExistsError:
                if self._holder_alive():
                    raise LockHeld(
                        f"another experiment holds {self.path} "
                        f"(pid {self.path.read_text().strip() or '?'})"
                    ) from None
                logger.warning("removing stale lock %s", self.path)
                try:
                    self.path.unlink()
                except FileNotFoundError:
                    pass
        raise LockHeld(f"could not acquire {self.path}")

    def _holder_alive(self) -> bool:
        try:
            pid = int(self.path.read_text().strip())
        except (OSError, ValueError):
            return False
        try:
            os.kill(pid, 0)
        except ProcessLookupError:
            return False
        except PermissionError:
            return True
        return True

    def release(self) -> None:
        try:
            self.path.unlink()
        except FileNotFoundError:
            pass


def _quantize_duration_ns(duration_ns: int, update_interval_ns: int) -> int:
    """Snap a measured duration onto the counter refresh grid.

    Durations shorter than one interval are kept as measured; flooring
    them would collapse the window entirely.
    """
    if duration_ns < update_interval_ns:
        return max(duration_ns, 1)
    return (duration_ns // update_interval_ns) * update_interval_ns


def _run_simulated_iteration(
    scenario: SimulationScenario,
    config: ExperimentConfig,
    descriptor: ProbeDescriptor,
    baseline_w: Mapping | None,
    test: TestId,
    iteration: int,
) -> TestExecutionResult:
    outcome_error = None
    crashed = False
    try:
        run = run_one(config.harness, test, timeout_s=config.test_timeout_s)
        duration_ns = max(1, run.end_ns - run.begin_ns)
        status = run.status
    except TestCrashed as exc:
        crashed = True
        outcome_error = str(exc)
        status = TestStatus.FAIL
        duration_ns = max(1, (exc.end_ns or 0) - (exc.begin_ns or exc.end_ns or 0))

    duration_ns = _quantize_duration_ns(duration_ns, scenario.update_interval_ns)

    scheduler = VirtualScheduler()
    probe = SimulatedProbe(scenario, clock=scheduler.now)
    stop = DeadlineStop(scheduler.now, duration_ns)
    samples = sample_stream(
        probe, SamplerConfig(config.sampling_rate_hz, baseline_w), stop, scheduler
    )
    return TestExecutionResult.build(
        test=test,
        iteration=iteration,
        samples=samples,
        begin_ns=0,
        end_ns=duration_ns,
        status=status,
        update_interval_ns=scenario.update_interval_ns,
        baseline_applied=baseline_w is not None,
        crashed=crashed,
        error=outcome_error,
        domains=descriptor.domains,
    )


def _run_live_iteration(
    probe: Probe,
    config: ExperimentConfig,
    descriptor: ProbeDescriptor,
    baseline_w: Mapping | None,
    test: TestId,
    iteration: int,
) -> TestExecutionResult:
    stop = threading.Event()
    collected: dict = {}

    def _sampling_task():
        try:
            collected["samples"] = sample_stream(
                probe, SamplerConfig(config.sampling_rate_hz, baseline_w), stop
            )
        except ProbeLost as exc:
            collected["error"] = exc

    sampler_thread = threading.Thread(target=_sampling_task, name="manai-sampler")
    sampler_thread.start()
    outcome_error = None
    crashed = False
    try:
        run = run_one(config.harness, test, timeout_s=config.test_timeout_s)
        begin_ns, end_ns, status = run.begin_ns, run.end_ns, run.status
    except TestCrashed as exc:
        crashed = True
        outcome_error = str(exc)
        status = TestStatus.FAIL
        end_ns = exc.end_ns
        begin_ns = exc.begin_ns if exc.begin_ns is not None else end_ns - 1
    finally:
        stop.set()
        sampler_thread.join()

    if "error" in collected:
        raise collected["error"]
    samples = collected.get("samples", [])

    # Rebase onto the sampling origin so stored times are run-relative.
    origin_ns = samples[0].start_ns if samples else begin_ns
    rebased = [
        type(s)(s.start_ns - origin_ns, s.end_ns - origin_ns, s.energy_uj) for s in samples
    ]
    return TestExecutionResult.build(
        test=test,
        iteration=iteration,
        samples=rebased,
        begin_ns=begin_ns - origin_ns,
        end_ns=max(end_ns - origin_ns, begin_ns - origin_ns + 1),
        status=status,
        update_interval_ns=descriptor.update_interval_ns,
        baseline_applied=baseline_w is not None,
        crashed=crashed,
        error=outcome_error,
        domains=descriptor.domains,
    )


def _protocol_failure_result(
    test: TestId,
    iteration: int,
    message: str,
    descriptor: ProbeDescriptor,
    baseline_applied: bool,
) -> TestExecutionResult:
    return TestExecutionResult(
        test=test,
        iteration=iteration,
        duration_ns=0,
        energy_j={d: 0.0 for d in descriptor.domains},
        mean_power_w={d: 0.0 for d in descriptor.domains},
        samples=(),
        status=TestStatus.FAIL,
        low_confidence=True,
        baseline_applied=baseline_applied,
        crashed=False,
        error=f"protocol violation: {message}",
    )


def run_experiment(
    config: ExperimentConfig,
    data_dir: Path | str = DEFAULT_DATA_DIR,
    progress=None,
) -> RevisionRecord:
    """Execute the experiment and persist one revision record.

    Tests run strictly sequentially in selection order; the iterations of
    one test are consecutive. A protocol-violating test is recorded as a
    failure and skipped for its remaining iterations; the experiment
    continues with the next test. Spawn failures and probe loss abort the
    whole experiment without persisting anything.

    Args:
        config: The experiment definition.
        data_dir: Where the lock and the record store live.
        progress: Optional callable taking one human-readable line per
            finished test.

    Raises:
        InvalidConfig, NoProbeAvailable, PermissionDenied,
        HarnessSpawnFailed, ProbeLost, LockHeld, StorageError.
    """
    data_dir = Path(data_dir)
    scenario: SimulationScenario | None = None
    live_probe: Probe | None = None
    if config.probe_backend is ProbeBackend.SIMULATED:
        scenario = load_scenario(config.scenario_path)
        descriptor = SimulatedProbe(scenario).describe()
    else:
        live_probe = RaplProbe(
            powercap_root=os.environ.get("MANAI_POWERCAP_ROOT", "/sys/class/powercap"),
            update_interval_ns=config.update_interval_ns or 1_000_000,
        )
        descriptor = live_probe.describe()

    lock = _DataDirLock(data_dir)
    lock.acquire()
    try:
        selection = list(config.selection)
        if not selection:
            selection = discover(config.harness)
        if not selection:
            raise InvalidConfig("test selection is empty after discovery")

        baseline_w = None
        if config.baseline.mode == "fixed":
            baseline_w = dict(config.baseline.profile.powers_w)
        elif config.baseline.mode == "calibrate":
            if scenario is not None:
                sched = VirtualScheduler()
                cal_probe = SimulatedProbe(scenario, clock=sched.now)
                baseline_w = dict(
                    calibrate_baseline(cal_probe, config.baseline.calibrate_duration_s, sched).powers_w
                )
            else:
                baseline_w = dict(
                    calibrate_baseline(live_probe, config.baseline.calibrate_duration_s).powers_w
                )

        summaries: dict[TestId, TestSummary] = {}
        results: dict[TestId, tuple[TestExecutionResult, ...]] = {}
        for test in selection:
            iteration_results: list[TestExecutionResult] = []
            for iteration in range(config.iterations):
                try:
                    if scenario is not None:
                        result = _run_simulated_iteration(
                            scenario, config, descriptor, baseline_w, test, iteration
                        )
                    else:
                        result = _run_live_iteration(
                            live_probe, config, descriptor, baseline_w, test, iteration
                        )
                except ProtocolViolation as exc:
                    logger.warning("test %s violated the protocol: %s", test, exc)
                    iteration_results.append(
                        _protocol_failure_result(
                            test, iteration, str(exc), descriptor, baseline_w is not None
                        )
                    )
                    break
                iteration_results.append(result)
            summaries[test] = summarize(iteration_results)
            results[test] = tuple(iteration_results)
            if progress is not None:
                progress(_progress_line(summaries[test], descriptor))

        record = RevisionRecord(
            revision_label=config.revision_label,
            created_at=datetime.now(timezone.utc).isoformat(timespec="microseconds"),
            config_digest=config_digest(config),
            probe_backend=config.probe_backend.value,
            probe_update_interval_ns=descriptor.update_interval_ns,
            probe_domains=descriptor.domains,
            config=dict(effective_config_items(config)),
            summaries=summaries,
            results=results,
        )
        Store(data_dir).save(record)
        return record
    finally:
        lock.release()


def _progress_line(summary: TestSummary, descriptor: ProbeDescriptor) -> str:
    lead_domain = descriptor.domains[0]
    stats = summary.energy_stats.get(lead_domain)
    energy = f"{stats.mean:.3g} J" if stats else "n/a"
    flags = " low-confidence" if summary.any_low_confidence else ""
    return (
        f"{summary.test}: {summary.iterations} iteration(s), "
        f"mean {lead_domain} energy {energy}, "
        f"{summary.pass_count}P/{summary.fail_count}F/{summary.skip_count}S{flags}"
    )
