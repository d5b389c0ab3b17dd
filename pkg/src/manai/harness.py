"""Language-neutral test harness adapter.

Any executable that speaks the line-oriented marker protocol on standard
output can be profiled. The protocol (UTF-8, one marker per line):

    ##MANAI:TEST <suite>::<name>          declared during discovery
    ##MANAI:BEGIN <suite>::<name>         test body is starting
    ##MANAI:END <suite>::<name> <STATUS>  test finished; STATUS is PASS, FAIL or SKIP

The harness is told which single test to execute through the
``MANAI_FILTER`` environment variable. Marker timestamps are assigned by
this reader at line arrival on the parent's monotonic clock, so no clock
agreement with the child is needed; the pipe latency this adds is
sub-millisecond. Standard error passes through untouched. All other
stdout lines are ignored.
"""

from __future__ import annotations

import logging
import os
import queue
import subprocess
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Mapping

from manai.errors import HarnessProtocolError, HarnessSpawnFailed, ProtocolViolation, TestCrashed

logger = logging.getLogger(__name__)

MARKER_PREFIX = "##MANAI:"
FILTER_ENV = "MANAI_FILTER"

# Grace period for the child to exit after its END marker.
_EXIT_GRACE_S = 5.0


class TestStatus(Enum):
    PASS = "PASS"
    FAIL = "FAIL"
    SKIP = "SKIP"


class EventKind(Enum):
    DECLARED = "declared"
    BEGIN = "begin"
    END = "end"


@dataclass(frozen=True)
class TestId:
    """Identity of one test case, rendered ``suite::name``."""

    suite: str
    name: str

    def __post_init__(self):
        for part in (self.suite, self.name):
            if not part:
                raise ValueError("test id parts must be non-empty")
            if "::" in part or any(c.isspace() for c in part):
                raise ValueError(f"test id part {part!r} contains whitespace or '::'")

    def __str__(self) -> str:
        return f"{self.suite}::{self.name}"

    @classmethod
    def parse(cls, text: str) -> "TestId":
        suite, sep, name = text.partition("::")
        if not sep:
            raise ValueError(f"test id {text!r} is missing the '::' separator")
        return cls(suite, name)


@dataclass(frozen=True)
class HarnessCommand:
    """How to launch the harness, for runs and for discovery."""

    program: str
    args: tuple[str, ...] = ()
    working_dir: Path | None = None
    env: Mapping[str, str] = field(default_factory=dict)
    list_args: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.program:
            raise ValueError("harness program must be non-empty")
        object.__setattr__(self, "args", tuple(self.args))
        object.__setattr__(self, "list_args", tuple(self.list_args))


@dataclass(frozen=True)
class TestEvent:
    kind: EventKind
    test: TestId
    timestamp_ns: int
    status: TestStatus | None = None

    def __post_init__(self):
        if (self.status is not None) != (self.kind is EventKind.END):
            raise ValueError("status is present exactly on END events")


@dataclass(frozen=True)
class HarnessRun:
    """Outcome of one instrumented execution."""

    begin_ns: int
    end_ns: int
    status: TestStatus
    crashed: bool = False


def _parse_marker(line: str, timestamp_ns: int) -> TestEvent | None:
    """Parse one stdout line; None for non-protocol lines.

    Raises:
        HarnessProtocolError: The line carries the marker prefix but does
            not parse as a valid marker.
    """
    if not line.startswith(MARKER_PREFIX):
        return None
    body = line[len(MARKER_PREFIX):].rstrip("\n")
    word, _, rest = body.partition(" ")
    try:
        if word == "TEST":
            return TestEvent(EventKind.DECLARED, TestId.parse(rest.strip()), timestamp_ns)
        if word == "BEGIN":
            return TestEvent(EventKind.BEGIN, TestId.parse(rest.strip()), timestamp_ns)
        if word == "END":
            id_text, _, status_text = rest.strip().rpartition(" ")
            status = TestStatus(status_text)
            return TestEvent(EventKind.END, TestId.parse(id_text), timestamp_ns, status)
    except ValueError as exc:
        raise HarnessProtocolError(f"bad marker line {line!r}: {exc}") from exc
    raise HarnessProtocolError(f"unknown marker line {line!r}")


def _spawn(cmd: HarnessCommand, argv_tail: tuple[str, ...], extra_env: dict[str, str]):
    env = dict(os.environ)
    env.update(cmd.env)
    env.update(extra_env)
    try:
        return subprocess.Popen(
            [cmd.program, *argv_tail],
            cwd=str(cmd.working_dir) if cmd.working_dir else None,
            env=env,
            stdout=subprocess.PIPE,
            stderr=None,
            text=True,
            encoding="utf-8",
            errors="replace",
        )
    except OSError as exc:
        raise HarnessSpawnFailed(f"cannot launch {cmd.program!r}: {exc}") from exc


def discover(cmd: HarnessCommand, timeout_s: float = 60.0) -> list[TestId]:
    """Run the harness in discovery mode and collect declared tests.

    Declaration order is preserved; repeats are dropped. A repeat whose
    casing differs from the first declaration is reported as a warning,
    not an error.

    Raises:
        HarnessSpawnFailed: The process could not start or timed out.
        HarnessProtocolError: A marker-prefixed line failed to parse.
    """
    proc = _spawn(cmd, cmd.list_args, {})
    try:
        stdout, _ = proc.communicate(timeout=timeout_s)
    except subprocess.TimeoutExpired as exc:
        proc.kill()
        proc.communicate()
        raise HarnessSpawnFailed(f"discovery timed out after {timeout_s:.0f} s") from exc

    if proc.returncode != 0:
        logger.warning("discovery process exited with status %d", proc.returncode)

    seen_exact: set[TestId] = set()
    seen_folded: set[str] = set()
    tests: list[TestId] = []
    timestamp_ns = time.monotonic_ns()
    for line in stdout.splitlines():
        event = _parse_marker(line, timestamp_ns)
        if event is None or event.kind is not EventKind.DECLARED:
            continue
        if event.test in seen_exact:
            continue
        folded = str(event.test).lower()
        if folded in seen_folded:
            logger.warning("test %s re-declared with different casing", event.test)
            continue
        seen_exact.add(event.test)
        seen_folded.add(folded)
        tests.append(event.test)
    return tests


class _StdoutReader(threading.Thread):
    """Feeds (timestamp, line) pairs from the child into a queue."""

    def __init__(self, stream):
        super().__init__(daemon=True)
        self._stream = stream
        self.events: queue.Queue = queue.Queue()

    def run(self):
        try:
            for line in self._stream:
                self.events.put((time.monotonic_ns(), line))
        except ValueError:
            pass  # stream closed underneath us after a kill
        finally:
            self.events.put((time.monotonic_ns(), None))


def run_one(cmd: HarnessCommand, test: TestId, timeout_s: float | None = None) -> HarnessRun:
    """Execute exactly one test under the marker protocol.

    Launches ``program args`` with ``MANAI_FILTER`` naming the test and
    expects exactly one BEGIN/END pair for it.

    Args:
        cmd: Harness launch description (``args``, not ``list_args``).
        test: The test to filter for; must match the emitted markers.
        timeout_s: Overall wall-clock bound. The child is killed when it
            elapses and the run is reported as crashed.

    Raises:
        HarnessSpawnFailed: The process could not start.
        ProtocolViolation: Markers arrived that contradict the contract
            (wrong id, duplicate BEGIN, END without BEGIN, missing BEGIN).
        TestCrashed: The process exited or timed out before END; the
            observed begin/end bounds ride on the exception.
    """
    proc = _spawn(cmd, cmd.args, {FILTER_ENV: str(test)})
    reader = _StdoutReader(proc.stdout)
    reader.start()
    deadline_ns = None if timeout_s is None else time.monotonic_ns() + round(timeout_s * 1e9)

    begin_ns: int | None = None
    end_event: TestEvent | None = None

    def _abort(message: str) -> ProtocolViolation:
        proc.kill()
        proc.wait()
        return ProtocolViolation(message)

    try:
        while True:
            # After END, wait only one grace period for the child to wrap
            # up so a lingering process cannot stall the run forever.
            effective_deadline_ns = deadline_ns
            if end_event is not None:
                post_end_ns = end_event.timestamp_ns + round(_EXIT_GRACE_S * 1e9)
                if effective_deadline_ns is None:
                    effective_deadline_ns = post_end_ns
                else:
                    effective_deadline_ns = min(effective_deadline_ns, post_end_ns)
            remaining_s = None
            if effective_deadline_ns is not None:
                remaining_s = max(0.0, (effective_deadline_ns - time.monotonic_ns()) / 1e9)
            try:
                timestamp_ns, line = reader.events.get(timeout=remaining_s)
            except queue.Empty:
                if end_event is not None:
                    proc.kill()
                    proc.wait()
                    break
                exit_ns = time.monotonic_ns()
                proc.kill()
                proc.wait()
                raise TestCrashed(
                    f"test {test} timed out after {timeout_s:.1f} s",
                    begin_ns=begin_ns,
                    end_ns=exit_ns,
                ) from None

            if line is None:
                break
            try:
                event = _parse_marker(line, timestamp_ns)
            except HarnessProtocolError as exc:
                raise _abort(str(exc)) from exc
            if event is None or event.kind is EventKind.DECLARED:
                continue

            if event.kind is EventKind.BEGIN:
                if event.test != test:
                    raise _abort(f"BEGIN for {event.test}, expected {test}")
                if begin_ns is not None:
                    raise _abort(f"duplicate BEGIN for {test}")
                if end_event is not None:
                    raise _abort(f"BEGIN after END for {test}")
                begin_ns = event.timestamp_ns
            elif event.kind is EventKind.END:
                if event.test != test:
                    raise _abort(f"END for {event.test}, expected {test}")
                if begin_ns is None:
                    raise _abort(f"END without BEGIN for {test}")
                if end_event is not None:
                    raise _abort(f"duplicate END for {test}")
                end_event = event
    finally:
        _reap(proc, deadline_ns)

    exit_ns = time.monotonic_ns()
    if end_event is None:
        if begin_ns is None:
            raise ProtocolViolation(
                f"harness exited (status {proc.returncode}) without a BEGIN for {test}"
            )
        raise TestCrashed(
            f"harness exited (status {proc.returncode}) before END for {test}",
            begin_ns=begin_ns,
            end_ns=exit_ns,
        )
    return HarnessRun(
        begin_ns=begin_ns,
        end_ns=end_event.timestamp_ns,
        status=end_event.status,
        crashed=False,
    )


def _reap(proc: subprocess.Popen, deadline_ns: int | None) -> None:
    """Wait briefly for the child to exit; kill it if it lingers."""
    if proc.poll() is not None:
        return
    grace_s = _EXIT_GRACE_S
    if deadline_ns is not None:
        grace_s = min(grace_s, max(0.0, (deadline_ns - time.monotonic_ns()) / 1e9))
    try:
        proc.wait(timeout=grace_s)
    except subprocess.TimeoutExpired:
        logger.warning("harness lingered after run; killing pid %d", proc.pid)
        proc.kill()
        proc.wait()
