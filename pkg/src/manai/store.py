"""Revision-keyed persistence of experiment outcomes.

Records live as one JSON document per file under
``<data_dir>/revisions/<label>/<created_at>.record``; the layout is
human-browsable and diff-friendly, with no database dependency.
Re-running a revision appends a new timestamped record instead of
overwriting. Writes go to a dot-prefixed temporary and are renamed into
place, so readers never observe a partial record; they simply skip
temporaries.

Floating-point fields are serialized in shortest round-trip decimal form
(standard JSON float text), so save followed by load reproduces every
numeric field bit-exactly.
"""

from __future__ import annotations

import errno
import json
import os
import re
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Mapping

from manai.errors import StorageError, UnknownRevision
from manai.harness import TestId, TestStatus
from manai.probe import EnergyDomain
from manai.results import Stats, TestExecutionResult, TestSummary
from manai.sampler import EnergySample

FORMAT_VERSION = 1

_RECORD_SUFFIX = ".record"


@dataclass(frozen=True)
class RevisionRecord:
    """Everything one experiment run produced, keyed by revision."""

    revision_label: str
    created_at: str
    config_digest: str
    probe_backend: str
    probe_update_interval_ns: int
    probe_domains: tuple[EnergyDomain, ...]
    config: Mapping[str, str]
    summaries: Mapping[TestId, TestSummary]
    results: Mapping[TestId, tuple[TestExecutionResult, ...]]
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        if not self.revision_label:
            raise ValueError("revision label must be non-empty")
        if set(self.summaries) != set(self.results):
            raise ValueError("summaries and results must cover the same tests")


@dataclass(frozen=True)
class HistoryPoint:
    revision_label: str
    created_at: str
    summary: TestSummary


@dataclass(frozen=True)
class HistorySeries:
    """Chronological evolution of one test across stored records."""

    test: TestId
    points: tuple[HistoryPoint, ...]


# --- document (de)serialization -------------------------------------------


def _stats_to_doc(stats: Stats) -> dict:
    return {
        "mean": stats.mean,
        "median": stats.median,
        "min": stats.min,
        "max": stats.max,
        "stddev": stats.stddev,
    }


def _stats_from_doc(doc: dict) -> Stats:
    return Stats(doc["mean"], doc["median"], doc["min"], doc["max"], doc["stddev"])


def _domain_map_to_doc(mapping: Mapping[EnergyDomain, object], value_fn=lambda v: v) -> dict:
    return {str(d): value_fn(v) for d, v in sorted(mapping.items(), key=lambda kv: str(kv[0]))}


def _domain_map_from_doc(doc: dict, value_fn=lambda v: v) -> dict:
    return {EnergyDomain.parse(k): value_fn(v) for k, v in doc.items()}


def _sample_to_doc(sample: EnergySample) -> dict:
    return {
        "start_ns": sample.start_ns,
        "end_ns": sample.end_ns,
        "energy_uj": _domain_map_to_doc(sample.energy_uj),
    }


def _sample_from_doc(doc: dict) -> EnergySample:
    return EnergySample(
        start_ns=doc["start_ns"],
        end_ns=doc["end_ns"],
        energy_uj=_domain_map_from_doc(doc["energy_uj"]),
    )


def _result_to_doc(result: TestExecutionResult) -> dict:
    return {
        "iteration": result.iteration,
        "duration_ns": result.duration_ns,
        "status": result.status.value,
        "low_confidence": result.low_confidence,
        "baseline_applied": result.baseline_applied,
        "crashed": result.crashed,
        "error": result.error,
        "energy_j": _domain_map_to_doc(result.energy_j),
        "mean_power_w": _domain_map_to_doc(result.mean_power_w),
        "samples": [_sample_to_doc(s) for s in result.samples],
    }


def _result_from_doc(test: TestId, doc: dict) -> TestExecutionResult:
    return TestExecutionResult(
        test=test,
        iteration=doc["iteration"],
        duration_ns=doc["duration_ns"],
        energy_j=_domain_map_from_doc(doc["energy_j"]),
        mean_power_w=_domain_map_from_doc(doc["mean_power_w"]),
        samples=tuple(_sample_from_doc(s) for s in doc["samples"]),
        status=TestStatus(doc["status"]),
        low_confidence=doc["low_confidence"],
        baseline_applied=doc["baseline_applied"],
        crashed=doc["crashed"],
        error=doc["error"],
    )


def _summary_to_doc(summary: TestSummary) -> dict:
    return {
        "iterations": summary.iterations,
        "mean_duration_s": summary.mean_duration_s,
        "any_low_confidence": summary.any_low_confidence,
        "pass_count": summary.pass_count,
        "fail_count": summary.fail_count,
        "skip_count": summary.skip_count,
        "energy_j": _domain_map_to_doc(summary.energy_stats, _stats_to_doc),
        "power_w": _domain_map_to_doc(summary.power_stats, _stats_to_doc),
    }


def _summary_from_doc(test: TestId, doc: dict) -> TestSummary:
    return TestSummary(
        test=test,
        iterations=doc["iterations"],
        energy_stats=_domain_map_from_doc(doc["energy_j"], _stats_from_doc),
        power_stats=_domain_map_from_doc(doc["power_w"], _stats_from_doc),
        mean_duration_s=doc["mean_duration_s"],
        any_low_confidence=doc["any_low_confidence"],
        pass_count=doc["pass_count"],
        fail_count=doc["fail_count"],
        skip_count=doc["skip_count"],
    )


def record_to_doc(record: RevisionRecord) -> dict:
    return {
        "format_version": record.format_version,
        "revision_label": record.revision_label,
        "created_at": record.created_at,
        "config_digest": record.config_digest,
        "probe": {
            "backend": record.probe_backend,
            "update_interval_ns": record.probe_update_interval_ns,
            "domains": [str(d) for d in record.probe_domains],
        },
        "config": dict(sorted(record.config.items())),
        "summaries": {
            str(t): _summary_to_doc(s)
            for t, s in sorted(record.summaries.items(), key=lambda kv: str(kv[0]))
        },
        "results": {
            str(t): [_result_to_doc(r) for r in rs]
            for t, rs in sorted(record.results.items(), key=lambda kv: str(kv[0]))
        },
    }


def record_from_doc(doc: dict) -> RevisionRecord:
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise StorageError(f"unsupported record format_version {version!r}")
    summaries = {
        TestId.parse(t): _summary_from_doc(TestId.parse(t), s)
        for t, s in doc["summaries"].items()
    }
    results = {
        TestId.parse(t): tuple(_result_from_doc(TestId.parse(t), r) for r in rs)
        for t, rs in doc["results"].items()
    }
    return RevisionRecord(
        revision_label=doc["revision_label"],
        created_at=doc["created_at"],
        config_digest=doc["config_digest"],
        probe_backend=doc["probe"]["backend"],
        probe_update_interval_ns=doc["probe"]["update_interval_ns"],
        probe_domains=tuple(EnergyDomain.parse(d) for d in doc["probe"]["domains"]),
        config=doc["config"],
        summaries=summaries,
        results=results,
        format_version=version,
    )


def render_record(record: RevisionRecord) -> str:
    """The canonical on-disk text of a record (also the machine export)."""
    return json.dumps(record_to_doc(record), indent=2, sort_keys=True) + "\n"


# --- the store itself ------------------------------------------------------


def _sanitize_label(label: str) -> str:
    safe = re.sub(r"[^A-Za-z0-9._-]", "_", label)
    return safe or "_"


def _file_stamp(created_at: str) -> str:
    return re.sub(r"[^0-9TZ.]", "", created_at.replace("+00:00", "Z"))


class Store:
    """File-backed record storage under one data directory.

    Single writer (the experiment lock enforces that), any number of
    readers. Stored records are never mutated.
    """

    def __init__(self, data_dir: Path | str):
        self.data_dir = Path(data_dir)

    @property
    def revisions_dir(self) -> Path:
        return self.data_dir / "revisions"

    def save(self, record: RevisionRecord) -> Path:
        """Atomically persist ``record``; returns the file written.

        Saving the same revision label again appends a new record.

        Raises:
            StorageError: The directory is not writable or the device
                is full. A failed save never leaves a partial record
                visible.
        """
        target_dir = self.revisions_dir / _sanitize_label(record.revision_label)
        try:
            target_dir.mkdir(parents=True, exist_ok=True)
            text = render_record(record)
            stamp = _file_stamp(record.created_at)
            target = target_dir / f"{stamp}{_RECORD_SUFFIX}"
            counter = 1
            while target.exists():
                target = target_dir / f"{stamp}-{counter}{_RECORD_SUFFIX}"
                counter += 1
            fd, tmp_name = tempfile.mkstemp(prefix=".tmp-", dir=target_dir)
            try:
                with os.fdopen(fd, "w", encoding="utf-8") as handle:
                    handle.write(text)
                    handle.flush()
                    os.fsync(handle.fileno())
                os.replace(tmp_name, target)
            except BaseException:
                try:
                    os.unlink(tmp_name)
                except OSError:
                    pass
                raise
        except OSError as exc:
            if exc.errno == errno.ENOSPC:
                raise StorageError("storage full while saving record") from exc
            raise StorageError(f"cannot save record: {exc}") from exc
        return target

    def _iter_record_files(self) -> Iterator[Path]:
        root = self.revisions_dir
        if not root.is_dir():
            return
        for label_dir in sorted(root.iterdir()):
            if not label_dir.is_dir():
                continue
            for path in sorted(label_dir.iterdir()):
                # Dot-prefixed files are in-flight temporaries.
                if path.name.startswith(".") or path.suffix != _RECORD_SUFFIX:
                    continue
                yield path

    def _read_record(self, path: Path) -> RevisionRecord:
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise StorageError(f"unreadable record {path}: {exc}") from exc
        return record_from_doc(doc)

    def iter_records(self) -> Iterator[RevisionRecord]:
        for path in self._iter_record_files():
            yield self._read_record(path)

    def load(self, revision_label: str) -> list[RevisionRecord]:
        """All records stored under ``revision_label``, oldest first.

        Raises:
            UnknownRevision: Nothing is stored under that label.
        """
        records = [
            r for r in self.iter_records() if r.revision_label == revision_label
        ]
        if not records:
            raise UnknownRevision(f"no records for revision {revision_label!r}")
        records.sort(key=lambda r: r.created_at)
        return records

    def latest(self, revision_label: str) -> RevisionRecord:
        return self.load(revision_label)[-1]

    def history(self, test: TestId, limit: int | None = None) -> HistorySeries:
        """Evolution of ``test`` across all records, newest last.

        Unknown tests yield an empty series. ``limit`` keeps only the
        most recent points.
        """
        points = [
            HistoryPoint(r.revision_label, r.created_at, r.summaries[test])
            for r in self.iter_records()
            if test in r.summaries
        ]
        points.sort(key=lambda p: p.created_at)
        if limit is not None:
            points = points[-limit:]
        return HistorySeries(test=test, points=tuple(points))
