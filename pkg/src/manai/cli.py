"""Command line front-end.

Subcommands: probe-check, list, run, report, compare, baseline. All
commands are non-interactive and run without a terminal attached.
Diagnostics go to standard error; exit codes follow a fixed contract:
0 success, 1 user or configuration error, 2 environment error (probe or
harness unavailable), 3 internal error.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import shlex
import sys
from pathlib import Path

from manai import errors
from manai.clock import RealScheduler
from manai.experiment import (
    DEFAULT_DATA_DIR,
    BaselineSetting,
    ExperimentConfig,
    effective_config_items,
    resolve_revision_label,
    run_experiment,
)
from manai.harness import HarnessCommand, TestId, discover
from manai.probe import EnergyDomain, ProbeBackend, create_probe
from manai.report import ReportFormat, ReportRequest, export, render_summary
from manai.sampler import BaselineProfile, calibrate_baseline
from manai.store import Store

log = logging.getLogger("manai")

EXIT_OK = 0
EXIT_USER = 1
EXIT_ENV = 2
EXIT_INTERNAL = 3

DATA_DIR_ENV = "MANAI_DATA_DIR"

_USER_ERRORS = (
    errors.InvalidConfig,
    errors.MalformedScenario,
    errors.UnknownRevision,
    errors.EmptyScope,
    errors.NoHistory,
    errors.EmptyInput,
)
_ENV_ERRORS = (
    errors.NoProbeAvailable,
    errors.PermissionDenied,
    errors.ReadFailed,
    errors.ProbeLost,
    errors.HarnessSpawnFailed,
    errors.LockHeld,
    errors.StorageError,
)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with code 2 on bad usage; our contract reserves 2
    # for environment errors, so route usage problems through exit 1.
    def error(self, message):
        raise _UsageError(message)


# --------------------------------------------------------------------------
# config file
# --------------------------------------------------------------------------

_KNOWN_KEYS = {
    "harness": {"program", "args", "list_args", "working_dir", "timeout_s"},
    "probe": {"backend", "scenario", "update_interval_ns", "powercap_root"},
    "experiment": {"rate_hz", "iterations", "select", "revision", "baseline", "data_dir"},
}


def _load_config_file(path: Path) -> dict[str, dict[str, str]]:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # preserve case for env.NAME keys
    try:
        with open(path, encoding="utf-8") as handle:
            parser.read_file(handle)
    except OSError as exc:
        raise errors.InvalidConfig(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise errors.InvalidConfig(f"malformed config {path}: {exc}") from exc

    sections: dict[str, dict[str, str]] = {}
    for section in parser.sections():
        if section not in _KNOWN_KEYS:
            raise errors.InvalidConfig(f"unknown config section [{section}]")
        values = dict(parser.items(section))
        for key in values:
            if key in _KNOWN_KEYS[section]:
                continue
            if section == "harness" and key.startswith("env."):
                continue
            raise errors.InvalidConfig(f"unknown config key {key!r} in [{section}]")
        sections[section] = values
    return sections


def _build_harness(cfg: dict[str, dict[str, str]], args) -> HarnessCommand:
    section = cfg.get("harness", {})
    program = section.get("program", "")
    harness_args = shlex.split(section.get("args", ""))
    list_args = shlex.split(section.get("list_args", ""))
    if getattr(args, "harness", None):
        parts = shlex.split(args.harness)
        program, harness_args = parts[0], parts[1:]
    if getattr(args, "list_args", None) is not None:
        list_args = shlex.split(args.list_args)
    if not program:
        raise errors.InvalidConfig("no harness configured; set [harness] program or --harness")
    env = {
        key[len("env."):]: value
        for key, value in section.items()
        if key.startswith("env.")
    }
    working_dir = section.get("working_dir")
    return HarnessCommand(
        program=program,
        args=tuple(harness_args),
        working_dir=Path(working_dir) if working_dir else None,
        env=env,
        list_args=tuple(list_args),
    )


def _setting(args, cfg, flag: str, section: str, key: str, default=None):
    value = getattr(args, flag, None)
    if value is not None:
        return value
    return cfg.get(section, {}).get(key, default)


def _data_dir(args, cfg) -> Path:
    if getattr(args, "data_dir", None):
        return Path(args.data_dir)
    env_dir = os.environ.get(DATA_DIR_ENV)
    if env_dir:
        return Path(env_dir)
    cfg_dir = cfg.get("experiment", {}).get("data_dir")
    return Path(cfg_dir) if cfg_dir else DEFAULT_DATA_DIR


def _parse_baseline(text: str | None) -> BaselineSetting:
    if not text or text == "off":
        return BaselineSetting()
    if text.startswith("calibrate:"):
        try:
            return BaselineSetting(mode="calibrate", calibrate_duration_s=float(text.split(":", 1)[1]))
        except ValueError as exc:
            raise errors.InvalidConfig(f"bad baseline {text!r}: {exc}") from exc
    if text.startswith("fixed:"):
        profile_path = Path(text.split(":", 1)[1])
        try:
            doc = json.loads(profile_path.read_text(encoding="utf-8"))
            profile = BaselineProfile(
                powers_w={EnergyDomain.parse(k): float(v) for k, v in doc["powers_w"].items()},
                duration_s=float(doc["duration_s"]),
                calibrated_at=str(doc["calibrated_at"]),
            )
        except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
            raise errors.InvalidConfig(f"cannot load baseline profile {profile_path}: {exc}") from exc
        return BaselineSetting(mode="fixed", profile=profile)
    raise errors.InvalidConfig(f"bad baseline {text!r}; use off, calibrate:<secs> or fixed:<path>")


def _parse_selection(text: str | None) -> tuple[TestId, ...]:
    if not text:
        return ()
    try:
        return tuple(TestId.parse(part.strip()) for part in text.split(",") if part.strip())
    except ValueError as exc:
        raise errors.InvalidConfig(str(exc)) from exc


def _probe_backend(text: str | None) -> ProbeBackend:
    if text is None:
        return ProbeBackend.RAPL
    try:
        return ProbeBackend(text)
    except ValueError:
        raise errors.InvalidConfig(f"unknown probe backend {text!r}") from None


def _build_experiment_config(args, cfg) -> ExperimentConfig:
    backend = _probe_backend(_setting(args, cfg, "probe", "probe", "backend"))
    scenario = _setting(args, cfg, "scenario", "probe", "scenario")
    update_interval = _setting(args, cfg, "update_interval_ns", "probe", "update_interval_ns")
    rate = _setting(args, cfg, "rate", "experiment", "rate_hz", "100")
    iterations = _setting(args, cfg, "iterations", "experiment", "iterations", "1")
    timeout = _setting(args, cfg, "timeout", "harness", "timeout_s", "120")
    try:
        rate_hz = float(rate)
        iterations = int(iterations)
        timeout_s = float(timeout) if str(timeout) not in ("none", "") else None
        update_interval_ns = int(update_interval) if update_interval else None
    except ValueError as exc:
        raise errors.InvalidConfig(f"bad numeric option: {exc}") from exc

    return ExperimentConfig(
        harness=_build_harness(cfg, args),
        sampling_rate_hz=rate_hz,
        iterations=iterations,
        revision_label=resolve_revision_label(
            _setting(args, cfg, "revision", "experiment", "revision")
        ),
        selection=_parse_selection(_setting(args, cfg, "select", "experiment", "select")),
        probe_backend=backend,
        scenario_path=Path(scenario) if scenario else None,
        baseline=_parse_baseline(_setting(args, cfg, "baseline", "experiment", "baseline")),
        update_interval_ns=update_interval_ns,
        test_timeout_s=timeout_s,
    )


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def _cmd_probe_check(args, cfg) -> int:
    backend = _probe_backend(_setting(args, cfg, "probe", "probe", "backend"))
    scenario = _setting(args, cfg, "scenario", "probe", "scenario")
    update_interval = _setting(args, cfg, "update_interval_ns", "probe", "update_interval_ns")
    probe = create_probe(
        backend,
        scenario_path=Path(scenario) if scenario else None,
        powercap_root=cfg.get("probe", {}).get("powercap_root"),
        update_interval_ns=int(update_interval) if update_interval else None,
    )
    descriptor = probe.describe()
    print(f"backend: {descriptor.backend.value}")
    print(f"update interval: {descriptor.update_interval_ns} ns")
    reading = probe.read()
    for domain in descriptor.domains:
        print(
            f"domain {domain}: counter {reading.counters[domain]} uJ, "
            f"range {reading.max_range[domain]} uJ, read permission ok"
        )
    return EXIT_OK


def _cmd_list(args, cfg) -> int:
    for test in discover(_build_harness(cfg, args)):
        print(test)
    return EXIT_OK


def _cmd_run(args, cfg) -> int:
    config = _build_experiment_config(args, cfg)
    data_dir = _data_dir(args, cfg)
    for key, value in effective_config_items(config, data_dir=data_dir):
        print(f"config {key} = {value}")
    record = run_experiment(config, data_dir=data_dir, progress=print)
    print()
    request = ReportRequest(
        scope="revision",
        revisions=(record.revision_label,),
        fmt=ReportFormat.TERM,
        no_color=args.no_color,
        width=args.width,
    )
    print(render_summary(Store(data_dir), request), end="")
    return EXIT_OK


def _report_format(text: str) -> ReportFormat:
    try:
        return ReportFormat(text)
    except ValueError:
        raise errors.InvalidConfig(f"unknown format {text!r}") from None


def _parse_domains(text: str | None) -> tuple[EnergyDomain, ...] | None:
    if not text:
        return None
    try:
        return tuple(EnergyDomain.parse(part.strip()) for part in text.split(","))
    except ValueError as exc:
        raise errors.InvalidConfig(str(exc)) from exc


def _cmd_report(args, cfg) -> int:
    data_dir = _data_dir(args, cfg)
    fmt = _report_format(args.format)
    out = Path(args.out) if args.out else None
    if args.evolution:
        request = ReportRequest(
            scope="history",
            tests=_parse_selection(args.evolution),
            limit=args.limit,
            domains=_parse_domains(args.domains),
            fmt=fmt,
            output_path=out,
            no_color=args.no_color,
            width=args.width,
        )
    elif args.revision:
        request = ReportRequest(
            scope="revision",
            revisions=(args.revision,),
            domains=_parse_domains(args.domains),
            fmt=fmt,
            output_path=out,
            no_color=args.no_color,
            width=args.width,
        )
    else:
        raise _UsageError("report needs --revision or --evolution")
    text = export(Store(data_dir), request)
    if out is None:
        print(text, end="")
    else:
        log.info("wrote %s", out)
    return EXIT_OK


def _cmd_compare(args, cfg) -> int:
    data_dir = _data_dir(args, cfg)
    request = ReportRequest(
        scope="compare",
        revisions=(args.revision_a, args.revision_b),
        domains=_parse_domains(args.domains),
        fmt=_report_format(args.format),
        output_path=Path(args.out) if args.out else None,
        no_color=args.no_color,
        width=args.width,
    )
    text = export(Store(data_dir), request)
    if request.output_path is None:
        print(text, end="")
    return EXIT_OK


def _cmd_baseline(args, cfg) -> int:
    backend = _probe_backend(_setting(args, cfg, "probe", "probe", "backend"))
    scenario = _setting(args, cfg, "scenario", "probe", "scenario")
    probe = create_probe(
        backend,
        scenario_path=Path(scenario) if scenario else None,
        powercap_root=cfg.get("probe", {}).get("powercap_root"),
    )
    print(
        f"calibrating idle baseline for {args.duration:.1f} s; "
        "keep the machine quiescent",
        file=sys.stderr,
    )
    profile = calibrate_baseline(probe, args.duration, RealScheduler())
    doc = {
        "powers_w": {str(d): w for d, w in sorted(profile.powers_w.items(), key=lambda kv: str(kv[0]))},
        "duration_s": profile.duration_s,
        "calibrated_at": profile.calibrated_at,
    }
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        log.info("wrote %s", args.out)
    else:
        print(text, end="")
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="config file (key=value sections)")
    parser.add_argument("--data-dir", help="data directory (default .manai, env MANAI_DATA_DIR)")
    parser.add_argument("--no-color", action="store_true", help="plain terminal output")
    parser.add_argument("--width", type=int, default=None, help="terminal width override")


def _add_probe_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--probe", choices=["rapl", "simulated"], default=None)
    parser.add_argument("--scenario", help="scenario file for the simulated probe")
    parser.add_argument("--update-interval-ns", dest="update_interval_ns", default=None)


def _add_harness_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--harness", help="harness command line (program and args)")
    parser.add_argument("--list-args", dest="list_args", help="discovery-mode arguments")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="manai", description="Per-test software energy profiler.")
    subparsers = parser.add_subparsers(dest="command", required=True)

    p = subparsers.add_parser("probe-check", help="enumerate energy domains and check access")
    _add_common(p)
    _add_probe_flags(p)

    p = subparsers.add_parser("list", help="discover tests declared by the harness")
    _add_common(p)
    _add_harness_flags(p)

    p = subparsers.add_parser("run", help="execute an energy experiment")
    _add_common(p)
    _add_probe_flags(p)
    _add_harness_flags(p)
    p.add_argument("--rate", default=None, help="probe sampling rate in Hz")
    p.add_argument("--iterations", default=None, help="executions per test")
    p.add_argument("--select", default=None, help="comma-separated test ids (default: all)")
    p.add_argument("--revision", default=None, help="revision label (default: git head)")
    p.add_argument("--baseline", default=None, help="off | calibrate:<secs> | fixed:<path>")
    p.add_argument("--timeout", default=None, help="per-test timeout in seconds")

    p = subparsers.add_parser("report", help="render stored results")
    _add_common(p)
    p.add_argument("--revision", default=None, help="summary of one stored revision")
    p.add_argument("--evolution", default=None, help="comma-separated test ids for history view")
    p.add_argument("--limit", type=int, default=None, help="most recent history points to keep")
    p.add_argument("--domains", default=None, help="comma-separated domain filter, e.g. package:0")
    p.add_argument("--format", choices=[f.value for f in ReportFormat], default="term")
    p.add_argument("--out", default=None, help="write the document to a file")

    p = subparsers.add_parser("compare", help="compare two stored revisions")
    _add_common(p)
    p.add_argument("revision_a")
    p.add_argument("revision_b")
    p.add_argument("--domains", default=None)
    p.add_argument("--format", choices=[f.value for f in ReportFormat], default="term")
    p.add_argument("--out", default=None)

    p = subparsers.add_parser("baseline", help="calibrate idle power on a quiescent machine")
    _add_common(p)
    _add_probe_flags(p)
    p.add_argument("--duration", type=float, default=10.0, help="calibration window in seconds")
    p.add_argument("--out", default=None, help="write the profile as JSON")

    return parser


_COMMANDS = {
    "probe-check": _cmd_probe_check,
    "list": _cmd_list,
    "run": _cmd_run,
    "report": _cmd_report,
    "compare": _cmd_compare,
    "baseline": _cmd_baseline,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _load_config_file(args.config) if args.config else {}
        return _COMMANDS[args.command](args, cfg)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except _USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except _ENV_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ENV
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001 - the contract demands a message, not a traceback
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
