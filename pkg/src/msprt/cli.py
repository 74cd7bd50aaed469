"""Command-line front end: replay recorded streams, simulate, validate.

Exit codes: 0 = stream completed without rejection, 10 = null rejected,
2 = configuration error, 3 = malformed data over tolerance.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass

from .engine import ConfigurationError, SnapshotError, TestConfig, new_test, restore
from .priors import PriorFormatError, load_prior_file, prior_from_json
from .simulate import ScenarioSpec, run_scenario

#: Directory searched for prior/config files given as bare relative paths.
CONFIG_DIR_ENV = "MSPRT_CONFIG_DIR"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_REJECTED = 10


@dataclass(frozen=True)
class EventRecord:
    """One stream event: 1-based arm index and observed value."""

    arm: int
    value: float


def _resolve_path(path: str) -> str:
    if os.path.exists(path) or os.path.isabs(path):
        return path
    base = os.environ.get(CONFIG_DIR_ENV)
    if base:
        candidate = os.path.join(base, path)
        if os.path.exists(candidate):
            return candidate
    return path


def _fail_config(message: str) -> int:
    print(f"configuration error: {message}", file=sys.stderr)
    return EXIT_CONFIG


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--metric", choices=("risk_ratio", "odds_ratio", "prop_diff", "mean_diff", "auc"))
    parser.add_argument("--alpha", type=float, default=0.05)
    parser.add_argument("--arms", type=int, default=2, help="number of arms m (baseline is arm 1)")
    parser.add_argument("--prior", metavar="FILE", help="prior specification JSON")
    parser.add_argument("--batch-size", type=int, default=100, dest="batch_size",
                        help="observations between evaluations (k)")
    parser.add_argument("--burn-in", type=int, default=None, dest="burn_in",
                        help="minimum total n before a rejection (default 100*m)")
    parser.add_argument("--sigma-mode", choices=("baseline", "pooled", "none"), default=None,
                        dest="sigma_mode")


def _config_from_args(args) -> TestConfig:
    if not args.metric:
        raise ConfigurationError("metric: --metric is required")
    if not args.prior:
        raise ConfigurationError("prior: --prior FILE is required")
    prior = load_prior_file(_resolve_path(args.prior))
    return TestConfig(
        alpha=args.alpha,
        metric=args.metric,
        m=args.arms,
        prior=prior,
        batch_interval=args.batch_size,
        burn_in=args.burn_in,
        sigma_mode=args.sigma_mode,
    )


def _config_from_json(obj) -> TestConfig:
    if not isinstance(obj, dict):
        raise ConfigurationError("config document must be a JSON object")
    if ("prior" in obj) == ("prior_file" in obj):
        raise ConfigurationError("config needs exactly one of 'prior' or 'prior_file'")
    if "prior" in obj:
        prior = prior_from_json(obj["prior"])
    else:
        prior = load_prior_file(_resolve_path(obj["prior_file"]))
    try:
        return TestConfig(
            alpha=float(obj["alpha"]),
            metric=obj["metric"],
            m=int(obj["arms"]),
            prior=prior,
            batch_interval=int(obj.get("batch_interval", 100)),
            burn_in=None if obj.get("burn_in") is None else int(obj["burn_in"]),
            sigma_mode=obj.get("sigma_mode"),
        )
    except KeyError as exc:
        raise ConfigurationError(f"config document missing required key {exc}") from exc


def _parse_event(line: str, jsonl: bool):
    if jsonl:
        obj = json.loads(line)
        if not isinstance(obj, dict) or "arm" not in obj or "value" not in obj:
            raise ValueError("record needs 'arm' and 'value'")
        arm, value = obj["arm"], obj["value"]
        if not isinstance(arm, int) or isinstance(arm, bool):
            raise ValueError("'arm' must be an integer")
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ValueError("'value' must be a number")
        return EventRecord(arm, float(value))
    fields = line.split(",")
    if len(fields) != 2:
        raise ValueError("expected two comma-separated fields")
    return EventRecord(int(fields[0]), float(fields[1]))


def _iter_lines(path: str):
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if line:
                yield lineno, line


def _write_snapshot(state, path: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(state.snapshot())
    os.replace(tmp, path)


def _cmd_run(args) -> int:
    try:
        if args.resume:
            with open(args.resume, "rb") as fh:
                state = restore(fh.read())
        else:
            state = new_test(_config_from_args(args))
    except (ConfigurationError, PriorFormatError, SnapshotError, OSError) as exc:
        return _fail_config(str(exc))
    if args.snapshot_every is not None and not args.snapshot_out:
        return _fail_config("--snapshot-every requires --snapshot-out")
    for name in ("snapshot_every", "max_events"):
        value = getattr(args, name)
        if value is not None and value < 1:
            return _fail_config(f"--{name.replace('_', '-')} must be >= 1")
    if args.max_bad_records < 0:
        return _fail_config("--max-bad-records must be >= 0")

    skip = state.n  # events a previous segment already ingested
    out = open(args.out, "w", encoding="utf-8", newline="\n") if args.out else sys.stdout
    bad = 0
    ingested = 0
    exceeded = None
    try:
        jsonl = None
        for lineno, line in _iter_lines(args.stream):
            if jsonl is None:
                jsonl = line.startswith("{")
                if not jsonl and lineno == 1 and line.replace(" ", "").lower() == "arm,value":
                    continue  # optional CSV header
            try:
                event = _parse_event(line, jsonl)
            except (ValueError, json.JSONDecodeError) as exc:
                bad += 1
                if bad > args.max_bad_records:
                    exceeded = f"line {lineno}: {exc}"
                    break
                continue
            if skip:
                # replay of the prefix consumed before the snapshot
                if state.stats.would_accept(event.arm, event.value):
                    skip -= 1
                else:
                    bad += 1
                    if bad > args.max_bad_records:
                        exceeded = f"line {lineno}: rejected by a previous segment"
                        break
                continue
            try:
                record = state.ingest(event.arm, event.value)
            except ValueError as exc:
                bad += 1
                if bad > args.max_bad_records:
                    exceeded = f"line {lineno}: {exc}"
                    break
                continue
            ingested += 1
            if record is not None:
                out.write(json.dumps(record) + "\n")
                if record["decision"] == "reject":
                    break
            if args.snapshot_every and ingested % args.snapshot_every == 0:
                _write_snapshot(state, args.snapshot_out)
            if args.max_events is not None and ingested >= args.max_events:
                break
    finally:
        if out is not sys.stdout:
            out.close()
    if args.snapshot_out:
        _write_snapshot(state, args.snapshot_out)
    if bad:
        print(f"skipped {bad} malformed record(s)", file=sys.stderr)
    if exceeded is not None:
        print(
            f"data error: malformed records exceed tolerance {args.max_bad_records} "
            f"({exceeded})",
            file=sys.stderr,
        )
        return EXIT_DATA
    return EXIT_REJECTED if state.decision == "reject" else EXIT_OK


def _cmd_simulate(args) -> int:
    try:
        spec = ScenarioSpec.load(args.scenario)
        config = _config_from_args(args)
        report = run_scenario(spec, config, jobs=args.jobs)
    except (ConfigurationError, PriorFormatError, ValueError, OSError) as exc:
        return _fail_config(str(exc))
    text = json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        print(report.format_table())
    else:
        sys.stdout.write(text)
        print(report.format_table(), file=sys.stderr)
    return EXIT_OK


def _cmd_check(args) -> int:
    try:
        if args.prior:
            load_prior_file(_resolve_path(args.prior))
            target = args.prior
        else:
            with open(_resolve_path(args.config), "r", encoding="utf-8") as fh:
                _config_from_json(json.load(fh))
            target = args.config
    except (ConfigurationError, PriorFormatError, OSError) as exc:
        return _fail_config(str(exc))
    except json.JSONDecodeError as exc:
        return _fail_config(f"{args.config}: not valid JSON ({exc})")
    print(f"{target}: ok")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="msprt",
        description="Sequential m-arm hypothesis testing with always-valid p-values.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="replay a recorded event stream through a sequential test")
    run.add_argument("stream", help="CSV (arm,value) or JSONL event file; JSONL detected by a leading '{'")
    _add_config_flags(run)
    run.add_argument("--out", metavar="FILE", help="write evaluation records (JSONL) here instead of stdout")
    run.add_argument("--max-bad-records", type=int, default=0, dest="max_bad_records",
                     help="tolerated malformed records before aborting with exit 3")
    run.add_argument("--snapshot-out", metavar="FILE", dest="snapshot_out",
                     help="write a restartable state snapshot here")
    run.add_argument("--snapshot-every", type=int, metavar="K", dest="snapshot_every",
                     help="also write the snapshot every K ingested events")
    run.add_argument("--resume", metavar="FILE",
                     help="resume from a snapshot (embedded config; other config flags ignored)")
    run.add_argument("--max-events", type=int, dest="max_events",
                     help="stop after ingesting this many events (for segmented runs)")
    run.set_defaults(func=_cmd_run)

    sim = sub.add_parser("simulate", help="run a Monte Carlo scenario")
    sim.add_argument("scenario", help="scenario specification JSON")
    _add_config_flags(sim)
    sim.add_argument("--out", metavar="FILE", help="write the report JSON here")
    sim.add_argument("--jobs", type=int, default=None, help="worker processes (default: CPU count)")
    sim.set_defaults(func=_cmd_simulate)

    check = sub.add_parser("check", help="validate a prior or config file without running")
    group = check.add_mutually_exclusive_group(required=True)
    group.add_argument("--prior", metavar="FILE")
    group.add_argument("--config", metavar="FILE")
    check.set_defaults(func=_cmd_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
