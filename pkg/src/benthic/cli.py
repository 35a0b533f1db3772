"""Command-line entry points: serve, run, replay, validate-fixtures."""

from __future__ import annotations

import argparse
import json
import sys

from . import fixture_path
from .service import (
    CorruptLog,
    Mission,
    _resolve_fixture,
    _resolve_profile,
    load_script,
    log_to_jsonl,
    parse_log,
    replay,
    run_script,
    trace_hash,
)


def cmd_run(args) -> int:
    script = load_script(_resolve_fixture(args.script))
    if args.profile:
        script["profile"] = args.profile
    if args.seed is not None:
        script["seed"] = args.seed
    report, log = run_script(script)
    if args.log:
        with open(args.log, "w") as f:
            f.write(log_to_jsonl(log))
    if args.report:
        with open(args.report, "w") as f:
            json.dump(report.to_json(), f, indent=1)
    print(report.to_table())
    critical_ok = all(
        s["completed"]
        for s, spec_step in zip(report.steps, script["steps"])
        if spec_step.get("critical")
    ) and len(report.steps) == len(script["steps"])
    return 0 if critical_ok else 1


def cmd_replay(args) -> int:
    with open(args.log) as f:
        text = f.read()
    try:
        records = parse_log(text)
        rebuilt = replay(records)
    except CorruptLog as exc:
        print(f"corrupt log: {exc}", file=sys.stderr)
        return 2
    if not records:
        print("empty log: nothing to replay")
        return 0
    original, reconstructed = trace_hash(records), trace_hash(rebuilt)
    if original == reconstructed:
        print(f"replay matches: {original}")
        return 0
    print(f"replay mismatch: original {original} reconstructed {reconstructed}", file=sys.stderr)
    return 1


def cmd_validate_fixtures(args) -> int:
    from .command import parse_utterance, Utterance
    from .kinematics import load_chain
    from .planner import proxies_from_chain_fixture
    from .sim import FixtureError, load_worksite

    failures = 0

    def check(name, fn):
        nonlocal failures
        try:
            fn()
            print(f"ok      {name}")
        except Exception as exc:
            failures += 1
            print(f"FAIL    {name}: {exc}")

    check("arm6.json", lambda: load_chain(fixture_path("arm6.json")))
    check("arm6.json collision proxies", lambda: proxies_from_chain_fixture(fixture_path("arm6.json")))
    check("worksite.json", lambda: load_worksite(fixture_path("worksite.json")))
    check("mission_script.json", lambda: load_script(fixture_path("mission_script.json")))

    def check_corpus():
        with open(fixture_path("command_corpus.jsonl")) as f:
            records = [json.loads(line) for line in f if line.strip()]
        positives = sum(1 for r in records if r.get("expected"))
        negatives = sum(1 for r in records if r.get("diagnostic"))
        for r in records:
            result = parse_utterance(Utterance(r["text"]))
            if bool(r.get("expected")) != result.ok:
                raise ValueError(f"corpus disagreement on {r['text']!r}")
        if positives < 40 or negatives < 10:
            raise ValueError(f"corpus too small: {positives} positive / {negatives} negative")

    check("command_corpus.jsonl", check_corpus)
    return 1 if failures else 0


def cmd_serve(args) -> int:
    import asyncio

    from .server import serve

    mission = Mission(
        _resolve_fixture(args.worksite),
        _resolve_profile(args.profile or "default"),
        seed=args.seed or 0,
    )
    try:
        asyncio.run(serve(mission, args.host, args.port))
    except KeyboardInterrupt:
        pass
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="benthic", description="Shared-autonomy manipulation testbed")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("run", help="run a mission script headlessly and report metrics")
    p.add_argument("--script", default="mission_script.json", help="script path or fixture name")
    p.add_argument("--profile", help="link profile: default | none | path")
    p.add_argument("--seed", type=int)
    p.add_argument("--log", help="write the JSONL mission log here")
    p.add_argument("--report", help="write the JSON metrics report here")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("replay", help="re-run a mission log and verify the trace hash")
    p.add_argument("--log", required=True)
    p.set_defaults(fn=cmd_replay)

    p = sub.add_parser("validate-fixtures", help="parse and validate all shipped fixtures")
    p.set_defaults(fn=cmd_validate_fixtures)

    p = sub.add_parser("serve", help="host a live mission for operator consoles")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8765)
    p.add_argument("--worksite", default="worksite.json")
    p.add_argument("--profile", help="link profile: default | none | path")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_serve)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
