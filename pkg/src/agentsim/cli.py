"""Command-line front end.

Exit codes: 0 success, 1 validation or usage error, 2 protocol error during a
run, 3 bound violation found by ``verify``, 4 ``verify`` preconditions not met.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import warnings
from pathlib import Path

import yaml

from .analysis import BoundParams, verify_trace
from .config import default_config, load_config, parse_sweep
from .engine import SimulationAborted, run
from .errors import DomainError, ProtocolError, ValidationError
from .metrics import compare_table, session_table, summary
from .profiles import COLD, DECODE, DEFAULT_SHAPES, RESUME, CurveShape, dump_profiles, generate_bundle
from .scheduler import get_policy
from .trace import Trace

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_PROTOCOL = 2
EXIT_VIOLATION = 3
EXIT_ASSUMPTIONS = 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # argparse would exit with 2, which is reserved for protocol errors
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def _load(args):
    cfg = load_config(args.config) if args.config else default_config()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_(seed=args.seed)
    return cfg


def _out_dir(args, cfg) -> Path:
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, data):
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def cmd_run(args) -> int:
    cfg = _load(args)
    out = _out_dir(args, cfg)
    try:
        trace = run(cfg)
    except SimulationAborted as exc:
        exc.trace.write(out / "trace.jsonl")
        print(f"protocol error: {exc} (trace so far in {out / 'trace.jsonl'})", file=sys.stderr)
        return EXIT_PROTOCOL
    trace.write(out / "trace.jsonl")
    summ = summary(trace, cfg.slo)
    _write_json(out / "summary.json", summ)
    (out / "sessions.csv").write_text(session_table(trace, cfg.slo))
    print(f"{cfg.policy}: ttft p95 {summ['ttft_p95_ms']:.1f} ms, tpot p95 {summ['tpot_p95_ms']:.1f} ms, "
          f"SLO attainment {summ['slo_attainment_joint']}; artifacts in {out}")
    return EXIT_OK


def compare_runs(cfg, policies, sweep) -> list:
    """One summary row per (concurrency, policy), same request stream per concurrency."""
    rows = []
    for n in sweep:
        hashes = set()
        for name in policies:
            c = cfg.with_(policy=name, workload={"concurrency": n})
            trace = run(c)
            hashes.add(trace.header["stream_hash"])
            rows.append({"concurrency": n, **summary(trace, c.slo)})
        if len(hashes) != 1:
            raise ProtocolError(f"request streams differ across policies at concurrency {n}")
    return rows


def cmd_compare(args) -> int:
    cfg = _load(args)
    policies = [p.strip() for p in args.policies.split(",") if p.strip()] if args.policies else list(cfg.policies)
    if len(policies) < 2:
        raise UsageError("compare needs at least two policies")
    for p in policies:
        get_policy(p)
    sweep = parse_sweep(args.sweep) if args.sweep else list(cfg.sweep)
    out = _out_dir(args, cfg)
    try:
        rows = compare_runs(cfg, policies, sweep)
    except SimulationAborted as exc:
        exc.trace.write(out / f"trace.{exc.trace.policy}.jsonl")
        print(f"protocol error: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    table = compare_table(rows)
    (out / "compare.csv").write_text(table)
    _write_json(out / "compare.json", {"policies": policies, "sweep": sweep, "rows": rows})
    sys.stdout.write(table)
    return EXIT_OK


def _params(text):
    if text is None:
        return None
    path = Path(text)
    if path.exists():
        data = yaml.safe_load(path.read_text()) or {}
    else:
        data = {}
        for part in text.split(","):
            key, sep, value = part.partition("=")
            if not sep:
                raise UsageError(f"bad --params item '{part}' (use delta=12,eps_bar=0.001 or a file)")
            data[key.strip()] = float(value)
    unknown = set(data) - {"delta", "eps_bar"}
    if unknown:
        raise UsageError(f"unknown bound parameters {sorted(unknown)}")
    try:
        return BoundParams(**{k: float(v) for k, v in data.items()})
    except DomainError as exc:
        raise UsageError(str(exc)) from None


def cmd_verify(args) -> int:
    try:
        trace = Trace.read(args.trace)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read trace {args.trace}: {exc}") from None
    report = verify_trace(trace, params=_params(args.params))
    out = Path(args.out) if args.out else Path(args.trace).parent
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "verify.json", report.to_data())
    rows = report.to_data()["intervals"]
    with open(out / "verify.csv", "w", newline="") as fh:
        if rows:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    s = report.summary
    print(f"{s['non_vacuous']} checked intervals, {s['vacuous']} vacuous, {s['violations']} violations, "
          f"min rho {s['min_rho']}, min bound {s['min_bound']}")
    for flag in report.flags:
        print(f"assumption not met: {flag}", file=sys.stderr)
    if report.flags:
        return EXIT_ASSUMPTIONS
    return EXIT_VIOLATION if s["violations"] else EXIT_OK


def cmd_profile_gen(args) -> int:
    shapes = {
        DECODE: CurveShape(args.decode_max, args.decode_knee),
        COLD: CurveShape(args.cold_max, args.cold_knee),
        RESUME: CurveShape(args.resume_max, args.resume_knee),
    }
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        bundle = generate_bundle(shapes, args.total_sms, args.granularity)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    text = dump_profiles(bundle)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="agentsim", description="Phase-aware single-GPU agent serving simulator.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="simulate one policy and write trace, summary and session table")
    r.add_argument("--config", help="run-config document (YAML or JSON); shipped defaults if omitted")
    r.add_argument("--out", help="output directory (default: the config's output_dir)")
    r.add_argument("--seed", type=int, help="override the config seed")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="run several policies on the same request stream")
    c.add_argument("--config")
    c.add_argument("--out")
    c.add_argument("--seed", type=int)
    c.add_argument("--policies", help="comma-separated policy names (at least two)")
    c.add_argument("--sweep", help="concurrency levels, e.g. 3-6 or 3,5")
    c.set_defaults(func=cmd_compare)

    v = sub.add_parser("verify", help="check a trace against the per-interval service bound")
    v.add_argument("--trace", required=True)
    v.add_argument("--params", help="delta=<SMs>,eps_bar=<fraction> or a YAML file; measured values if omitted")
    v.add_argument("--out")
    v.set_defaults(func=cmd_verify)

    g = sub.add_parser("profile-gen", help="write a synthetic profile document")
    for phase, key in ((DECODE, "decode"), (COLD, "cold"), (RESUME, "resume")):
        g.add_argument(f"--{key}-max", type=float, default=DEFAULT_SHAPES[phase].max_rate,
                       help=f"{phase} tokens/s at the full GPU")
        g.add_argument(f"--{key}-knee", type=float, default=DEFAULT_SHAPES[phase].knee,
                       help=f"{phase} saturation scale (fraction of SMs)")
    g.add_argument("--total-sms", type=int, default=120)
    g.add_argument("--granularity", type=int, default=12)
    g.add_argument("--out", help="output file (default: stdout)")
    g.set_defaults(func=cmd_profile_gen)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, UsageError, DomainError, yaml.YAMLError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except ProtocolError as exc:
        print(f"protocol error: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
