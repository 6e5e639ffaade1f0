"""Command line entry point: generate, edit, eval, acc, report.

Exit codes: 0 success, 2 validation error, 3 partial failure (some records failed).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import __version__
from .bench import ManifestError, ToyConfig, generate_toy_benchmark
from .harness import (METRIC_KEYS, METHODS, RunConfig, ValidationError, cmd_acc, cmd_edit, cmd_eval, cmd_report,
                      warn)

EXIT_OK, EXIT_INVALID, EXIT_PARTIAL = 0, 2, 3


def _csv_list(text):
    return [s.strip() for s in text.split(",") if s.strip()] if text else None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fivelab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"fivelab {__version__}")
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("generate", help="render the synthetic benchmark")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--frames", type=int, default=40)

    e = sub.add_parser("edit", help="run an editor over every manifest record")
    e.add_argument("--manifest", required=True)
    e.add_argument("--method", required=True, choices=METHODS)
    e.add_argument("--config", help="JSON run config")
    e.add_argument("--seed", type=int)
    e.add_argument("--out", required=True)

    v = sub.add_parser("eval", help="compute the metric table for a run")
    v.add_argument("--run", required=True)
    v.add_argument("--manifest")
    v.add_argument("--metrics", help=f"comma list from {','.join(METRIC_KEYS)}")
    v.add_argument("--provider", default=None, help="builtin or http:URL (env FIVE_PROVIDER_URL)")
    v.add_argument("--stride", type=int, default=8)
    v.add_argument("--pristine", help="NIQE pristine model JSON")
    v.add_argument("--source", action="store_true", help="score the source video against itself")

    a = sub.add_parser("acc", help="question-answering accuracy with a VLM judge")
    a.add_argument("--run", required=True)
    a.add_argument("--vlm", default=None, help="mock:FILE or http:URL (env FIVE_VLM_URL)")
    a.add_argument("--manifest")
    a.add_argument("--seed", type=int, default=0)

    r = sub.add_parser("report", help="merge reports of several runs")
    r.add_argument("--runs", nargs="+", required=True)
    r.add_argument("--format", choices=("csv", "json"), default="csv")
    r.add_argument("--columns", help="comma list of metric keys or headers to keep")
    r.add_argument("--out")
    return p


def run(args) -> int:
    if args.cmd == "generate":
        m = generate_toy_benchmark(ToyConfig(num_frames=args.frames), args.seed, args.out)
        print(m.root / "manifest.json")
        return EXIT_OK
    if args.cmd == "edit":
        cfg = RunConfig.from_file(args.config, method=args.method, seed=args.seed)
        log = cmd_edit(args.manifest, cfg, args.out)
        failed = [r["edit_id"] for r in log["records"] if r["status"] == "failed"]
        for r in log["records"]:
            if r["status"] == "failed":
                warn(f"{r['edit_id']}: {r['error']}")
        print(f"edited {len(log['records']) - len(failed)}/{len(log['records'])} records -> {args.out}")
        return EXIT_PARTIAL if failed else EXIT_OK
    if args.cmd == "eval":
        provider = args.provider or os.environ.get("FIVE_PROVIDER_URL") or "builtin"
        rep = cmd_eval(args.run, args.manifest, _csv_list(args.metrics), provider, args.stride, args.pristine,
                       args.source)
        print((Path(args.run) / ("report_source.csv" if args.source else "report.csv")).read_text(), end="")
        unavailable = sum(bool(r["unavailable"]) for r in rep["per_record"].values())
        return EXIT_PARTIAL if rep["missing"] or unavailable else EXIT_OK
    if args.cmd == "acc":
        vlm = args.vlm or os.environ.get("FIVE_VLM_URL")
        if not vlm:
            raise ValidationError("no VLM given (use --vlm or FIVE_VLM_URL)")
        rep = cmd_acc(args.run, vlm, args.manifest, args.seed)
        print((Path(args.run) / "acc.csv").read_text(), end="")
        return EXIT_PARTIAL if rep["overall"]["invalid"] else EXIT_OK
    if args.cmd == "report":
        text, warnings = cmd_report(args.runs, args.format, _csv_list(args.columns))
        for w in warnings:
            warn(w)
        if args.out:
            Path(args.out).write_text(text)
        print(text, end="")
        return EXIT_OK
    raise ValidationError(f"unknown command {args.cmd}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return run(args)
    except (ValidationError, ManifestError, json.JSONDecodeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
