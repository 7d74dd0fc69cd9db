"""Command line entry point: ``semloop {sequence,pair,bench,report}``.

Configuration precedence, lowest to highest: built-in defaults, the JSON
file given with ``--config``, then individual flags such as ``--theta-graph``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import typing
from dataclasses import fields

from .config import PipelineConfig
from .metrics import pr_sweep, write_pr_table, write_summary
from .pipeline import (attach_ground_truth, bench, default_threads, process_sequence,
                       read_records, register_pair, summarize_records)
from .scan_io import ClassMap, DataError, load_labeled_scan, load_poses
from .synthetic import SceneSpec

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3

logger = logging.getLogger("semloop")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_config_flags(p):
    g = p.add_argument_group("pipeline configuration")
    g.add_argument("--config", help="JSON config file; flags below override it")
    g.add_argument("--class-map", help="class map text file")
    hints = typing.get_type_hints(PipelineConfig)
    for f in fields(PipelineConfig):
        kind = hints[f.name]
        flag = "--" + f.name.replace("_", "-")
        g.add_argument(flag, dest=f"cfg_{f.name}", type=kind, default=argparse.SUPPRESS,
                       metavar=kind.__name__.upper(), help=f"default {f.default!r}")


def build_config(args) -> PipelineConfig:
    data = {}
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
    for key, value in vars(args).items():
        if key.startswith("cfg_"):
            data[key[4:]] = value
    try:
        return PipelineConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None


def _class_map(args):
    return ClassMap.load(args.class_map) if getattr(args, "class_map", None) else None


def _emit(summary, path):
    if path:
        write_summary(path, summary)
    else:
        for k, v in summary.items():
            print(f"{k}\t{v}")


def _pr_table(records, path):
    if not path:
        return
    decisions = [d for d in (r.decision() for r in records) if d is not None]
    try:
        write_pr_table(path, pr_sweep(decisions))
    except ValueError as exc:
        logger.warning("no PR table written: %s", exc)


def cmd_sequence(args):
    cfg = build_config(args)
    records, summary = process_sequence(args.scans, args.labels, args.poses, cfg,
                                        _class_map(args), records_path=args.records)
    _pr_table(records, args.pr_table)
    _emit(summary, args.summary)


def cmd_pair(args):
    cfg = build_config(args)
    a = load_labeled_scan(args.scan_a, args.labels_a, scan_id=0, format=args.format)
    b = load_labeled_scan(args.scan_b, args.labels_b, scan_id=1, format=args.format)
    rec = register_pair(a, b, cfg, _class_map(args))
    print(rec.to_json())
    return EXIT_OK


def cmd_bench(args):
    cfg = build_config(args)
    spec = SceneSpec.load(args.spec) if args.spec else SceneSpec()
    records, summary = bench(spec, args.trials, cfg, _class_map(args),
                             reverse_fraction=args.reverse_fraction)
    if args.records:
        with open(args.records, "w") as fh:
            fh.writelines(r.to_json() + "\n" for r in records)
    _emit(summary, args.summary)


def cmd_report(args):
    records = read_records(args.records)
    if args.poses:
        attach_ground_truth(records, load_poses(args.poses))
    _pr_table(records, args.pr_table)
    _emit(summarize_records(records), args.summary)


def make_parser():
    p = _Parser(prog="semloop", description="Semantic graph loop closing for labelled LiDAR scans.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("sequence", help="detect loops over a KITTI-layout sequence")
    s.add_argument("scans", help="directory of NNNNNN.bin scans")
    s.add_argument("--labels", help="label directory (default: ../labels next to scans)")
    s.add_argument("--poses", help="ground-truth poses file, enables PR and pose metrics")
    s.add_argument("--records", help="write the loop record stream here (JSON lines)")
    s.add_argument("--summary", help="write metric<TAB>value lines here instead of stdout")
    s.add_argument("--pr-table", help="write the precision/recall table here (CSV)")
    _add_config_flags(s)
    s.set_defaults(func=cmd_sequence)

    s = sub.add_parser("pair", help="verify and register two labelled scans")
    s.add_argument("scan_a")
    s.add_argument("labels_a")
    s.add_argument("scan_b")
    s.add_argument("labels_b")
    s.add_argument("--format", default="kitti_bin", choices=["kitti_bin", "xyz_text"])
    _add_config_flags(s)
    s.set_defaults(func=cmd_pair)

    s = sub.add_parser("bench", help="synthetic registration benchmark")
    s.add_argument("--spec", help="SceneSpec JSON file")
    s.add_argument("--trials", type=int, default=100)
    s.add_argument("--reverse-fraction", type=float, default=0.3,
                   help="share of trials with relative yaw beyond 150 degrees")
    s.add_argument("--records")
    s.add_argument("--summary")
    _add_config_flags(s)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("report", help="metrics from a saved record stream")
    s.add_argument("records")
    s.add_argument("--poses", help="attach ground truth from a poses file")
    s.add_argument("--summary")
    s.add_argument("--pr-table")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if getattr(args, "trials", 1) < 1:
            raise UsageError("--trials must be >= 1")
        try:
            default_threads()
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        args.func(args)
    except UsageError as exc:
        print(f"semloop: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"semloop: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        logger.exception("internal error")
        print(f"semloop: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
