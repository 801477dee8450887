"""Command-line scenario runner: ``modest run|sweep|compare|validate``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .scenario import METHODS, ConfigError, ScenarioConfig, load_config, run_scenario

log = logging.getLogger("modest")

EXIT_OK, EXIT_CONFIG, EXIT_STALL = 0, 1, 2


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of integers, got {text!r}")


def cmd_run(args) -> int:
    cfg = load_config(args.config, args.seed)
    result = run_scenario(cfg)
    summary = result.export(args.out)
    if result.stalled:
        print(json.dumps(result.stall_report, indent=2, sort_keys=True), file=sys.stderr)
        return EXIT_STALL
    print(f"{cfg.method}: status={result.status} rounds={summary['rounds']} "
          f"final_metric={summary['final_metric']} total_bytes={summary['total_bytes']}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    base = load_config(args.config)
    seeds = args.seeds or [args.seed if args.seed is not None else base.seed]
    grid_s = args.grid_s or [base.s]
    grid_a = args.grid_a or [base.effective_a]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, stalled = [], False
    for s in grid_s:
        for a in grid_a:
            for seed in seeds:
                cfg = base.replace(s=s, a=a, seed=seed)
                result = run_scenario(cfg)
                stalled |= result.stalled
                summ = result.summary()
                rows.append((s, a, seed, summ["rounds_to_target"], summ["time_to_target_ms"]))
                log.info("s=%d a=%d seed=%d -> %s", s, a, seed, rows[-1][3:])
    with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("s", "a", "seed", "rounds_to_target", "vtime_to_target"))
        for row in rows:
            w.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in row])
    print(f"wrote {len(rows)} rows to {out / 'sweep.csv'}")
    return EXIT_STALL if stalled else EXIT_OK


def cmd_compare(args) -> int:
    configs = [load_config(p, args.seed) for p in args.config]
    if len(configs) == 1:
        configs = [configs[0].replace(method=m, faults=[], a=None if m != "modest" else configs[0].a)
                   for m in METHODS]
    out = Path(args.out)
    report, stalled = {}, False
    for cfg in configs:
        result = run_scenario(cfg)
        stalled |= result.stalled
        summ = result.export(out / cfg.method)
        report[cfg.method] = {k: summ.get(k) for k in (
            "total_bytes", "model_bytes", "overhead_bytes", "overhead_share", "min_node_bytes",
            "max_node_bytes", "mean_node_bytes", "max_node", "rounds_to_target", "time_to_target_ms",
            "final_metric", "status", "rounds")}
    if "dsgd" in report and "modest" in report and report["modest"]["total_bytes"]:
        report["dsgd_over_modest_bytes"] = report["dsgd"]["total_bytes"] / report["modest"]["total_bytes"]
    if "fedavg" in report and report["fedavg"]["total_bytes"]:
        fed = report["fedavg"]
        report["fedavg_max_node_share"] = fed["max_node_bytes"] / fed["total_bytes"]
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "comparison.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_STALL if stalled else EXIT_OK


def cmd_validate(args) -> int:
    cfg = load_config(args.config, args.seed)
    print(f"ok: method={cfg.method} n={cfg.n} s={cfg.s} a={cfg.effective_a} sf={cfg.effective_sf:g} "
          f"window={cfg.effective_window}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="modest", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, many=False):
        if many:
            p.add_argument("--config", required=True, nargs="+", help="scenario file(s), YAML or JSON")
        else:
            p.add_argument("--config", required=True, help="scenario file, YAML or JSON")
        p.add_argument("--seed", type=int, default=None, help="override the scenario seed")

    p = sub.add_parser("run", help="run one scenario and export metrics")
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run an (s, a) grid and write sweep.csv")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--grid-s", type=_int_list, default=None)
    p.add_argument("--grid-a", type=_int_list, default=None)
    p.add_argument("--seeds", type=_int_list, default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("compare", help="run modest, fedavg and dsgd; write comparison.json")
    common(p, many=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("validate", help="check a scenario file")
    common(p)
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
