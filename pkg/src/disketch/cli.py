"""Command-line entry point: ``disketch <subcommand> --seed N ...``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .experiment import (
    ExperimentConfig,
    ExperimentError,
    System,
    calibrate_rho,
    cov_grid,
    median_by,
    read_csv,
    run_experiment,
    sweep,
    write_cov_grid,
    write_csv,
    write_result,
    write_sweep,
)
from .network import build_path, build_spine_leaf, fat_tree_preset, gen_memory_distribution
from .query import EpochMerge, Query, QueryType, run_query
from .records import RecordStoreError, load_store
from .sketch import key_fingerprint
from .workload import FIVE_TUPLE, SRC_IP, gen_zipf_trace, save_trace


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path: str | None, overrides: list[str], seed: int) -> ExperimentConfig:
    obj = json.loads(Path(path).read_text()) if path else {}
    for item in overrides:
        if "=" not in item:
            raise ExperimentError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        obj[k.strip()] = _parse_value(v.strip())
    obj["seed"] = seed
    return ExperimentConfig.from_dict(obj)


def _values(text: str) -> list:
    return [_parse_value(v) for v in text.split(",") if v]


def cmd_gen_trace(args) -> int:
    fields = SRC_IP if args.key == "src_ip" else FIVE_TUPLE
    trace = gen_zipf_trace(args.packets, args.flows, args.zipf, args.epochs * args.epoch_ticks, args.burstiness,
                           seed=args.seed, key_fields=fields, arrivals=args.arrivals)
    save_trace(args.out, trace)
    print(f"wrote {len(trace)} packets over {trace.num_keys} keys to {args.out}")
    return 0


def cmd_gen_topology(args) -> int:
    topo = {"fat_tree": fat_tree_preset, "spine_leaf": build_spine_leaf, "path": build_path}[args.kind]()
    mem = gen_memory_distribution(len(topo.switches), args.base_memory, args.gini, seed=args.seed)
    topo = topo.with_memory(mem)
    Path(args.out).write_text(topo.dumps())
    print(f"wrote {topo.name} with {len(topo.switches)} switches to {args.out}")
    return 0


def cmd_run(args) -> int:
    cfg = load_config(args.config, args.set, args.seed)
    result = run_experiment(cfg)
    out = write_result(result, args.out, records=not args.no_records)
    r = result.report
    print(f"{cfg.system.value}: keys={r.keys} aae={r.aae:.4g} rmse={r.rmse:.4g} nrmse={r.nrmse:.4g} f1={r.f1:.3f}"
          + (f" entropy_err={r.entropy_abs_error:.4g}" if r.entropy_abs_error is not None else ""))
    print(f"outputs in {out}")
    return 0


def cmd_sweep(args) -> int:
    cfg = load_config(args.config, args.set, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = [args.seed + i for i in range(args.seeds)]
    if args.axis == "cov_grid":
        cells = cov_grid(cfg, _values(args.width_covs), _values(args.load_covs), seeds)
        write_cov_grid(cells, out)
        print(f"wrote {len(cells)} CoV cells to {out}")
        return 0
    systems = [System(s) for s in args.systems.split(",")]
    rows = sweep(cfg, args.axis, _values(args.values), systems, seeds)
    write_sweep(rows, out / "sweep.csv")
    med = median_by(rows, args.metric)
    write_csv(out / "sweep_median.csv", [{"value": v, "system": s, args.metric: m} for (v, s), m in med.items()])
    (out / "metadata.json").write_text(json.dumps({"config": cfg.to_dict(), "axis": args.axis,
                                                   "seeds": seeds, "systems": [s.value for s in systems]}, indent=1))
    for (v, s), m in med.items():
        print(f"{args.axis}={v} {s}: median {args.metric}={m:.4g}")
    return 0


def _parse_key(text: str) -> int:
    parts = [int(p) for p in text.split(",")]
    return key_fingerprint(tuple(parts))


def cmd_query(args) -> int:
    store = load_store(args.records)
    fp = int(args.fingerprint) if args.fingerprint is not None else _parse_key(args.key)
    lo, hi = (int(x) for x in args.epochs.split(":"))
    q = Query(QueryType.FREQUENCY, tuple(range(lo, hi)), fp, EpochMerge(args.merge), args.mitigation)
    value = run_query(q, store, args.path.split(","))
    print(json.dumps({"key": fp, "epochs": [lo, hi], "merge": args.merge, "estimate": value}))
    return 0


def cmd_calibrate(args) -> int:
    cfg = load_config(args.config, args.set, args.seed)
    cal = calibrate_rho(cfg, range(args.low, args.high + 1))
    rows = [{"rho_target": r, "rmse": e} for r, e in cal.candidates]
    if args.out:
        write_csv(args.out, rows, ["rho_target", "rmse"])
    for r in rows:
        print(f"rho={r['rho_target']:.6g} rmse={r['rmse']:.6g}")
    print(f"best rho_target={cal.rho_target:.6g} (base {cal.base_rho:.6g})")
    return 0


def cmd_report(args) -> int:
    rows = []
    for d in args.runs:
        for f in sorted(Path(d).glob("metrics_*.csv")):
            for r in read_csv(f):
                rows.append({"run": str(d), **r})
    write_csv(args.out, rows)
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="disketch", description="Disaggregated sketch simulator")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--seed", type=int, required=True)
        sp.set_defaults(func=func)
        return sp

    def config_args(sp):
        sp.add_argument("--config", help="JSON experiment config")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config field")

    sp = add("gen-trace", cmd_gen_trace, "write a synthetic Zipf trace")
    sp.add_argument("--packets", type=int, default=200_000)
    sp.add_argument("--flows", type=int, default=20_000)
    sp.add_argument("--zipf", type=float, default=1.0)
    sp.add_argument("--epochs", type=int, default=32)
    sp.add_argument("--epoch-ticks", type=int, default=1 << 20)
    sp.add_argument("--burstiness", type=float, default=0.0)
    sp.add_argument("--arrivals", choices=["paced", "poisson"], default="paced")
    sp.add_argument("--key", choices=["five_tuple", "src_ip"], default="five_tuple")
    sp.add_argument("--out", required=True)

    sp = add("gen-topology", cmd_gen_topology, "write a topology with per-switch memory")
    sp.add_argument("--kind", choices=["fat_tree", "spine_leaf", "path"], default="fat_tree")
    sp.add_argument("--base-memory", type=int, default=32 * 1024)
    sp.add_argument("--gini", type=float, default=0.0)
    sp.add_argument("--out", required=True)

    sp = add("run", cmd_run, "run one experiment")
    config_args(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--no-records", action="store_true", help="skip writing the record file")

    sp = add("sweep", cmd_sweep, "sweep one config axis, or the width/load CoV grid")
    config_args(sp)
    sp.add_argument("--axis", required=True, help="config field, or cov_grid")
    sp.add_argument("--values", default="")
    sp.add_argument("--width-covs", default="0,0.6,1.2,1.8")
    sp.add_argument("--load-covs", default="0,0.6,1.2,1.8")
    sp.add_argument("--systems", default="disco,disketch")
    sp.add_argument("--seeds", type=int, default=1, help="number of seeds, starting at --seed")
    sp.add_argument("--metric", default="rmse")
    sp.add_argument("--out", required=True)

    sp = add("query", cmd_query, "frequency query against a record file")
    sp.add_argument("--records", required=True)
    sp.add_argument("--path", required=True, help="comma separated switch ids")
    key = sp.add_mutually_exclusive_group(required=True)
    key.add_argument("--key", help="comma separated key fields, e.g. src,dst,proto,sport,dport")
    key.add_argument("--fingerprint")
    sp.add_argument("--epochs", default="0:32", help="half-open epoch range A:B")
    sp.add_argument("--merge", choices=["sum", "average"], default="sum")
    sp.add_argument("--mitigation", action="store_true")

    sp = add("calibrate-rho", cmd_calibrate, "choose rho_target on the calibration seed")
    config_args(sp)
    sp.add_argument("--low", type=int, default=-4)
    sp.add_argument("--high", type=int, default=4)
    sp.add_argument("--out")

    sp = add("report", cmd_report, "merge metrics of several run directories")
    sp.add_argument("--runs", nargs="+", required=True)
    sp.add_argument("--out", required=True)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ExperimentError, RecordStoreError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
