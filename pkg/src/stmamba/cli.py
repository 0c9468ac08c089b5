"""Command line entry point: ``stmamba {generate,ingest,train,evaluate,sweep}``.

All subcommands read one flat ``key=value`` file (``--config``) whose keys may
mix grid, scenario, model and training settings; ``--set key=value`` overrides
single keys.  Each run writes ``manifest.json`` into its output directory.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import pipeline
from .config import coerce_into, format_value, read_kv
from .grid import GridMapConfig
from .synth import ScenarioConfig
from .train import TrainConfig

log = logging.getLogger("stmamba")

GRID_KEYS = {f.name for f in dataclasses.fields(GridMapConfig)}
SCENARIO_KEYS = {f.name for f in dataclasses.fields(ScenarioConfig)} - {"grid", "road_mask"}
TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}
MODEL_KEYS = set(pipeline.MODEL_KEYS)
KNOWN_KEYS = GRID_KEYS | SCENARIO_KEYS | TRAIN_KEYS | MODEL_KEYS


class CliError(Exception):
    pass


def load_config(args) -> dict[str, str]:
    values = read_kv(args.config) if args.config else {}
    for item in args.set or []:
        if "=" not in item:
            raise CliError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    unknown = set(values) - KNOWN_KEYS
    if unknown:
        raise CliError(f"unknown config keys: {', '.join(sorted(unknown))}")
    if getattr(args, "seed", None) is not None:
        values["seed"] = str(args.seed)
    return values


def pick(values: dict, keys) -> dict:
    return {k: v for k, v in values.items() if k in keys}


def scenario_from(values) -> ScenarioConfig:
    return ScenarioConfig.from_kv(pick(values, GRID_KEYS | SCENARIO_KEYS))


def train_config_from(values) -> TrainConfig:
    return coerce_into(TrainConfig, pick(values, TRAIN_KEYS))


def sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out_dir, subcommand: str, config: dict, seeds: dict, inputs: dict,
                   outputs, started: float, extra: dict | None = None) -> Path:
    out = Path(out_dir)
    files = sorted({Path(p) for p in outputs})
    manifest = {
        "subcommand": subcommand,
        "config": {k: format_value(v) for k, v in sorted(config.items())},
        "seeds": seeds,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": {str(p.relative_to(out) if p.is_relative_to(out) else p): sha256(p) for p in files},
        "wall_clock_seconds": round(time.time() - started, 3),
    }
    if extra:
        manifest.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=False) + "\n")
    return path


# ------------------------------------------------------------ subcommands


def cmd_generate(args) -> int:
    started = time.time()
    values = load_config(args)
    cfg = scenario_from(values)
    files = pipeline.generate(cfg, args.out)
    write_manifest(args.out, "generate", cfg.to_kv(), {"seed": cfg.seed}, {"config": args.config}, files, started)
    print(f"wrote {cfg.days} day files to {args.out}")
    return 0


def cmd_ingest(args) -> int:
    started = time.time()
    values = load_config(args)
    grid = coerce_into(GridMapConfig, pick(values, GRID_KEYS))
    rate = args.rate if args.rate is not None else float(values.get("limitation_rate", 0.2))
    seed = int(values.get("seed", 0))
    result = pipeline.ingest(args.data, grid, rate, seed, args.out)
    write_manifest(args.out, "ingest", {**dataclasses.asdict(grid), "limitation_rate": rate}, {"seed": seed},
                   {"data": args.data, "config": args.config}, result["files"], started,
                   {"records": result["records"], "sampled": result["sampled"], "slots": result["slots"]})
    print(f"ingested {result['slots']} slots: {result['sampled']} of {result['records']} records kept")
    return 0


def cmd_train(args) -> int:
    started = time.time()
    values = load_config(args)
    tcfg = train_config_from(values)
    result = pipeline.train_on_dir(args.data, pick(values, MODEL_KEYS), tcfg, args.out, resume=args.resume)
    config = {**dataclasses.asdict(result["config"]), **dataclasses.asdict(tcfg)}
    write_manifest(args.out, "train", config, {"seed": tcfg.seed},
                   {"data": args.data, "config": args.config, "resume": args.resume}, result["files"], started,
                   {"final_val_loss": result["final_val_loss"], "final_train_loss": result["history"][-1][1]})
    print(f"final train loss {result['history'][-1][1]:.4f}, validation loss {result['final_val_loss']:.4f}")
    return 0


def cmd_evaluate(args) -> int:
    started = time.time()
    values = load_config(args)
    tcfg = train_config_from(values)
    days = tuple(args.days) if args.days else tcfg.test_days
    report = pipeline.evaluate_on_dir(args.checkpoint, args.data, args.out, days,
                                      masked=args.metric_mask == "road")
    out = Path(args.out)
    files = [out / n for n in ("metrics.txt", "per_slot.csv", "cdf.csv", "original_per_slot.csv",
                               "original_cdf.csv")]
    write_manifest(out, "evaluate", {"test_days": days, "metric_mask": args.metric_mask}, {},
                   {"checkpoint": args.checkpoint, "data": args.data}, files, started, {"metrics": report.metrics()})
    print(pipeline.table_row(report))
    return 0


def cmd_sweep(args) -> int:
    started = time.time()
    values = load_config(args)
    scenario = scenario_from(values)
    tcfg = train_config_from(values)
    seed = int(values.get("seed", 0))
    scenario = replace(scenario, seed=seed)
    rates = [float(r) for r in args.rates.split(",")] if args.rates else list(pipeline.DEFAULT_RATES)
    result = pipeline.sweep(rates, scenario, pick(values, MODEL_KEYS), replace(tcfg, seed=seed),
                            args.out, csv_dir=args.data, seed=seed)
    out = Path(args.out)
    outputs = [result["table"]] + [p for p in out.glob("rate_*/eval/*") if p.is_file()]
    write_manifest(out, "sweep", {**scenario.to_kv(), **dataclasses.asdict(tcfg), **pick(values, MODEL_KEYS)},
                   {"seed": seed}, {"data": args.data, "config": args.config}, outputs, started,
                   {"rates": rates, "failures": {repr(k): v for k, v in result["failures"].items()}})
    print("limitation  original_rmse  stmamba_rmse  ip       mae")
    for rate, r in result["rows"]:
        print(f"{rate:>10.0%}  {r.original_rmse:13.3f}  {r.rmse:12.3f}  {r.ip:6.3f}%  {r.mae:.3f}")
    for rate, msg in result["failures"].items():
        print(f"rate {rate}: FAILED ({msg})", file=sys.stderr)
    return 1 if result["failures"] else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stmamba", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help="output directory"):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--out", required=True, help=out_help)

    p = sub.add_parser("generate", help="write synthetic trajectory CSVs")
    common(p)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("ingest", help="trajectory CSVs -> ideal and limited flow images")
    common(p)
    p.add_argument("--data", required=True, help="directory of trajectory CSVs")
    p.add_argument("--rate", type=float, help="limitation rate in (0, 1]")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="fit the model on ingested data")
    common(p)
    p.add_argument("--data", required=True, help="ingest output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", help="continue from this checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint against held-out days")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="ingest output directory")
    p.add_argument("--days", type=int, nargs="+", help="days to score (default: test_days)")
    p.add_argument("--metric-mask", choices=("road", "all"), default="road",
                   help="score road cells only (default) or every cell")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="ingest + train + evaluate for several limitation rates")
    common(p)
    p.add_argument("--rates", help="comma-separated rates (default 0.1,0.2,0.3,0.4,0.5)")
    p.add_argument("--data", help="trajectory CSV directory (default: generate one)")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        return args.func(args)
    except (OSError, ValueError, LookupError, RuntimeError, CliError) as exc:
        print(f"stmamba {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
