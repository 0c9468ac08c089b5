"""Directory-level stages: generate -> ingest -> train -> evaluate, and the
limitation-rate sweep that chains them.  The CLI is a thin layer over these.

Ingest directory layout::

    ideal/slot_XXXXXXXX.tfe     Z_t, one per slot
    limited/slot_XXXXXXXX.tfe   X_t, one per slot
    index.csv                   day,slot,records,sampled
    road_mask.txt               cells ever occupied in the ideal images
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import AdamState
from .config import coerce_into, format_value
from .errors import FormatError, ValidationError
from .grid import (FlowImage, GridMapConfig, aggregate_flow_image, read_flow_image, read_trajectory_csv,
                   sample_count, sample_limited, split_into_snapshots, write_flow_image, write_mask)
from .model import ModelConfig, init_params, load_checkpoint, predict, save_checkpoint
from .synth import ScenarioConfig, write_scenario
from .train import (Dataset, EvalReport, TrainConfig, build_dataset, evaluate, road_mask_from_images,
                    train, write_report)

log = logging.getLogger(__name__)

DEFAULT_RATES = (0.1, 0.2, 0.3, 0.4, 0.5)
MODEL_KEYS = ("L", "K", "N", "k_enc", "k_dec", "speed_scale")


def derive_seed(seed: int, *salt: int) -> int:
    return int(np.random.SeedSequence([seed, *salt]).generate_state(1)[0])


def rate_salt(rate: float) -> int:
    return int(round(rate * 1000))


def generate(cfg: ScenarioConfig, out_dir) -> list[Path]:
    return write_scenario(cfg, out_dir)


def _slot_path(root: Path, kind: str, slot: int) -> Path:
    return root / kind / f"slot_{slot:08d}.tfe"


def ingest(csv_dir, grid: GridMapConfig, rate: float, seed: int, out_dir) -> dict:
    """Ideal and limited flow images for every slot of every ``*.csv`` under ``csv_dir``.

    Files are taken in sorted name order and numbered as days 0, 1, ...
    Sampling for slot t uses the seed pair (seed, t).
    """
    if not 0 < rate <= 1:
        raise ValidationError(f"limitation rate must lie in (0, 1], got {rate}")
    csv_files = sorted(Path(csv_dir).glob("*.csv"))
    if not csv_files:
        raise FormatError(f"no trajectory CSV files in {csv_dir}")
    out = Path(out_dir)
    (out / "ideal").mkdir(parents=True, exist_ok=True)
    (out / "limited").mkdir(parents=True, exist_ok=True)
    index_rows, ideal_images, written = [], [], []
    for day, path in enumerate(csv_files):
        records = read_trajectory_csv(path)
        for snap in split_into_snapshots(records, grid):
            limited = sample_limited(snap, rate, [seed, snap.slot_index])
            z = aggregate_flow_image(snap, grid)
            x = aggregate_flow_image(limited, grid)
            for kind, image in (("ideal", z), ("limited", x)):
                p = _slot_path(out, kind, snap.slot_index)
                write_flow_image(p, image)
                written.append(p)
            ideal_images.append(z)
            index_rows.append((day, snap.slot_index, len(snap.records), len(limited.records)))
    with open(out / "index.csv", "w", newline="") as fh:
        fh.write("day,slot,records,sampled\n")
        fh.writelines(f"{d},{s},{n},{m}\n" for d, s, n, m in index_rows)
    mask = road_mask_from_images(ideal_images)
    write_mask(out / "road_mask.txt", mask)
    return {"files": written + [out / "index.csv", out / "road_mask.txt"],
            "slots": len(index_rows),
            "records": sum(r[2] for r in index_rows),
            "sampled": sum(r[3] for r in index_rows),
            "expected_sampled": sum(sample_count(rate, r[2]) for r in index_rows)}


@dataclass
class IngestedData:
    root: Path
    days: dict[int, list[int]]  # day -> ordered slots
    ideal: dict[int, FlowImage]
    limited: dict[int, FlowImage]

    @property
    def grid_shape(self) -> tuple[int, int]:
        return next(iter(self.ideal.values())).values.shape[1:]

    def dataset(self, days: Sequence[int], L: int, road_mask: np.ndarray) -> Dataset:
        """Windows never cross a day boundary; a day's first L-1 slots have no target."""
        parts = []
        for d in days:
            if d not in self.days:
                raise ValidationError(f"day {d} not present in {self.root} (have {sorted(self.days)})")
            slots = self.days[d]
            lim = [self.limited[s] for s in slots]
            ide = [self.ideal[s] for s in slots]
            parts.append(build_dataset(lim, ide, L, road_mask, slots=slots[L - 1:]))
        return Dataset(np.concatenate([p.windows for p in parts]), np.concatenate([p.targets for p in parts]),
                       np.concatenate([p.slots for p in parts]), np.asarray(road_mask, dtype=bool))

    def road_mask(self, days: Sequence[int]) -> np.ndarray:
        return road_mask_from_images([self.ideal[s] for d in days for s in self.days[d]])


def load_ingested(data_dir) -> IngestedData:
    root = Path(data_dir)
    index = root / "index.csv"
    if not index.exists():
        raise FormatError(f"{root} has no index.csv; run ingest first")
    days: dict[int, list[int]] = {}
    ideal, limited = {}, {}
    with open(index, newline="") as fh:
        for row in csv.DictReader(fh):
            d, s = int(row["day"]), int(row["slot"])
            days.setdefault(d, []).append(s)
            ideal[s] = read_flow_image(_slot_path(root, "ideal", s))
            limited[s] = read_flow_image(_slot_path(root, "limited", s))
    if not days:
        raise FormatError(f"{index} lists no slots")
    return IngestedData(root, days, ideal, limited)


# ---------------------------------------------------------------- training


def adam_to_arrays(state: AdamState, names: Sequence[str]) -> dict[str, np.ndarray]:
    out = {"adam.step": np.array([float(state.step)])}
    for name, m, v in zip(names, state.m, state.v):
        out[f"adam.m.{name}"] = m
        out[f"adam.v.{name}"] = v
    return out


def adam_from_arrays(extra: dict[str, np.ndarray], names: Sequence[str]) -> AdamState | None:
    if "adam.step" not in extra:
        return None
    return AdamState(int(extra["adam.step"][0]), [extra[f"adam.m.{n}"] for n in names],
                     [extra[f"adam.v.{n}"] for n in names])


def train_on_dir(data_dir, mcfg_values: dict, tcfg: TrainConfig, out_dir, resume=None) -> dict:
    """Fit on ``tcfg.train_days``, validate on ``tcfg.val_days``; writes checkpoint + loss history."""
    data = load_ingested(data_dir)
    H, W = data.grid_shape
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if resume is not None:
        params, mcfg, extra = load_checkpoint(resume, with_extra=True)
        if (mcfg.H, mcfg.W) != (H, W):
            raise FormatError(f"checkpoint grid {mcfg.H}x{mcfg.W} does not match data grid {H}x{W}")
        opt_state = adam_from_arrays(extra, list(params.named()))
        mask = extra["road_mask"].astype(bool) if "road_mask" in extra else data.road_mask(tcfg.train_days)
    else:
        mcfg = coerce_into(ModelConfig, mcfg_values, H=H, W=W)
        params = init_params(mcfg, tcfg.seed)
        opt_state = None
        mask = data.road_mask(tcfg.train_days)
    train_set = data.dataset(tcfg.train_days, mcfg.L, mask)
    val_set = data.dataset(tcfg.val_days, mcfg.L, mask) if tcfg.val_days else None
    result = train(params, mcfg, train_set, tcfg, val_set, optimizer_state=opt_state)
    extra = adam_to_arrays(result.optimizer_state, list(params.named()))
    extra["road_mask"] = mask.astype(np.float64)
    ckpt = out / "checkpoint.stmb"
    save_checkpoint(result.params, mcfg, ckpt, extra)
    hist = out / "loss_history.csv"
    hist.write_text("epoch,train_loss,val_loss\n"
                    + "".join(f"{e},{format_value(t)},{format_value(v)}\n" for e, t, v in result.history))
    return {"files": [ckpt, hist], "history": result.history, "config": mcfg,
            "final_val_loss": result.history[-1][2]}


def evaluate_on_dir(checkpoint, data_dir, out_dir, days: Sequence[int], masked: bool = True) -> EvalReport:
    params, mcfg, extra = load_checkpoint(checkpoint, with_extra=True)
    data = load_ingested(data_dir)
    if (mcfg.H, mcfg.W) != tuple(data.grid_shape):
        raise FormatError(f"checkpoint grid {mcfg.H}x{mcfg.W} does not match data grid "
                          f"{data.grid_shape[0]}x{data.grid_shape[1]}")
    if masked:
        mask = extra["road_mask"].astype(bool) if "road_mask" in extra else data.road_mask(sorted(data.days))
    else:
        mask = np.ones((mcfg.H, mcfg.W), dtype=bool)
    test_set = data.dataset(days, mcfg.L, mask)
    report = evaluate(lambda w: predict(w, params, mcfg), test_set)
    write_report(report, out_dir)
    return report


def table_row(report: EvalReport) -> str:
    ip = "*" if math.isnan(report.ip) else f"{report.ip:.3f}%"
    return (f"Original  RMSE {report.original_rmse:.3f}  IP *  MAE {report.original_mae:.3f}\n"
            f"ST-Mamba  RMSE {report.rmse:.3f}  IP {ip}  MAE {report.mae:.3f}")


# ------------------------------------------------------------------- sweep


def sweep(rates: Sequence[float], scenario: ScenarioConfig, model_values: dict, tcfg: TrainConfig,
          out_dir, csv_dir=None, seed: int = 0) -> dict:
    """Ingest + train + evaluate at each rate; a failing rate is reported and skipped.

    Returns {"table": path, "rows": [...], "failures": {rate: message}}.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if csv_dir is None:
        csv_dir = out / "data"
        generate(scenario, csv_dir)
    rows, failures = [], {}
    for rate in rates:
        tag = f"rate_{rate:.2f}"
        try:
            ingest_seed = derive_seed(seed, rate_salt(rate), 1)
            train_seed = derive_seed(seed, rate_salt(rate), 2)
            ingest(csv_dir, scenario.grid, rate, ingest_seed, out / tag / "ingest")
            rcfg = replace(tcfg, limitation_rate=rate, seed=train_seed)
            trained = train_on_dir(out / tag / "ingest", model_values, rcfg, out / tag / "train")
            report = evaluate_on_dir(trained["files"][0], out / tag / "ingest", out / tag / "eval",
                                     rcfg.test_days)
            rows.append((rate, report))
            log.info("rate %.2f: original %.3f, model %.3f, IP %.3f", rate, report.original_rmse,
                     report.rmse, report.ip)
        except Exception as exc:  # one bad rate must not sink the others
            log.error("rate %.2f failed: %s", rate, exc)
            failures[rate] = f"{type(exc).__name__}: {exc}"
    table = out / "table.csv"
    table.write_text(
        "limitation,original_rmse,original_mae,stmamba_rmse,stmamba_ip,stmamba_mae\n"
        + "".join(f"{rate!r},{r.original_rmse!r},{r.original_mae!r},{r.rmse!r},{r.ip!r},{r.mae!r}\n"
                  for rate, r in rows))
    return {"table": table, "rows": rows, "failures": failures}
