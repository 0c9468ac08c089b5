"""Training loop, masked loss, and recovery metrics (RMSE, MAE, improvement
percentage, per-slot error CDF)."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, AdamState, Tensor
from .config import coerce_into, format_value
from .errors import ContractError, ValidationError
from .grid import FlowImage, build_input_sequence
from .model import ModelConfig, ModelParams, forward

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 6
    batch_size: int = 16
    learning_rate: float = 5e-3
    seed: int = 0
    limitation_rate: float = 0.2
    train_days: tuple = (0, 1, 2, 3)
    val_days: tuple = (4,)
    test_days: tuple = (5,)

    def __post_init__(self):
        if not 0 < self.limitation_rate <= 1:
            raise ValidationError("limitation_rate must lie in (0, 1]")
        if self.epochs < 0 or self.batch_size < 1 or not self.learning_rate > 0:
            raise ValidationError("epochs >= 0, batch_size >= 1 and learning_rate > 0 required")
        splits = [set(self.train_days), set(self.val_days), set(self.test_days)]
        if splits[0] & splits[1] or splits[0] & splits[2] or splits[1] & splits[2]:
            raise ValidationError("train/validation/test days must be disjoint")

    @classmethod
    def from_kv(cls, values) -> "TrainConfig":
        return coerce_into(cls, values)


@dataclass
class Dataset:
    """Windows (S, L, 4, H, W) of limited images, ideal targets (S, 4, H, W)."""

    windows: np.ndarray
    targets: np.ndarray
    slots: np.ndarray
    road_mask: np.ndarray

    def __len__(self) -> int:
        return len(self.slots)

    def subset(self, index) -> "Dataset":
        return Dataset(self.windows[index], self.targets[index], self.slots[index], self.road_mask)


def build_dataset(limited: Sequence[FlowImage], ideal: Sequence[FlowImage], L: int,
                  road_mask: np.ndarray, slots: Sequence[int] | None = None) -> Dataset:
    """One sample per target slot t whose window t-L+1..t is fully available.

    Without ``slots``, every ideal slot with a complete limited window is used.
    """
    lim = {im.slot_index: im for im in limited}
    ide = {im.slot_index: im for im in ideal}
    if slots is None:
        slots = [t for t in sorted(ide) if all(s in lim for s in range(t - L + 1, t + 1))]
    windows, targets = [], []
    for t in slots:
        windows.append(np.stack([im.values for im in build_input_sequence(lim, t, L)]))
        if t not in ide:
            raise ContractError(f"no ideal image for slot {t}")
        targets.append(ide[t].values)
    H, W = np.asarray(road_mask).shape
    if not windows:
        return Dataset(np.zeros((0, L, 4, H, W)), np.zeros((0, 4, H, W)), np.zeros(0, dtype=np.int64),
                       np.asarray(road_mask, dtype=bool))
    return Dataset(np.stack(windows), np.stack(targets), np.asarray(slots, dtype=np.int64),
                   np.asarray(road_mask, dtype=bool))


def road_mask_from_images(images: Sequence[FlowImage]) -> np.ndarray:
    """Cells that ever hold a record in any direction."""
    occ = np.zeros(images[0].occupancy.shape[1:], dtype=bool)
    for im in images:
        occ |= im.occupancy.sum(axis=0) > 0
    return occ


def _channel_mask(mask: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != shape[-2:]:
        raise ContractError(f"mask {mask.shape} does not match image {shape}")
    if not mask.any():
        raise ContractError("mask selects no cells")
    return np.broadcast_to(mask, shape)


def masked_mse_loss(Y, Z, road_mask) -> Tensor:
    """Mean of (Y - Z)^2 over road cells, all four channels (and the batch)."""
    Y = ad.as_tensor(Y)
    z = Z.values if isinstance(Z, FlowImage) else np.asarray(Z, dtype=np.float64)
    if z.shape != Y.shape:
        raise ContractError(f"prediction {Y.shape} and target {z.shape} differ")
    m = _channel_mask(road_mask, Y.shape).astype(np.float64)
    diff = ad.sub(Y, Tensor(z))
    return ad.scale(ad.sum(ad.mul(ad.mul(diff, diff), Tensor(m))), 1.0 / m.sum())


def _masked_errors(Y, Z, mask) -> np.ndarray:
    Y = np.asarray(Y, dtype=np.float64)
    Z = np.asarray(Z, dtype=np.float64)
    if Y.shape != Z.shape:
        raise ContractError(f"images {Y.shape} and {Z.shape} differ")
    return (Y - Z)[_channel_mask(mask, Y.shape)]


def rmse(Y, Z, mask) -> float:
    """Root mean squared error pooled over every masked entry of every slot."""
    e = _masked_errors(Y, Z, mask)
    return math.sqrt(float(np.mean(e * e)))


def mae(Y, Z, mask) -> float:
    return float(np.mean(np.abs(_masked_errors(Y, Z, mask))))


def improvement_percentage(rmse_original: float, rmse_model: float) -> float:
    if not rmse_original > 0:
        raise ContractError("improvement percentage needs a positive original RMSE")
    return 100.0 * (rmse_original - rmse_model) / rmse_original


def error_cdf(errors) -> list[tuple[float, float]]:
    """Empirical CDF: the i-th order statistic (1-based) gets fraction i/n."""
    v = np.sort(np.asarray(errors, dtype=np.float64).ravel())
    if v.size == 0:
        raise ContractError("error_cdf needs at least one value")
    n = v.size
    return [(float(x), (i + 1) / n) for i, x in enumerate(v)]


@dataclass
class EvalReport:
    rmse: float
    mae: float
    ip: float
    per_slot_rmse: np.ndarray
    cdf_points: list
    original_rmse: float
    original_mae: float
    original_per_slot_rmse: np.ndarray
    original_cdf_points: list
    slots: np.ndarray

    def metrics(self) -> dict:
        return {"original_rmse": self.original_rmse, "original_mae": self.original_mae,
                "rmse": self.rmse, "ip": self.ip, "mae": self.mae, "slots": len(self.slots)}


def per_slot_rmse(Y: np.ndarray, Z: np.ndarray, mask) -> np.ndarray:
    m = _channel_mask(mask, Y.shape[1:])
    return np.array([math.sqrt(float(np.mean((y - z)[m] ** 2))) for y, z in zip(Y, Z)])


def evaluate(predict_fn: Callable[[np.ndarray], np.ndarray], test_set: Dataset,
             batch_size: int = 32) -> EvalReport:
    """Score the Original estimation (last frame of each window) and the model.

    ``predict_fn`` maps a (B, L, 4, H, W) batch of windows to (B, 4, H, W).
    """
    if len(test_set) == 0:
        raise ContractError("evaluate needs a non-empty test set")
    preds = np.concatenate([np.asarray(predict_fn(test_set.windows[i:i + batch_size]))
                            for i in range(0, len(test_set), batch_size)])
    original = test_set.windows[:, -1]
    Z, mask = test_set.targets, test_set.road_mask
    o_rmse = rmse(original, Z, mask)
    m_rmse = rmse(preds, Z, mask)
    ip = improvement_percentage(o_rmse, m_rmse) if o_rmse > 0 else float("nan")
    m_slot, o_slot = per_slot_rmse(preds, Z, mask), per_slot_rmse(original, Z, mask)
    return EvalReport(rmse=m_rmse, mae=mae(preds, Z, mask), ip=ip, per_slot_rmse=m_slot,
                      cdf_points=error_cdf(m_slot), original_rmse=o_rmse, original_mae=mae(original, Z, mask),
                      original_per_slot_rmse=o_slot, original_cdf_points=error_cdf(o_slot),
                      slots=test_set.slots)


def write_report(report: EvalReport, out_dir) -> list[Path]:
    """metrics.txt (key=value) plus per-slot and CDF CSVs for both estimations."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "metrics.txt"]
    paths[0].write_text("".join(f"{k}={format_value(v)}\n" for k, v in report.metrics().items()),
                        encoding="utf-8")
    for prefix, series, cdf in (("", report.per_slot_rmse, report.cdf_points),
                                ("original_", report.original_per_slot_rmse, report.original_cdf_points)):
        p = out / f"{prefix}per_slot.csv"
        p.write_text("slot,rmse\n" + "".join(f"{s},{v!r}\n" for s, v in zip(report.slots.tolist(), series.tolist())))
        c = out / f"{prefix}cdf.csv"
        c.write_text("error,fraction\n" + "".join(f"{e!r},{f!r}\n" for e, f in cdf))
        paths += [p, c]
    return paths


# ----------------------------------------------------------------- training


@dataclass
class TrainResult:
    params: ModelParams
    history: list = field(default_factory=list)  # (epoch, train_loss, val_loss); epoch 0 = init
    optimizer_state: AdamState | None = None


def dataset_loss(params: ModelParams, cfg: ModelConfig, data: Dataset, batch_size: int = 32) -> float:
    """Masked MSE over a whole dataset, computed without recording a graph."""
    total, count = 0.0, 0
    m = _channel_mask(data.road_mask, data.targets.shape[1:])
    with ad.no_grad():
        for i in range(0, len(data), batch_size):
            y = forward(data.windows[i:i + batch_size], params, cfg).data
            d = (y - data.targets[i:i + batch_size])[:, m]
            total += float(np.sum(d * d))
            count += d.size
    return total / count


def train(params: ModelParams, cfg: ModelConfig, train_set: Dataset, tcfg: TrainConfig,
          val_set: Dataset | None = None, optimizer_state: AdamState | None = None,
          on_epoch: Callable | None = None) -> TrainResult:
    """Adam on masked MSE over shuffled minibatches; deterministic for a seed.

    ``params`` is updated in place and returned.
    """
    if len(train_set) == 0:
        raise ContractError("train needs a non-empty dataset")
    rng = np.random.default_rng(tcfg.seed)
    opt = Adam(params.tensors(), lr=tcfg.learning_rate)
    if optimizer_state is not None:
        opt.state = optimizer_state
    val_loss = dataset_loss(params, cfg, val_set) if val_set is not None and len(val_set) else float("nan")
    history = [(0, dataset_loss(params, cfg, train_set), val_loss)]
    for epoch in range(1, tcfg.epochs + 1):
        order = rng.permutation(len(train_set))
        losses = []
        for start in range(0, len(order), tcfg.batch_size):
            idx = np.sort(order[start:start + tcfg.batch_size])
            opt.zero_grad()
            y = forward(train_set.windows[idx], params, cfg)
            loss = masked_mse_loss(y, train_set.targets[idx], train_set.road_mask)
            ad.backward(loss)
            opt.step()
            losses.append(loss.item())
        val_loss = dataset_loss(params, cfg, val_set) if val_set is not None and len(val_set) else float("nan")
        history.append((epoch, float(np.mean(losses)), val_loss))
        log.info("epoch %d train %.4f val %.4f", epoch, history[-1][1], val_loss)
        if on_epoch is not None:
            on_epoch(epoch, history[-1])
    return TrainResult(params, history, opt.state)
