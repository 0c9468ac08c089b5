"""Synthetic multi-day probe data on a ring-road street pattern.

Stands in for a real probe-vehicle dataset: vehicles are dropped uniformly on
road cells, drive along the corridor their cell belongs to, and their speed
follows a double-dip (morning/evening rush) daily profile plus Gaussian noise.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import coerce_into, to_flat, write_kv
from .errors import ValidationError
from .grid import FlowSnapshot, GridMapConfig, RecordArray, write_mask, write_trajectory_csv

HORIZONTAL, VERTICAL = 1, 2
SECONDS_PER_DAY = 86400.0
RUSH_CENTERS_H = (8.5, 18.0)
RUSH_HALF_WIDTH_H = 1.0


@dataclass(frozen=True)
class ScenarioConfig:
    grid: GridMapConfig = dataclasses.field(default_factory=GridMapConfig)
    days: int = 6
    slots_per_day: int = 180
    vehicles_per_slot: float = 2000.0
    base_speed: float = 60.0
    rush_hour_dip: float = 0.4
    speed_noise_std: float = 10.0
    road_thickness: int = 2
    day_start: float = 27000.0  # 07:30
    seed: int = 0
    road_mask: np.ndarray | None = None

    def __post_init__(self):
        if not self.base_speed > 0:
            raise ValidationError("base_speed must be positive")
        if not 0 <= self.rush_hour_dip < 1:
            raise ValidationError("rush_hour_dip must lie in [0, 1)")
        if self.speed_noise_std < 0 or self.vehicles_per_slot < 0:
            raise ValidationError("speed_noise_std and vehicles_per_slot must be non-negative")
        if self.days < 1 or self.slots_per_day < 1:
            raise ValidationError("days and slots_per_day must be positive")
        if self.road_mask is None:
            mask = make_ring_road_mask(self.grid.height, self.grid.width, self.road_thickness)
            object.__setattr__(self, "road_mask", mask)
        elif self.road_mask.shape != (self.grid.height, self.grid.width):
            raise ValidationError("road_mask shape does not match the grid")

    @classmethod
    def from_kv(cls, values: dict[str, str]) -> "ScenarioConfig":
        grid_keys = {f.name for f in dataclasses.fields(GridMapConfig)}
        grid = coerce_into(GridMapConfig, {k: v for k, v in values.items() if k in grid_keys})
        rest = {k: v for k, v in values.items() if k not in grid_keys}
        return coerce_into(cls, rest, grid=grid)

    def to_kv(self) -> dict:
        return {**to_flat(self.grid), **{k: v for k, v in to_flat(self).items() if k != "road_mask"}}


def _check_thickness(H: int, W: int, thickness: int) -> None:
    if thickness < 1 or 2 * thickness >= min(H, W):
        raise ValidationError(f"thickness {thickness} invalid for a {H}x{W} grid")


def ring_inset(H: int, W: int, thickness: int) -> int:
    """Ring sits one cell in from the border when there is room for it."""
    return 1 if 2 * thickness + 2 <= min(H, W) else 0


def ring_band(H: int, W: int, thickness: int) -> np.ndarray:
    """Just the rectangular ring, without the crossing corridors."""
    _check_thickness(H, W, thickness)
    o = ring_inset(H, W, thickness)
    r = np.arange(H)[:, None]
    c = np.arange(W)[None, :]
    inside = (r >= o) & (r < H - o) & (c >= o) & (c < W - o)
    depth = np.minimum(np.minimum(r - o, H - 1 - o - r), np.minimum(c - o, W - 1 - o - c))
    return inside & (depth < thickness)


def _centred_band(n: int, thickness: int) -> slice:
    # floor/ceil keeps the band symmetric when n - thickness is odd
    return slice((n - thickness) // 2, -(-(n + thickness) // 2))


def road_orientation(H: int, W: int, thickness: int) -> np.ndarray:
    """Per-cell bit flags: HORIZONTAL, VERTICAL, both (junctions) or 0 (off road)."""
    _check_thickness(H, W, thickness)
    o = ring_inset(H, W, thickness)
    ring = ring_band(H, W, thickness)
    r = np.arange(H)[:, None]
    c = np.arange(W)[None, :]
    near_row_edge = np.minimum(r - o, H - 1 - o - r) < thickness
    near_col_edge = np.minimum(c - o, W - 1 - o - c) < thickness
    orient = np.zeros((H, W), dtype=np.int64)
    orient |= np.where(ring & near_row_edge, HORIZONTAL, 0)
    orient |= np.where(ring & near_col_edge, VERTICAL, 0)
    rows, cols = _centred_band(H, thickness), _centred_band(W, thickness)
    orient[rows, o:W - o] |= HORIZONTAL
    orient[o:H - o, cols] |= VERTICAL
    return orient


def make_ring_road_mask(H: int, W: int, thickness: int) -> np.ndarray:
    """Inset rectangular ring of the given thickness plus two crossing axial corridors."""
    return road_orientation(H, W, thickness) > 0


def diurnal(slot: np.ndarray | int, cfg: ScenarioConfig) -> np.ndarray:
    """Speed multiplier in (0, 1]: raised-cosine dips at the two rush hours."""
    hour = (cfg.day_start + (np.asarray(slot) + 0.5) * cfg.grid.slot_duration) / 3600.0
    dip = np.zeros_like(hour, dtype=np.float64)
    for centre in RUSH_CENTERS_H:
        d = np.abs(hour - centre)
        dip = dip + np.where(d < RUSH_HALF_WIDTH_H, 0.5 * (1 + np.cos(np.pi * d / RUSH_HALF_WIDTH_H)), 0.0)
    return 1.0 - cfg.rush_hour_dip * np.minimum(dip, 1.0)


def is_rush_slot(slot: int, cfg: ScenarioConfig) -> bool:
    hour = (cfg.day_start + (slot + 0.5) * cfg.grid.slot_duration) / 3600.0
    return any(abs(hour - c) < RUSH_HALF_WIDTH_H for c in RUSH_CENTERS_H)


def day_start_time(cfg: ScenarioConfig, day: int) -> float:
    return day * SECONDS_PER_DAY + cfg.day_start


def generate_day(cfg: ScenarioConfig, day: int) -> list[FlowSnapshot]:
    """All slots of one day; a pure function of (cfg, day)."""
    g = cfg.grid
    rng = np.random.default_rng([cfg.seed, day])
    if cfg.road_mask is not None and not np.array_equal(
            cfg.road_mask, make_ring_road_mask(g.height, g.width, cfg.road_thickness)):
        orient = np.where(cfg.road_mask, HORIZONTAL | VERTICAL, 0)
    else:
        orient = road_orientation(g.height, g.width, cfg.road_thickness)
    cell_h, cell_w = np.nonzero(orient)
    cell_orient = orient[cell_h, cell_w]
    if len(cell_h) == 0:
        raise ValidationError("road mask has no road cells")
    dur_ms = int(round(g.slot_duration * 1000))
    cell_mm = int(np.floor(g.cell_size * 1000))
    factor = diurnal(np.arange(cfg.slots_per_day), cfg)
    headings = np.array([0.0, 90.0, 180.0, 270.0])

    snapshots = []
    t0 = day_start_time(cfg, day)
    first_slot = int(np.floor(t0 / g.slot_duration))
    for s in range(cfg.slots_per_day):
        n = int(rng.poisson(cfg.vehicles_per_slot))
        pick = rng.integers(0, len(cell_h), n)
        u_time = rng.integers(0, dur_ms, n)
        u_x = rng.integers(0, cell_mm, n)
        u_y = rng.integers(0, cell_mm, n)
        noise = rng.standard_normal(n)
        direction = rng.integers(0, 2, n)
        axis = rng.integers(0, 2, n)

        start_ms = int(round((first_slot + s) * g.slot_duration * 1000))
        time = (start_ms + u_time) / 1000.0
        x = g.origin_x + (cell_w[pick] * g.cell_size + u_x / 1000.0)
        y = g.origin_y + (cell_h[pick] * g.cell_size + u_y / 1000.0)
        speed = np.maximum(cfg.base_speed * factor[s] + cfg.speed_noise_std * noise, 0.0)
        o = cell_orient[pick]
        # horizontal corridors run east/west, vertical ones north/south; junctions pick either
        vertical = np.where(o == HORIZONTAL | VERTICAL, axis == 1, o == VERTICAL)
        heading = headings[vertical.astype(np.int64) + 2 * direction]
        ids = np.array([f"d{day}s{s}v{i}" for i in range(n)], dtype=str)
        snapshots.append(FlowSnapshot(first_slot + s, RecordArray(ids, time, x, y, speed, heading)))
    return snapshots


def write_scenario(cfg: ScenarioConfig, out_dir) -> list[Path]:
    """One trajectory CSV per day, the road mask and the resolved scenario config."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for day in range(cfg.days):
        snaps = generate_day(cfg, day)
        path = out / f"day_{day:02d}.csv"
        write_trajectory_csv(path, RecordArray.concatenate([s.records for s in snaps]))
        written.append(path)
    write_mask(out / "road_mask.txt", cfg.road_mask)
    write_kv(out / "scenario.cfg", cfg.to_kv())
    return written + [out / "road_mask.txt", out / "scenario.cfg"]
