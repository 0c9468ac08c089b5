"""Grid-structured city map: matching probe records to cells and direction channels.

Records are held column-wise in :class:`RecordArray` so that a day of probe data
(hundreds of thousands of rows) aggregates with a couple of ``bincount`` calls.
Channel order is (east, south, west, north).
"""
from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import FormatError, SequencingError, ValidationError

NUM_DIRECTIONS = 4
EAST, SOUTH, WEST, NORTH = range(4)
CSV_HEADER = ("vehicle_id", "time", "x", "y", "speed", "heading")
TFE_MAGIC = b"TFE1"

# sector index floor(((heading + 45) mod 360) / 90) -> channel
_SECTOR_TO_CHANNEL = np.array([EAST, NORTH, WEST, SOUTH])


@dataclass(frozen=True)
class GridMapConfig:
    origin_x: float = 0.0
    origin_y: float = 0.0
    cell_size: float = 100.0
    height: int = 16
    width: int = 16
    slot_duration: float = 300.0
    num_directions: int = NUM_DIRECTIONS

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValidationError(f"grid must be at least 1x1, got {self.height}x{self.width}")
        if not self.cell_size > 0:
            raise ValidationError(f"cell_size must be positive, got {self.cell_size}")
        if not self.slot_duration > 0:
            raise ValidationError(f"slot_duration must be positive, got {self.slot_duration}")
        if self.num_directions != NUM_DIRECTIONS:
            raise ValidationError("num_directions is fixed at 4")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (NUM_DIRECTIONS, self.height, self.width)

    def slot_of(self, time):
        return np.floor(np.asarray(time, dtype=np.float64) / self.slot_duration).astype(np.int64)


class VehicleRecord(NamedTuple):
    vehicle_id: str
    time: float
    x: float
    y: float
    speed: float
    heading: float

    def validate(self) -> None:
        if not self.speed >= 0:
            raise ValidationError(f"speed must be >= 0, got {self.speed}")
        if not 0 <= self.heading < 360:
            raise ValidationError(f"heading must lie in [0, 360), got {self.heading}")


@dataclass
class RecordArray:
    """Column store of vehicle records; all columns share one length."""

    vehicle_id: np.ndarray
    time: np.ndarray
    x: np.ndarray
    y: np.ndarray
    speed: np.ndarray
    heading: np.ndarray

    def __post_init__(self):
        self.vehicle_id = np.asarray(self.vehicle_id, dtype=str)
        for name in CSV_HEADER[1:]:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        n = len(self.vehicle_id)
        if any(len(getattr(self, c)) != n for c in CSV_HEADER[1:]):
            raise ValidationError("record columns have different lengths")

    def __len__(self) -> int:
        return len(self.time)

    def __getitem__(self, index: int) -> VehicleRecord:
        return VehicleRecord(str(self.vehicle_id[index]), *(float(getattr(self, c)[index]) for c in CSV_HEADER[1:]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def take(self, index) -> "RecordArray":
        return RecordArray(*(getattr(self, c)[index] for c in CSV_HEADER))

    def validate(self) -> None:
        if np.any(~(self.speed >= 0)):
            raise ValidationError("speed must be >= 0")
        if np.any(~((self.heading >= 0) & (self.heading < 360))):
            raise ValidationError("heading must lie in [0, 360)")

    @classmethod
    def empty(cls) -> "RecordArray":
        return cls(np.empty(0, dtype=str), *(np.empty(0) for _ in range(5)))

    @classmethod
    def from_records(cls, records: Iterable[VehicleRecord]) -> "RecordArray":
        rows = list(records)
        if not rows:
            return cls.empty()
        cols = list(zip(*rows))
        return cls(np.array(cols[0], dtype=str), *(np.array(c, dtype=np.float64) for c in cols[1:]))

    @classmethod
    def concatenate(cls, parts: Sequence["RecordArray"]) -> "RecordArray":
        if not parts:
            return cls.empty()
        return cls(*(np.concatenate([getattr(p, c) for p in parts]) for c in CSV_HEADER))


@dataclass
class FlowSnapshot:
    slot_index: int
    records: RecordArray = field(default_factory=RecordArray.empty)

    def check(self, cfg: GridMapConfig) -> None:
        bad = cfg.slot_of(self.records.time) != self.slot_index
        if np.any(bad):
            raise ValidationError(f"{int(bad.sum())} records do not belong to slot {self.slot_index}")


@dataclass
class FlowImage:
    slot_index: int
    values: np.ndarray     # (4, H, W) mean speed, km/h; 0 where unobserved
    occupancy: np.ndarray  # (4, H, W) record counts

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    def __eq__(self, other) -> bool:
        return (isinstance(other, FlowImage) and self.slot_index == other.slot_index
                and np.array_equal(self.values, other.values)
                and np.array_equal(self.occupancy, other.occupancy))


def heading_to_channel(heading: float) -> int:
    """90-degree sectors centred on the cardinal directions; 0 = east, 90 = north."""
    if not 0 <= heading < 360:
        raise ValidationError(f"heading must lie in [0, 360), got {heading}")
    return int(_SECTOR_TO_CHANNEL[int(((heading + 45.0) % 360.0) // 90.0)])


def headings_to_channels(heading: np.ndarray) -> np.ndarray:
    heading = np.asarray(heading, dtype=np.float64)
    if np.any(~((heading >= 0) & (heading < 360))):
        raise ValidationError("heading must lie in [0, 360)")
    sector = (np.mod(heading + 45.0, 360.0) // 90.0).astype(np.int64)
    return _SECTOR_TO_CHANNEL[sector]


def assign_to_grid(record: VehicleRecord, cfg: GridMapConfig) -> tuple[int, int, int] | None:
    h = math.floor((record.y - cfg.origin_y) / cfg.cell_size)
    w = math.floor((record.x - cfg.origin_x) / cfg.cell_size)
    if not (0 <= h < cfg.height and 0 <= w < cfg.width):
        return None
    return h, w, heading_to_channel(record.heading)


def assign_cells(records: RecordArray, cfg: GridMapConfig):
    """Vectorised :func:`assign_to_grid`; returns (h, w, channel, inside) arrays."""
    h = np.floor((records.y - cfg.origin_y) / cfg.cell_size)
    w = np.floor((records.x - cfg.origin_x) / cfg.cell_size)
    inside = (h >= 0) & (h < cfg.height) & (w >= 0) & (w < cfg.width)
    h = np.where(inside, h, 0).astype(np.int64)
    w = np.where(inside, w, 0).astype(np.int64)
    return h, w, headings_to_channels(records.heading), inside


def aggregate_flow_image(snapshot: FlowSnapshot, cfg: GridMapConfig) -> FlowImage:
    """Per (channel, cell) mean speed and count; unobserved entries are 0 / 0."""
    size = NUM_DIRECTIONS * cfg.height * cfg.width
    recs = snapshot.records
    if len(recs) == 0:
        return FlowImage(snapshot.slot_index, np.zeros(cfg.shape), np.zeros(cfg.shape, dtype=np.int64))
    h, w, c, inside = assign_cells(recs, cfg)
    flat = ((c * cfg.height + h) * cfg.width + w)[inside]
    counts = np.bincount(flat, minlength=size)
    sums = np.bincount(flat, weights=recs.speed[inside], minlength=size)
    values = np.divide(sums, counts, out=np.zeros(size), where=counts > 0)
    return FlowImage(snapshot.slot_index, values.reshape(cfg.shape), counts.reshape(cfg.shape))


def sample_count(rate: float, n: int) -> int:
    """round(rate * n) with halves rounded up."""
    return int(math.floor(rate * n + 0.5))


def sample_limited(snapshot: FlowSnapshot, rate: float, seed) -> FlowSnapshot:
    """Keep round(rate * n) records chosen uniformly without replacement.

    The kept records stay in their original order, so rate 1.0 reproduces the
    input exactly, and for a fixed seed a lower rate keeps a subset of a
    higher one.
    """
    if not 0 < rate <= 1:
        raise ValidationError(f"limitation rate must lie in (0, 1], got {rate}")
    n = len(snapshot.records)
    order = np.random.default_rng(seed).permutation(n)
    keep = np.sort(order[:sample_count(rate, n)])
    return FlowSnapshot(snapshot.slot_index, snapshot.records.take(keep))


def build_input_sequence(images, t: int, L: int) -> list[FlowImage]:
    """Chronological window [X_{t-L+1}, ..., X_t].

    ``images`` is a mapping slot -> FlowImage or an iterable of FlowImage.
    """
    if L < 1:
        raise ValidationError(f"window length must be positive, got {L}")
    by_slot = images if isinstance(images, dict) else {im.slot_index: im for im in images}
    window = []
    for slot in range(t - L + 1, t + 1):
        if slot not in by_slot:
            raise SequencingError(slot, f"window ending at slot {t} needs slot {slot}, which is missing")
        window.append(by_slot[slot])
    return window


def split_into_snapshots(records: RecordArray, cfg: GridMapConfig,
                         slots: Iterable[int] | None = None) -> list[FlowSnapshot]:
    """Group records by time slot (original record order kept inside each slot).

    Without ``slots`` every slot between the first and last record is returned,
    empty ones included.
    """
    slot = cfg.slot_of(records.time)
    if slots is None:
        if len(records) == 0:
            return []
        slots = range(int(slot.min()), int(slot.max()) + 1)
    order = np.argsort(slot, kind="stable")
    sorted_slots = slot[order]
    out = []
    for s in slots:
        lo, hi = np.searchsorted(sorted_slots, [s, s + 1])
        out.append(FlowSnapshot(int(s), records.take(order[lo:hi])))
    return out


# --------------------------------------------------------------------- I/O


def write_trajectory_csv(path, records: RecordArray) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(CSV_HEADER) + "\n")
        cols = [records.vehicle_id] + [getattr(records, c) for c in CSV_HEADER[1:]]
        lines = [f"{v},{t!r},{x!r},{y!r},{s!r},{h!r}\n"
                 for v, t, x, y, s, h in zip(cols[0], *(c.tolist() for c in cols[1:]))]
        fh.writelines(lines)


def read_trajectory_csv(path) -> RecordArray:
    """Parse a trajectory CSV; malformed rows raise FormatError naming file and line."""
    path = Path(path)
    ids, cols = [], [[] for _ in range(5)]
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CSV_HEADER:
            raise FormatError(f"{path}:1: expected header {','.join(CSV_HEADER)}")
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != 6:
                raise FormatError(f"{path}:{line}: expected 6 fields, got {len(row)}")
            try:
                vals = [float(v) for v in row[1:]]
            except ValueError as exc:
                raise FormatError(f"{path}:{line}: {exc}") from None
            if not vals[3] >= 0 or not 0 <= vals[4] < 360 or not all(map(math.isfinite, vals)):
                raise FormatError(f"{path}:{line}: speed or heading out of range")
            ids.append(row[0])
            for col, v in zip(cols, vals):
                col.append(v)
    return RecordArray(np.array(ids, dtype=str), *(np.array(c, dtype=np.float64) for c in cols))


def write_flow_image(path, image: FlowImage) -> None:
    c, h, w = image.values.shape
    with open(path, "wb") as fh:
        fh.write(TFE_MAGIC)
        fh.write(struct.pack("<4I", image.slot_index, c, h, w))
        fh.write(np.asarray(image.values, dtype="<f4").tobytes())
        fh.write(np.asarray(image.occupancy, dtype="<u4").tobytes())


def read_flow_image(path) -> FlowImage:
    data = Path(path).read_bytes()
    if data[:4] != TFE_MAGIC:
        raise FormatError(f"{path}: not a TFE1 flow image")
    if len(data) < 20:
        raise FormatError(f"{path}: truncated header")
    slot, c, h, w = struct.unpack("<4I", data[4:20])
    n = c * h * w
    if c != NUM_DIRECTIONS or len(data) != 20 + 8 * n:
        raise FormatError(f"{path}: size {len(data)} does not match {c}x{h}x{w} payload")
    values = np.frombuffer(data, dtype="<f4", count=n, offset=20).reshape(c, h, w).astype(np.float64)
    occ = np.frombuffer(data, dtype="<u4", count=n, offset=20 + 4 * n).reshape(c, h, w).astype(np.int64)
    return FlowImage(slot, values, occ)


def write_mask(path, mask: np.ndarray) -> None:
    rows = ["".join("1" if v else "0" for v in row) for row in np.asarray(mask, dtype=bool)]
    Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8")


def read_mask(path) -> np.ndarray:
    lines = [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not lines or len({len(ln) for ln in lines}) != 1 or set("".join(lines)) - {"0", "1"}:
        raise FormatError(f"{path}: mask must be rows of 0/1 characters of equal length")
    return np.array([[ch == "1" for ch in ln] for ln in lines])
