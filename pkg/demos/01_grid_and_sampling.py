"""Probe data on a grid: one synthetic slot, its ideal flow image, and what
survives when only a fraction of the records is kept."""
# %%
import numpy as np

from stmamba.grid import aggregate_flow_image, sample_limited
from stmamba.synth import ScenarioConfig, generate_day
from stmamba.train import rmse

cfg = ScenarioConfig(slots_per_day=24)
snaps = generate_day(cfg, day=0)
snap = snaps[12]
print(f"slot {snap.slot_index}: {len(snap.records)} records on {cfg.road_mask.sum()} road cells")

# %% road layout, '#' marks a road cell
for row in cfg.road_mask:
    print("".join("#" if v else "." for v in row))

# %% ideal image Z_t: mean speed per (direction, cell)
Z = aggregate_flow_image(snap, cfg.grid)
names = ["east", "south", "west", "north"]
for c, name in enumerate(names):
    occ = Z.occupancy[c]
    print(f"{name:>5}: {int((occ > 0).sum()):3d} cells observed, mean speed {Z.values[c][occ > 0].mean():.1f} km/h")

# %% limited images X_t at several rates; unobserved cells read as 0
for rate in (0.1, 0.2, 0.5, 1.0):
    X = aggregate_flow_image(sample_limited(snap, rate, seed=0), cfg.grid)
    seen = (X.occupancy > 0)[:, cfg.road_mask].mean()
    err = rmse(X.values, Z.values, cfg.road_mask)
    print(f"rate {rate:.1f}: {seen:6.1%} of road entries observed, RMSE vs ideal {err:6.2f}")

# %% at rate 1.0 the limited image is the ideal one
assert aggregate_flow_image(sample_limited(snap, 1.0, seed=3), cfg.grid) == Z
