"""End to end on a small scenario: generate, ingest at 20%, train, and score
against the Original estimation (the last limited frame)."""
# %%
import tempfile
from pathlib import Path

from stmamba.grid import GridMapConfig
from stmamba.pipeline import evaluate_on_dir, generate, ingest, table_row, train_on_dir
from stmamba.synth import ScenarioConfig
from stmamba.train import TrainConfig

work = Path(tempfile.mkdtemp(prefix="stmamba-demo-"))
scenario = ScenarioConfig(grid=GridMapConfig(height=10, width=10), days=4, slots_per_day=60,
                          vehicles_per_slot=2000.0, seed=1)
generate(scenario, work / "csv")
info = ingest(work / "csv", scenario.grid, rate=0.2, seed=1, out_dir=work / "ingest")
print(f"{info['slots']} slots, kept {info['sampled']} of {info['records']} records")

# %% two training days, one for validation, one held out
tcfg = TrainConfig(epochs=30, batch_size=8, learning_rate=5e-3, train_days=(0, 1), val_days=(2,), test_days=(3,))
model = {"L": "4", "K": "16", "N": "8"}
result = train_on_dir(work / "ingest", model, tcfg, work / "train")
for epoch, tr, va in result["history"]:
    print(f"epoch {epoch:2d}  train {tr:9.2f}  val {va:9.2f}")

# %%
report = evaluate_on_dir(work / "train" / "checkpoint.stmb", work / "ingest", work / "eval", tcfg.test_days)
print(table_row(report))
print("artifacts in", work)
