"""Recovery across limitation rates, laid out like a results table.

Runs the default desk-scale scenario (about 10 minutes on one core).  Pass an
existing sweep directory to just print its table.
"""
# %%
import csv
import sys
import tempfile
from pathlib import Path

from stmamba.cli import main

if len(sys.argv) > 1:
    out = Path(sys.argv[1])
else:
    out = Path(tempfile.mkdtemp(prefix="stmamba-sweep-"))
    main(["sweep", "--out", str(out)])

# %%
with open(out / "table.csv") as fh:
    rows = list(csv.DictReader(fh))
print(f"{'Limitation':>10}  {'Model':<9} {'RMSE':>7} {'IP':>8} {'MAE':>7}")
for r in rows:
    rate = f"{float(r['limitation']):.0%}"
    print(f"{rate:>10}  {'Original':<9} {float(r['original_rmse']):7.3f} {'*':>8} {float(r['original_mae']):7.3f}")
    print(f"{'':>10}  {'ST-Mamba':<9} {float(r['stmamba_rmse']):7.3f} {float(r['stmamba_ip']):7.3f}% "
          f"{float(r['stmamba_mae']):7.3f}")

# %% per-slot error CDF at 20%, as plotted data
cdf = out / "rate_0.20" / "eval" / "cdf.csv"
if cdf.exists():
    points = list(csv.reader(open(cdf)))[1:]
    for q in (0.25, 0.5, 0.75, 1.0):
        err = next(float(e) for e, f in points if float(f) >= q)
        print(f"{q:.0%} of test slots have RMSE <= {err:.2f}")
