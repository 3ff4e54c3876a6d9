"""Panels end to end: speed files -> congestion rates -> clean windows.

Builds a toy three-segment speed dataset, derives congestion rates,
punches a few holes and repairs them, then cuts the sliding windows the
density model trains on.  Artifacts land in ./demo_out/.
"""
import pathlib

import numpy as np

from flowad import dataio
from flowad.rng import Xoshiro256

out = pathlib.Path("demo_out")
out.mkdir(exist_ok=True)

# ---- a week of 5-minute speeds for three road segments -------------------
rng = Xoshiro256(1)
T = 7 * 288
t = np.arange(T)
rush = 12.0 * np.exp(-0.5 * ((t % 288 - 102) / 18.0) ** 2)  # morning slowdown
speeds = np.column_stack([
    65 - rush + rng.normal(size=T) * 2.0,
    55 - 0.8 * rush + rng.normal(size=T) * 2.0,
    70 - 1.2 * rush + rng.normal(size=T) * 2.5,
])
ts = 1546300800 + 300 * np.arange(T)
ids = ["seg_a", "seg_b", "seg_c"]

observed = dataio.SeriesPanel(ts, ids, speeds)

# historical average: mean speed per hour-of-week, broadcast back over time
hourly = dataio.historical_averages(observed)
slots = np.array([dataio.week_slot(x) for x in ts])
historical = dataio.SeriesPanel(ts, ids, hourly[slots])

free_flow = np.array([dataio.free_flow_speed(speeds[:, j]) for j in range(3)])
print("free-flow speeds (85th pct):", np.round(free_flow, 1))

panel = dataio.congestion_panel(dataio.SpeedPanel(observed, historical, free_flow))
print("congestion range:", np.round(panel.values.min(), 3), "..",
      np.round(panel.values.max(), 3))

# ---- knock out some cells and impute them ---------------------------------
holes = panel.copy()
holes.values[100:130, 0] = np.nan
holes.values[500, 2] = np.nan
neighbors = {"seg_a": ["seg_b"], "seg_b": ["seg_a", "seg_c"], "seg_c": ["seg_b"]}
repaired = dataio.impute(holes, neighbors)
print("gaps before/after impute:",
      int(np.isnan(holes.values).sum()), "->", int(np.isnan(repaired.values).sum()))

# ---- calendar features and windows ----------------------------------------
feats = dataio.time_feature_matrix(panel.timestamps[:3])
print("first rows of (week, day, hour) features:\n", np.round(feats, 3))

sz = dataio.fit_standardizer(repaired)
windows = dataio.make_windows(sz.apply_panel(repaired),
                              context_len=72, pred_len=12, stride=12)
print(f"{len(windows)} windows of 72+12 steps at stride 12")

dataio.write_panel(repaired, out / "congestion.csv")
print("wrote", out / "congestion.csv")
