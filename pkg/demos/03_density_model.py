"""Train the conditional-flow density model and flag injected anomalies.

A correlated two-feature sinusoid panel is split 9/10; the model trains on
the head, anomalies are injected into the tail, and the static F1-searched
threshold turns averaged log-density scores into flags.
"""
import pathlib

import numpy as np

from flowad import detect, evalgen, train
from flowad.dataio import SeriesPanel, fit_standardizer, make_windows
from flowad.rng import Xoshiro256
from flowad.synth import InjectionSpec

out = pathlib.Path("demo_out")
out.mkdir(exist_ok=True)

rng = Xoshiro256(4)
T = 288 * 12
t = np.arange(T)
base = np.sin(2 * np.pi * t / 288)
values = np.column_stack([base + rng.normal(size=T) * 0.15,
                          0.7 * base + rng.normal(size=T) * 0.15])
panel = SeriesPanel(1546300800 + 300 * np.arange(T), ["a", "b"], values)

split = int(T * 0.9)
head, tail = panel.slice_rows(0, split), panel.slice_rows(split, T)

sz = fit_standardizer(head)
model = train.build_model(n_features=2, context_len=48, pred_len=12,
                          hidden=[24, 12], n_blocks=4, st_hidden=24,
                          st_layers=2, seed=5, standardizer=sz,
                          feature_ids=panel.feature_ids)
windows = make_windows(sz.apply_panel(head), 48, 12, 12)
config = train.TrainConfig(max_epochs=25, batch_size=64, learning_rate=2e-3,
                           patience=8, seed=6)
print(f"training on {len(windows)} windows ...")
history = train.fit(windows, model, config)
print(f"best validation nll {history.best_val_loss:.3f} at epoch {history.best_epoch}")

train.save_checkpoint(model, out / "demo_model.ckpt", config=config, history=history)

# inject anomalies into the held-out tail and score it with warm context
spec = InjectionSpec(alpha=0.08, beta=1.0, slice_len=6, seed=7)
row = evalgen.run_injection_trial(model, head, tail, spec)
print("\nflow detector :", row["flow"])
print("ar baseline   :", row["ar"])
print("\nthe flow's F1 should clearly beat the linear autoregressive score")
