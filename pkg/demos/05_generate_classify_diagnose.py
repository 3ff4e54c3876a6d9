"""Close the loop: generate labeled data, train a classifier, diagnose.

Uses the checkpoint written by 03_density_model.py (run that first).  The
trained flow generates a labeled synthetic dataset that trains a
per-timestamp MLP; separately, flagged timestamps are broken down to the
features that caused them via period-matched kernel densities.
"""
import pathlib

import numpy as np

from flowad import detect, evalgen, train
from flowad.dataio import SeriesPanel
from flowad.rng import Xoshiro256
from flowad.synth import InjectionSpec, inject_anomalies

out = pathlib.Path("demo_out")
ckpt = out / "demo_model.ckpt"
if not ckpt.exists():
    raise SystemExit("run demos/03_density_model.py first (missing demo_model.ckpt)")

model, _, _ = train.load_checkpoint(ckpt)

# rebuild the demo panel (same construction as 03)
rng = Xoshiro256(4)
T = 288 * 12
t = np.arange(T)
base = np.sin(2 * np.pi * t / 288)
values = np.column_stack([base + rng.normal(size=T) * 0.15,
                          0.7 * base + rng.normal(size=T) * 0.15])
panel = SeriesPanel(1546300800 + 300 * np.arange(T), ["a", "b"], values)
head = panel.slice_rows(0, int(T * 0.9))
tail = panel.slice_rows(int(T * 0.9), T)

# ---- generation: warm up on the end of the training range ------------------
warmup = head.slice_rows(head.n_steps - model.context_len, head.n_steps)
dataset = evalgen.make_labeled_set(model, warmup, length=288 * 2,
                                   spec=InjectionSpec(alpha=0.08, beta=1.0,
                                                      slice_len=6, seed=9))
print(f"generated {dataset.panel.n_steps} steps, "
      f"{int(dataset.labels.per_timestamp.sum())} anomalous timestamps")

# ---- classifier trained purely on generated data ---------------------------
clf = evalgen.train_classifier(dataset.panel.values, dataset.labels.per_timestamp,
                               evalgen.ClassifierConfig(epochs=80, seed=10))

injected, labels = inject_anomalies(tail, InjectionSpec(alpha=0.08, beta=1.0,
                                                        slice_len=6, seed=11))
probs = evalgen.predict(clf, injected.values)
auc = evalgen.auc_score(probs, labels.per_timestamp)
print(f"classifier AUC on injected real tail: {auc:.3f}")

# ---- diagnosis of flagged timestamps ---------------------------------------
full = SeriesPanel(panel.timestamps, panel.feature_ids,
                   np.vstack([head.values, injected.values]))
flagged = [head.n_steps + i for i in np.where(labels.per_timestamp == 1)[0]][:40]
diagnosis = detect.diagnose(full, flagged, sigma_steps=12)
hits = sum(1 for i in flagged if diagnosis.features_at(i))
print(f"diagnosis implicated features at {hits}/{len(flagged)} flagged timestamps")
for i in flagged[:5]:
    print("  row", i, "->", sorted(diagnosis.features_at(i)) or "(none)")
