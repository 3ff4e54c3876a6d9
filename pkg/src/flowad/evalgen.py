"""Metrics, flow-driven synthetic generation, the MLP classifier and the
effectiveness/sensitivity experiment grids.

Generation runs the trained model autoregressively: encode a warm-up
context, decode, sample each prediction step from the flow, slide the
context over the samples and repeat.  Labeled sets are produced by
injecting anomalies into generated panels, which keeps the ground truth
unambiguous.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from . import autodiff as ad
from . import detect as detectmod
from . import flow as flowmod
from . import seqenc
from .dataio import SeriesPanel, time_feature_matrix
from .rng import Xoshiro256, derive_seed
from .synth import InjectionSpec, LabelGrid, inject_anomalies
from .train import DetectorModel


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass
class MetricsRecord:
    precision: float
    recall: float
    f1: float
    auc: float  # NaN when no scores were supplied
    tp: int
    fp: int
    fn: int
    tn: int


def auc_score(scores, labels) -> float:
    """Mann-Whitney rank statistic with average ranks for ties."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores, method="average")
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def metrics(flags, labels, scores=None) -> MetricsRecord:
    """Pointwise confusion counts; AUC from scores when provided."""
    flags = np.asarray(flags).astype(np.int64)
    labels = np.asarray(labels).astype(np.int64)
    if len(flags) == 0:
        raise ValueError("metrics on empty input")
    if flags.shape != labels.shape:
        raise ValueError("flags and labels must align")
    tp = int(np.sum((flags == 1) & (labels == 1)))
    fp = int(np.sum((flags == 1) & (labels == 0)))
    fn = int(np.sum((flags == 0) & (labels == 1)))
    tn = int(np.sum((flags == 0) & (labels == 0)))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    auc = auc_score(scores, labels) if scores is not None else float("nan")
    return MetricsRecord(precision=precision, recall=recall, f1=f1, auc=auc,
                         tp=tp, fp=fp, fn=fn, tn=tn)


def evaluate_static(series: detectmod.AnomalyScoreSeries, labels,
                    prefix_frac: float = 0.3):
    """Search the threshold on the first `prefix_frac` of scored points and
    measure on the remainder.  Returns (epsilon, MetricsRecord)."""
    labels = np.asarray(labels).astype(np.int64)
    scored = np.where(series.scored)[0]
    if len(scored) < 10:
        raise ValueError("too few scored points")
    split = int(round(prefix_frac * len(scored)))
    head, tail = scored[:split], scored[split:]
    eps = detectmod.static_threshold(series.scores[head], labels[head])
    flags = series.scores[tail] > eps
    return eps, metrics(flags, labels[tail], scores=series.scores[tail])


# ---------------------------------------------------------------------------
# autoregressive generation
# ---------------------------------------------------------------------------

@dataclass
class GeneratedDataset:
    panel: SeriesPanel
    labels: LabelGrid
    seed: int
    warmup_start: int  # epoch seconds of the warm-up context
    warmup_len: int


def generate_sequence(model: DetectorModel, warmup: SeriesPanel, length: int,
                      seed: int) -> SeriesPanel:
    """Sample `length` steps beyond the warm-up context.

    The warm-up must be exactly `context_len` steps.  Each iteration encodes
    the rolling context, decodes `pred_len` hidden states, samples one
    observation per step from the flow and appends the samples to the
    context.  Output values are de-standardized.
    """
    if model.encdec is None:
        raise ValueError("generation requires the encoder-decoder conditioner")
    if model.standardizer is None:
        raise ValueError("generation requires the training standardizer")
    if warmup.n_steps != model.context_len:
        raise ValueError(f"warm-up must be {model.context_len} steps, "
                         f"got {warmup.n_steps}")
    step = warmup.step_seconds
    rng = Xoshiro256(seed)
    ctx = model.standardizer.apply(warmup.values)
    ctx_ts = warmup.timestamps.copy()
    out_rows: list[np.ndarray] = []
    out_ts: list[int] = []
    next_ts = int(ctx_ts[-1]) + step
    while len(out_rows) < length:
        pred_ts = np.array([next_ts + step * k for k in range(model.pred_len)],
                           dtype=np.int64)
        ctx_time = time_feature_matrix(ctx_ts)[None, :, :]
        pred_time = time_feature_matrix(pred_ts)[None, :, :]
        e, states = seqenc.encode(ctx[None, :, :], ctx_time, model.encdec)
        hs = seqenc.decode(e, states, pred_time, model.encdec)
        samples = np.empty((model.pred_len, model.dim))
        for t, h in enumerate(hs):
            cond = np.concatenate([h.value, pred_time[:, t, :]], axis=-1)
            x = flowmod.sample(cond, model.flow, rng)
            if not np.all(np.isfinite(x)):
                raise RuntimeError(f"non-finite sample at generated step "
                                   f"{len(out_rows) + t}")
            samples[t] = x[0]
        for t in range(model.pred_len):
            out_rows.append(samples[t])
            out_ts.append(int(pred_ts[t]))
        ctx = np.vstack([ctx[model.pred_len:], samples])
        ctx_ts = np.concatenate([ctx_ts[model.pred_len:], pred_ts])
        next_ts = int(pred_ts[-1]) + step
    values = model.standardizer.invert(np.vstack(out_rows[:length]))
    return SeriesPanel(np.asarray(out_ts[:length], dtype=np.int64),
                       list(model.feature_ids), values)


def make_labeled_set(model: DetectorModel, warmup: SeriesPanel, length: int,
                     spec: InjectionSpec) -> GeneratedDataset:
    """Normal data from the flow, anomalies injected on top with labels."""
    panel = generate_sequence(model, warmup, length, spec.seed)
    injected, labels = inject_anomalies(panel, spec)
    return GeneratedDataset(panel=injected, labels=labels, seed=spec.seed,
                            warmup_start=int(warmup.timestamps[0]),
                            warmup_len=warmup.n_steps)


# ---------------------------------------------------------------------------
# MLP classifier
# ---------------------------------------------------------------------------

@dataclass
class ClassifierConfig:
    hidden: int = 64
    epochs: int = 200
    batch_size: int = 128
    learning_rate: float = 1e-3
    seed: int = 0


@dataclass
class MlpClassifier:
    """Two rectifier hidden layers and a logistic output over one timestamp."""

    weights: list[ad.Node]
    biases: list[ad.Node]
    mean: np.ndarray
    std: np.ndarray

    def parameters(self) -> list[ad.Node]:
        return [*self.weights, *self.biases]


def _classifier_logits(clf: MlpClassifier, x: np.ndarray) -> ad.Node:
    out = (x - clf.mean) / clf.std
    last = len(clf.weights) - 1
    node = out
    for i, (w, b) in enumerate(zip(clf.weights, clf.biases)):
        node = ad.add(ad.matmul(node, w), b)
        if i < last:
            node = ad.relu(node)
    return node


def predict(clf: MlpClassifier, values: np.ndarray) -> np.ndarray:
    """Anomaly probability per row."""
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    logits = _classifier_logits(clf, values).value.ravel()
    return np.where(logits >= 0, 1.0 / (1.0 + np.exp(-logits)),
                    np.exp(logits) / (1.0 + np.exp(logits)))


def train_classifier(values: np.ndarray, labels, config: ClassifierConfig
                     | None = None) -> MlpClassifier:
    """Binary cross-entropy training on per-timestamp vectors."""
    config = config or ClassifierConfig()
    values = np.asarray(values, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64).reshape(-1, 1)
    if set(np.unique(labels).tolist()) != {0.0, 1.0}:
        raise ValueError("training data must contain both classes")
    rng = Xoshiro256(config.seed)
    mean = values.mean(axis=0)
    std = np.maximum(values.std(axis=0), 1e-8)
    dims = [values.shape[1], config.hidden, config.hidden, 1]
    weights, biases = [], []
    for i in range(3):
        weights.append(ad.Node(rng.uniform(-1, 1, size=(dims[i], dims[i + 1]))
                               / np.sqrt(dims[i])))
        biases.append(ad.Node(np.zeros(dims[i + 1])))
    clf = MlpClassifier(weights=weights, biases=biases, mean=mean, std=std)
    params = clf.parameters()
    state = ad.AdamState(lr=config.learning_rate)
    n = len(values)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for i in range(0, n, config.batch_size):
            idx = order[i:i + config.batch_size]
            z = _classifier_logits(clf, values[idx])
            y = labels[idx]
            # stable binary cross-entropy from logits
            loss = ad.mean_along(ad.sub(ad.softplus(z), ad.mul(y, z)))
            for p in params:
                p.zero_grad()
            ad.backward(loss)
            ad.adam_step(params, state)
    return clf


# ---------------------------------------------------------------------------
# experiment grids
# ---------------------------------------------------------------------------

def _concat_panels(head: SeriesPanel, tail: SeriesPanel) -> SeriesPanel:
    if head.feature_ids != tail.feature_ids:
        raise ValueError("panels disagree on features")
    if int(tail.timestamps[0]) - int(head.timestamps[-1]) != head.step_seconds:
        raise ValueError("panels are not contiguous")
    return SeriesPanel(np.concatenate([head.timestamps, tail.timestamps]),
                       list(head.feature_ids),
                       np.vstack([head.values, tail.values]))


def run_injection_trial(model: DetectorModel, context_panel: SeriesPanel,
                        test_panel: SeriesPanel, spec: InjectionSpec,
                        prefix_frac: float = 0.3, ar_lag: int = 12) -> dict:
    """One replicate: inject into the test panel, score with the flow model
    and the AR baseline, threshold statically, measure on the suffix."""
    injected, labels = inject_anomalies(test_panel, spec)
    context_tail = context_panel.slice_rows(context_panel.n_steps - model.context_len,
                                            context_panel.n_steps)
    full = _concat_panels(context_tail, injected)
    point_labels = np.concatenate([np.zeros(model.context_len, dtype=np.int64),
                                   labels.per_timestamp])
    row = {"alpha": spec.alpha, "beta": spec.beta, "seed": spec.seed}
    flow_scores = detectmod.score_panel(model, full)
    ar_scores = detectmod.ar_baseline(full, lag=ar_lag)
    for name, series in (("flow", flow_scores), ("ar", ar_scores)):
        try:
            _, record = evaluate_static(series, point_labels, prefix_frac)
            if record.tp + record.fn == 0:
                record = None  # no positives in the measured suffix
        except ValueError:
            record = None  # single-class prefix: not applicable
        row[name] = record
    return row


def _aggregate(rows, key):
    recs = [r[key] for r in rows if r[key] is not None]
    if not recs:
        return {"recall_mean": float("nan"), "recall_std": float("nan"),
                "f1_mean": float("nan"), "f1_std": float("nan")}
    recall = np.array([r.recall for r in recs])
    f1 = np.array([r.f1 for r in recs])
    return {"recall_mean": float(recall.mean()), "recall_std": float(recall.std()),
            "f1_mean": float(f1.mean()), "f1_std": float(f1.std())}


def run_grid(model: DetectorModel, context_panel: SeriesPanel,
             test_panel: SeriesPanel, alphas, betas, replicates: int,
             base_seed: int = 0, slice_len: int = 6,
             prefix_frac: float = 0.3, ar_lag: int = 12) -> list[dict]:
    """Mean and deviation of recall/F1 per (alpha, beta) cell and method."""
    table = []
    for alpha in alphas:
        for beta in betas:
            rows = []
            for rep in range(replicates):
                seed = derive_seed(base_seed, f"grid-{alpha}-{beta}-{rep}")
                spec = InjectionSpec(alpha=alpha, beta=beta,
                                     slice_len=slice_len, seed=seed)
                rows.append(run_injection_trial(model, context_panel, test_panel,
                                                spec, prefix_frac, ar_lag))
            for method in ("flow", "ar"):
                cell = {"method": method, "alpha": alpha, "beta": beta,
                        "replicates": replicates}
                cell.update(_aggregate(rows, method))
                table.append(cell)
    return table


def run_effectiveness(model, context_panel, test_panel, alphas=(0.05, 0.03, 0.01),
                      beta: float = 0.5, replicates: int = 5, **kw) -> list[dict]:
    """Vary the anomalous-slice fraction at a fixed feature fraction."""
    return run_grid(model, context_panel, test_panel, alphas, [beta],
                    replicates, **kw)


def run_sensitivity(model, context_panel, test_panel, betas=(1.0, 0.5, 0.25),
                    alpha: float = 0.05, replicates: int = 5, **kw) -> list[dict]:
    """Vary the affected-feature fraction at a fixed slice fraction."""
    return run_grid(model, context_panel, test_panel, [alpha], betas,
                    replicates, **kw)


def write_grid(table: list[dict], path) -> None:
    cols = ["method", "alpha", "beta", "replicates",
            "recall_mean", "recall_std", "f1_mean", "f1_std"]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for row in table:
            writer.writerow([row[c] if not isinstance(row[c], float)
                             else repr(row[c]) for c in cols])
