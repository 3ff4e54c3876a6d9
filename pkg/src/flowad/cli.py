"""Batch command-line surface for the detection pipeline.

Subcommands map one-to-one onto pipeline stages; every invocation is
deterministic given its inputs and seed, all warnings go to standard
error, and the exit status is zero exactly when no error occurred.
Verbosity is controlled by the FLOWAD_LOG environment variable.
"""
from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import cluster as clustermod
from . import detect as detectmod
from . import evalgen
from . import synth as synthmod
from . import train as trainmod
from .config import ConfigError, RunConfig, load_config, save_config
from .dataio import (SeriesPanel, format_timestamp, fit_standardizer,
                     make_windows, read_panel, write_panel)
from .rng import derive_seed
from .synth import InjectionSpec, LabelGrid
from .train import TrainConfig

log = logging.getLogger("flowad")


def _setup_logging() -> None:
    level = os.environ.get("FLOWAD_LOG", "warning").upper()
    logging.basicConfig(stream=sys.stderr,
                        level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _load_cfg(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.validate()
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _labels_per_timestamp(labels_panel: SeriesPanel) -> np.ndarray:
    return (labels_panel.values.sum(axis=1) > 0).astype(np.int64)


def _subpanel(panel: SeriesPanel, feature_ids) -> SeriesPanel:
    col = {f: i for i, f in enumerate(panel.feature_ids)}
    missing = [f for f in feature_ids if f not in col]
    if missing:
        raise ValueError(f"panel lacks features {missing}")
    idx = [col[f] for f in feature_ids]
    return SeriesPanel(panel.timestamps.copy(), list(feature_ids),
                       panel.values[:, idx].copy())


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_cluster(args) -> None:
    cfg = _load_cfg(args)
    panel = read_panel(args.data)
    sample_size = args.sample_size or min(cfg.cluster.sample_size, panel.n_features)
    assignment = clustermod.cluster_features(
        panel, sample_size=sample_size, min_pts=cfg.cluster.min_pts,
        xi=cfg.cluster.xi, seed=derive_seed(cfg.seed, "cluster"),
        week_start=cfg.cluster.week_start, band=cfg.cluster.band)
    out = _out_dir(args) / "clusters.csv"
    clustermod.save_assignment(assignment, out)
    log.info("wrote %s (%d clusters)", out, len(assignment.medoids))
    print(out)


def _train_one(panel, cfg, label, out_dir, window, model_cfg) -> Path:
    sz = fit_standardizer(panel)
    std_panel = sz.apply_panel(panel)
    windows = make_windows(std_panel, window.context_len, window.pred_len,
                           window.stride)
    model = trainmod.build_model(
        n_features=panel.n_features, context_len=window.context_len,
        pred_len=window.pred_len, hidden=model_cfg.hidden,
        n_blocks=model_cfg.n_blocks, st_hidden=model_cfg.st_hidden,
        st_layers=model_cfg.st_layers,
        seed=derive_seed(cfg.seed, f"init-{label}"), standardizer=sz,
        feature_ids=panel.feature_ids)
    tc = TrainConfig(max_epochs=cfg.train.max_epochs,
                     batch_size=cfg.train.batch_size,
                     learning_rate=cfg.train.learning_rate,
                     val_fraction=cfg.train.val_fraction,
                     patience=cfg.train.patience, clip_norm=cfg.train.clip_norm,
                     seed=derive_seed(cfg.seed, f"train-{label}"))
    history = trainmod.fit(windows, model, tc)
    path = out_dir / f"model_{label}.ckpt"
    trainmod.save_checkpoint(model, path, config=tc, history=history)
    log.info("cluster %s: best val %.4f at epoch %d", label,
             history.best_val_loss, history.best_epoch)
    return path


def cmd_train(args) -> None:
    cfg = _load_cfg(args)
    if args.epochs:
        cfg.train.max_epochs = args.epochs
    panel = read_panel(args.data)
    out_dir = _out_dir(args)
    if args.clusters:
        assignment = clustermod.load_assignment(args.clusters)
        for label, members in sorted(assignment.clusters.items()):
            sub = _subpanel(panel, members)
            print(_train_one(sub, cfg, str(label), out_dir, cfg.window, cfg.model))
    else:
        print(_train_one(panel, cfg, "all", out_dir, cfg.window, cfg.model))


def cmd_score(args) -> None:
    _load_cfg(args)
    model, _, _ = trainmod.load_checkpoint(args.checkpoint)
    panel = _subpanel(read_panel(args.data), model.feature_ids)
    series = detectmod.score_panel(model, panel, stride=args.stride)
    out = _out_dir(args) / "scores.csv"
    detectmod.write_scores(out, series)
    print(out)


def cmd_detect(args) -> None:
    cfg = _load_cfg(args)
    mode = args.mode or cfg.threshold.mode
    series = detectmod.read_scores(args.scores)
    scored = np.where(series.scored)[0]
    flags = np.zeros(len(series.scores), dtype=np.uint8)
    if mode == "static":
        if not args.labels:
            raise ValueError("static mode requires --labels for the prefix search")
        labels_panel = read_panel(args.labels)
        labels = _labels_per_timestamp(labels_panel)
        if len(labels) != len(series.scores):
            raise ValueError("labels and scores disagree on length")
        split = int(round(cfg.threshold.prefix_frac * len(scored)))
        head = scored[:split]
        eps = detectmod.static_threshold(series.scores[head], labels[head],
                                         grid_size=cfg.threshold.grid_size)
        flags[scored] = series.scores[scored] > eps
        log.info("static threshold %.6g", eps)
    elif mode == "spot":
        q = args.q or cfg.threshold.q
        stream_flags, _, _ = detectmod.run_spot(
            series.scores[scored], q=q, level=cfg.threshold.level,
            n_init=cfg.threshold.n_init)
        flags[scored[cfg.threshold.n_init:]] = stream_flags
    else:
        raise ValueError(f"unknown mode {mode!r}")
    out = _out_dir(args) / "flags.csv"
    detectmod.write_anomaly_report(out, series, flags)
    print(out)


def _read_flag_rows(path):
    import csv

    from .dataio import parse_timestamp

    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:3] != ["timestamp", "score", "flag"]:
            raise ValueError(f"{path}: not a flag report")
        rows = [(parse_timestamp(r[0]), r[1], int(r[2])) for r in reader if r]
    return rows


def cmd_diagnose(args) -> None:
    cfg = _load_cfg(args)
    panel = read_panel(args.history)
    rows = _read_flag_rows(args.flags)
    ts_index = {int(t): i for i, t in enumerate(panel.timestamps)}
    flagged = []
    for ts, _, flag in rows:
        if flag and ts in ts_index:
            flagged.append(ts_index[ts])
    diagnosis = detectmod.diagnose(panel, flagged,
                                   sigma_steps=cfg.diagnosis.sigma_steps,
                                   validation_frac=cfg.diagnosis.validation_frac)
    scores = np.full(panel.n_steps, np.nan)
    flags = np.zeros(panel.n_steps, dtype=np.uint8)
    for ts, score_text, flag in rows:
        if ts in ts_index:
            if score_text:
                scores[ts_index[ts]] = float(score_text)
            flags[ts_index[ts]] = flag
    series = detectmod.AnomalyScoreSeries(timestamps=panel.timestamps,
                                          scores=scores,
                                          coverage=(~np.isnan(scores)).astype(np.int64))
    out = _out_dir(args) / "diagnosis.csv"
    detectmod.write_anomaly_report(out, series, flags, diagnosis)
    print(out)


def cmd_synth(args) -> None:
    cfg = _load_cfg(args)
    source = read_panel(args.data)
    ground_truth = synthmod.fit_gaussian(source)
    steps = args.steps or cfg.synth.steps
    panel = synthmod.sample_ground_truth(
        ground_truth, steps, seed=derive_seed(cfg.seed, "synth-sample"),
        feature_ids=source.feature_ids,
        start_timestamp=int(source.timestamps[-1]) + source.step_seconds,
        step_seconds=source.step_seconds)
    spec = InjectionSpec(alpha=args.alpha if args.alpha is not None else cfg.synth.alpha,
                         beta=args.beta if args.beta is not None else cfg.synth.beta,
                         slice_len=cfg.synth.slice_len,
                         seed=derive_seed(cfg.seed, "synth-inject"))
    injected, labels = synthmod.inject_anomalies(panel, spec)
    out_dir = _out_dir(args)
    write_panel(injected, out_dir / "values.csv")
    _write_labels(labels, injected, out_dir / "labels.csv")
    print(out_dir / "values.csv")
    print(out_dir / "labels.csv")


def _write_labels(labels: LabelGrid, panel: SeriesPanel, path) -> None:
    grid_panel = SeriesPanel(panel.timestamps.copy(), list(panel.feature_ids),
                             labels.grid.astype(np.float64))
    write_panel(grid_panel, path, fmt=lambda v: str(int(v)))


def cmd_generate(args) -> None:
    cfg = _load_cfg(args)
    model, _, _ = trainmod.load_checkpoint(args.checkpoint)
    source = _subpanel(read_panel(args.data), model.feature_ids)
    if source.n_steps < model.context_len:
        raise ValueError("warm-up source shorter than the context window")
    warmup = source.slice_rows(source.n_steps - model.context_len, source.n_steps)
    spec = InjectionSpec(alpha=args.alpha if args.alpha is not None else cfg.synth.alpha,
                         beta=args.beta if args.beta is not None else cfg.synth.beta,
                         slice_len=cfg.synth.slice_len,
                         seed=derive_seed(cfg.seed, "generate"))
    dataset = evalgen.make_labeled_set(model, warmup,
                                       args.length or cfg.synth.steps, spec)
    out_dir = _out_dir(args)
    write_panel(dataset.panel, out_dir / "generated_values.csv")
    _write_labels(dataset.labels, dataset.panel, out_dir / "generated_labels.csv")
    print(out_dir / "generated_values.csv")
    print(out_dir / "generated_labels.csv")


def cmd_classify(args) -> None:
    cfg = _load_cfg(args)
    values_panel = read_panel(args.values)
    labels = _labels_per_timestamp(read_panel(args.labels))
    if args.test_values:
        test_panel = read_panel(args.test_values)
        test_labels = _labels_per_timestamp(read_panel(args.test_labels))
        train_values, train_labels = values_panel.values, labels
    else:
        split = int(0.7 * values_panel.n_steps)
        train_values, train_labels = values_panel.values[:split], labels[:split]
        test_panel = values_panel.slice_rows(split, values_panel.n_steps)
        test_labels = labels[split:]
    clf = evalgen.train_classifier(
        train_values, train_labels,
        evalgen.ClassifierConfig(seed=derive_seed(cfg.seed, "classifier")))
    probs = evalgen.predict(clf, test_panel.values)
    record = evalgen.metrics(probs > 0.5, test_labels, scores=probs)
    out = _out_dir(args) / "classifier_metrics.csv"
    with open(out, "w", encoding="utf-8", newline="") as fh:
        fh.write("precision,recall,f1,auc,tp,fp,fn,tn\n")
        fh.write(f"{record.precision!r},{record.recall!r},{record.f1!r},"
                 f"{record.auc!r},{record.tp},{record.fp},{record.fn},{record.tn}\n")
    print(out)


def cmd_eval(args) -> None:
    cfg = _load_cfg(args)
    model, _, _ = trainmod.load_checkpoint(args.checkpoint)
    panel = _subpanel(read_panel(args.data), model.feature_ids)
    n_test = max(model.pred_len, int(round(cfg.eval.test_fraction * panel.n_steps)))
    context = panel.slice_rows(0, panel.n_steps - n_test)
    test = panel.slice_rows(panel.n_steps - n_test, panel.n_steps)
    out_dir = _out_dir(args)
    common = dict(base_seed=derive_seed(cfg.seed, "eval"),
                  slice_len=cfg.synth.slice_len,
                  prefix_frac=cfg.threshold.prefix_frac, ar_lag=cfg.eval.ar_lag)
    eff = evalgen.run_effectiveness(model, context, test,
                                    alphas=tuple(cfg.eval.alphas), beta=0.5,
                                    replicates=cfg.eval.replicates, **common)
    evalgen.write_grid(eff, out_dir / "effectiveness.csv")
    sens = evalgen.run_sensitivity(model, context, test,
                                   betas=tuple(cfg.eval.betas), alpha=0.05,
                                   replicates=cfg.eval.replicates, **common)
    evalgen.write_grid(sens, out_dir / "sensitivity.csv")
    print(out_dir / "effectiveness.csv")
    print(out_dir / "sensitivity.csv")


def cmd_report(args) -> None:
    _load_cfg(args)
    bucket_seconds = args.bucket_minutes * 60
    try:
        series = detectmod.read_scores(args.scores)
        panel = SeriesPanel(series.timestamps, ["score"],
                            series.scores.reshape(-1, 1))
    except ValueError:
        panel = read_panel(args.scores)
    step = panel.step_seconds
    per_bucket = max(1, bucket_seconds // step)
    n_buckets = math.ceil(panel.n_steps / per_bucket)
    out = _out_dir(args) / "report.csv"
    import csv as _csv

    with open(out, "w", encoding="utf-8", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["bucket_start"] + list(panel.feature_ids))
        for b in range(n_buckets):
            rows = panel.values[b * per_bucket:(b + 1) * per_bucket]
            with np.errstate(invalid="ignore"):
                means = np.nanmean(rows, axis=0) if np.any(np.isfinite(rows)) \
                    else np.full(panel.n_features, np.nan)
            writer.writerow([format_timestamp(panel.timestamps[b * per_bucket])]
                            + ["" if not np.isfinite(m) else repr(float(m))
                               for m in means])
    print(out)


def cmd_init_config(args) -> None:
    out = Path(args.out or ".") / "config.json"
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    save_config(RunConfig(), out)
    print(out)


# ---------------------------------------------------------------------------
# argument wiring
# ---------------------------------------------------------------------------

def _add_common(p) -> None:
    p.add_argument("--config", help="JSON configuration file")
    p.add_argument("--seed", type=int, help="master seed override")
    p.add_argument("--out", help="output directory (default: current)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowad",
        description="Multivariate time-series anomaly detection with a "
                    "conditional normalizing flow")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("cluster", help="group features via DTW + OPTICS")
    p.add_argument("--data", required=True)
    p.add_argument("--sample-size", type=int)
    _add_common(p)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("train", help="train one model per cluster")
    p.add_argument("--data", required=True)
    p.add_argument("--clusters", help="assignment file; omit to train one model")
    p.add_argument("--epochs", type=int, help="override train.max_epochs")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="per-timestamp anomaly scores")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--stride", type=int)
    _add_common(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("detect", help="flag anomalies from scores")
    p.add_argument("--scores", required=True)
    p.add_argument("--mode", choices=["static", "spot"])
    p.add_argument("--labels", help="label file for the static prefix search")
    p.add_argument("--q", type=float, help="spot risk override")
    _add_common(p)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("diagnose", help="feature-level diagnosis of flags")
    p.add_argument("--flags", required=True)
    p.add_argument("--history", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("synth", help="labeled synthetic panel from a Gaussian fit")
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("generate", help="labeled dataset sampled from a model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="warm-up context source")
    p.add_argument("--length", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    _add_common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("classify", help="train and evaluate the MLP classifier")
    p.add_argument("--values", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--test-values")
    p.add_argument("--test-labels")
    _add_common(p)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("eval", help="effectiveness and sensitivity grids")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="time-bucketed heatmap matrix")
    p.add_argument("--scores", required=True)
    p.add_argument("--bucket-minutes", type=int, default=15)
    _add_common(p)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("init-config", help="write the default configuration")
    _add_common(p)
    p.set_defaults(func=cmd_init_config)

    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"flowad {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
