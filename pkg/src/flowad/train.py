"""Joint maximum-likelihood training and bit-exact checkpointing.

The encoder-decoder and the flow train together on the windowed negative
log-likelihood.  Validation uses a chronological tail split (overlapping
windows leak under random splits), early stopping restores the best
validation parameters exactly, and checkpoints round-trip byte-for-byte.
"""
from __future__ import annotations

import json
import struct
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import flow as flowmod
from . import seqenc
from .autodiff import TrainingDiverged
from .dataio import SlidingWindow, Standardizer
from .rng import Xoshiro256

CHECKPOINT_MAGIC = b"CRNVP1"
FORMAT_VERSION = 1
N_TIME_FEATURES = 3


@dataclass
class TrainConfig:
    max_epochs: int = 300
    batch_size: int = 64
    learning_rate: float = 1e-3
    val_fraction: float = 0.3
    patience: int = 10
    clip_norm: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("validation fraction must lie in (0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")


@dataclass
class DetectorModel:
    """Everything needed to score a panel: nets, flow and the standardizer."""

    encdec: seqenc.EncDecParams | None
    flow: flowmod.FlowModel
    standardizer: Standardizer | None
    context_len: int
    pred_len: int
    feature_ids: list[str]
    structure: dict = field(default_factory=dict)  # init hyperparameters

    def parameters(self) -> list[ad.Node]:
        out = [] if self.encdec is None else self.encdec.parameters()
        return out + self.flow.parameters()

    @property
    def dim(self) -> int:
        return self.flow.dim


def build_model(n_features: int, context_len: int = 72, pred_len: int = 12,
                hidden: list[int] | None = None, n_blocks: int = 5,
                st_hidden: int = 64, st_layers: int = 2, seed: int = 0,
                use_encoder: bool = True, standardizer: Standardizer | None = None,
                feature_ids: list[str] | None = None) -> DetectorModel:
    """Fresh model; the flow starts as the identity map.

    With `use_encoder=False` the flow is unconditional (an ablation and test
    configuration); otherwise the conditioner is the decoder hidden state
    concatenated with the step's calendar features.
    """
    hidden = list(hidden) if hidden else [64, 32]
    rng = Xoshiro256(seed)
    encdec = None
    cond_width = 0
    if use_encoder:
        encdec = seqenc.init_encdec(n_features, N_TIME_FEATURES, hidden, rng)
        cond_width = hidden[-1] + N_TIME_FEATURES
    fl = flowmod.init_flow(n_features, cond_width, n_blocks=n_blocks,
                           st_hidden=st_hidden, st_layers=st_layers, rng=rng)
    structure = {"n_features": n_features, "context_len": context_len,
                 "pred_len": pred_len, "hidden": hidden, "n_blocks": n_blocks,
                 "st_hidden": st_hidden, "st_layers": st_layers,
                 "use_encoder": use_encoder, "init_seed": seed}
    return DetectorModel(encdec=encdec, flow=fl, standardizer=standardizer,
                         context_len=context_len, pred_len=pred_len,
                         feature_ids=list(feature_ids or [f"f{i}" for i in range(n_features)]),
                         structure=structure)


def _stack_windows(windows: list[SlidingWindow]):
    ctx = np.stack([w.context for w in windows])
    pred = np.stack([w.prediction for w in windows])
    ctx_t = np.stack([w.context_time for w in windows])
    pred_t = np.stack([w.prediction_time for w in windows])
    return ctx, pred, ctx_t, pred_t


def window_log_probs(windows: list[SlidingWindow], model: DetectorModel,
                     training: bool = False) -> ad.Node:
    """Per (window, step) conditional log densities, stacked step-major.

    Row layout: all windows at prediction step 0, then step 1, ...
    """
    if not windows:
        raise ValueError("empty window batch")
    ctx, pred, ctx_t, pred_t = _stack_windows(windows)
    B, p, _ = pred.shape
    x_rows = np.concatenate([pred[:, t, :] for t in range(p)], axis=0)
    if model.encdec is not None:
        e, states = seqenc.encode(ctx, ctx_t, model.encdec)
        hs = seqenc.decode(e, states, pred_t, model.encdec)
        cond = ad.concat_rows([ad.concat_last([h, pred_t[:, t, :]])
                               for t, h in enumerate(hs)])
    elif model.flow.cond_width == N_TIME_FEATURES:
        cond = np.concatenate([pred_t[:, t, :] for t in range(p)], axis=0)
    else:
        cond = None
    return flowmod.log_prob(x_rows, cond, model.flow, training=training)


def nll_loss(windows: list[SlidingWindow], model: DetectorModel,
             training: bool = True) -> ad.Node:
    """Mean negative conditional log density per (window, timestep)."""
    lp = window_log_probs(windows, model, training=training)
    loss = ad.neg(ad.mean_along(lp))
    if not np.isfinite(loss.value):
        raise TrainingDiverged("non-finite training loss")
    return loss


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = float("inf")
    stopped_early: bool = False
    diverged: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def _eval_loss(windows, model, batch_size) -> float:
    total, count = 0.0, 0
    for i in range(0, len(windows), batch_size):
        chunk = windows[i:i + batch_size]
        loss = nll_loss(chunk, model, training=False)
        total += float(loss.value) * len(chunk)
        count += len(chunk)
    return total / count


def fit(windows: list[SlidingWindow], model: DetectorModel,
        config: TrainConfig) -> TrainHistory:
    """Adam on shuffled train batches with chronological validation tail.

    Improvement is strict; after `patience` consecutive non-improving epochs
    training stops and the best-validation parameters are restored exactly.
    """
    if len(windows) < 2:
        raise ValueError("training requires at least 2 windows")
    ordered = sorted(windows, key=lambda w: w.start)
    n_val = max(1, int(round(config.val_fraction * len(ordered))))
    n_val = min(n_val, len(ordered) - 1)
    train_set, val_set = ordered[:-n_val], ordered[-n_val:]

    params = model.parameters()
    state = ad.AdamState(lr=config.learning_rate)
    rng = Xoshiro256(config.seed)
    history = TrainHistory()
    best_params: list[np.ndarray] | None = None
    best_bn: list[tuple[np.ndarray, np.ndarray]] | None = None
    bad_epochs = 0

    for epoch in range(config.max_epochs):
        order = rng.permutation(len(train_set))
        epoch_total, epoch_count = 0.0, 0
        try:
            for i in range(0, len(order), config.batch_size):
                batch = [train_set[j] for j in order[i:i + config.batch_size]]
                for p in params:
                    p.zero_grad()
                loss = nll_loss(batch, model, training=True)
                ad.backward(loss)
                ad.clip_global_norm(params, config.clip_norm)
                ad.adam_step(params, state)
                epoch_total += float(loss.value) * len(batch)
                epoch_count += len(batch)
        except TrainingDiverged as exc:
            history.diverged = True
            if best_params is None:
                raise
            warnings.warn(f"training diverged at epoch {epoch} ({exc}); "
                          f"restoring epoch {history.best_epoch}")
            break

        history.train_loss.append(epoch_total / epoch_count)
        val = _eval_loss(val_set, model, config.batch_size)
        history.val_loss.append(val)

        if val < history.best_val_loss:
            history.best_val_loss = val
            history.best_epoch = epoch
            best_params = [p.value.copy() for p in params]
            best_bn = [(bn.running_mean.copy(), bn.running_var.copy())
                       for bn in model.flow.bns]
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs > config.patience:
                history.stopped_early = True
                break

    if best_params is not None:
        for p, v in zip(params, best_params):
            p.value = v
        for bn, (rm, rv) in zip(model.flow.bns, best_bn):
            bn.running_mean, bn.running_var = rm, rv
    return history


# ---------------------------------------------------------------------------
# checkpoints: magic, length-prefixed JSON metadata, little-endian f64 payload
# ---------------------------------------------------------------------------

def _named_arrays(model: DetectorModel) -> list[tuple[str, np.ndarray]]:
    out: list[tuple[str, np.ndarray]] = []
    if model.standardizer is not None:
        out.append(("standardizer.mean", model.standardizer.mean))
        out.append(("standardizer.std", model.standardizer.std))
    if model.encdec is not None:
        for prefix, stack in (("enc", model.encdec.encoder), ("dec", model.encdec.decoder)):
            for i, layer in enumerate(stack):
                out.append((f"{prefix}.{i}.wx", layer.wx.value))
                out.append((f"{prefix}.{i}.wh", layer.wh.value))
                out.append((f"{prefix}.{i}.b", layer.b.value))
    for k, (block, bn) in enumerate(zip(model.flow.blocks, model.flow.bns)):
        out.append((f"flow.{k}.mask", block.mask))
        for tag, net in (("s", block.s_net), ("t", block.t_net)):
            for i, (w, b) in enumerate(zip(net.weights, net.biases)):
                out.append((f"flow.{k}.{tag}.w{i}", w.value))
                out.append((f"flow.{k}.{tag}.b{i}", b.value))
        out.append((f"flow.{k}.bn.gamma", bn.gamma.value))
        out.append((f"flow.{k}.bn.beta", bn.beta.value))
        out.append((f"flow.{k}.bn.running_mean", bn.running_mean))
        out.append((f"flow.{k}.bn.running_var", bn.running_var))
    return out


def save_checkpoint(model: DetectorModel, path, config: TrainConfig | dict | None = None,
                    history: TrainHistory | dict | None = None) -> None:
    arrays = _named_arrays(model)
    meta = {
        "format_version": FORMAT_VERSION,
        "structure": dict(model.structure),
        "feature_ids": list(model.feature_ids),
        "context_len": model.context_len,
        "pred_len": model.pred_len,
        "has_standardizer": model.standardizer is not None,
        "config": asdict(config) if isinstance(config, TrainConfig) else config,
        "history": history.to_dict() if isinstance(history, TrainHistory) else history,
        "arrays": [{"name": name, "shape": list(arr.shape)} for name, arr in arrays],
    }
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns (model, config echo, history echo); rejects malformed files."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    offset = len(CHECKPOINT_MAGIC)
    if len(raw) < offset + 4:
        raise ValueError(f"{path}: truncated header")
    (meta_len,) = struct.unpack("<I", raw[offset:offset + 4])
    offset += 4
    if len(raw) < offset + meta_len:
        raise ValueError(f"{path}: truncated metadata")
    meta = json.loads(raw[offset:offset + meta_len].decode("utf-8"))
    offset += meta_len
    if meta.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {meta.get('format_version')}")

    expected = sum(int(np.prod(a["shape"])) if a["shape"] else 1 for a in meta["arrays"])
    payload = raw[offset:]
    if len(payload) != expected * 8:
        raise ValueError(f"{path}: corrupted payload "
                         f"({len(payload)} bytes, expected {expected * 8})")

    values: dict[str, np.ndarray] = {}
    pos = 0
    for spec in meta["arrays"]:
        size = int(np.prod(spec["shape"])) if spec["shape"] else 1
        arr = np.frombuffer(payload, dtype="<f8", count=size, offset=pos * 8)
        values[spec["name"]] = arr.reshape(spec["shape"]).astype(np.float64)
        pos += size

    s = meta["structure"]
    standardizer = None
    if meta["has_standardizer"]:
        standardizer = Standardizer(mean=values["standardizer.mean"],
                                    std=values["standardizer.std"])
    model = build_model(n_features=s["n_features"], context_len=meta["context_len"],
                        pred_len=meta["pred_len"], hidden=s["hidden"],
                        n_blocks=s["n_blocks"], st_hidden=s["st_hidden"],
                        st_layers=s["st_layers"], seed=s["init_seed"],
                        use_encoder=s["use_encoder"], standardizer=standardizer,
                        feature_ids=meta["feature_ids"])
    if model.encdec is not None:
        for prefix, stack in (("enc", model.encdec.encoder), ("dec", model.encdec.decoder)):
            for i, layer in enumerate(stack):
                layer.wx.value = values[f"{prefix}.{i}.wx"]
                layer.wh.value = values[f"{prefix}.{i}.wh"]
                layer.b.value = values[f"{prefix}.{i}.b"]
    for k, (block, bn) in enumerate(zip(model.flow.blocks, model.flow.bns)):
        block.mask = values[f"flow.{k}.mask"]
        block.__post_init__()  # refresh the selection matrix
        for tag, net in (("s", block.s_net), ("t", block.t_net)):
            for i in range(len(net.weights)):
                net.weights[i].value = values[f"flow.{k}.{tag}.w{i}"]
                net.biases[i].value = values[f"flow.{k}.{tag}.b{i}"]
        bn.gamma.value = values[f"flow.{k}.bn.gamma"]
        bn.beta.value = values[f"flow.{k}.bn.beta"]
        bn.running_mean = values[f"flow.{k}.bn.running_mean"]
        bn.running_var = values[f"flow.{k}.bn.running_var"]
    return model, meta.get("config"), meta.get("history")
