"""Conditional RealNVP over a diagonal standard-normal base.

A stack of K affine coupling layers with alternating half masks, each
followed by an invertible batch-normalization layer.  The scale and
translation networks of every coupling layer consume the unchanged active
entries concatenated with the conditioning vector (recurrent hidden state
plus calendar features), which makes the density exactly conditional.

Forward passes build autodiff graphs; inverse passes (sampling) run in
plain numpy since they never need gradients.
"""
from __future__ import annotations

from dataclasses import dataclass
from math import log, pi

import numpy as np

from . import autodiff as ad
from .autodiff import TrainingDiverged
from .rng import Xoshiro256

BN_EPS = 1e-5
BN_MOMENTUM = 0.99
LOG_2PI = log(2.0 * pi)


def mask_schedule(dim: int, n_blocks: int) -> list[np.ndarray]:
    """Alternating binary masks; mask 0 activates the first ceil(D/2) dims."""
    if dim < 2:
        raise ValueError("coupling layers need at least 2 dimensions to split")
    first = np.zeros(dim)
    first[: (dim + 1) // 2] = 1.0
    masks = [first]
    for _ in range(1, n_blocks):
        masks.append(1.0 - masks[-1])
    return masks


# ---------------------------------------------------------------------------
# small MLPs for scale / translation
# ---------------------------------------------------------------------------

@dataclass
class Mlp:
    """Dense stack: `hidden_act` between layers, `final_act` on the output."""

    weights: list[ad.Node]
    biases: list[ad.Node]
    hidden_act: str  # "tanh" or "relu"
    final_act: str | None  # "tanh" or None

    def parameters(self) -> list[ad.Node]:
        return [*self.weights, *self.biases]


_ACTS = {"tanh": ad.tanh, "relu": ad.relu}
_ACTS_NP = {"tanh": np.tanh, "relu": lambda x: np.maximum(x, 0.0)}


def init_mlp(n_in: int, n_hidden: int, n_layers: int, n_out: int,
             hidden_act: str, final_act: str | None, rng: Xoshiro256) -> Mlp:
    """Hidden layers at +-1/sqrt(fan-in); the output layer starts at zero so
    a fresh coupling block is the identity map."""
    widths = [n_in] + [n_hidden] * n_layers + [n_out]
    weights, biases = [], []
    for i in range(len(widths) - 1):
        fan_in = widths[i]
        if i == len(widths) - 2:
            w = np.zeros((fan_in, widths[i + 1]))
        else:
            w = rng.uniform(-1, 1, size=(fan_in, widths[i + 1])) / np.sqrt(fan_in)
        weights.append(ad.Node(w))
        biases.append(ad.Node(np.zeros(widths[i + 1])))
    return Mlp(weights, biases, hidden_act, final_act)


def mlp_forward(mlp: Mlp, x) -> ad.Node:
    act = _ACTS[mlp.hidden_act]
    out = x
    last = len(mlp.weights) - 1
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        out = ad.add(ad.matmul(out, w), b)
        if i < last:
            out = act(out)
        elif mlp.final_act is not None:
            out = _ACTS[mlp.final_act](out)
    return out


def _mlp_np(mlp: Mlp, x: np.ndarray) -> np.ndarray:
    act = _ACTS_NP[mlp.hidden_act]
    out = x
    last = len(mlp.weights) - 1
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        out = out @ w.value + b.value
        if i < last:
            out = act(out)
        elif mlp.final_act is not None:
            out = _ACTS_NP[mlp.final_act](out)
    return out


# ---------------------------------------------------------------------------
# coupling blocks
# ---------------------------------------------------------------------------

@dataclass
class CouplingBlock:
    """Affine coupling: the masked dims pass through, the rest get y*e^s + t."""

    mask: np.ndarray  # (D,) of {0., 1.}
    s_net: Mlp
    t_net: Mlp

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=np.float64)
        # (D, d) selection matrix extracting the active entries
        active = np.where(self.mask == 1.0)[0]
        self.select = np.zeros((len(self.mask), len(active)))
        self.select[active, np.arange(len(active))] = 1.0

    def parameters(self) -> list[ad.Node]:
        return self.s_net.parameters() + self.t_net.parameters()


def init_coupling(mask: np.ndarray, cond_width: int, st_hidden: int,
                  st_layers: int, rng: Xoshiro256) -> CouplingBlock:
    d = int(mask.sum())
    dim = len(mask)
    s_net = init_mlp(d + cond_width, st_hidden, st_layers, dim, "tanh", "tanh", rng)
    t_net = init_mlp(d + cond_width, st_hidden, st_layers, dim, "relu", None, rng)
    return CouplingBlock(mask=mask, s_net=s_net, t_net=t_net)


def _net_input(y, cond, block: CouplingBlock):
    active = ad.matmul(y, block.select) if isinstance(y, ad.Node) else y @ block.select
    if cond is None:
        return active
    if isinstance(active, ad.Node) or isinstance(cond, ad.Node):
        return ad.concat_last([active, cond])
    return np.concatenate([active, cond], axis=-1)


def coupling_forward(y, cond, block: CouplingBlock):
    """Returns (y', per-row log-det node).  `y` is (B, D)."""
    inp = _net_input(y, cond, block)
    inv_mask = 1.0 - block.mask
    s = ad.mul(mlp_forward(block.s_net, inp), inv_mask)
    t = ad.mul(mlp_forward(block.t_net, inp), inv_mask)
    if not np.all(np.isfinite(s.value)):
        raise TrainingDiverged("coupling scale network produced non-finite output")
    y2 = ad.add(ad.mul(y, ad.exp(s)), t)
    log_det = ad.sum_along(s, axis=-1)
    return y2, log_det


def coupling_inverse(y2: np.ndarray, cond, block: CouplingBlock) -> np.ndarray:
    """Exact algebraic inverse, numpy only (the active part is unchanged)."""
    inp = _net_input(np.asarray(y2, dtype=np.float64), cond, block)
    inv_mask = 1.0 - block.mask
    s = _mlp_np(block.s_net, inp) * inv_mask
    t = _mlp_np(block.t_net, inp) * inv_mask
    return (y2 - t) * np.exp(-s)


# ---------------------------------------------------------------------------
# invertible batch normalization
# ---------------------------------------------------------------------------

@dataclass
class FlowBatchNorm:
    gamma: ad.Node  # (D,)
    beta: ad.Node  # (D,)
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    def parameters(self) -> list[ad.Node]:
        return [self.gamma, self.beta]


def init_batchnorm(dim: int) -> FlowBatchNorm:
    # running variance starts at 1 - eps so a fresh layer is exactly the
    # identity map (var + eps == 1)
    return FlowBatchNorm(gamma=ad.Node(np.ones(dim)), beta=ad.Node(np.zeros(dim)),
                         running_mean=np.zeros(dim),
                         running_var=np.full(dim, 1.0 - BN_EPS))


def bn_forward(y, layer: FlowBatchNorm, training: bool):
    """Normalize rows; returns (y', log-det node shared by every row).

    Training mode uses batch statistics (single-row batches fall back to the
    running ones) and updates the running statistics; inference mode uses
    the running statistics.
    """
    y_node = y if isinstance(y, ad.Node) else ad.Node(np.asarray(y, dtype=np.float64))
    use_batch = training and y_node.value.shape[0] > 1
    if use_batch:
        mu = ad.mean_along(y_node, axis=0, keepdims=True)
        diff = ad.sub(y_node, mu)
        var = ad.mean_along(ad.mul(diff, diff), axis=0, keepdims=True)
        m = layer.momentum
        layer.running_mean = m * layer.running_mean + (1 - m) * mu.value.ravel()
        layer.running_var = m * layer.running_var + (1 - m) * var.value.ravel()
        var_term = ad.add(var, layer.eps)
        inv_std = ad.powc(var_term, -0.5)
        log_var = ad.log(var_term)
    else:
        diff = ad.sub(y_node, layer.running_mean)
        var_np = layer.running_var + layer.eps
        inv_std = var_np ** -0.5
        log_var = np.log(var_np)
    y2 = ad.add(ad.mul(diff, ad.mul(inv_std, layer.gamma)), layer.beta)
    log_det = ad.sum_along(ad.sub(ad.log_abs(layer.gamma), ad.mul(0.5, log_var)))
    return y2, log_det


def bn_inverse(y2: np.ndarray, layer: FlowBatchNorm) -> np.ndarray:
    """Inverse with the running (inference) statistics."""
    scale = np.sqrt(layer.running_var + layer.eps) / layer.gamma.value
    return (y2 - layer.beta.value) * scale + layer.running_mean


# ---------------------------------------------------------------------------
# the full stack
# ---------------------------------------------------------------------------

@dataclass
class FlowModel:
    """K coupling blocks, each followed by an invertible batch norm."""

    dim: int
    cond_width: int
    blocks: list[CouplingBlock]
    bns: list[FlowBatchNorm]

    def parameters(self) -> list[ad.Node]:
        out: list[ad.Node] = []
        for block, bn in zip(self.blocks, self.bns):
            out.extend(block.parameters())
            out.extend(bn.parameters())
        return out

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)


def init_flow(dim: int, cond_width: int, n_blocks: int = 5, st_hidden: int = 64,
              st_layers: int = 2, rng: Xoshiro256 | None = None) -> FlowModel:
    if n_blocks < 1:
        raise ValueError("need at least one coupling block")
    rng = rng or Xoshiro256(0)
    masks = mask_schedule(dim, n_blocks)
    blocks = [init_coupling(m, cond_width, st_hidden, st_layers, rng) for m in masks]
    bns = [init_batchnorm(dim) for _ in range(n_blocks)]
    return FlowModel(dim=dim, cond_width=cond_width, blocks=blocks, bns=bns)


def flow_forward(x, cond, model: FlowModel, training: bool = False):
    """Push (B, D) data to the base space; returns (z node, per-row log-det)."""
    y = x if isinstance(x, ad.Node) else ad.Node(np.asarray(x, dtype=np.float64))
    total = None
    for idx, (block, bn) in enumerate(zip(model.blocks, model.bns)):
        y, ld_c = coupling_forward(y, cond, block)
        if not np.all(np.isfinite(y.value)):
            raise TrainingDiverged(f"non-finite values after coupling block {idx}")
        y, ld_b = bn_forward(y, bn, training)
        if not np.all(np.isfinite(y.value)):
            raise TrainingDiverged(f"non-finite values after batch norm {idx}")
        step = ad.add(ld_c, ld_b)
        total = step if total is None else ad.add(total, step)
    return y, total


def log_prob(x, cond, model: FlowModel, training: bool = False) -> ad.Node:
    """Exact per-row conditional log density under the flow."""
    z, log_det = flow_forward(x, cond, model, training=training)
    base = ad.sub(ad.mul(-0.5, ad.sum_along(ad.mul(z, z), axis=-1)),
                  0.5 * model.dim * LOG_2PI)
    return ad.add(base, log_det)


def inverse(z: np.ndarray, cond, model: FlowModel) -> np.ndarray:
    """Map base-space rows back to data space (inference statistics)."""
    y = np.asarray(z, dtype=np.float64)
    cond_arr = None if cond is None else np.asarray(cond, dtype=np.float64)
    for block, bn in zip(reversed(model.blocks), reversed(model.bns)):
        y = bn_inverse(y, bn)
        y = coupling_inverse(y, cond_arr, block)
    return y


def sample(cond, model: FlowModel, rng: Xoshiro256, n: int | None = None) -> np.ndarray:
    """Draw base-normal rows and invert the stack under `cond`."""
    if cond is None:
        if n is None:
            raise ValueError("n is required when cond is None")
        batch = n
    else:
        cond = np.asarray(cond, dtype=np.float64)
        if cond.ndim == 1:
            cond = cond[None, :]
        batch = cond.shape[0]
    z = rng.normal(size=(batch, model.dim))
    return inverse(z, cond, model)
