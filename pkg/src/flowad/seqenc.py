"""LSTM encoder-decoder conditioning stack.

The encoder folds the context block (values concatenated with calendar
features) into the final hidden state of its top layer.  That vector both
initializes the decoder's internal states layer-wise and is repeated as the
decoder's per-step input alongside the step's known calendar features, so
the decoder never reads prediction-window observations.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .rng import Xoshiro256


@dataclass
class LstmLayerParams:
    """Gate weights in a single fused layout, gate order [input, forget, cell, output]."""

    wx: ad.Node  # (n_in, 4H)
    wh: ad.Node  # (H, 4H)
    b: ad.Node  # (4H,)
    hidden: int

    def parameters(self) -> list[ad.Node]:
        return [self.wx, self.wh, self.b]


def init_lstm_layer(n_in: int, hidden: int, rng: Xoshiro256) -> LstmLayerParams:
    """Uniform +-1/sqrt(fan-in) init; forget-gate bias starts at 1."""
    wx = rng.uniform(-1, 1, size=(n_in, 4 * hidden)) / np.sqrt(n_in)
    wh = rng.uniform(-1, 1, size=(hidden, 4 * hidden)) / np.sqrt(hidden)
    b = np.zeros(4 * hidden)
    b[hidden:2 * hidden] = 1.0
    return LstmLayerParams(ad.Node(wx), ad.Node(wh), ad.Node(b), hidden)


def lstm_step(x, h, c, params: LstmLayerParams):
    """One gated update; returns (h', c') as graph nodes.

    `x`, `h`, `c` may be nodes or constant arrays of shape (B, n_in)/(B, H).
    """
    H = params.hidden
    gates = ad.add(ad.add(ad.matmul(x, params.wx), ad.matmul(h, params.wh)), params.b)
    i = ad.sigmoid(ad.slice_last(gates, 0, H))
    f = ad.sigmoid(ad.slice_last(gates, H, 2 * H))
    g = ad.tanh(ad.slice_last(gates, 2 * H, 3 * H))
    o = ad.sigmoid(ad.slice_last(gates, 3 * H, 4 * H))
    c2 = ad.add(ad.mul(f, c), ad.mul(i, g))
    h2 = ad.mul(o, ad.tanh(c2))
    return h2, c2


@dataclass
class EncDecParams:
    """Mirrored encoder/decoder stacks; states transfer layer-wise, so the
    per-layer hidden widths of the two stacks are equal."""

    encoder: list[LstmLayerParams]
    decoder: list[LstmLayerParams]
    hidden: list[int]

    def parameters(self) -> list[ad.Node]:
        out: list[ad.Node] = []
        for layer in self.encoder + self.decoder:
            out.extend(layer.parameters())
        return out

    @property
    def top_width(self) -> int:
        return self.hidden[-1]


def init_encdec(n_features: int, n_time: int, hidden: list[int],
                rng: Xoshiro256) -> EncDecParams:
    if not hidden:
        raise ValueError("at least one hidden layer is required")
    enc, dec = [], []
    enc_in = n_features + n_time
    dec_in = hidden[-1] + n_time  # repeated encoding plus the step's calendar
    for width in hidden:
        enc.append(init_lstm_layer(enc_in, width, rng))
        dec.append(init_lstm_layer(dec_in, width, rng))
        enc_in = width
        dec_in = width
    return EncDecParams(encoder=enc, decoder=dec, hidden=list(hidden))


def _zero_states(batch: int, hidden: list[int]):
    return [(np.zeros((batch, H)), np.zeros((batch, H))) for H in hidden]


def encode(context: np.ndarray, context_time: np.ndarray, params: EncDecParams):
    """Fold a (B, c, N) context into the top layer's final hidden state.

    Returns (e, per-layer final (h, c) nodes).  Step inputs are the
    observation concatenated with its calendar features.
    """
    if context.ndim != 3:
        raise ValueError("context must be (batch, steps, features)")
    B, steps, _ = context.shape
    if steps < 1:
        raise ValueError("context length must be >= 1")
    states = _zero_states(B, params.hidden)
    for t in range(steps):
        x = np.concatenate([context[:, t, :], context_time[:, t, :]], axis=-1)
        inp = x
        for layer_idx, layer in enumerate(params.encoder):
            h, c = states[layer_idx]
            h2, c2 = lstm_step(inp, h, c, layer)
            states[layer_idx] = (h2, c2)
            inp = h2
    e = states[-1][0]
    return e, states


def decode(e, states, prediction_time: np.ndarray, params: EncDecParams):
    """Emit one top-layer hidden state per prediction step.

    Decoder states start from the encoder's finals; the input at step t is
    the repeated encoding concatenated with that step's calendar features.
    Prediction-window observations are never consumed.
    """
    if prediction_time.ndim != 3:
        raise ValueError("prediction_time must be (batch, steps, 3)")
    steps = prediction_time.shape[1]
    if steps < 1:
        raise ValueError("prediction length must be >= 1")
    states = list(states)
    outputs = []
    for t in range(steps):
        inp = ad.concat_last([e, prediction_time[:, t, :]])
        for layer_idx, layer in enumerate(params.decoder):
            h, c = states[layer_idx]
            h2, c2 = lstm_step(inp, h, c, layer)
            states[layer_idx] = (h2, c2)
            inp = h2
        outputs.append(states[-1][0])
    return outputs
