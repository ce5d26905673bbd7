"""Batched LSTM and dense layers with hand-written reverse passes.

Gate order inside the stacked pre-activation is (input, forget, cell, output).
"""
from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np


@dataclass
class LstmLayerWeights:
    Wx: np.ndarray  # (input, 4H)
    Wh: np.ndarray  # (H, 4H)
    b: np.ndarray  # (4H,)

    @property
    def hidden_size(self):
        return self.Wh.shape[0]

    @property
    def input_size(self):
        return self.Wx.shape[0]

    def gate(self, name):
        """Weights of one gate as (Wx, Wh, b); name is one of 'input', 'forget', 'cell', 'output'."""
        k = ("input", "forget", "cell", "output").index(name)
        h = self.hidden_size
        sl = slice(k * h, (k + 1) * h)
        return self.Wx[:, sl], self.Wh[:, sl], self.b[sl]

    @classmethod
    def init(cls, rng, input_size, hidden):
        lim_x = np.sqrt(6.0 / (input_size + 4 * hidden))
        lim_h = np.sqrt(6.0 / (hidden + 4 * hidden))
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = 1.0
        return cls(rng.uniform(-lim_x, lim_x, (input_size, 4 * hidden)),
                   rng.uniform(-lim_h, lim_h, (hidden, 4 * hidden)), b)


@dataclass
class DenseWeights:
    W: np.ndarray  # (input, output)
    b: np.ndarray

    @property
    def units(self):
        return self.W.shape[1]

    @classmethod
    def init(cls, rng, input_size, units):
        lim = np.sqrt(6.0 / (input_size + units))
        return cls(rng.uniform(-lim, lim, (input_size, units)), np.zeros(units))


def rows_matmul(a, W):
    """``a @ W`` over the last axis, with each row's result independent of the row count.

    BLAS evaluates a lone row with a different summation order than a
    matrix, so a single row is padded to two. This keeps forward outputs
    bitwise stable when branches are added, duplicated or batched.
    """
    flat = a.reshape(-1, a.shape[-1])
    if len(flat) == 1:
        out = (np.concatenate([flat, flat]) @ W)[:1]
    else:
        out = flat @ W
    return out.reshape(a.shape[:-1] + (W.shape[1],))


@functools.lru_cache(maxsize=None)
def _gate_constants(H):
    # sigmoid(a) = 0.5 + 0.5 tanh(a / 2); the cell candidate uses plain tanh
    scale = np.full(4 * H, 0.5)
    scale[2 * H:3 * H] = 1.0
    shift = np.full(4 * H, 0.5)
    shift[2 * H:3 * H] = 0.0
    scale.flags.writeable = False
    shift.flags.writeable = False
    return scale, shift


def lstm_forward(w: LstmLayerWeights, x, const_input=None, steps=None):
    """Run an LSTM from zero initial state.

    Either ``x`` (B, T, I) supplies one input per step, or ``const_input``
    (B, I) is fed at each of ``steps`` steps. Returns hidden states (B, T, H)
    and a cache for ``lstm_backward``.
    """
    H = w.hidden_size
    scale, shift = _gate_constants(H)
    if const_input is not None:
        B = const_input.shape[0]
        T = steps
        xw = np.broadcast_to((rows_matmul(const_input, w.Wx) + w.b)[:, None, :], (B, T, 4 * H))
    else:
        B, T, _ = x.shape
        xw = rows_matmul(x, w.Wx) + w.b
    hs = np.zeros((B, T + 1, H))
    cs = np.zeros((B, T + 1, H))
    gates = np.empty((B, T, 4 * H))
    for t in range(T):
        a = xw[:, t] + rows_matmul(hs[:, t], w.Wh)
        gt = np.tanh(a * scale)
        gt *= scale
        gt += shift
        gates[:, t] = gt
        c = gt[:, H:2 * H] * cs[:, t]
        c += gt[:, :H] * gt[:, 2 * H:3 * H]
        cs[:, t + 1] = c
        hs[:, t + 1] = gt[:, 3 * H:] * np.tanh(c)
    cache = (x, const_input, hs, cs, gates)
    return hs[:, 1:], cache


def lstm_backward(w: LstmLayerWeights, cache, dh_seq):
    """Backpropagation through time.

    ``dh_seq`` (B, T, H) is the loss gradient w.r.t. every emitted hidden
    state. Returns (grad weights, grad of the input sequence or of the
    constant input).
    """
    x, const_input, hs, cs, gates = cache
    B, T, H = dh_seq.shape
    G = 4 * H
    deriv = gates * (1.0 - gates)
    g_all = gates[:, :, 2 * H:3 * H]
    deriv[:, :, 2 * H:3 * H] = 1.0 - g_all * g_all
    tcs = np.tanh(cs[:, 1:])
    da_all = np.empty((B, T, G))
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    WhT = w.Wh.T
    for t in range(T - 1, -1, -1):
        gt = gates[:, t]
        tc = tcs[:, t]
        dh = dh_seq[:, t] + dh_next
        dc = dh * gt[:, 3 * H:]
        dc *= 1.0 - tc * tc
        dc += dc_next
        da = da_all[:, t]
        da[:, :H] = dc * gt[:, 2 * H:3 * H]
        da[:, H:2 * H] = dc * cs[:, t]
        da[:, 2 * H:3 * H] = dc * gt[:, :H]
        da[:, 3 * H:] = dh * tc
        da *= deriv[:, t]
        dc_next = dc * gt[:, H:2 * H]
        dh_next = da @ WhT
    da_flat = da_all.reshape(B * T, G)
    dWh = hs[:, :-1].reshape(B * T, H).T @ da_flat
    db = da_flat.sum(axis=0)
    if const_input is not None:
        da_sum = da_all.sum(axis=1)
        dWx = const_input.T @ da_sum
        dx = da_sum @ w.Wx.T
    else:
        dWx = x.reshape(B * T, -1).T @ da_flat
        dx = da_all @ w.Wx.T
    return LstmLayerWeights(dWx, dWh, db), dx


def dense_forward(w: DenseWeights, x, activation="tanh"):
    a = rows_matmul(x, w.W) + w.b
    y = np.tanh(a) if activation == "tanh" else a
    return y, (x, y, activation)


def dense_backward(w: DenseWeights, cache, dy):
    x, y, activation = cache
    da = dy * (1.0 - y * y) if activation == "tanh" else dy
    lead = x.reshape(-1, x.shape[-1])
    dflat = da.reshape(-1, da.shape[-1])
    return DenseWeights(lead.T @ dflat, dflat.sum(axis=0)), da @ w.W.T
