"""Interaction-aware velocity-sequence predictor.

Architecture:
  * query encoder: LSTM over the query robot's past velocities, final hidden state;
  * environment encoder: one LSTM shared by all neighbour branches (input is
    relative position and velocity per step) and one tanh dense layer shared
    by all obstacle branches (current relative position and velocity); the
    per-branch encodings are stacked and max-pooled feature-wise;
  * decoder: LSTM fed the concatenated encodings at every step, then a tanh
    dense layer and a linear 3-unit output per step.

Batches pad the neighbour and obstacle axes; padded branches are masked out
of the pooling. An empty environment pools to the zero vector.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from ..observation import ObservationHistory
from .layers import (DenseWeights, LstmLayerWeights, dense_backward, dense_forward,
                     lstm_backward, lstm_forward)


class ModelContractError(ValueError):
    pass


@dataclass
class ModelWeights:
    query_encoder: LstmLayerWeights
    neighbor_encoder: LstmLayerWeights
    obstacle_encoder: DenseWeights
    recurrent_decoder: LstmLayerWeights
    dense_decoder: DenseWeights
    output_layer: DenseWeights
    pred_horizon: int = 20

    LAYERS = ("query_encoder", "neighbor_encoder", "obstacle_encoder",
              "recurrent_decoder", "dense_decoder", "output_layer")

    @classmethod
    def init(cls, seed=0, query_hidden=64, env_hidden=64, decoder_hidden=128,
             dense_hidden=64, pred_horizon=20):
        rng = np.random.default_rng(seed)
        return cls(
            LstmLayerWeights.init(rng, 3, query_hidden),
            LstmLayerWeights.init(rng, 6, env_hidden),
            DenseWeights.init(rng, 6, env_hidden),
            LstmLayerWeights.init(rng, query_hidden + env_hidden, decoder_hidden),
            DenseWeights.init(rng, decoder_hidden, dense_hidden),
            DenseWeights.init(rng, dense_hidden, 3),
            pred_horizon,
        )

    def named_arrays(self):
        """(layer, field, array) triples in a fixed order."""
        out = []
        for layer in self.LAYERS:
            lw = getattr(self, layer)
            for f in fields(lw):
                out.append((layer, f.name, getattr(lw, f.name)))
        return out

    def matrices(self):
        return [a for _, name, a in self.named_arrays() if name != "b"]

    def map(self, fn, *others):
        """New weights with fn applied array-wise (to matching arrays of ``others``)."""
        layers = {}
        for layer in self.LAYERS:
            lw = getattr(self, layer)
            kw = {f.name: fn(getattr(lw, f.name), *[getattr(getattr(o, layer), f.name) for o in others])
                  for f in fields(lw)}
            layers[layer] = type(lw)(**kw)
        return ModelWeights(**layers, pred_horizon=self.pred_horizon)

    def copy(self):
        return self.map(np.copy)

    def zeros_like(self):
        return self.map(np.zeros_like)

    def flat(self):
        return np.concatenate([a.ravel() for _, _, a in self.named_arrays()])

    def sq_norm(self):
        return float(sum(np.vdot(m, m) for m in self.matrices()))

    def __eq__(self, other):
        if not isinstance(other, ModelWeights) or self.pred_horizon != other.pred_horizon:
            return False
        a, b = self.named_arrays(), other.named_arrays()
        return all(x[2].shape == y[2].shape and np.array_equal(x[2], y[2]) for x, y in zip(a, b))

    def check_consistent(self):
        q, e = self.query_encoder, self.neighbor_encoder
        if q.input_size != 3:
            raise ModelContractError("query_encoder: input must be 3 velocities")
        if e.input_size != 6 or self.obstacle_encoder.W.shape[0] != 6:
            raise ModelContractError("environment encoders take 6 features per branch")
        if self.obstacle_encoder.units != e.hidden_size:
            raise ModelContractError("obstacle_encoder: width must equal neighbor_encoder hidden size")
        if self.recurrent_decoder.input_size != q.hidden_size + e.hidden_size:
            raise ModelContractError("recurrent_decoder: input must be query + environment encoding")
        if self.dense_decoder.W.shape[0] != self.recurrent_decoder.hidden_size:
            raise ModelContractError("dense_decoder: input must match recurrent_decoder hidden size")
        if self.output_layer.W.shape != (self.dense_decoder.units, 3):
            raise ModelContractError("output_layer: must map dense_decoder units to 3")


@dataclass
class Batch:
    ego: np.ndarray  # (B, T, 3)
    neighbors: np.ndarray  # (B, M, T, 6)
    neighbor_mask: np.ndarray  # (B, M) bool
    obstacles: np.ndarray  # (B, K, 6)
    obstacle_mask: np.ndarray  # (B, K) bool

    def __len__(self):
        return len(self.ego)

    def take(self, idx):
        return Batch(self.ego[idx], self.neighbors[idx], self.neighbor_mask[idx],
                     self.obstacles[idx], self.obstacle_mask[idx])


def collate(histories) -> Batch:
    histories = list(histories)
    B = len(histories)
    T = histories[0].length if B else 0
    if any(h.length != T for h in histories):
        raise ModelContractError("histories in a batch must share their length")
    M = max((h.n_neighbors for h in histories), default=0)
    K = max((h.n_obstacles for h in histories), default=0)
    ego = np.zeros((B, T, 3))
    nb = np.zeros((B, M, T, 6))
    nb_mask = np.zeros((B, M), dtype=bool)
    ob = np.zeros((B, K, 6))
    ob_mask = np.zeros((B, K), dtype=bool)
    for b, h in enumerate(histories):
        ego[b] = h.ego_velocities
        m, k = h.n_neighbors, h.n_obstacles
        nb[b, :m, :, :3] = h.neighbor_rel_positions
        nb[b, :m, :, 3:] = h.neighbor_rel_velocities
        nb_mask[b, :m] = True
        ob[b, :k, :3] = h.obstacle_rel_positions
        ob[b, :k, 3:] = h.obstacle_rel_velocities
        ob_mask[b, :k] = True
    return Batch(ego, nb, nb_mask, ob, ob_mask)


def forward_batch(w: ModelWeights, batch: Batch, zero_env=False):
    """Predicted velocities (B, T_H, 3) and the cache needed for backprop.

    ``zero_env`` replaces the pooled environment encoding by zeros, which
    turns the model into a query-history-only predictor.
    """
    B, T, _ = batch.ego.shape
    _, M, _, _ = batch.neighbors.shape
    K = batch.obstacles.shape[1]
    H_e = w.neighbor_encoder.hidden_size

    hq, cq = lstm_forward(w.query_encoder, batch.ego)
    z_q = hq[:, -1]

    stack = []
    cn = co = None
    if M:
        hn, cn = lstm_forward(w.neighbor_encoder, batch.neighbors.reshape(B * M, T, 6))
        enc_n = hn[:, -1].reshape(B, M, H_e)
        stack.append(np.where(batch.neighbor_mask[..., None], enc_n, -np.inf))
    if K:
        enc_o, co = dense_forward(w.obstacle_encoder, batch.obstacles)
        stack.append(np.where(batch.obstacle_mask[..., None], enc_o, -np.inf))
    if stack and not zero_env:
        allenc = np.concatenate(stack, axis=1)  # (B, M+K, H_e)
        arg = np.argmax(allenc, axis=1)  # first index wins ties
        z_e = allenc.max(axis=1)
        empty = ~np.isfinite(z_e)
        z_e = np.where(empty, 0.0, z_e)
    else:
        arg = None
        empty = None
        z_e = np.zeros((B, H_e))

    e = np.concatenate([z_q, z_e], axis=1)
    hd, cd = lstm_forward(w.recurrent_decoder, None, const_input=e, steps=w.pred_horizon)
    y, cy = dense_forward(w.dense_decoder, hd)
    v, cv = dense_forward(w.output_layer, y, activation="linear")
    cache = dict(cq=cq, cn=cn, co=co, arg=arg, empty=empty, cd=cd, cy=cy, cv=cv,
                 shape=(B, T, M, K), zero_env=zero_env)
    return v, cache


def backward_batch(w: ModelWeights, cache, dv) -> ModelWeights:
    """Gradient of sum(dv * v) w.r.t. every weight (regulariser not included)."""
    B, T, M, K = cache["shape"]
    H_e = w.neighbor_encoder.hidden_size
    H_q = w.query_encoder.hidden_size
    g_out, dy = dense_backward(w.output_layer, cache["cv"], dv)
    g_dense, dhd = dense_backward(w.dense_decoder, cache["cy"], dy)
    g_dec, de = lstm_backward(w.recurrent_decoder, cache["cd"], dhd)
    dz_q = de[:, :H_q]
    dz_e = de[:, H_q:]

    dhq = np.zeros((B, T, H_q))
    dhq[:, -1] = dz_q
    g_q, _ = lstm_backward(w.query_encoder, cache["cq"], dhq)

    d_enc = np.zeros((B, M + K, H_e))
    if cache["arg"] is not None:
        dz = np.where(cache["empty"], 0.0, dz_e)
        np.put_along_axis(d_enc, cache["arg"][:, None, :], dz[:, None, :], axis=1)
    if M:
        dhn = np.zeros((B * M, T, H_e))
        dhn[:, -1] = d_enc[:, :M].reshape(B * M, H_e)
        g_n, _ = lstm_backward(w.neighbor_encoder, cache["cn"], dhn)
    else:
        g_n = LstmLayerWeights(np.zeros_like(w.neighbor_encoder.Wx),
                               np.zeros_like(w.neighbor_encoder.Wh),
                               np.zeros_like(w.neighbor_encoder.b))
    if K:
        g_o, _ = dense_backward(w.obstacle_encoder, cache["co"], d_enc[:, M:])
    else:
        g_o = DenseWeights(np.zeros_like(w.obstacle_encoder.W), np.zeros_like(w.obstacle_encoder.b))
    return ModelWeights(g_q, g_n, g_o, g_dec, g_dense, g_out, w.pred_horizon)


def batch_loss_and_grad(w: ModelWeights, batch: Batch, truth, l2_lambda, zero_env=False):
    """Mean per-sample loss over the batch plus the L2 term, and its gradient."""
    v, cache = forward_batch(w, batch, zero_env)
    B, T_H, _ = v.shape
    err = v - truth
    data = float(np.sum(err * err)) / (B * T_H)
    grads = backward_batch(w, cache, 2.0 * err / (B * T_H))
    if l2_lambda:
        for (layer, name, g), (_, _, p) in zip(grads.named_arrays(), w.named_arrays()):
            if name != "b":
                g += 2.0 * l2_lambda * p
    return data + l2_lambda * w.sq_norm(), grads


def forward(history: ObservationHistory, weights: ModelWeights, zero_env=False) -> np.ndarray:
    """Predicted future velocities (T_H, 3) for one query robot."""
    v, _ = forward_batch(weights, collate([history]), zero_env)
    return v[0]


def loss(predicted, truth, weights: ModelWeights, l2_lambda) -> float:
    predicted = np.asarray(predicted, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if predicted.shape != truth.shape:
        raise ValueError("predicted and truth must have equal shapes")
    err = predicted - truth
    return float(np.sum(err * err)) / len(predicted) + l2_lambda * weights.sq_norm()


def backward(history: ObservationHistory, truth, weights: ModelWeights, l2_lambda) -> ModelWeights:
    """Exact gradient of ``loss(forward(history), truth)`` w.r.t. all weights."""
    _, g = batch_loss_and_grad(weights, collate([history]), np.asarray(truth, dtype=float)[None], l2_lambda)
    return g
