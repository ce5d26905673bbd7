"""Minibatch training with adaptive moment estimates and early stopping."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .model import Batch, ModelWeights, batch_loss_and_grad, forward_batch

log = logging.getLogger(__name__)


class TrainingFailure(RuntimeError):
    def __init__(self, msg, last_finite_epoch):
        super().__init__(msg)
        self.last_finite_epoch = last_finite_epoch


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 200
    l2_lambda: float = 0.01
    truncation_depth: int = 0  # 0 means backpropagate through the whole sequence
    rng_seed: int = 0
    patience: int = 20
    val_fraction: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    zero_env: bool = False  # train the query-history-only ablation

    def __post_init__(self):
        if self.l2_lambda < 0:
            raise ValueError("l2_lambda must be >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.truncation_depth not in (0,):
            # sequences here are short enough that full BPTT is always used
            raise ValueError("only full-sequence backpropagation (truncation_depth=0) is supported")


@dataclass
class TrainingSet:
    """Model inputs, targets and (run, robot, tick) metadata for every record.

    ``origins`` holds the query position at the record tick, from which the
    target velocities integrate to absolute positions.
    """

    inputs: Batch
    targets: np.ndarray  # (R, T_H, 3)
    meta: np.ndarray  # (R, 3) int
    origins: np.ndarray = None  # (R, 3)

    def __post_init__(self):
        if self.origins is None:
            self.origins = np.zeros((len(self.targets), 3))

    def __len__(self):
        return len(self.targets)

    def take(self, idx):
        return TrainingSet(self.inputs.take(idx), self.targets[idx], self.meta[idx], self.origins[idx])


@dataclass
class TrainResult:
    weights: ModelWeights
    curve: list = field(default_factory=list)  # rows (epoch, train_loss, val_loss)
    best_epoch: int = 0
    initial_val_loss: float = float("nan")


def split_by_time(meta, obs_len, horizon, val_fraction=0.1):
    """Train/validation indices: the last ``val_fraction`` of each run's ticks validate.

    Training records whose windows would overlap the validation block are
    discarded.
    """
    meta = np.asarray(meta)
    train, val = [], []
    for run in np.unique(meta[:, 0]):
        idx = np.nonzero(meta[:, 0] == run)[0]
        ticks = meta[idx, 2]
        lo, hi = ticks.min(), ticks.max()
        cut = lo + (1.0 - val_fraction) * (hi - lo)
        val.append(idx[ticks >= cut])
        train.append(idx[ticks < cut - obs_len - horizon])
    train = np.sort(np.concatenate(train)) if train else np.zeros(0, int)
    val = np.sort(np.concatenate(val)) if val else np.zeros(0, int)
    if len(train) == 0 or len(val) == 0:
        # too little data for a gap; fall back to a plain tail split
        n = len(meta)
        n_val = max(1, int(round(val_fraction * n))) if n > 1 else 0
        train = np.arange(n - n_val)
        val = np.arange(n - n_val, n) if n_val else np.arange(n)
    return train, val


def evaluate(weights: ModelWeights, data: TrainingSet, l2_lambda, chunk=512, zero_env=False):
    """Full loss (mean data term plus regulariser) over a record set."""
    total = 0.0
    n = len(data)
    for s in range(0, n, chunk):
        sl = slice(s, min(n, s + chunk))
        v, _ = forward_batch(weights, data.inputs.take(sl), zero_env)
        err = v - data.targets[sl]
        total += float(np.sum(err * err))
    th = data.targets.shape[1]
    return total / (n * th) + l2_lambda * weights.sq_norm()


class Adam:
    def __init__(self, weights: ModelWeights, cfg: TrainConfig):
        self.cfg = cfg
        self.m = weights.zeros_like()
        self.v = weights.zeros_like()
        self.t = 0

    def update(self, weights: ModelWeights, grads: ModelWeights):
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for (_, _, p), (_, _, g), (_, _, m), (_, _, v) in zip(
                weights.named_arrays(), grads.named_arrays(),
                self.m.named_arrays(), self.v.named_arrays()):
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            p -= c.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + c.eps)


def train(data: TrainingSet, cfg: TrainConfig, init: ModelWeights | None = None,
          model_kwargs=None, obs_len=None, callback=None) -> TrainResult:
    if len(data) == 0:
        raise ValueError("training set is empty")
    horizon = data.targets.shape[1]
    if init is None:
        init = ModelWeights.init(seed=cfg.rng_seed, pred_horizon=horizon, **(model_kwargs or {}))
    elif init.pred_horizon != horizon:
        raise ValueError(f"model predicts {init.pred_horizon} steps, data has {horizon}")
    init.check_consistent()
    obs_len = obs_len if obs_len is not None else data.inputs.ego.shape[1] - 1
    tr_idx, va_idx = split_by_time(data.meta, obs_len, horizon, cfg.val_fraction)
    train_set, val_set = data.take(tr_idx), data.take(va_idx)

    w = init.copy()
    opt = Adam(w, cfg)
    rng = np.random.default_rng(cfg.rng_seed)
    best = w.copy()
    best_val = evaluate(w, val_set, cfg.l2_lambda, zero_env=cfg.zero_env)
    result = TrainResult(best, [], 0, best_val)
    since_best = 0
    n = len(train_set)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            batch_loss, grads = batch_loss_and_grad(
                w, train_set.inputs.take(idx), train_set.targets[idx], cfg.l2_lambda, cfg.zero_env)
            if not np.isfinite(batch_loss):
                raise TrainingFailure(f"loss became non-finite in epoch {epoch}", epoch - 1)
            total += batch_loss * len(idx)
            opt.update(w, grads)
        train_loss = total / n
        val_loss = evaluate(w, val_set, cfg.l2_lambda, zero_env=cfg.zero_env)
        if not np.isfinite(val_loss):
            raise TrainingFailure(f"validation loss became non-finite in epoch {epoch}", epoch - 1)
        result.curve.append((epoch, train_loss, val_loss))
        log.info("epoch %d train %.5f val %.5f", epoch, train_loss, val_loss)
        if callback is not None:
            callback(epoch, train_loss, val_loss)
        if val_loss < best_val:
            best_val = val_loss
            best = w.copy()
            result.best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break
    result.weights = best
    return result
