"""Mini-batch SGD with RMSPROP-scaled Nesterov momentum, L2 and fc dropout.

Composition per step (gradient already averaged over the batch)::

    g  <- g + l2 * theta
    ms <- rho * ms + (1 - rho) * g**2
    gh <- g / sqrt(ms + eps)
    v  <- mu * v - lr * gh
    theta <- theta + mu * v - lr * gh        # Nesterov look-ahead form
"""
from dataclasses import dataclass, asdict
import json
import logging

import numpy as np

from ._validation import check_random_state
from .convnet import (
    Architecture,
    NetworkParams,
    backward,
    bce_loss,
    forward_batch,
    init_params,
    predict_logits,
)
from .exceptions import ConfigError, ContractViolation

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    momentum: float = 0.9
    rms_decay: float = 0.99
    rms_epsilon: float = 1e-8
    l2: float = 1e-4
    dropout: float = 0.5
    batch_size: int = 64
    epochs: int = 30
    seed: int = 0
    validation_fraction: float = 0.1

    def __post_init__(self):
        checks = [
            (self.learning_rate >= 0, "learning_rate must be >= 0"),
            (0 <= self.momentum < 1, "momentum must be in [0, 1)"),
            (0 < self.rms_decay < 1, "rms_decay must be in (0, 1)"),
            (self.rms_epsilon > 0, "rms_epsilon must be > 0"),
            (self.l2 >= 0, "l2 must be >= 0"),
            (0 <= self.dropout < 1, "dropout must be in [0, 1)"),
            (int(self.batch_size) == self.batch_size and self.batch_size >= 1, "batch_size must be a positive integer"),
            (int(self.epochs) == self.epochs and self.epochs >= 0, "epochs must be a non-negative integer"),
            (0 <= self.validation_fraction < 1, "validation_fraction must be in [0, 1)"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)


@dataclass
class OptimizerState:
    velocity: list
    mean_square: list

    @classmethod
    def zeros_like(cls, arrays):
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays])


def sgd_step(params, grads, state, config):
    """One optimiser update; pure, returns new ``(params, state)``.

    ``params`` may be a :class:`NetworkParams` or a list of arrays; the return
    value has the same kind.
    """
    arrays = params.arrays() if isinstance(params, NetworkParams) else list(params)
    if not (len(arrays) == len(grads) == len(state.velocity) == len(state.mean_square)):
        raise ContractViolation("params, grads and optimiser state have different lengths")
    lr, mu, rho, eps = config.learning_rate, config.momentum, config.rms_decay, config.rms_epsilon
    new_p, new_v, new_ms = [], [], []
    for theta, g, v, ms in zip(arrays, grads, state.velocity, state.mean_square):
        if not (theta.shape == np.shape(g) == v.shape == ms.shape):
            raise ContractViolation(f"shape mismatch: param {theta.shape}, grad {np.shape(g)}, state {v.shape}")
        g = g + config.l2 * theta
        ms = rho * ms + (1 - rho) * g * g
        step = lr * (g / np.sqrt(ms + eps))
        v = mu * v - step
        new_p.append(theta + mu * v - step)
        new_v.append(v)
        new_ms.append(ms)
    state = OptimizerState(new_v, new_ms)
    if isinstance(params, NetworkParams):
        return NetworkParams.from_arrays(params.arch, new_p), state
    return new_p, state


def apply_dropout(activations, rate, rng):
    """Inverted dropout: zero each unit with probability ``rate``, scale survivors by 1/(1-rate)."""
    if not 0 <= rate < 1:
        raise ContractViolation(f"dropout rate must be in [0, 1), got {rate}")
    a = np.asarray(activations, dtype=np.float64)
    if rate == 0:
        mask = np.ones_like(a)
        return a.copy(), mask
    mask = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return a * mask, mask


def batch_gradients(params, patches, labels, dropout_rate=0.0, rng=None):
    """Mean loss and mean gradients over one mini-batch."""
    drop = None
    if dropout_rate > 0:
        drop = lambda h: apply_dropout(h, dropout_rate, rng)  # noqa: E731
    _, trace = forward_batch(params, patches, dropout=drop)
    n = len(labels)
    grads = [g / n for g in backward(params, trace, labels)]
    return bce_loss(trace.logits, labels) / n, grads


def evaluate(params, patches, labels):
    """(mean loss, accuracy at 0.5) without dropout."""
    if len(labels) == 0:
        return float("nan"), float("nan")
    logits = predict_logits(params, patches)
    labels = np.asarray(labels, dtype=np.float64)
    loss = bce_loss(logits, labels) / len(labels)
    acc = float(np.mean((logits > 0) == (labels > 0.5)))
    return loss, acc


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float

    def to_line(self):
        return json.dumps(asdict(self), sort_keys=True)


def format_log(records):
    """Training log as line-delimited JSON."""
    return "".join(r.to_line() + "\n" for r in records)


def train(patches, labels, config=None, arch=None, init=None):
    """Train one part detector.

    Holds out ``config.validation_fraction`` of the data by seeded shuffle,
    reshuffles the rest each epoch, and returns the parameters from the epoch
    with the lowest validation loss along with the per-epoch log.
    """
    config = config or TrainConfig()
    x = np.asarray(patches, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if len(y) == 0:
        raise ConfigError("training set is empty")
    if len(x) != len(y):
        raise ConfigError(f"{len(x)} patches but {len(y)} labels")
    if config.batch_size > len(y):
        raise ConfigError(f"batch_size {config.batch_size} exceeds dataset size {len(y)}")
    arch = arch or (init.arch if init is not None else Architecture(patch_size=x.shape[1], in_channels=x.shape[3]))
    rng = check_random_state(config.seed)
    params = init if init is not None else init_params(rng, arch)

    order = rng.permutation(len(y))
    n_val = int(round(config.validation_fraction * len(y)))
    if len(y) - n_val < config.batch_size:
        raise ConfigError("batch_size exceeds the training split after holding out validation data")
    val_idx, tr_idx = np.sort(order[:n_val]), order[n_val:]

    state = OptimizerState.zeros_like(params.arrays())
    best, best_loss = params, np.inf
    log = []
    for epoch in range(1, config.epochs + 1):
        perm = tr_idx[rng.permutation(len(tr_idx))]
        losses = []
        n_batches = len(perm) // config.batch_size
        for b in range(n_batches):
            idx = np.sort(perm[b * config.batch_size:(b + 1) * config.batch_size])
            loss, grads = batch_gradients(params, x[idx], y[idx], config.dropout, rng)
            params, state = sgd_step(params, grads, state, config)
            losses.append(loss)
        if n_val:
            val_loss, val_acc = evaluate(params, x[val_idx], y[val_idx])
        else:
            val_loss, val_acc = evaluate(params, x[tr_idx], y[tr_idx])
        rec = EpochRecord(epoch, float(np.mean(losses)), float(val_loss), float(val_acc))
        log.append(rec)
        logger.info("epoch %d train_loss %.5f val_loss %.5f val_acc %.4f",
                    epoch, rec.train_loss, rec.val_loss, rec.val_acc)
        if val_loss < best_loss:
            best, best_loss = params, val_loss
    return best, log
