"""Output heads, losses, RMSprop with cost-driven learning-rate decay, dropout and
the epoch loop.

A mini-batch is pushed through the recurrence as one batched array; the
per-sample gradients are summed by the matrix products in sample order, so a
fixed seed gives bit-identical runs.
"""
import math
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from .cells import (
    CellDims,
    CellKind,
    EmbeddingTable,
    GateVariant,
    embedding_backward,
    embedding_forward,
    init_params,
    sequence_backward,
    sequence_forward,
)
from .data import batch_indices
from .linalg import Activation, ShapeError, sigmoid, softmax

RMSPROP_RHO = 0.9
RMSPROP_EPS = 1e-8
PROB_CLAMP = 1e-12
EVAL_BATCH = 256


class LossKind(str, Enum):
    CATEGORICAL_CE = "categorical_ce"
    BINARY_CE = "binary_ce"


class Split(str, Enum):
    TRAIN = "train"
    TEST = "test"


@dataclass
class TrainConfig:
    cell_kind: CellKind = CellKind.GRU
    variant: Optional[GateVariant] = GateVariant.FULL
    hidden: int = 100
    base_lr: float = 1e-3
    epochs: int = 50
    batch_size: int = 32
    dropout_rate: float = 0.2
    loss_kind: LossKind = LossKind.CATEGORICAL_CE
    activation: Activation = Activation.RELU
    seed: int = 0
    clip_norm: Optional[float] = 5.0

    def __post_init__(self):
        self.cell_kind = CellKind(self.cell_kind)
        self.variant = GateVariant(self.variant) if self.cell_kind is CellKind.GRU else None
        self.loss_kind = LossKind(self.loss_kind)
        self.activation = Activation(self.activation)
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if not self.base_lr > 0.0:
            raise ValueError(f"base learning rate must be positive, got {self.base_lr}")
        if self.batch_size < 1 or self.hidden < 1 or self.epochs < 0:
            raise ValueError("batch_size and hidden must be >= 1 and epochs >= 0")
        if self.clip_norm is not None and self.clip_norm <= 0.0:
            raise ValueError(f"clip_norm must be positive or None, got {self.clip_norm}")


@dataclass
class MetricsRecord:
    epoch: int
    split: Split
    loss: float
    accuracy: float
    lr: float
    wall_seconds: float = 0.0


# ---------------------------------------------------------------------------
# head and loss


@dataclass
class HeadParams:
    W_out: np.ndarray
    b_out: np.ndarray

    def __post_init__(self):
        self.W_out = np.asarray(self.W_out, dtype=np.float64)
        self.b_out = np.asarray(self.b_out, dtype=np.float64)
        if self.W_out.ndim != 2 or self.b_out.shape != (self.W_out.shape[0],):
            raise ShapeError(f"head shapes inconsistent: W_out {self.W_out.shape}, b_out {self.b_out.shape}")

    @classmethod
    def init(cls, classes, n, rng):
        limit = np.sqrt(6.0 / (classes + n))
        return cls(rng.uniform(-limit, limit, size=(classes, n)), np.zeros(classes))

    @classmethod
    def zeros(cls, classes, n):
        return cls(np.zeros((classes, n)), np.zeros(classes))


def head_forward(p, h_T, kind):
    """Class probabilities for a final hidden state (batched or not).

    Categorical heads return a distribution over ``k`` classes; binary heads
    (``k == 1``) return the positive-class probability with a trailing axis of 1.
    """
    h_T = np.asarray(h_T, dtype=np.float64)
    if h_T.shape[-1] != p.W_out.shape[1]:
        raise ShapeError(f"head expects hidden size {p.W_out.shape[1]}, got {h_T.shape}")
    logits = h_T @ p.W_out.T + p.b_out
    if LossKind(kind) is LossKind.CATEGORICAL_CE:
        return softmax(logits)
    if p.W_out.shape[0] != 1:
        raise ShapeError(f"binary head needs exactly one output row, got {p.W_out.shape[0]}")
    return sigmoid(logits)


def predict(probs, kind):
    if LossKind(kind) is LossKind.CATEGORICAL_CE:
        return np.argmax(probs, axis=-1)
    return (probs[..., 0] >= 0.5).astype(np.int64)


def _check_targets(kind, probs, target):
    target = np.asarray(target)
    if not np.issubdtype(target.dtype, np.integer):
        if not np.all(np.mod(target, 1) == 0):
            raise ValueError(f"targets must be integer class ids, got {target}")
        target = target.astype(np.int64)
    limit = probs.shape[-1] if LossKind(kind) is LossKind.CATEGORICAL_CE else 2
    if np.any(target < 0) or np.any(target >= limit):
        raise ValueError(f"invalid target {target} for {limit} classes")
    return target


def loss(kind, probs, target):
    """Cross-entropy of ``probs`` against ``target``; per sample when batched."""
    probs = np.asarray(probs, dtype=np.float64)
    target = _check_targets(kind, probs, target)
    p = np.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    if LossKind(kind) is LossKind.CATEGORICAL_CE:
        picked = np.take_along_axis(p, target[..., None], axis=-1)[..., 0]
        return -np.log(picked)
    q = p[..., 0]
    return -(target * np.log(q) + (1 - target) * np.log(1.0 - q))


def logits_grad(kind, probs, target):
    """Gradient of the cross-entropy with respect to the head's logits."""
    target = _check_targets(kind, probs, target)
    grad = np.array(probs, dtype=np.float64)
    if LossKind(kind) is LossKind.CATEGORICAL_CE:
        np.put_along_axis(grad, target[..., None], np.take_along_axis(grad, target[..., None], axis=-1) - 1.0, axis=-1)
        return grad
    return grad - target[..., None]


def head_backward(p, h_T, dlogits):
    """Return ``(grads, dL_dh_T)`` for upstream logit gradients ``(B, k)``."""
    grads = {"W_out": dlogits.T @ h_T, "b_out": dlogits.sum(axis=0)}
    return grads, dlogits @ p.W_out


# ---------------------------------------------------------------------------
# optimisation


def decay_learning_rate(base_lr, cost):
    """Exponential decay of the base rate by the previous epoch's cost."""
    if base_lr <= 0.0:
        raise ValueError(f"base learning rate must be positive, got {base_lr}")
    return base_lr * math.exp(-cost)


@dataclass
class RmspropState:
    acc: dict = field(default_factory=dict)
    rho: float = RMSPROP_RHO
    eps: float = RMSPROP_EPS


def rmsprop_update(state, params, grads, lr):
    """In-place RMSprop step over matching ``name -> array`` maps."""
    for name, g in grads.items():
        theta = params[name]
        if theta.shape != g.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter has {theta.shape}")
        acc = state.acc.get(name)
        if acc is None:
            acc = state.acc[name] = np.zeros_like(theta)
        acc *= state.rho
        acc += (1.0 - state.rho) * g * g
        theta -= lr * g / (np.sqrt(acc) + state.eps)
    return params, state


def clip_by_global_norm(grads, max_norm):
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm is not None and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


def dropout_mask(shape, rate, rng):
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def apply_dropout(h, rate, rng, training):
    """Inverted dropout; identity outside training or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    h = np.asarray(h, dtype=np.float64)
    if not training or rate == 0.0:
        return h
    return h * dropout_mask(h.shape, rate, rng)


# ---------------------------------------------------------------------------
# model


@dataclass
class Dataset:
    """Stacked samples: ``inputs`` is ``(N, T, m)`` floats or ``(N, T)`` token ids."""

    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        if len(self.inputs) != len(self.targets):
            raise ValueError(f"{len(self.inputs)} inputs but {len(self.targets)} targets")

    def __len__(self):
        return len(self.targets)

    @property
    def is_tokens(self):
        return np.issubdtype(self.inputs.dtype, np.integer)

    def subset(self, limit):
        if limit is None or limit >= len(self):
            return self
        return Dataset(self.inputs[:limit], self.targets[:limit])


@dataclass
class Model:
    cell: object
    head: HeadParams
    activation: Activation = Activation.RELU
    loss_kind: LossKind = LossKind.CATEGORICAL_CE
    embedding: Optional[EmbeddingTable] = None
    pad_id: int = 0

    def named_tensors(self):
        """Every trainable array, keyed by a stable dotted name."""
        out = {f"cell.{k}": v for k, v in self.cell.tensors.items()}
        out["head.W_out"] = self.head.W_out
        out["head.b_out"] = self.head.b_out
        if self.embedding is not None:
            out["embedding"] = self.embedding.rows
        return out

    def size(self):
        return sum(t.size for t in self.named_tensors().values())


def build_model(config, input_dim, classes, rng, vocab=None, pad_id=0):
    """Fresh model for ``config``; ``vocab`` adds a trainable embedding of width ``input_dim``."""
    dims = CellDims(config.hidden, input_dim)
    embedding = EmbeddingTable.init(vocab, input_dim, rng) if vocab else None
    cell = init_params(config.cell_kind, dims, rng, config.variant)
    head = HeadParams.init(classes, config.hidden, rng)
    return Model(cell, head, config.activation, config.loss_kind, embedding, pad_id)


def _embed(model, inputs):
    if model.embedding is None:
        return np.asarray(inputs, dtype=np.float64)
    return embedding_forward(model.embedding, inputs, model.pad_id)


def forward_batch(model, inputs):
    """Probabilities for a batch ``(B, T, m)`` or token batch ``(B, T)``; no dropout."""
    x = _embed(model, inputs)
    hs, _ = sequence_forward(model.cell, np.swapaxes(x, 0, 1), g=model.activation)
    return head_forward(model.head, hs[-1], model.loss_kind)


def loss_and_grads(model, inputs, targets, mask=None):
    """Per-sample losses, probabilities and gradients of the batch-mean loss.

    ``mask`` is an optional dropout multiplier applied to the final hidden state.
    """
    x = _embed(model, inputs)
    x_tm = np.swapaxes(x, 0, 1)
    hs, caches = sequence_forward(model.cell, x_tm, g=model.activation)
    h_T = hs[-1] if mask is None else hs[-1] * mask
    probs = head_forward(model.head, h_T, model.loss_kind)
    losses = loss(model.loss_kind, probs, targets)

    dlogits = logits_grad(model.loss_kind, probs, targets) / len(losses)
    head_grads, dh_T = head_backward(model.head, h_T, dlogits)
    if mask is not None:
        dh_T = dh_T * mask
    dh_seq = np.zeros_like(hs)
    dh_seq[-1] = dh_T
    cell_grads, dx, _ = sequence_backward(model.cell, caches, x_tm, dh_seq)

    grads = {f"cell.{k}": v for k, v in cell_grads.items()}
    grads["head.W_out"] = head_grads["W_out"]
    grads["head.b_out"] = head_grads["b_out"]
    if model.embedding is not None:
        rows, row_grads = embedding_backward(inputs, np.swapaxes(dx, 0, 1), model.pad_id)
        dense = np.zeros_like(model.embedding.rows)
        dense[rows] = row_grads
        grads["embedding"] = dense
    return losses, probs, grads


# ---------------------------------------------------------------------------
# epoch loop


def train_epoch(config, model, opt_state, dataset, rng, lr, epoch=1):
    """One shuffled pass with an RMSprop step per mini-batch.

    Loss and accuracy are accumulated from the training forward passes
    (dropout active), as the update is made.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    start = time.perf_counter()
    tensors = model.named_tensors()
    total_loss = 0.0
    correct = 0
    for idx in batch_indices(len(dataset), config.batch_size, rng):
        inputs, targets = dataset.inputs[idx], dataset.targets[idx]
        mask = None
        if config.dropout_rate > 0.0:
            mask = dropout_mask((len(idx), config.hidden), config.dropout_rate, rng)
        losses, probs, grads = loss_and_grads(model, inputs, targets, mask)
        total_loss += float(np.sum(losses))
        correct += int(np.sum(predict(probs, model.loss_kind) == targets))
        clip_by_global_norm(grads, config.clip_norm)
        rmsprop_update(opt_state, tensors, grads, lr)
    record = MetricsRecord(epoch, Split.TRAIN, total_loss / len(dataset), correct / len(dataset), lr,
                           time.perf_counter() - start)
    return record, model, opt_state


def evaluate(model, dataset, epoch=0, lr=0.0, split=Split.TEST):
    """Loss and accuracy without dropout or parameter changes."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    start = time.perf_counter()
    total_loss = 0.0
    correct = 0
    for i in range(0, len(dataset), EVAL_BATCH):
        inputs, targets = dataset.inputs[i:i + EVAL_BATCH], dataset.targets[i:i + EVAL_BATCH]
        probs = forward_batch(model, inputs)
        total_loss += float(np.sum(loss(model.loss_kind, probs, targets)))
        correct += int(np.sum(predict(probs, model.loss_kind) == targets))
    return MetricsRecord(epoch, Split(split), total_loss / len(dataset), correct / len(dataset), lr,
                         time.perf_counter() - start)


def fit(config, model, train_set, test_set=None, rng=None, on_record=None):
    """Train for ``config.epochs`` epochs, decaying the rate by the previous
    epoch's mean training loss. Returns every metrics record in order."""
    rng = np.random.default_rng(config.seed) if rng is None else rng
    opt_state = RmspropState()
    records = []
    lr = config.base_lr
    for epoch in range(1, config.epochs + 1):
        train_rec, model, opt_state = train_epoch(config, model, opt_state, train_set, rng, lr, epoch)
        out = [train_rec]
        if test_set is not None:
            out.append(evaluate(model, test_set, epoch, lr))
        for rec in out:
            records.append(rec)
            if on_record is not None:
                on_record(rec)
        lr = decay_learning_rate(config.base_lr, train_rec.loss)
    return records
