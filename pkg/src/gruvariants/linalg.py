"""Dense linear algebra and pointwise nonlinearities.

Matrices and vectors are plain float64 numpy arrays. Every function here also
accepts a leading batch axis on its vector arguments (shape ``(B, k)``), which
the cells use to push a whole mini-batch through one call.
"""
from enum import Enum

import numpy as np

# exp(709) is the largest finite double exponential
_EXP_LIMIT = 700.0
# largest double below 1; keeps sigmoid strictly inside (0, 1)
_BELOW_ONE = np.nextafter(1.0, 0.0)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Activation(str, Enum):
    SIGMOID = "sigmoid"
    TANH = "tanh"
    RELU = "relu"


def as_matrix(a, rows=None, cols=None, name="matrix"):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    if (rows is not None and a.shape[0] != rows) or (cols is not None and a.shape[1] != cols):
        raise ShapeError(f"{name} has shape {a.shape}, expected ({rows}, {cols})")
    return a


def as_vector(v, length=None, name="vector"):
    """Coerce to float64 with a trailing feature axis of ``length``."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim not in (1, 2):
        raise ShapeError(f"{name} must be 1-D or batched 2-D, got shape {v.shape}")
    if length is not None and v.shape[-1] != length:
        raise ShapeError(f"{name} has length {v.shape[-1]}, expected {length}")
    return v


def matvec(A, x):
    """Return ``A @ x`` for ``x`` of shape ``(m,)`` or a batch ``(B, m)``."""
    A = np.asarray(A, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if A.ndim != 2 or x.ndim not in (1, 2) or A.shape[1] != x.shape[-1]:
        raise ShapeError(f"cannot multiply matrix of shape {A.shape} by vector of shape {x.shape}")
    return x @ A.T


def hadamard(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"hadamard operands differ in shape: {a.shape} vs {b.shape}")
    return a * b


def sigmoid(x):
    # Two-branch form keeps exp() arguments non-positive.
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = np.minimum(1.0 / (1.0 + np.exp(-x[pos])), _BELOW_ONE)
    e = np.exp(np.maximum(x[~pos], -_EXP_LIMIT))
    out[~pos] = e / (1.0 + e)
    return out


def activate(kind, x):
    kind = Activation(kind)
    x = np.asarray(x, dtype=np.float64)
    if kind is Activation.SIGMOID:
        return sigmoid(x)
    if kind is Activation.TANH:
        return np.tanh(x)
    return np.maximum(x, 0.0)


def activation_grad(kind, pre, out):
    """Derivative of ``activate(kind, pre)`` given its output ``out``.

    The ReLU subgradient at exactly zero is taken as 0.
    """
    kind = Activation(kind)
    if kind is Activation.SIGMOID:
        return out * (1.0 - out)
    if kind is Activation.TANH:
        return 1.0 - out * out
    return (pre > 0.0).astype(np.float64)


def softmax(logits):
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape[-1] < 1:
        raise ShapeError("softmax needs at least one logit")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)
