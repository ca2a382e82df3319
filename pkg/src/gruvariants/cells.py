"""Recurrent cells: forward steps, unrolled BPTT, parameter bundles and embeddings.

All per-step arrays carry a batch axis when driven by :func:`sequence_forward`;
the single-step functions also accept unbatched 1-D vectors.

Parameter names follow the usual gated-RNN notation. A bundle holds exactly the
tensors its cell and gate variant use: a GRU whose gates are computed from the
bias alone has no ``W_z``/``U_z``/``W_r``/``U_r`` entries at all.
"""
from dataclasses import dataclass, field
from enum import Enum
from typing import ClassVar, Optional

import numpy as np

from .linalg import Activation, ShapeError, activate, activation_grad, as_vector, sigmoid


class CellKind(str, Enum):
    RNN = "rnn"
    LSTM = "lstm"
    GRU = "gru"


class GateVariant(str, Enum):
    FULL = "full"            # GRU0: sigma(W x + U h + b)
    STATE_BIAS = "state_bias"  # GRU1: sigma(U h + b)
    STATE_ONLY = "state_only"  # GRU2: sigma(U h)
    BIAS_ONLY = "bias_only"    # GRU3: sigma(b)


GATE_TERMS = {
    GateVariant.FULL: ("W", "U", "b"),
    GateVariant.STATE_BIAS: ("U", "b"),
    GateVariant.STATE_ONLY: ("U",),
    GateVariant.BIAS_ONLY: ("b",),
}

LSTM_SIGNALS = ("i", "f", "o", "c")


class ParameterSetError(ValueError):
    """A parameter bundle does not hold exactly the tensors its variant requires."""

    def __init__(self, kind, variant, missing, unexpected):
        self.missing = tuple(missing)
        self.unexpected = tuple(unexpected)
        label = kind.value if variant is None else f"{kind.value}/{variant.value}"
        super().__init__(
            f"{label} parameter set mismatch: missing {list(self.missing)}, "
            f"unexpected {list(self.unexpected)}"
        )


class OutOfVocabularyError(ValueError):
    def __init__(self, position, token_id, vocab):
        self.position = position
        self.token_id = token_id
        super().__init__(f"token id {token_id} at index {position} is outside vocabulary of size {vocab}")


@dataclass(frozen=True)
class CellDims:
    n: int
    m: int

    def __post_init__(self):
        if self.n < 1 or self.m < 1:
            raise ValueError(f"cell dimensions must be positive, got n={self.n}, m={self.m}")


def tensor_shapes(kind, dims, variant=None):
    """Ordered ``name -> shape`` map of every trainable tensor of a cell."""
    kind = CellKind(kind)
    n, m = dims.n, dims.m
    full = {"W": (n, m), "U": (n, n), "b": (n,)}
    if kind is CellKind.RNN:
        return dict(full)
    if kind is CellKind.LSTM:
        return {f"{t}_{s}": shape for s in LSTM_SIGNALS for t, shape in full.items()}
    variant = GateVariant(variant or GateVariant.FULL)
    shapes = {f"{t}_h": shape for t, shape in full.items()}
    for gate in ("z", "r"):
        for t in GATE_TERMS[variant]:
            shapes[f"{t}_{gate}"] = full[t]
    return shapes


def param_count(kind, variant, dims):
    """Number of trainable scalars, from the closed-form counts."""
    kind = CellKind(kind)
    n, m = dims.n, dims.m
    base = n * n + n * m + n
    if kind is CellKind.RNN:
        return base
    if kind is CellKind.LSTM:
        return 4 * base
    gru = 3 * base
    reduction = {
        GateVariant.FULL: 0,
        GateVariant.STATE_BIAS: 2 * n * m,
        GateVariant.STATE_ONLY: 2 * (n * m + n),
        GateVariant.BIAS_ONLY: 2 * (n * m + n * n),
    }[GateVariant(variant or GateVariant.FULL)]
    return gru - reduction


@dataclass
class _CellParams:
    dims: CellDims
    tensors: dict
    kind: ClassVar[CellKind]

    @property
    def variant(self):
        return None

    def __post_init__(self):
        expected = tensor_shapes(self.kind, self.dims, self.variant)
        missing = [k for k in expected if k not in self.tensors]
        unexpected = [k for k in self.tensors if k not in expected]
        if missing or unexpected:
            raise ParameterSetError(self.kind, self.variant, missing, unexpected)
        ordered = {}
        for name, shape in expected.items():
            t = np.asarray(self.tensors[name], dtype=np.float64)
            if t.shape != shape:
                raise ShapeError(f"{name} has shape {t.shape}, expected {shape}")
            ordered[name] = t
        self.tensors = ordered

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def size(self):
        """Number of allocated scalars."""
        return sum(t.size for t in self.tensors.values())

    def copy(self):
        clone = object.__new__(type(self))
        clone.__dict__.update(self.__dict__)
        clone.tensors = {k: v.copy() for k, v in self.tensors.items()}
        return clone


@dataclass
class RnnParams(_CellParams):
    kind: ClassVar[CellKind] = CellKind.RNN


@dataclass
class LstmParams(_CellParams):
    kind: ClassVar[CellKind] = CellKind.LSTM


@dataclass
class GruParams(_CellParams):
    variant: GateVariant = GateVariant.FULL
    kind: ClassVar[CellKind] = CellKind.GRU

    def __post_init__(self):
        self.variant = GateVariant(self.variant)
        super().__post_init__()


_PARAM_TYPES = {CellKind.RNN: RnnParams, CellKind.LSTM: LstmParams, CellKind.GRU: GruParams}


def make_params(kind, dims, tensors, variant=None):
    kind = CellKind(kind)
    if kind is CellKind.GRU:
        return GruParams(dims, tensors, GateVariant(variant or GateVariant.FULL))
    return _PARAM_TYPES[kind](dims, tensors)


def zero_params(kind, dims, variant=None):
    shapes = tensor_shapes(kind, dims, variant)
    return make_params(kind, dims, {k: np.zeros(s) for k, s in shapes.items()}, variant)


def orthogonal(n, rng):
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def init_params(kind, dims, rng, variant=None):
    """Seeded initialization: Glorot-uniform input weights, orthogonal recurrent
    weights, zero biases."""
    limit = np.sqrt(6.0 / (dims.m + dims.n))
    tensors = {}
    for name, shape in tensor_shapes(kind, dims, variant).items():
        if name.startswith("W"):
            tensors[name] = rng.uniform(-limit, limit, size=shape)
        elif name.startswith("U"):
            tensors[name] = orthogonal(dims.n, rng)
        else:
            tensors[name] = np.zeros(shape)
    return make_params(kind, dims, tensors, variant)


# ---------------------------------------------------------------------------
# forward steps


@dataclass
class RnnCache:
    x: np.ndarray
    h_prev: np.ndarray
    pre: np.ndarray
    h: np.ndarray
    activation: Activation


@dataclass
class LstmCache:
    x: np.ndarray
    h_prev: np.ndarray
    c_prev: np.ndarray
    i: np.ndarray
    f: np.ndarray
    o: np.ndarray
    cand_pre: np.ndarray
    cand: np.ndarray
    c: np.ndarray
    gc: np.ndarray  # g(c_t)
    activation: Activation


@dataclass
class GruCache:
    x: np.ndarray
    h_prev: np.ndarray
    z: np.ndarray
    r: np.ndarray
    cand_pre: np.ndarray
    cand: np.ndarray
    activation: Activation


def _check_step(p, x, h_prev):
    x = as_vector(x, p.dims.m, "x_t")
    h_prev = as_vector(h_prev, p.dims.n, "h_prev")
    if x.shape[:-1] != h_prev.shape[:-1]:
        raise ShapeError(f"x_t batch shape {x.shape} does not match h_prev shape {h_prev.shape}")
    return x, h_prev


def _affine(p, suffix, x, h_prev):
    # Fixed evaluation order (W x, then U h, then b) keeps reduced variants
    # bit-identical to the full form with the missing tensors zeroed.
    pre = None
    W, U, b = (p.tensors.get(f"{t}_{suffix}" if suffix else t) for t in ("W", "U", "b"))
    if W is not None:
        pre = x @ W.T
    if U is not None:
        pre = h_prev @ U.T if pre is None else pre + h_prev @ U.T
    if b is not None:
        pre = np.broadcast_to(b, h_prev.shape).copy() if pre is None else pre + b
    return pre


def simple_rnn_step(p, x_t, h_prev, g=Activation.TANH):
    x_t, h_prev = _check_step(p, x_t, h_prev)
    g = Activation(g)
    pre = _affine(p, "", x_t, h_prev)
    h = activate(g, pre)
    return h, RnnCache(x_t, h_prev, pre, h, g)


def lstm_step(p, x_t, h_prev, c_prev, g=Activation.TANH):
    x_t, h_prev = _check_step(p, x_t, h_prev)
    c_prev = as_vector(c_prev, p.dims.n, "c_prev")
    if c_prev.shape != h_prev.shape:
        raise ShapeError(f"c_prev shape {c_prev.shape} does not match h_prev shape {h_prev.shape}")
    g = Activation(g)
    i = sigmoid(_affine(p, "i", x_t, h_prev))
    f = sigmoid(_affine(p, "f", x_t, h_prev))
    o = sigmoid(_affine(p, "o", x_t, h_prev))
    cand_pre = _affine(p, "c", x_t, h_prev)
    cand = activate(g, cand_pre)
    c = f * c_prev + i * cand
    gc = activate(g, c)
    h = o * gc
    return h, c, LstmCache(x_t, h_prev, c_prev, i, f, o, cand_pre, cand, c, gc, g)


def gru_step(p, x_t, h_prev, g=Activation.RELU):
    if not isinstance(p, GruParams):
        raise TypeError(f"gru_step needs GruParams, got {type(p).__name__}")
    x_t, h_prev = _check_step(p, x_t, h_prev)
    g = Activation(g)
    z = sigmoid(_affine(p, "z", x_t, h_prev))
    r = sigmoid(_affine(p, "r", x_t, h_prev))
    cand_pre = x_t @ p["W_h"].T + (r * h_prev) @ p["U_h"].T + p["b_h"]
    cand = activate(g, cand_pre)
    h = (1.0 - z) * h_prev + z * cand
    return h, GruCache(x_t, h_prev, z, r, cand_pre, cand, g)


# ---------------------------------------------------------------------------
# unrolled sequences


def _as_sequence(x_seq, m):
    x = np.asarray(x_seq, dtype=np.float64)
    if x.ndim == 2:
        x = x[:, None, :]
        batched = False
    elif x.ndim == 3:
        batched = True
    else:
        raise ShapeError(f"x_seq must have shape (T, m) or (T, B, m), got {x.shape}")
    if x.shape[0] < 1:
        raise ValueError("x_seq is empty; sequences need at least one step")
    if x.shape[-1] != m:
        raise ShapeError(f"x_seq steps have length {x.shape[-1]}, expected {m}")
    return x, batched


@dataclass
class SequenceCaches:
    """Per-step caches from :func:`sequence_forward`, always batched internally."""

    steps: list
    batched: bool
    final_c: Optional[np.ndarray] = field(default=None)

    def __len__(self):
        return len(self.steps)

    def __getitem__(self, t):
        return self.steps[t]


def sequence_forward(params, x_seq, h0=None, g=Activation.RELU, c0=None):
    """Unroll a cell over ``x_seq`` of shape ``(T, m)`` or time-major ``(T, B, m)``.

    Returns the hidden states ``(T, [B,] n)`` and the caches needed by
    :func:`sequence_backward`. ``h0`` and ``c0`` default to zeros.
    """
    x, batched = _as_sequence(x_seq, params.dims.m)
    T, B = x.shape[:2]
    n = params.dims.n
    h = np.zeros((B, n)) if h0 is None else np.broadcast_to(as_vector(h0, n, "h0"), (B, n)).copy()
    hs = np.empty((T, B, n))
    steps = []
    if params.kind is CellKind.LSTM:
        c = np.zeros((B, n)) if c0 is None else np.broadcast_to(as_vector(c0, n, "c0"), (B, n)).copy()
        for t in range(T):
            h, c, cache = lstm_step(params, x[t], h, c, g)
            hs[t] = h
            steps.append(cache)
        caches = SequenceCaches(steps, batched, c)
    else:
        step = gru_step if params.kind is CellKind.GRU else simple_rnn_step
        for t in range(T):
            h, cache = step(params, x[t], h, g)
            hs[t] = h
            steps.append(cache)
        caches = SequenceCaches(steps, batched)
    return (hs if batched else hs[:, 0, :]), caches


def _gate_backward(p, gate, da, cache, grads, dx, dh_prev):
    W, U = p.tensors.get(f"W_{gate}"), p.tensors.get(f"U_{gate}")
    if W is not None:
        grads[f"W_{gate}"] += da.T @ cache.x
        dx += da @ W
    if U is not None:
        grads[f"U_{gate}"] += da.T @ cache.h_prev
        dh_prev += da @ U
    if f"b_{gate}" in p.tensors:
        grads[f"b_{gate}"] += da.sum(axis=0)


def _rnn_step_backward(p, cache, dh, grads):
    da = dh * activation_grad(cache.activation, cache.pre, cache.h)
    grads["W"] += da.T @ cache.x
    grads["U"] += da.T @ cache.h_prev
    grads["b"] += da.sum(axis=0)
    return da @ p["W"], da @ p["U"]


def _gru_step_backward(p, cache, dh, grads):
    z, r, h_prev = cache.z, cache.r, cache.h_prev
    dz = dh * (cache.cand - h_prev)
    dh_prev = dh * (1.0 - z)
    da_h = dh * z * activation_grad(cache.activation, cache.cand_pre, cache.cand)
    rh = r * h_prev
    grads["W_h"] += da_h.T @ cache.x
    grads["U_h"] += da_h.T @ rh
    grads["b_h"] += da_h.sum(axis=0)
    dx = da_h @ p["W_h"]
    drh = da_h @ p["U_h"]
    dr = drh * h_prev
    dh_prev += drh * r
    _gate_backward(p, "z", dz * z * (1.0 - z), cache, grads, dx, dh_prev)
    _gate_backward(p, "r", dr * r * (1.0 - r), cache, grads, dx, dh_prev)
    return dx, dh_prev


def _lstm_step_backward(p, cache, dh, dc, grads):
    g = cache.activation
    do = dh * cache.gc
    dc = dc + dh * cache.o * activation_grad(g, cache.c, cache.gc)
    di = dc * cache.cand
    df = dc * cache.c_prev
    dcand = dc * cache.i
    dc_prev = dc * cache.f
    dx = np.zeros_like(cache.x)
    dh_prev = np.zeros_like(cache.h_prev)
    signals = {
        "i": di * cache.i * (1.0 - cache.i),
        "f": df * cache.f * (1.0 - cache.f),
        "o": do * cache.o * (1.0 - cache.o),
        "c": dcand * activation_grad(g, cache.cand_pre, cache.cand),
    }
    for s, da in signals.items():
        _gate_backward(p, s, da, cache, grads, dx, dh_prev)
    return dx, dh_prev, dc_prev


def sequence_backward(params, caches, x_seq, dL_dh_seq):
    """Backpropagation through time.

    ``dL_dh_seq[t]`` is the upstream gradient reaching ``h_t`` from outside the
    recurrence (for a final-step classifier only the last entry is nonzero).
    Returns ``(grads, dL_dx_seq, dL_dh0)`` where ``grads`` has one entry per
    tensor of ``params``.
    """
    x, batched = _as_sequence(x_seq, params.dims.m)
    T, B = x.shape[:2]
    if len(caches) != T:
        raise ValueError(f"have {len(caches)} cached steps for a sequence of length {T}")
    dh_ext = np.asarray(dL_dh_seq, dtype=np.float64)
    if not batched:
        dh_ext = dh_ext[:, None, :] if dh_ext.ndim == 2 else dh_ext
    if dh_ext.shape != (T, B, params.dims.n):
        raise ShapeError(f"dL_dh_seq has shape {np.shape(dL_dh_seq)}, expected time-major hidden gradients "
                         f"of {T} steps and width {params.dims.n}")

    grads = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    dxs = np.empty_like(x)
    dh = np.zeros((B, params.dims.n))
    dc = np.zeros((B, params.dims.n))
    for t in reversed(range(T)):
        cache = caches[t]
        dh = dh + dh_ext[t]
        if params.kind is CellKind.GRU:
            dxs[t], dh = _gru_step_backward(params, cache, dh, grads)
        elif params.kind is CellKind.LSTM:
            dxs[t], dh, dc = _lstm_step_backward(params, cache, dh, dc, grads)
        else:
            dxs[t], dh = _rnn_step_backward(params, cache, dh, grads)
    if not batched:
        return grads, dxs[:, 0, :], dh[0]
    return grads, dxs, dh


# ---------------------------------------------------------------------------
# token embedding


@dataclass
class EmbeddingTable:
    rows: np.ndarray

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        if self.rows.ndim != 2:
            raise ShapeError(f"embedding table must be 2-D, got shape {self.rows.shape}")

    @property
    def vocab(self):
        return self.rows.shape[0]

    @property
    def dim(self):
        return self.rows.shape[1]

    @classmethod
    def init(cls, vocab, dim, rng, scale=0.05):
        return cls(rng.uniform(-scale, scale, size=(vocab, dim)))


def embedding_forward(table, token_ids, pad_id=0):
    """Look up token rows; positions holding ``pad_id`` become zero vectors."""
    ids = np.asarray(token_ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.vocab):
        flat = ids.reshape(-1)
        bad = int(np.flatnonzero((flat < 0) | (flat >= table.vocab))[0])
        raise OutOfVocabularyError(bad, int(flat[bad]), table.vocab)
    out = table.rows[ids]
    out[ids == pad_id] = 0.0
    return out


def embedding_backward(token_ids, dL_dvecs, pad_id=0):
    """Accumulate per-position gradients into the rows they were read from.

    Returns ``(row_ids, row_grads)`` with ``row_ids`` sorted and unique; pad
    positions contribute nothing.
    """
    ids = np.asarray(token_ids).reshape(-1)
    upstream = np.asarray(dL_dvecs, dtype=np.float64)
    upstream = upstream.reshape(ids.size, upstream.shape[-1])
    keep = ids != pad_id
    rows, inverse = np.unique(ids[keep], return_inverse=True)
    acc = np.zeros((rows.size, upstream.shape[1]))
    np.add.at(acc, inverse, upstream[keep])
    return rows, acc
