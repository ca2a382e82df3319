"""Central finite-difference oracle for the analytic backward passes."""
from dataclasses import dataclass, field

import numpy as np

from .cells import (
    CellDims,
    CellKind,
    EmbeddingTable,
    GateVariant,
    LstmCache,
    embedding_backward,
    embedding_forward,
    make_params,
    sequence_backward,
    sequence_forward,
    tensor_shapes,
)
from .linalg import Activation
from .train import HeadParams, LossKind, head_backward, head_forward, logits_grad

DEFAULT_EPS = 1e-5
DEFAULT_TOL = 1e-5
RELU_MARGIN = 1e-4
DENOM_FLOOR = 1e-8


class NonFiniteLossError(ArithmeticError):
    def __init__(self, name, index, value):
        self.name = name
        self.index = index
        super().__init__(f"loss is {value} after perturbing {name}{list(index)}")


def relative_error(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), DENOM_FLOOR)


def finite_difference_gradient(loss_fn, params, eps=DEFAULT_EPS):
    """Central differences of ``loss_fn()`` with respect to every entry of ``params``.

    ``params`` maps names to float arrays that ``loss_fn`` reads; each entry is
    perturbed in place and restored exactly afterwards. The difference of the
    two loss values is taken in whatever precision ``loss_fn`` returns.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    grads = {}
    for name, theta in params.items():
        g = np.zeros_like(theta, dtype=np.float64)
        for idx in np.ndindex(theta.shape):
            orig = theta[idx]
            theta[idx] = orig + eps
            up = loss_fn()
            theta[idx] = orig - eps
            down = loss_fn()
            theta[idx] = orig
            for value in (up, down):
                if not np.isfinite(value):
                    raise NonFiniteLossError(name, idx, value)
            # Divide by the step actually realised after rounding theta +- eps.
            g[idx] = (up - down) / ((orig + eps) - (orig - eps))
        grads[name] = g
    return grads


@dataclass
class TensorReport:
    max_rel_error: float
    max_abs_error: float
    worst_index: tuple


@dataclass
class GradCheckReport:
    tensors: dict = field(default_factory=dict)
    tolerance: float = DEFAULT_TOL
    label: str = ""

    @property
    def passed(self):
        return all(t.max_rel_error <= self.tolerance for t in self.tensors.values())

    def failures(self):
        return [k for k, t in self.tensors.items() if t.max_rel_error > self.tolerance]


def compare(analytic, numeric, tol=DEFAULT_TOL, label=""):
    report = GradCheckReport(tolerance=tol, label=label)
    for name, num in numeric.items():
        ana = np.asarray(analytic[name], dtype=np.float64)
        rel = relative_error(ana, num)
        worst = np.unravel_index(int(np.argmax(rel)), rel.shape) if rel.size else ()
        report.tensors[name] = TensorReport(
            float(rel.max(initial=0.0)), float(np.abs(ana - num).max(initial=0.0)), tuple(int(i) for i in worst)
        )
    return report


@dataclass
class _Problem:
    """A tiny sequence classifier whose tensors all live in one flat name map."""

    kind: CellKind
    variant: GateVariant
    dims: CellDims
    activation: Activation
    tensors: dict
    target: np.ndarray
    token_ids: np.ndarray = None
    pad_id: int = 0

    def cell(self):
        names = tensor_shapes(self.kind, self.dims, self.variant)
        return make_params(self.kind, self.dims, {k: self.tensors[f"cell.{k}"] for k in names}, self.variant)

    def head(self):
        return HeadParams(self.tensors["head.W_out"], self.tensors["head.b_out"])

    def inputs(self):
        if self.token_ids is None:
            return self.tensors["x"]
        return embedding_forward(EmbeddingTable(self.tensors["embedding"]), self.token_ids, self.pad_id)

    def forward(self):
        x = self.inputs()
        hs, caches = sequence_forward(self.cell(), x, g=self.activation)
        probs = head_forward(self.head(), hs[-1:], LossKind.CATEGORICAL_CE)
        return x, hs, caches, probs

    def loss(self):
        """Reference loss in extended precision, computed without the cell code.

        Float64 roundoff in the loss (~1e-16) divided by 2e-5 leaves ~1e-11 of
        noise in each difference quotient, which is more than 1e-5 relative on
        gradient entries near 1e-6; long double pushes that noise far below.
        """
        return reference_loss(self.kind, self.activation, self.tensors, self.target[0],
                              self.token_ids, self.pad_id)

    def analytic(self):
        x, hs, caches, probs = self.forward()
        dlogits = logits_grad(LossKind.CATEGORICAL_CE, probs, self.target)
        head_grads, dh_T = head_backward(self.head(), hs[-1:], dlogits)
        dh_seq = np.zeros_like(hs)
        dh_seq[-1] = dh_T[0]
        cell_grads, dx, _ = sequence_backward(self.cell(), caches, x, dh_seq)
        grads = {f"cell.{k}": v for k, v in cell_grads.items()}
        grads["head.W_out"] = head_grads["W_out"]
        grads["head.b_out"] = head_grads["b_out"]
        if self.token_ids is None:
            grads["x"] = dx
        else:
            rows, row_grads = embedding_backward(self.token_ids, dx, self.pad_id)
            dense = np.zeros_like(self.tensors["embedding"])
            dense[rows] = row_grads
            grads["embedding"] = dense
        return grads, caches


_LD = np.longdouble


def _ld_sigmoid(v):
    return 1 / (1 + np.exp(-v))


def _ld_g(kind, v):
    return np.tanh(v) if kind is Activation.TANH else np.maximum(v, _LD(0))


def reference_loss(kind, activation, tensors, target, token_ids=None, pad_id=0):
    """Cross-entropy of the head on ``h_T`` evaluated in long double.

    Written directly from the cell equations so that it shares no code with
    the forward and backward passes it certifies.
    """
    t = {k: np.asarray(v, dtype=_LD) for k, v in tensors.items()}
    if token_ids is None:
        xs = t["x"]
    else:
        xs = t["embedding"][np.asarray(token_ids)]
        xs[np.asarray(token_ids) == pad_id] = 0
    n = t["head.W_out"].shape[1]
    h = np.zeros(n, dtype=_LD)
    c = np.zeros(n, dtype=_LD)

    def lin(sig, x, h_prev):
        total = np.zeros(n, dtype=_LD)
        if f"cell.W{sig}" in t:
            total = total + t[f"cell.W{sig}"] @ x
        if f"cell.U{sig}" in t:
            total = total + t[f"cell.U{sig}"] @ h_prev
        if f"cell.b{sig}" in t:
            total = total + t[f"cell.b{sig}"]
        return total

    for x in xs:
        if kind is CellKind.RNN:
            h = _ld_g(activation, lin("", x, h))
        elif kind is CellKind.LSTM:
            i = _ld_sigmoid(lin("_i", x, h))
            f = _ld_sigmoid(lin("_f", x, h))
            o = _ld_sigmoid(lin("_o", x, h))
            c = f * c + i * _ld_g(activation, lin("_c", x, h))
            h = o * _ld_g(activation, c)
        else:
            z = _ld_sigmoid(lin("_z", x, h))
            r = _ld_sigmoid(lin("_r", x, h))
            cand = _ld_g(activation, t["cell.W_h"] @ x + t["cell.U_h"] @ (r * h) + t["cell.b_h"])
            h = (1 - z) * h + z * cand
    logits = t["head.W_out"] @ h + t["head.b_out"]
    top = logits.max()
    return top + np.log(np.sum(np.exp(logits - top))) - logits[int(target)]


def _activation_arguments(caches):
    """Every value fed to the cell nonlinearity g."""
    for c in caches:
        if isinstance(c, LstmCache):
            yield c.cand_pre
            yield c.c
        elif hasattr(c, "cand_pre"):
            yield c.cand_pre
        else:
            yield c.pre


def _sample_problem(kind, variant, dims, T, activation, rng, classes, vocab):
    tensors = {}
    for name, shape in tensor_shapes(kind, dims, variant).items():
        tensors[f"cell.{name}"] = rng.normal(0.0, 0.6, size=shape)
    tensors["head.W_out"] = rng.normal(0.0, 0.8, size=(classes, dims.n))
    tensors["head.b_out"] = rng.normal(0.0, 0.3, size=classes)
    token_ids = None
    if vocab:
        tensors["embedding"] = rng.normal(0.0, 0.8, size=(vocab, dims.m))
        token_ids = rng.integers(0, vocab, size=T)
    else:
        tensors["x"] = rng.normal(0.0, 1.0, size=(T, dims.m))
    target = np.array([rng.integers(classes)])
    return _Problem(kind, variant, dims, activation, tensors, target, token_ids)


def check_cell_gradients(cell_kind, variant=None, dims=CellDims(4, 3), T=5, seed=0, tol=DEFAULT_TOL,
                         activation=Activation.TANH, eps=DEFAULT_EPS, classes=3, vocab=None,
                         corrupt=None, max_resamples=1000):
    """Certify ``sequence_backward`` plus head (and embedding) gradients on a random instance.

    The loss is the cross-entropy of a random softmax head on ``h_T``. For ReLU
    cells, instances with any activation argument within ``1e-4`` of the kink
    are redrawn. ``corrupt`` names a tensor whose analytic gradient is
    deliberately perturbed, to show the check can fail.
    """
    kind = CellKind(cell_kind)
    variant = GateVariant(variant or GateVariant.FULL) if kind is CellKind.GRU else None
    activation = Activation(activation)
    rng = np.random.default_rng(seed)
    for _ in range(max_resamples):
        problem = _sample_problem(kind, variant, dims, T, activation, rng, classes, vocab)
        analytic, caches = problem.analytic()
        if activation is not Activation.RELU:
            break
        if all(np.all(np.abs(a) > RELU_MARGIN) for a in _activation_arguments(caches)):
            break
    else:
        raise RuntimeError("could not draw a ReLU instance away from the activation kink")

    if corrupt is not None and corrupt in analytic:
        analytic[corrupt] = analytic[corrupt].copy()
        analytic[corrupt].flat[0] += 1e-3 + 1e-2 * abs(analytic[corrupt].flat[0])
    numeric = finite_difference_gradient(problem.loss, problem.tensors, eps)
    label = kind.value if variant is None else f"{kind.value}/{variant.value}"
    return compare(analytic, numeric, tol, f"{label} {activation.value} n={dims.n} m={dims.m} T={T} seed={seed}")
