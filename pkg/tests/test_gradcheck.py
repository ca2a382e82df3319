import numpy as np
import pytest

from gruvariants.cells import CellDims, CellKind, GateVariant
from gruvariants.gradcheck import (
    NonFiniteLossError,
    check_cell_gradients,
    finite_difference_gradient,
    relative_error,
)

ALL_CELLS = [(CellKind.RNN, None), (CellKind.LSTM, None)] + [(CellKind.GRU, v) for v in GateVariant]


def test_quadratic_is_exact():
    theta = {"t": np.array([3.0])}
    g = finite_difference_gradient(lambda: float(theta["t"][0] ** 2), theta, 1e-5)
    assert abs(g["t"][0] - 6.0) <= 1e-9


def test_constant_and_linear_losses(rng):
    theta = {"a": rng.normal(size=(2, 3)), "b": rng.normal(size=4)}
    g = finite_difference_gradient(lambda: 1.25, theta)
    assert all(np.all(v == 0.0) for v in g.values())
    g = finite_difference_gradient(lambda: float(theta["a"].sum() + theta["b"].sum()), theta)
    for v in g.values():
        np.testing.assert_allclose(v, 1.0, rtol=0, atol=1e-9)


def test_parameters_restored_bitwise(rng):
    theta = {"a": rng.normal(size=5)}
    before = theta["a"].copy()
    finite_difference_gradient(lambda: float(np.sin(theta["a"]).sum()), theta)
    np.testing.assert_array_equal(theta["a"], before)


def test_non_finite_loss_names_index():
    theta = {"w": np.array([0.0, 1.0])}
    with pytest.raises(NonFiniteLossError) as err:
        finite_difference_gradient(lambda: float("inf") if theta["w"][1] > 1.0 else 0.0, theta)
    assert err.value.name == "w" and err.value.index == (1,)


def test_relative_error_floor():
    assert relative_error(1e-12, 0.0) == pytest.approx(1e-4)
    assert relative_error(2.0, 1.0) == 0.5


def test_gru_full_tanh_passes():
    report = check_cell_gradients("gru", GateVariant.FULL, CellDims(4, 3), T=5, seed=0, activation="tanh")
    assert report.passed, report.tensors
    assert {"cell.W_z", "cell.U_r", "head.W_out", "x"} <= set(report.tensors)


def test_bias_only_report_lists_only_biases_among_gate_tensors():
    report = check_cell_gradients("gru", GateVariant.BIAS_ONLY, CellDims(4, 3), T=5, seed=0)
    gate = {k for k in report.tensors if k.startswith("cell.") and k[-2:] in ("_z", "_r")}
    assert gate == {"cell.b_z", "cell.b_r"}


def test_corrupted_gradient_fails():
    report = check_cell_gradients("gru", GateVariant.FULL, CellDims(4, 3), T=5, seed=0, corrupt="cell.U_z")
    assert not report.passed
    assert report.failures() == ["cell.U_z"]


@pytest.mark.parametrize("kind,variant", ALL_CELLS)
@pytest.mark.parametrize("activation", ["tanh", "relu"])
def test_all_cells_pass_with_embedding_inputs(kind, variant, activation):
    report = check_cell_gradients(kind, variant, CellDims(5, 4), T=6, seed=11, activation=activation, vocab=5)
    assert report.passed, report.tensors
    assert "embedding" in report.tensors


@pytest.mark.parametrize("kind,variant", ALL_CELLS)
@pytest.mark.parametrize("activation", ["tanh", "relu"])
def test_all_cells_pass_across_seeds(kind, variant, activation):
    for seed in range(20):
        r = np.random.default_rng(seed)
        dims = CellDims(int(r.integers(1, 9)), int(r.integers(1, 6)))
        report = check_cell_gradients(kind, variant, dims, int(r.integers(1, 7)), seed, activation=activation)
        assert report.passed, (report.label, report.failures())
