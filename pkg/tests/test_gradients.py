"""Finite-difference checks of every differentiable op in float64."""
import numpy as np
import pytest

from bevscan.tensor import Tensor, ops
from bevscan.tensor.gradcheck import check_gradients, numerical_grad

from gradient_cases import CASES, N_INSTANCES, TOLERANCE, run_case


@pytest.mark.parametrize("name", sorted(CASES))
def test_matches_central_difference(name):
    assert run_case(name, N_INSTANCES) <= TOLERANCE


def test_checker_flags_a_detached_op():
    x = Tensor(np.array([0.3, -1.2, 2.0]), requires_grad=True)
    # the square is computed outside the graph, so its analytic gradient is lost
    err = check_gradients(lambda: ops.add(Tensor(x.data ** 2), ops.mul(x, 0.0)), [x])
    assert err > 0.5


def test_checker_flags_a_wrong_constant():
    x = Tensor(np.array([0.5, 1.5]), requires_grad=True)
    # scaling by a value that changes between calls breaks consistency
    calls = iter(range(10 ** 6))
    err = check_gradients(lambda: ops.mul(x, 1.0 + 0.1 * (next(calls) > 0)), [x])
    assert err > 1e-3


def test_numerical_grad_of_quadratic_is_exact_to_rounding():
    x = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
    w = np.random.default_rng(0).normal(size=3)
    g = numerical_grad(lambda: ops.square(x), x, seed=0)
    np.testing.assert_allclose(g, 2 * x.data * w, rtol=1e-8)


def test_numerical_grad_restores_inputs():
    x = Tensor(np.linspace(-1, 1, 6), requires_grad=True)
    before = x.data.copy()
    numerical_grad(lambda: ops.tanh(x), x)
    np.testing.assert_array_equal(x.data, before)


def test_coordinate_subset_is_checked_only_where_sampled():
    x = Tensor(np.random.default_rng(3).normal(size=50), requires_grad=True)
    assert check_gradients(lambda: ops.sigmoid(x), [x], max_coords=5) <= TOLERANCE


def test_every_listed_module_has_cases():
    from gradient_cases import MODULE_OF
    assert {"tensor-core", "ebc-scan", "net-blocks", "training"} <= set(MODULE_OF.values())
