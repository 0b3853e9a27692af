import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy.special import expit

from binary_neurons import (BinaryOutputLayer, PreactivationRecord, anneal_slope, dbn_forward, preactivate,
                            sbn_forward, ste_backward)
from tensor_engine import DomainError, ShapeError, Tape, Tensor, backward


def ste_gradient(forward, x: np.ndarray, *args) -> np.ndarray:
    leaf = Tensor(x, requires_grad=True)
    with Tape() as tape:
        out, _ = forward(leaf, *args)
        backward(tape, out.sum())
    return leaf.grad


class TestDeterministicNeurons:
    """Thresholding at p >= 0.5 and the straight-through gradient."""

    def test_examples(self):
        out, record = dbn_forward(Tensor(np.array([3.0, -3.0, 0.0])), 1.0)
        assert_array_equal(out.data, [1.0, 0.0, 1.0])
        assert_allclose(record.values, expit([3.0, -3.0, 0.0]))

    def test_outputs_are_exactly_binary(self):
        x = np.random.default_rng(0).normal(0, 4, (64, 784)).astype(np.float32)
        out, _ = dbn_forward(Tensor(x), 1.0)
        assert np.all((out.data == 0.0) | (out.data == 1.0))

    def test_repeated_calls_agree(self):
        x = Tensor(np.random.default_rng(1).standard_normal((8, 10)))
        assert_array_equal(dbn_forward(x, 1.3)[0].data, dbn_forward(x, 1.3)[0].data)

    def test_gradient_at_zero(self):
        assert_allclose(ste_gradient(dbn_forward, np.array([0.0]), 1.0), [0.25])
        assert_allclose(ste_gradient(dbn_forward, np.array([0.0]), 1.21), [0.3025])

    def test_gradient_vanishes_when_saturated(self):
        assert ste_gradient(dbn_forward, np.array([20.0]), 1.0)[0] < 1e-6

    def test_gradient_matches_sigmoid_derivative(self):
        rng = np.random.default_rng(5)
        x = rng.normal(0, 3, 1000)
        slope = 1.1 ** 4
        p = expit(slope * x)
        assert np.max(np.abs(ste_gradient(dbn_forward, x, slope) - slope * p * (1 - p))) < 1e-6

    def test_gradient_matches_finite_differences_of_preactivation(self):
        rng = np.random.default_rng(6)
        x = rng.normal(0, 2, 50)
        slope, h = 1.7, 1e-6
        numeric = (expit(slope * (x + h)) - expit(slope * (x - h))) / (2 * h)
        assert_allclose(ste_gradient(dbn_forward, x, slope), numeric, atol=1e-5)

    def test_non_finite_input(self):
        with pytest.raises(DomainError):
            preactivate(np.array([np.nan, 1.0]), 1.0)


class TestStochasticNeurons:
    """Bernoulli firing at rate p, with the same gradient as the deterministic neuron."""

    @pytest.mark.parametrize("x", [-2.0, -1.0, 0.0, 1.0, 2.0])
    def test_firing_rate(self, x):
        draws = 100_000
        rng = np.random.default_rng(11)
        out, _ = sbn_forward(Tensor(np.full(draws, x)), 1.0, rng)
        p = expit(x)
        assert abs(out.data.mean() - p) <= 3 * np.sqrt(p * (1 - p) / draws)

    def test_saturated_neurons_always_fire(self):
        out, _ = sbn_forward(Tensor(np.full(10_000, 20.0)), 1.0, np.random.default_rng(0))
        assert np.all(out.data == 1.0)

    def test_half_thresholds_reproduce_deterministic_neurons(self):
        x = Tensor(np.linspace(-4, 4, 81))
        stochastic, _ = sbn_forward(x, 1.0, None, thresholds=np.full(81, 0.5))
        deterministic, _ = dbn_forward(x, 1.0)
        assert_array_equal(stochastic.data, deterministic.data)

    def test_gradient_is_the_deterministic_one(self):
        x = np.random.default_rng(2).standard_normal(20)
        rng = np.random.default_rng(3)
        assert_allclose(ste_gradient(sbn_forward, x, 1.21, rng), ste_gradient(dbn_forward, x, 1.21))

    def test_draws_differ_between_calls(self):
        rng = np.random.default_rng(4)
        x = Tensor(np.zeros((16, 784)))
        first, first_record = sbn_forward(x, 1.0, rng)
        second, second_record = sbn_forward(x, 1.0, rng)
        assert not np.array_equal(first.data, second.data)
        assert_array_equal(first_record.values, second_record.values)


class TestStraightThrough:
    """The estimator as a standalone function."""

    def test_scales_upstream(self):
        record = PreactivationRecord(values=np.array([0.5, 0.9]), slope=2.0)
        assert_allclose(ste_backward(np.array([1.0, -2.0]), record), [0.5, -2.0 * 2.0 * 0.09])

    def test_slope_override(self):
        record = PreactivationRecord(values=np.array([0.5]), slope=2.0)
        assert_allclose(ste_backward(np.array([1.0]), record, slope=1.0), [0.25])

    def test_shape_mismatch(self):
        record = PreactivationRecord(values=np.array([0.5, 0.5]), slope=1.0)
        with pytest.raises(ShapeError):
            ste_backward(np.ones(3), record)

    def test_record_values_must_be_inside_unit_interval(self):
        with pytest.raises(ValueError):
            PreactivationRecord(values=np.array([0.0, 0.5]), slope=1.0)


class TestOutputLayer:
    """Modes, slope annealing and preactivation records."""

    def test_annealing_multiplies_by_the_factor(self):
        layer = BinaryOutputLayer("deterministic")
        anneal_slope(layer)
        assert layer.slope == pytest.approx(1.1)
        for _ in range(4):
            anneal_slope(layer)
        assert layer.slope == 1.0 * 1.1 ** 5

    def test_disabled_and_real_valued_slopes_stay(self):
        fixed = anneal_slope(BinaryOutputLayer("deterministic"), enabled=False)
        real = anneal_slope(BinaryOutputLayer("real_valued"))
        assert fixed.slope == 1.0 and real.slope == 1.0

    def test_real_valued_outputs_lie_inside_unit_interval(self):
        layer = BinaryOutputLayer("real_valued")
        out = layer(Tensor(np.random.default_rng(0).normal(0, 5, (4, 784)))).data
        assert np.all((out > 0) & (out < 1))
        assert_array_equal(layer.last_record.values, out)

    def test_stochastic_layer_needs_a_stream(self):
        with pytest.raises(ValueError):
            BinaryOutputLayer("stochastic")

    def test_forward_records_preactivations_at_current_slope(self):
        layer = BinaryOutputLayer("deterministic")
        anneal_slope(layer)
        layer(Tensor(np.array([[0.5, -0.5]])))
        assert layer.last_record.slope == pytest.approx(1.1)
        assert_allclose(layer.last_record.values, expit(1.1 * np.array([[0.5, -0.5]])), rtol=1e-6)
