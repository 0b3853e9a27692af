import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from optimizers import (Adam, AdamState, OptimizerError, RMSProp, RmsPropState, adam_step, build_optimizer,
                        clip_weights, rmsprop_step)
from tensor_engine import Tensor


def params(*values, dtype=np.float64):
    return {f"p{i}": Tensor(np.array(v, dtype=dtype), requires_grad=True) for i, v in enumerate(values)}


def reference_adam(theta, grads, lr=1e-4, beta1=0.5, beta2=0.9, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        theta -= lr * (m / (1 - beta1 ** t)) / (np.sqrt(v / (1 - beta2 ** t)) + eps)
    return theta


class TestAdam:
    """Bias-corrected Adam."""

    def test_zero_gradient_leaves_parameters(self):
        p = params([1.0, -2.0])
        state = adam_step(p, {"p0": np.zeros(2)}, AdamState())
        assert_array_equal(p["p0"].data, [1.0, -2.0])
        assert state.step == 1

    def test_first_step_moves_by_the_learning_rate(self):
        p = params([1.0, 1.0])
        adam_step(p, {"p0": np.array([0.3, -7.0])}, AdamState())
        assert_allclose(1.0 - p["p0"].data, [1e-4, -1e-4], rtol=1e-6)

    def test_matches_scalar_reference(self):
        grads = [0.3, -0.1, 0.7, 0.05]
        p = params([0.25])
        state = AdamState()
        for g in grads:
            adam_step(p, {"p0": np.array([g])}, state)
        assert_allclose(p["p0"].data, [reference_adam(0.25, grads)], rtol=1e-12)

    def test_groups_with_identical_gradients_update_identically(self):
        p = params([1.0, 2.0], [1.0, 2.0])
        g = np.array([0.5, -0.25])
        adam_step(p, {"p0": g, "p1": g}, AdamState())
        assert_array_equal(p["p0"].data, p["p1"].data)

    def test_non_finite_gradient_changes_nothing(self):
        p = params([1.0, 2.0], [3.0])
        state = AdamState()
        with pytest.raises(OptimizerError):
            adam_step(p, {"p0": np.array([0.1, 0.2]), "p1": np.array([np.nan])}, state)
        assert_array_equal(p["p0"].data, [1.0, 2.0])
        assert state.step == 0 and not state.m

    def test_shape_mismatch(self):
        with pytest.raises(OptimizerError):
            adam_step(params([1.0, 2.0]), {"p0": np.zeros(3)}, AdamState())


class TestRmsProp:
    """RMSProp on the running mean of squared gradients."""

    def test_first_step(self):
        p = params([1.0])
        state = rmsprop_step(p, {"p0": np.array([0.5])}, RmsPropState())
        assert_allclose(state.accumulators["p0"], [0.025])
        assert_allclose(p["p0"].data, [1.0 - 1e-4 * 0.5 / (np.sqrt(0.025) + 1e-8)])

    def test_accumulator_approaches_squared_gradient(self):
        p = params([0.0])
        state = RmsPropState()
        for _ in range(200):
            rmsprop_step(p, {"p0": np.array([2.0])}, state)
        assert_allclose(state.accumulators["p0"], [4.0], rtol=1e-6)

    def test_missing_gradient_counts_as_zero(self):
        p = params([1.0])
        rmsprop_step(p, {}, RmsPropState())
        assert_array_equal(p["p0"].data, [1.0])


class TestClipping:
    """Hard clamping of every parameter value."""

    def test_examples(self):
        p = params([0.02, -0.02, 0.005], [-0.5])
        clip_weights(p, 0.01)
        assert_allclose(p["p0"].data, [0.01, -0.01, 0.005])
        assert_allclose(p["p1"].data, [-0.01])

    def test_bound_must_be_positive(self):
        with pytest.raises(OptimizerError):
            clip_weights(params([1.0]), 0.0)


class TestOptimizerState:
    """State round trips and construction."""

    @pytest.mark.parametrize("kind", ["adam", "rmsprop"])
    def test_state_dict_round_trip_continues_identically(self, kind):
        rng = np.random.default_rng(0)
        grads = [rng.standard_normal(3) for _ in range(13)]
        first = build_optimizer(kind, params([0.1, 0.2, 0.3]))
        for g in grads[:3]:
            first.params["p0"].grad = g
            first.step()
        second = build_optimizer(kind, params(list(first.params["p0"].data)))
        second.load_state_dict(first.state_dict())
        for g in grads[3:]:
            for optimizer in (first, second):
                optimizer.params["p0"].grad = g
                optimizer.step()
        assert first.params["p0"].data.tobytes() == second.params["p0"].data.tobytes()
        assert second.state.step == 13

    def test_state_kind_must_match(self):
        adam = Adam(params([1.0]))
        with pytest.raises(OptimizerError):
            RMSProp(params([1.0])).load_state_dict(adam.state_dict())

    def test_state_for_unknown_parameter(self):
        adam = Adam(params([1.0]))
        adam.params["p0"].grad = np.array([1.0])
        adam.step()
        state = adam.state_dict()
        state["arrays"]["m/other"] = np.zeros(1)
        with pytest.raises(OptimizerError):
            Adam(params([1.0])).load_state_dict(state)

    def test_build_optimizer(self):
        assert isinstance(build_optimizer("ADAM", params([1.0])), Adam)
        rms = build_optimizer("rmsprop", params([1.0]), learning_rate=5e-5, decay=0.95)
        assert rms.state.learning_rate == 5e-5 and rms.state.decay == 0.95
        with pytest.raises(OptimizerError):
            build_optimizer("sgd", params([1.0]))

    def test_zero_grad(self):
        adam = Adam(params([1.0]))
        adam.params["p0"].grad = np.array([1.0])
        adam.zero_grad()
        assert adam.params["p0"].grad is None
