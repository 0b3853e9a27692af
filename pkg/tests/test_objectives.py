import math

import numpy as np
import pytest
from numpy.testing import assert_allclose
from pydantic import ValidationError
from scipy import stats

from objectives import (AdversarialObjective, ObjectiveError, gan_losses, generator_loss, gradient_penalty,
                        sample_interpolates, wasserstein_estimate, wgan_gp_losses, wgan_losses)
from tensor_engine import Tape, Tensor, backward, gradient_check


def scores(*values) -> Tensor:
    return Tensor(np.array(values, dtype=np.float64).reshape(-1, 1))


class TestAdversarialObjective:
    """Per-objective defaults and head checks."""

    def test_critic_steps_default_per_kind(self):
        assert AdversarialObjective(kind="GAN").n_critic == 1
        assert AdversarialObjective(kind="WGAN").n_critic == 5
        assert AdversarialObjective(kind="wgan-gp").n_critic == 5
        assert AdversarialObjective(kind="WGAN", n_critic=3).n_critic == 3

    def test_defaults(self):
        objective = AdversarialObjective()
        assert objective.kind == "WGAN_GP"
        assert objective.gp_lambda == 10.0
        assert objective.clip_bound == 0.01

    def test_unknown_kind(self):
        with pytest.raises(ValidationError):
            AdversarialObjective(kind="LSGAN")

    def test_head_check(self):
        AdversarialObjective(kind="GAN").check_head("sigmoid")
        with pytest.raises(ObjectiveError):
            AdversarialObjective(kind="WGAN").check_head("sigmoid")

    def test_penalty_is_required_for_wgan_gp(self):
        with pytest.raises(ObjectiveError):
            AdversarialObjective(kind="WGAN_GP").discriminator_loss(scores(1.0), scores(0.0))


class TestGanLosses:
    """Non-saturating GAN losses."""

    def test_balanced_discriminator(self):
        g_loss, d_loss = gan_losses(scores(0.5), scores(0.5))
        assert g_loss.item() == pytest.approx(math.log(2))
        assert d_loss.item() == pytest.approx(2 * math.log(2))

    def test_fooled_discriminator_gives_small_generator_loss(self):
        g_loss, _ = gan_losses(scores(0.5), scores(1.0 - 1e-7))
        assert 0 < g_loss.item() < 1e-6

    def test_values_outside_open_interval(self):
        with pytest.raises(ObjectiveError):
            gan_losses(scores(1.0), scores(0.5))
        with pytest.raises(ObjectiveError):
            generator_loss("GAN", scores(0.0))

    def test_generator_gradient_does_not_saturate(self):
        d_fake = Tensor(np.array([[0.3]]), requires_grad=True)
        with Tape() as tape:
            backward(tape, generator_loss("GAN", d_fake))
        assert_allclose(d_fake.grad, [[-1 / 0.3]])


class TestWassersteinLosses:
    """Critic and generator losses of the Wasserstein objectives."""

    def test_examples(self):
        g_loss, d_loss = wgan_losses(scores(2.0), scores(-1.0))
        assert g_loss.item() == 1.0
        assert d_loss.item() == -3.0
        g_loss, d_loss = wgan_losses(scores(0.0), scores(0.0))
        assert g_loss.item() == 0.0 and d_loss.item() == 0.0

    def test_zero_penalty_reduces_to_wgan(self):
        real, fake = scores(1.5, 0.5), scores(-0.5, 0.25)
        _, plain = wgan_losses(real, fake)
        _, penalized = wgan_gp_losses(real, fake, Tensor(np.float64(0.0)))
        assert penalized.item() == plain.item()

    def test_wasserstein_estimate(self):
        assert wasserstein_estimate(scores(2.0, 4.0), scores(1.0, -1.0)) == pytest.approx(3.0)


class TestInterpolates:
    """Random points between real and fake samples."""

    def test_endpoints(self):
        real, fake = np.ones((2, 4)), np.zeros((2, 4))
        assert_allclose(sample_interpolates(real, fake, None, epsilon=np.ones(2)).data, real)
        assert_allclose(sample_interpolates(real, fake, None, epsilon=np.zeros(2)).data, fake)

    def test_one_uniform_epsilon_per_sample(self):
        x_hat = sample_interpolates(np.ones((10_000, 4)), np.zeros((10_000, 4)), np.random.default_rng(0))
        assert x_hat.requires_grad
        assert_allclose(x_hat.data, np.repeat(x_hat.data[:, :1], 4, axis=1))
        assert stats.kstest(x_hat.data[:, 0], "uniform").pvalue > 0.01

    def test_shape_mismatch(self):
        with pytest.raises(ObjectiveError):
            sample_interpolates(np.ones((2, 4)), np.ones((3, 4)), np.random.default_rng(0))


def linear_critic(weight: np.ndarray):
    w = Tensor(weight.reshape(-1, 1))
    return lambda x: x @ w


class TestGradientPenalty:
    """Penalty values on critics with known input gradients, and its parameter gradient."""

    @pytest.fixture
    def x_hat(self):
        return Tensor(np.random.default_rng(1).standard_normal((8, 6)), requires_grad=True)

    def test_unit_norm_critic_has_no_penalty(self, x_hat):
        weight = np.random.default_rng(2).standard_normal(6)
        with Tape() as tape:
            penalty = gradient_penalty(linear_critic(weight / np.linalg.norm(weight)), x_hat, 10.0, tape)
        assert abs(penalty.item()) < 1e-6

    def test_doubled_critic_pays_lambda(self, x_hat):
        weight = np.random.default_rng(2).standard_normal(6)
        with Tape() as tape:
            penalty = gradient_penalty(linear_critic(2 * weight / np.linalg.norm(weight)), x_hat, 10.0, tape)
        assert penalty.item() == pytest.approx(10.0)

    def test_constant_critic_pays_lambda(self, x_hat):
        with Tape() as tape:
            penalty = gradient_penalty(lambda x: Tensor(np.ones((x.shape[0], 1))), x_hat, 10.0, tape)
        assert penalty.item() == pytest.approx(10.0)

    def test_value_without_an_active_tape(self, x_hat):
        weight = np.random.default_rng(2).standard_normal(6)
        penalty = gradient_penalty(linear_critic(2 * weight / np.linalg.norm(weight)), x_hat, 1.0)
        assert penalty.item() == pytest.approx(1.0)
        assert penalty.node is None

    def test_parameter_gradient_matches_finite_differences(self, x_hat):
        rng = np.random.default_rng(3)

        def penalty(w1, b1, w2):
            critic = lambda x: ((x @ w1 + b1).leaky_relu(0.2)) @ w2
            return gradient_penalty(critic, x_hat, 10.0)

        error = gradient_check(penalty, rng.standard_normal((6, 5)), rng.standard_normal(5),
                               rng.standard_normal((5, 1)))
        assert error < 1e-3
