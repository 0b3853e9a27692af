"""
Adversarial objectives: the non-saturating GAN, the weight-clipped WGAN and
the gradient-penalized WGAN, as paired generator/discriminator losses.
"""
from typing import Callable, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, root_validator, validator

from binarygan_logger import logger
from tensor_engine import Tape, Tensor, current_tape, grad_of_grad, l2_norm

OBJECTIVE_KINDS = ("GAN", "WGAN", "WGAN_GP")

ArrayLike = Union[Tensor, np.ndarray]


class ObjectiveError(ValueError):
    """Invalid objective configuration or loss inputs."""


class AdversarialObjective(BaseModel):
    """
    Attributes:
        kind : GAN, WGAN or WGAN_GP.
        clip_bound : Weight clipping bound c (WGAN only).
        gp_lambda : Gradient-penalty coefficient (WGAN_GP only); 1.0 gives the unscaled penalty.
        n_critic : Discriminator updates per generator update; 1 for GAN, 5 otherwise by default.
    """
    kind: str = Field("WGAN_GP", description="Objective kind: GAN, WGAN or WGAN_GP")
    clip_bound: float = Field(0.01, gt=0, description="Critic weight clipping bound for WGAN")
    gp_lambda: float = Field(10.0, ge=0, description="Gradient-penalty coefficient for WGAN_GP")
    n_critic: Optional[int] = Field(None, ge=1, description="Discriminator steps per generator step")

    @validator("kind", pre=True)
    def _known_kind(cls, kind):
        kind = str(kind).upper().replace("-", "_")
        if kind not in OBJECTIVE_KINDS:
            raise ValueError(f"unknown objective '{kind}'; expected one of {', '.join(OBJECTIVE_KINDS)}")
        return kind

    @root_validator(skip_on_failure=True)
    def _default_n_critic(cls, values):
        if values.get("n_critic") is None:
            values["n_critic"] = 1 if values["kind"] == "GAN" else 5
        return values

    @property
    def head(self) -> str:
        """Discriminator head the objective needs."""
        return "sigmoid" if self.kind == "GAN" else "linear"

    def check_head(self, head: str) -> None:
        if head != self.head:
            logger.error(f"{self.kind} needs a {self.head} discriminator head, got {head}")
            raise ObjectiveError(f"{self.kind} needs a {self.head} discriminator head, got {head}")

    def discriminator_loss(self, d_real: Tensor, d_fake: Tensor, penalty: Optional[Tensor] = None) -> Tensor:
        if self.kind == "GAN":
            return gan_losses(d_real, d_fake)[1]
        if self.kind == "WGAN":
            return wgan_losses(d_real, d_fake)[1]
        if penalty is None:
            raise ObjectiveError("WGAN_GP discriminator loss needs the gradient penalty of the same step")
        return wgan_gp_losses(d_real, d_fake, penalty)[1]

    def generator_loss(self, d_fake: Tensor) -> Tensor:
        return generator_loss(self.kind, d_fake)


def _check_probabilities(name: str, d: Tensor) -> None:
    if not (np.all(d.data > 0) and np.all(d.data < 1)):
        logger.error(f"GAN loss: {name} has values outside (0, 1)")
        raise ObjectiveError(f"GAN loss: {name} has values outside (0, 1); the GAN objective needs a sigmoid head")


def generator_loss(kind: str, d_fake: Tensor) -> Tensor:
    if kind == "GAN":
        _check_probabilities("d_fake", d_fake)
        return -d_fake.log().mean()
    return -d_fake.mean()


def gan_losses(d_real: Tensor, d_fake: Tensor) -> Tuple[Tensor, Tensor]:
    """
    Non-saturating GAN losses.

    Returns:
        (g_loss, d_loss) with g_loss = -mean(log d_fake) and
        d_loss = -mean(log d_real) - mean(log(1 - d_fake)).
    """
    _check_probabilities("d_real", d_real)
    _check_probabilities("d_fake", d_fake)
    g_loss = -d_fake.log().mean()
    d_loss = -d_real.log().mean() - (1.0 - d_fake).log().mean()
    return g_loss, d_loss


def wgan_losses(d_real: Tensor, d_fake: Tensor) -> Tuple[Tensor, Tensor]:
    """(g_loss, d_loss) = (-mean(d_fake), mean(d_fake) - mean(d_real))."""
    return -d_fake.mean(), d_fake.mean() - d_real.mean()


def wgan_gp_losses(d_real: Tensor, d_fake: Tensor, penalty: Tensor) -> Tuple[Tensor, Tensor]:
    """
    WGAN losses with the penalty added to the critic's side. The generator
    loss drops the real-sample term, which is constant in the generator.
    """
    g_loss, d_loss = wgan_losses(d_real, d_fake)
    return g_loss, d_loss + penalty


def wasserstein_estimate(d_real: Tensor, d_fake: Tensor) -> float:
    return float(np.mean(d_real.data) - np.mean(d_fake.data))


def sample_interpolates(real: ArrayLike, fake: ArrayLike, rng: Optional[np.random.Generator],
                        epsilon: Optional[np.ndarray] = None) -> Tensor:
    """
    Points on straight lines between paired real and fake samples.

    One epsilon ~ U[0, 1) per sample, shared by all of its pixels.

    Args:
        real : Real batch.
        fake : Generated batch of the same shape.
        rng : Stream for the epsilons.
        epsilon : Per-sample epsilons replacing the draw.

    Returns:
        A leaf tensor flagged requires_grad, ready to be differentiated against.
    """
    real = real.data if isinstance(real, Tensor) else np.asarray(real)
    fake = fake.data if isinstance(fake, Tensor) else np.asarray(fake)
    if real.shape != fake.shape:
        raise ObjectiveError(f"interpolates need batches of the same shape, got {real.shape} and {fake.shape}")
    shape = (real.shape[0],) + (1,) * (real.ndim - 1)
    if epsilon is None:
        epsilon = rng.random(real.shape[0])
    epsilon = np.asarray(epsilon, dtype=real.dtype).reshape(shape)
    return Tensor(epsilon * real + (1 - epsilon) * fake, requires_grad=True)


def gradient_penalty(critic: Callable[[Tensor], Tensor], x_hat: Tensor, gp_lambda: float,
                     tape: Optional[Tape] = None) -> Tensor:
    """
    gp_lambda * mean((||grad_x D(x_hat)||_2 - 1)^2), per-sample norms over all pixels.

    The critic runs on the active tape and the gradient is taken with a
    recorded backward pass, so the result backpropagates into the critic's parameters.
    Without an active tape the penalty is evaluated on a scratch tape and
    returned as a plain value.
    """
    tape = tape or current_tape()
    if tape is None:
        with Tape() as scratch:
            return gradient_penalty(critic, x_hat, gp_lambda, scratch).detach()
    scores = critic(x_hat)
    grad = grad_of_grad(tape, scores.sum(), x_hat)
    norms = l2_norm(grad)
    return ((norms - 1.0) ** 2).mean() * gp_lambda
