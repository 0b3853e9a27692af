import numpy as np
import pytest
from numpy.testing import assert_array_equal
from pydantic import ValidationError

from binary_neurons import BinaryOutputLayer
from layers import DenseLayer, Layer, LayerError, Sequential
from model_zoo import Generator, ModelSpec, build_network, count_parameters, parameter_table, sample_latent
from tensor_engine import ShapeError, Tape, Tensor, backward


def generator_spec(family="MLP", mode="deterministic", **kwargs) -> ModelSpec:
    return ModelSpec(family=family, side="generator", output_mode=mode, **kwargs)


def discriminator_spec(family="MLP", objective="WGAN_GP", **kwargs) -> ModelSpec:
    return ModelSpec(family=family, side="discriminator", objective=objective, **kwargs)


def latent(count, seed=0):
    return Tensor(sample_latent(count, 128, np.random.default_rng(seed)))


def to_float64(network: Layer) -> Layer:
    for tensor in network.named_parameters().values():
        tensor.data = tensor.data.astype(np.float64)
    return network


def sampled_gradient_errors(network: Layer, inputs: np.ndarray, entries: int = 3, h: float = 1e-5):
    """Relative errors between taped and central-difference gradients at a few entries of every parameter."""
    weights = np.random.default_rng(9).standard_normal(network(Tensor(inputs)).shape)

    def loss() -> float:
        return float(np.sum(network(Tensor(inputs)).data * weights))

    network.zero_grad()
    with Tape() as tape:
        backward(tape, (network(Tensor(inputs)) * weights).sum())
    rng = np.random.default_rng(10)
    errors = {}
    for name, tensor in network.named_parameters().items():
        assert tensor.grad is not None and np.all(np.isfinite(tensor.grad)), name
        flat = tensor.data.reshape(-1)
        for index in rng.choice(flat.size, size=min(entries, flat.size), replace=False):
            original = flat[index]
            flat[index] = original + h
            plus = loss()
            flat[index] = original - h
            minus = loss()
            flat[index] = original
            numeric = (plus - minus) / (2 * h)
            analytic = tensor.grad.reshape(-1)[index]
            errors[f"{name}[{index}]"] = abs(analytic - numeric) / max(abs(analytic) + abs(numeric), 1e-3)
    return errors


class TestShapes:
    """Output shapes of every builder."""

    def test_mlp_generator(self):
        generator = build_network(generator_spec(), np.random.default_rng(0))
        assert generator(latent(64)).shape == (64, 784)

    def test_cnn_generator_chain(self):
        generator = build_network(generator_spec("CNN"), np.random.default_rng(0))
        x = latent(2)
        sides = []
        for name, layer in generator.body.layers:
            x = layer(x)
            sides.append(x.shape[-1])
        assert sides == [1, 2, 6, 13, 28]
        assert generator(latent(2)).shape == (2, 1, 28, 28)

    def test_cnn_discriminator_flattens_to_3136(self):
        discriminator = build_network(discriminator_spec("CNN"), np.random.default_rng(0))
        x = Tensor(np.zeros((2, 1, 28, 28), dtype=np.float32))
        for name, layer in discriminator.body.layers:
            x = layer(x)
            if name == "flatten":
                assert x.shape == (2, 3136)
        assert x.shape == (2, 1)

    def test_mlp_discriminator(self):
        discriminator = build_network(discriminator_spec(), np.random.default_rng(0))
        assert discriminator(Tensor(np.zeros((5, 784), dtype=np.float32))).shape == (5, 1)

    def test_latent_width_mismatch(self):
        generator = build_network(generator_spec(), np.random.default_rng(0))
        with pytest.raises(ShapeError):
            generator(Tensor(np.zeros((2, 64), dtype=np.float32)))


class TestParameterCounts:
    """Parameter counts of the reference architectures."""

    @pytest.mark.parametrize("spec,expected", [
        (generator_spec(bn_in_g=False), 935_696),
        (generator_spec(), 937_744),
        (discriminator_spec(), 533_505),
        (generator_spec("CNN", bn_in_g=False), 215_777),
        (discriminator_spec("CNN"), 420_481),
    ])
    def test_counts(self, spec, expected):
        assert count_parameters(build_network(spec, np.random.default_rng(0))) == expected

    def test_table_lists_every_network(self):
        table = parameter_table({"generator": build_network(generator_spec(), np.random.default_rng(0))})
        assert "937,744" in table


class TestOutputs:
    """Binary purity, heads and determinism."""

    @pytest.mark.parametrize("family", ["MLP", "CNN"])
    @pytest.mark.parametrize("mode", ["deterministic", "stochastic"])
    def test_binary_generators_emit_zeros_and_ones(self, family, mode):
        generator = build_network(generator_spec(family, mode), np.random.default_rng(0), np.random.default_rng(1))
        out = generator(latent(4)).data
        assert np.all((out == 0.0) | (out == 1.0))

    def test_real_valued_generator_lies_inside_unit_interval(self):
        generator = build_network(generator_spec(mode="real_valued"), np.random.default_rng(0))
        out = generator(latent(4)).data
        assert np.all((out > 0) & (out < 1))

    def test_gan_head_is_a_probability(self):
        discriminator = build_network(discriminator_spec(objective="GAN"), np.random.default_rng(0))
        x = np.random.default_rng(1).integers(0, 2, (8, 784)).astype(np.float32) * 1000
        out = discriminator(Tensor(x)).data
        assert discriminator.head == "sigmoid"
        assert np.all((out > 0) & (out < 1))

    def test_wasserstein_head_is_unbounded(self):
        discriminator = build_network(discriminator_spec(objective="WGAN"), np.random.default_rng(0))
        x = np.random.default_rng(1).integers(0, 2, (8, 784)).astype(np.float32) * 10_000
        assert discriminator.head == "linear"
        assert np.abs(discriminator(Tensor(x)).data).max() > 1

    def test_batch_norm_follows_the_spec(self):
        with_bn = build_network(discriminator_spec(bn_in_d=True), np.random.default_rng(0))
        assert any(".bn." in name for name in with_bn.named_parameters())
        generator = build_network(generator_spec(), np.random.default_rng(0))
        assert not any(name.startswith("body.logits.bn") for name in generator.named_parameters())

    def test_same_seed_same_network(self):
        first = build_network(generator_spec("CNN"), np.random.default_rng(4))
        second = build_network(generator_spec("CNN"), np.random.default_rng(4))
        for (name, a), (_, b) in zip(first.named_parameters().items(), second.named_parameters().items()):
            assert a.data.tobytes() == b.data.tobytes(), name
        assert_array_equal(first(latent(2)).data, second(latent(2)).data)

    def test_binary_neurons_only_at_the_output(self):
        spec = generator_spec()
        rng = np.random.default_rng(0)
        body = Sequential([("hidden", DenseLayer(128, 784, rng)), ("inner", BinaryOutputLayer("deterministic"))])
        with pytest.raises(LayerError):
            Generator(spec, body, BinaryOutputLayer("deterministic"))

    def test_invalid_spec(self):
        with pytest.raises(ValidationError):
            ModelSpec(family="RNN")
        with pytest.raises(ValidationError):
            ModelSpec(side="critic")


class TestEndToEndGradients:
    """Every parameter of every builder receives a finite gradient that matches finite differences."""

    @pytest.mark.parametrize("family", ["MLP", "CNN"])
    def test_generator(self, family):
        generator = to_float64(build_network(generator_spec(family, "real_valued"), np.random.default_rng(0)))
        z = np.random.default_rng(1).standard_normal((3, 128))
        errors = sampled_gradient_errors(generator, z)
        assert max(errors.values()) < 1e-3, errors

    @pytest.mark.parametrize("family", ["MLP", "CNN"])
    @pytest.mark.parametrize("objective", ["GAN", "WGAN_GP"])
    def test_discriminator(self, family, objective):
        spec = discriminator_spec(family, objective, bn_in_d=True)
        discriminator = to_float64(build_network(spec, np.random.default_rng(0)))
        shape = (3, 784) if family == "MLP" else (3, 1, 28, 28)
        x = np.random.default_rng(1).random(shape)
        errors = sampled_gradient_errors(discriminator, x)
        assert max(errors.values()) < 1e-3, errors

    def test_binary_generator_gradients_are_finite(self):
        generator = build_network(generator_spec(mode="stochastic"), np.random.default_rng(0),
                                  np.random.default_rng(1))
        with Tape() as tape:
            backward(tape, generator(latent(4)).sum())
        for name, tensor in generator.named_parameters().items():
            assert tensor.grad is not None and np.all(np.isfinite(tensor.grad)), name
