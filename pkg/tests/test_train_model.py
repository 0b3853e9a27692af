from pathlib import Path

import numpy as np
import pytest
import yaml

from artifacts import LossTable, read_histogram
from checkpoint import read_checkpoint
from generate_samples import generate_samples
from train_model import TrainModelTool, Trainer, TrainingDivergedError, config_from_args, train


class TestTrainingRun:
    """End-to-end runs on a small fixture dataset."""

    def test_one_epoch_emits_every_artifact(self, make_config, dataset):
        artifacts = train(make_config(), dataset)
        assert len(artifacts.checkpoints) == 1
        assert len(artifacts.sample_grids) == 1 and len(artifacts.preactivation_grids) == 1
        assert len(artifacts.histograms) == 1
        for path in artifacts.checkpoints + artifacts.sample_grids + artifacts.histograms:
            assert Path(path).exists()
            assert Path(path).name.startswith("mlp-wgan_gp-deterministic-nobnD-s0_epoch001_")
        assert read_histogram(artifacts.histograms[0]).total == 16 * 784
        assert len(LossTable.read(artifacts.loss_table)) == artifacts.iterations
        assert artifacts.slope == pytest.approx(1.1)

    def test_same_seed_same_bytes(self, make_config, dataset, tmp_path):
        first = train(make_config(objective="GAN", output_dir=str(tmp_path / "a")), dataset)
        second = train(make_config(objective="GAN", output_dir=str(tmp_path / "b")), dataset)
        for a, b in zip(first.checkpoints + first.sample_grids + first.histograms,
                        second.checkpoints + second.sample_grids + second.histograms):
            assert Path(a).read_bytes() == Path(b).read_bytes(), a
        assert Path(first.loss_table).read_text() == Path(second.loss_table).read_text()

    def test_slope_is_annealed_once_per_epoch(self, make_config, dataset):
        artifacts = train(make_config(objective="GAN", epochs=2), dataset)
        manifest = read_checkpoint(artifacts.checkpoints[-1]).manifest
        assert manifest["slope"]["anneal_steps"] == 2
        assert manifest["slope"]["value"] == pytest.approx(1.21)
        assert len(LossTable.read(artifacts.loss_table)) == 4

    def test_annealing_can_be_disabled(self, make_config, dataset):
        artifacts = train(make_config(objective="GAN", anneal_slope=False), dataset)
        assert artifacts.slope == 1.0

    def test_real_valued_runs_emit_postprocessed_grids(self, make_config, dataset):
        artifacts = train(make_config(objective="GAN", neuron_mode="real_valued"), dataset)
        names = [Path(p).name for p in artifacts.postprocessed_grids]
        assert any(n.endswith("_threshold.png") for n in names)
        assert any(n.endswith("_bernoulli.png") for n in names)
        assert artifacts.slope == 1.0

    def test_stochastic_run(self, make_config, dataset):
        artifacts = train(make_config(objective="GAN", neuron_mode="stochastic", bn_in_d=True), dataset)
        assert len(artifacts.checkpoints) == 1

    def test_max_steps_inside_an_epoch(self, make_config, dataset):
        artifacts = train(make_config(objective="GAN", epochs=2, max_steps=3), dataset)
        assert artifacts.iterations == 3
        assert len(artifacts.checkpoints) == 2
        assert artifacts.slope == pytest.approx(1.1)

    def test_cnn_run(self, make_config, dataset):
        artifacts = train(make_config(objective="GAN", family="CNN", batch_size=16, max_steps=1), dataset)
        assert artifacts.iterations == 1
        assert len(artifacts.sample_grids) == 1


class TestTrainerSteps:
    """Individual updates of the trainer."""

    def test_wgan_critic_stays_clipped(self, make_config, dataset):
        trainer = Trainer(make_config(objective="WGAN", batch_size=16), dataset)
        assert trainer.d_optimizer.kind == "rmsprop"
        for _ in range(100):
            trainer.discriminator_step(trainer.batches.next_batch())
            for tensor in trainer.discriminator.named_parameters().values():
                assert np.abs(tensor.data).max() <= 0.01

    def test_generator_step_leaves_the_discriminator(self, make_config, dataset):
        trainer = Trainer(make_config(objective="GAN"), dataset)
        before = {n: t.data.copy() for n, t in trainer.discriminator.named_parameters().items()}
        trainer.generator_step()
        for name, tensor in trainer.discriminator.named_parameters().items():
            assert np.array_equal(tensor.data, before[name]), name
            assert tensor.requires_grad

    def test_gradient_penalty_step_returns_finite_losses(self, make_config, dataset):
        trainer = Trainer(make_config(), dataset)
        d_loss, wasserstein = trainer.discriminator_step(trainer.batches.next_batch())
        assert np.isfinite(d_loss) and np.isfinite(wasserstein)

    def test_divergence_writes_a_dump(self, make_config, dataset, monkeypatch):
        def diverge(self):
            raise FloatingPointError("g_loss is not finite")

        monkeypatch.setattr(Trainer, "generator_step", diverge)
        trainer = Trainer(make_config(objective="GAN"), dataset)
        with pytest.raises(TrainingDivergedError):
            trainer.iteration()
        dumps = list(trainer.run_dir.glob("*_divergence_step*.yaml"))
        assert len(dumps) == 1
        report = yaml.safe_load(dumps[0].read_text())
        assert report["phase"] == "generator"
        assert report["step"] == 1
        assert "discriminator/body.score.weight" in report["parameters"]


class TestResume:
    """Continuing from a checkpoint reproduces an uninterrupted run."""

    def test_resumed_run_matches(self, make_config, dataset, tmp_path):
        straight = train(make_config(objective="GAN", epochs=2, output_dir=str(tmp_path / "a")), dataset)
        partial = train(make_config(objective="GAN", epochs=1, output_dir=str(tmp_path / "b")), dataset)
        resumed = train(make_config(objective="GAN", epochs=2, output_dir=str(tmp_path / "b")), dataset,
                        resume=partial.checkpoints[-1])
        assert Path(resumed.checkpoints[-1]).read_bytes() == Path(straight.checkpoints[-1]).read_bytes()
        assert Path(resumed.loss_table).read_text() == Path(straight.loss_table).read_text()

    @pytest.mark.parametrize("neuron_mode", ["deterministic", "stochastic"])
    def test_resume_after_a_max_steps_pause(self, make_config, dataset, tmp_path, neuron_mode):
        settings = dict(objective="GAN", epochs=3, neuron_mode=neuron_mode)
        straight = train(make_config(output_dir=str(tmp_path / "a"), **settings), dataset)
        paused = train(make_config(output_dir=str(tmp_path / "b"), max_steps=1, **settings), dataset)
        pause = read_checkpoint(paused.checkpoints[-1]).manifest
        assert pause["partial"] and pause["epoch"] == 0
        assert pause["slope"]["anneal_steps"] == 0
        resumed = train(make_config(output_dir=str(tmp_path / "b"), **settings), dataset,
                        resume=paused.checkpoints[-1])
        final = read_checkpoint(resumed.checkpoints[-1]).manifest
        assert final["epoch"] == 3 and not final["partial"]
        assert final["slope"]["value"] == pytest.approx(1.1 ** 3)
        assert Path(resumed.checkpoints[-1]).read_bytes() == Path(straight.checkpoints[-1]).read_bytes()
        assert Path(resumed.sample_grids[-1]).read_bytes() == Path(straight.sample_grids[-1]).read_bytes()


class TestTrainModelTool:
    """The train command."""

    def test_flags_reach_the_config(self):
        config = config_from_args(objective="wgan", no_anneal=True, epochs=3, bn_in_d=True)
        assert config.objective == "WGAN"
        assert not config.anneal_slope
        assert config.epochs == 3 and config.resolved_bn_in_d
        assert config.resolved_optimizer == "rmsprop"

    def test_execute_loads_data_from_directory(self, mnist_dir, tmp_path):
        artifacts = TrainModelTool().execute({"data_dir": str(mnist_dir), "output_dir": str(tmp_path / "out"),
                                              "objective": "GAN", "epochs": 1, "max_steps": 1, "run_id": "tool"})
        assert artifacts.run_id == "tool"
        assert artifacts.iterations == 1


@pytest.mark.slow
class TestDeskScaleRun:
    """A few hundred generator steps learn the coarse pixel statistics."""

    def test_wgan_gp_deterministic_mlp(self, make_config, make_dataset):
        data = make_dataset(1000)
        artifacts = train(make_config(epochs=100, max_steps=500, sample_count=64), data)
        wasserstein = np.abs(LossTable.read(artifacts.loss_table).wasserstein_series())
        assert np.all(np.isfinite(wasserstein))
        assert wasserstein[490:500].mean() < wasserstein[40:50].mean()
        images, _ = generate_samples(artifacts.checkpoints[-1], 256, np.random.default_rng(0))
        correlation = np.corrcoef(images.mean(axis=0).ravel(), data.pixel_mean().ravel())[0, 1]
        assert correlation > 0.5
