"""
Adversarial training loop: n_critic discriminator updates, then one generator
update through the binary output layer, with per-epoch slope annealing,
checkpoints and artifacts.
"""
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Type, Union

import numpy as np
import yaml
from pydantic import BaseModel, Field
from superagi.tools.base_tool import BaseTool

from artifacts import (LossTable, RunArtifacts, artifact_name, compute_preactivation_histogram, emit_sample_grid,
                       write_histogram)
from binary_neurons import anneal_slope
from binarygan_config import ExperimentConfig, load_experiment_config
from binarygan_logger import logger
from checkpoint import (load_network_arrays, load_optimizer, network_arrays, optimizer_arrays, read_checkpoint,
                        write_checkpoint)
from mnist_data import BatchIterator, BinarizedDataset, load_mnist
from model_zoo import build_network, parameter_table, sample_latent
from objectives import gradient_penalty, sample_interpolates, wasserstein_estimate
from optimizers import OptimizerError, build_optimizer, clip_weights
from postprocess_samples import STRATEGIES, postprocess_real
from seeding import RngStreams
from tensor_engine import DomainError, GradientError, Tape, Tensor, backward


class TrainingDivergedError(RuntimeError):
    """A loss or gradient became non-finite; a diagnostic dump was written first."""


class TrainInput(BaseModel):
    config: Optional[str] = Field(None, description="YAML config file (default: config.yaml next to the code)")
    seed: Optional[int] = Field(None, ge=0, description="Master seed")
    data_dir: Optional[str] = Field(None, description="Directory holding the MNIST IDX files")
    output_dir: Optional[str] = Field(None, description="Directory receiving run artifacts")
    objective: Optional[str] = Field(None, description="GAN, WGAN or WGAN_GP")
    neuron_mode: Optional[str] = Field(None, description="deterministic, stochastic or real_valued")
    family: Optional[str] = Field(None, description="MLP or CNN")
    epochs: Optional[int] = Field(None, ge=1, description="Training epochs")
    gp_lambda: Optional[float] = Field(None, ge=0, description="Gradient-penalty coefficient")
    n_critic: Optional[int] = Field(None, ge=1, description="Discriminator steps per generator step")
    clip_bound: Optional[float] = Field(None, gt=0, description="Critic weight clipping bound")
    no_anneal: bool = Field(False, description="Keep the sigmoid slope fixed")
    bn_in_d: Optional[bool] = Field(None, description="Batch norm in the discriminator")
    max_steps: Optional[int] = Field(None, ge=1, description="Stop after this many generator steps")
    data_limit: Optional[int] = Field(None, ge=1, description="Use only the first N training images")
    batch_size: Optional[int] = Field(None, ge=2, description="Images per batch")
    run_id: Optional[str] = Field(None, description="Run name used in artifact file names")
    resume: Optional[str] = Field(None, description="Checkpoint to continue training from")


def config_from_args(config: Optional[str] = None, no_anneal: bool = False, **overrides) -> ExperimentConfig:
    if no_anneal:
        overrides["anneal_slope"] = False
    return load_experiment_config(config, overrides)


class Trainer:
    """
    Owns the networks, optimizers, data stream and random streams of one run.
    Attributes:
        config : Run settings.
        objective : Adversarial objective.
        streams : Named random streams derived from the seed.
        generator, discriminator : The networks.
        g_optimizer, d_optimizer : One optimizer per network.
        batches : Mini-batch iterator over the training images.
        losses : Loss table, one row per generator step.
        step : Completed generator steps.
        epochs_done : Completed epochs.
    """

    def __init__(self, config: ExperimentConfig, dataset: Optional[BinarizedDataset] = None):
        self.config = config
        self.objective = config.objective_spec()
        self.streams = RngStreams(config.seed)
        self.generator = build_network(config.model_spec("generator"), self.streams.get("init_generator"),
                                       self.streams.get("neurons"))
        self.discriminator = build_network(config.model_spec("discriminator"),
                                           self.streams.get("init_discriminator"))
        self.objective.check_head(self.discriminator.head)
        self.g_optimizer = self._optimizer(self.generator)
        self.d_optimizer = self._optimizer(self.discriminator)

        dataset = dataset if dataset is not None else load_mnist(config.data_dir, config.data_limit)
        self.batches = BatchIterator(dataset, config.batch_size, self.streams.get("shuffle"),
                                     flat=config.family == "MLP")
        self.monitor_z = sample_latent(config.sample_count, config.latent_dim, self.streams.get("monitor"))
        self.losses = LossTable()
        self.step = 0
        self.epochs_done = 0
        self._last_epoch_step = 0
        self.run_dir = config.run_dir
        self.run_id = config.resolved_run_id
        self.artifacts = RunArtifacts(run_id=self.run_id, run_dir=str(self.run_dir))

    def _optimizer(self, network):
        c = self.config
        return build_optimizer(c.resolved_optimizer, network.named_parameters(), learning_rate=c.learning_rate,
                               beta1=c.beta1, beta2=c.beta2, decay=c.rms_decay, eps=c.optimizer_eps)

    @property
    def loss_path(self) -> Path:
        return self.run_dir / f"{self.run_id}_losses.tsv"

    # Steps

    def discriminator_step(self, real: np.ndarray) -> Tuple[float, float]:
        """One critic update on a real batch; returns (d_loss, Wasserstein estimate)."""
        z = Tensor(sample_latent(real.shape[0], self.config.latent_dim, self.streams.get("latent")))
        fake = self.generator(z).detach()
        real = Tensor(real)
        self.discriminator.zero_grad()
        with Tape() as tape:
            d_real = self.discriminator(real)
            d_fake = self.discriminator(fake)
            penalty = None
            if self.objective.kind == "WGAN_GP":
                x_hat = sample_interpolates(real, fake, self.streams.get("penalty"))
                penalty = gradient_penalty(self.discriminator, x_hat, self.objective.gp_lambda, tape)
            d_loss = self.objective.discriminator_loss(d_real, d_fake, penalty)
            _check_finite("d_loss", d_loss)
            backward(tape, d_loss)
        self.d_optimizer.step()
        if self.objective.kind == "WGAN":
            clip_weights(self.d_optimizer.params, self.objective.clip_bound)
        return d_loss.item(), wasserstein_estimate(d_real, d_fake)

    def generator_step(self) -> float:
        """One generator update through the frozen discriminator."""
        z = Tensor(sample_latent(self.config.batch_size, self.config.latent_dim, self.streams.get("latent")))
        self.generator.zero_grad()
        self.discriminator.requires_grad_(False)
        try:
            with Tape() as tape:
                fake = self.generator(z)
                g_loss = self.objective.generator_loss(self.discriminator(fake))
                _check_finite("g_loss", g_loss)
                backward(tape, g_loss)
        finally:
            self.discriminator.requires_grad_(True)
        self.g_optimizer.step()
        return g_loss.item()

    def iteration(self) -> None:
        phase = "discriminator"
        try:
            for _ in range(self.objective.n_critic):
                d_loss, wasserstein = self.discriminator_step(self.batches.next_batch())
            phase = "generator"
            g_loss = self.generator_step()
        except (GradientError, OptimizerError, DomainError, FloatingPointError) as e:
            dump = self.dump_divergence(phase, e)
            raise TrainingDivergedError(f"training diverged at step {self.step + 1} ({phase}): {e}; "
                                        f"diagnostics in {dump}") from e
        self.step += 1
        self.losses.append(self.step, d_loss, g_loss, None if self.objective.kind == "GAN" else wasserstein)
        logger.debug(f"step {self.step}: d_loss={d_loss:.6f} g_loss={g_loss:.6f}")

    # Epoch artifacts

    def end_epoch(self, partial: bool = False) -> None:
        """
        Anneal, then write the epoch's grids, histogram, loss table and checkpoint.
        A partial epoch (cut by max_steps) is written under the epoch in progress
        but is neither counted nor annealed, and the monitor streams are left as
        they were, so resuming from it continues the uninterrupted run.
        """
        if not partial:
            self.epochs_done += 1
        self._last_epoch_step = self.step
        epoch = self.epochs_done + 1 if partial else self.epochs_done
        anneal_slope(self.generator.output, enabled=not partial and self.config.anneal_slope)
        self.run_dir.mkdir(parents=True, exist_ok=True)

        with self.streams.preserved("monitor_neurons", "postprocess", enabled=partial):
            images, preactivations = self.monitor_samples()
            grid = emit_sample_grid(images, self.run_dir / artifact_name(self.run_id, epoch, "samples", "png"))
            preact_grid = emit_sample_grid(preactivations,
                                           self.run_dir / artifact_name(self.run_id, epoch, "preactivations", "png"))
            self.artifacts.sample_grids.append(str(grid))
            self.artifacts.preactivation_grids.append(str(preact_grid))
            if self.config.neuron_mode == "real_valued":
                for strategy in STRATEGIES:
                    binary = postprocess_real(images, strategy, self.streams.get("postprocess"))
                    path = emit_sample_grid(binary, self.run_dir / artifact_name(self.run_id, epoch, strategy, "png"))
                    self.artifacts.postprocessed_grids.append(str(path))

        histogram = compute_preactivation_histogram([preactivations])
        hist_path = write_histogram(histogram,
                                    self.run_dir / artifact_name(self.run_id, epoch, "histogram", "tsv"))
        self.artifacts.histograms.append(str(hist_path))
        self.losses.write(self.loss_path)
        self.artifacts.loss_table = str(self.loss_path)

        checkpoint_path = self.run_dir / artifact_name(self.run_id, epoch, "checkpoint", "ckpt")
        self.save_checkpoint(checkpoint_path, partial=partial)
        self.artifacts.checkpoints.append(str(checkpoint_path))

        last = self.losses.rows[-1] if self.losses.rows else (0, float("nan"), float("nan"), None)
        logger.info(f"Epoch {epoch} {'paused' if partial else 'done'} after {self.step} generator steps "
                    f"(d_loss={last[1]:.5f}, g_loss={last[2]:.5f}, slope={self.generator.output.slope:.4f})")
        logger.debug(f"Preactivation histogram for epoch {epoch}:\n{histogram.preview()}")

    def monitor_samples(self) -> Tuple[np.ndarray, np.ndarray]:
        """Fixed-latent samples and their preactivations, with batch norm in eval mode."""
        self.generator.eval()
        try:
            images = self.generator(Tensor(self.monitor_z), rng=self.streams.get("monitor_neurons")).data
            preactivations = self.generator.preactivations()
        finally:
            self.generator.train()
        return images, preactivations

    # Persistence

    def save_checkpoint(self, path: Union[str, Path], partial: bool = False) -> Path:
        g_meta, g_arrays = optimizer_arrays(self.g_optimizer, "optimizer/generator")
        d_meta, d_arrays = optimizer_arrays(self.d_optimizer, "optimizer/discriminator")
        output = self.generator.output
        manifest = {
            "run_id": self.run_id,
            "epoch": self.epochs_done,
            "partial": partial,
            "step": self.step,
            "config": self.config.portable_dict(),
            "generator_spec": self.generator.spec.dict(),
            "discriminator_spec": self.discriminator.spec.dict(),
            "slope": {"initial": output.initial_slope, "factor": output.slope_factor,
                      "anneal_steps": output.anneal_steps, "value": output.slope},
            "optimizers": {"generator": g_meta, "discriminator": d_meta},
            "rng": self.streams.state(),
            "batches": {"epoch": self.batches.epoch, "cursor": self.batches._cursor},
        }
        arrays = network_arrays(self.generator, "generator")
        arrays.update(network_arrays(self.discriminator, "discriminator"))
        arrays.update(g_arrays)
        arrays.update(d_arrays)
        arrays["batches/order"] = self.batches._order.astype(np.int64)
        return write_checkpoint(path, manifest, arrays)

    def restore(self, path: Union[str, Path]) -> None:
        """Continue from a checkpoint written by this trainer with the same settings."""
        checkpoint = read_checkpoint(path)
        load_network_arrays(self.generator, checkpoint.arrays, "generator")
        load_network_arrays(self.discriminator, checkpoint.arrays, "discriminator")
        load_optimizer(self.g_optimizer, checkpoint, "optimizer/generator")
        load_optimizer(self.d_optimizer, checkpoint, "optimizer/discriminator")
        self.generator.output.anneal_steps = int(checkpoint.manifest["slope"]["anneal_steps"])
        for name, state in checkpoint.manifest.get("rng", {}).items():
            self.streams.get(name).bit_generator.state = state
        self.batches.epoch = int(checkpoint.manifest["batches"]["epoch"])
        self.batches._cursor = int(checkpoint.manifest["batches"]["cursor"])
        self.batches._order = checkpoint.arrays["batches/order"].copy()
        self.step = checkpoint.step
        self.epochs_done = checkpoint.epoch
        self._last_epoch_step = self.step
        if self.loss_path.exists():
            self.losses = LossTable.read(self.loss_path, upto=self.step)
        logger.info(f"Resumed {self.run_id} from {path} at epoch {self.epochs_done}, step {self.step}")

    def dump_divergence(self, phase: str, error: Exception) -> Path:
        self.run_dir.mkdir(parents=True, exist_ok=True)
        path = self.run_dir / f"{self.run_id}_divergence_step{self.step + 1:06d}.yaml"
        norms: Dict[str, Any] = {}
        for side, network in (("generator", self.generator), ("discriminator", self.discriminator)):
            for name, tensor in network.named_parameters().items():
                norms[f"{side}/{name}"] = {
                    "value_norm": float(np.linalg.norm(tensor.data)),
                    "grad_norm": None if tensor.grad is None else float(np.linalg.norm(tensor.grad)),
                }
        last = self.losses.rows[-1] if self.losses.rows else None
        report = {
            "run_id": self.run_id,
            "step": self.step + 1,
            "epoch": self.epochs_done + 1,
            "phase": phase,
            "error": str(error),
            "last_losses": None if last is None else {"d_loss": last[1], "g_loss": last[2]},
            "slope": self.generator.output.slope,
            "parameters": norms,
        }
        with open(path, "w") as f:
            yaml.safe_dump(report, f, sort_keys=True)
        logger.error(f"Training diverged in the {phase} phase at step {self.step + 1}: {error}. Dump: {path}")
        return path

    # Loop

    def run(self) -> RunArtifacts:
        c = self.config
        if self.run_dir.exists() and any(self.run_dir.iterdir()) and self.step == 0:
            logger.warning(f"Run directory {self.run_dir} is not empty; artifacts will be overwritten")
        self.run_dir.mkdir(parents=True, exist_ok=True)
        logger.info(f"Starting {self.run_id}: {c.family} {c.objective} {c.neuron_mode}, "
                    f"{c.resolved_optimizer}, n_critic={self.objective.n_critic}, "
                    f"BN in G={c.bn_in_g}, BN in D={c.resolved_bn_in_d}")
        logger.info("\n" + parameter_table({"generator": self.generator, "discriminator": self.discriminator}))

        while True:
            while self.batches.epoch > self.epochs_done and self.epochs_done < c.epochs:
                self.end_epoch()
            if self.epochs_done >= c.epochs or (c.max_steps is not None and self.step >= c.max_steps):
                break
            self.iteration()
        if self.step > self._last_epoch_step and self.epochs_done < c.epochs:
            # stopped by max_steps inside an epoch
            self.end_epoch(partial=True)

        self.artifacts.slope = self.generator.output.slope
        self.artifacts.iterations = self.step
        logger.info("\n" + self.artifacts.summary())
        return self.artifacts


def _check_finite(name: str, loss: Tensor) -> None:
    if not np.all(np.isfinite(loss.data)):
        raise FloatingPointError(f"{name} is not finite")


def train(config: ExperimentConfig, dataset: Optional[BinarizedDataset] = None,
          resume: Optional[Union[str, Path]] = None) -> RunArtifacts:
    """
    Train one generator/discriminator pair.

    Args:
        config : Run settings.
        dataset : Training images; loaded from config.data_dir when omitted.
        resume : Checkpoint of an earlier run with the same settings to continue from.

    Returns:
        The run's artifact listing.
    """
    trainer = Trainer(config, dataset)
    if resume is not None:
        trainer.restore(resume)
    return trainer.run()


class TrainModelTool(BaseTool):
    """
    Train Model Tool
    Attributes:
        name : The name of the tool.
        description : The description of the tool.
        args_schema : The args schema.
    """
    name: str = "train"
    description: str = "Train a generator with binary output neurons against a discriminator"
    args_schema: Type[BaseModel] = TrainInput

    def _execute(self, resume: Optional[str] = None, **kwargs) -> RunArtifacts:
        config = config_from_args(**kwargs)
        return train(config, resume=resume)
