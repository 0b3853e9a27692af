"""
Objective x batch-norm-in-discriminator x neuron-type experiment matrix.
"""
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Type

import yaml
from pydantic import BaseModel, Field
from superagi.tools.base_tool import BaseTool
from tabulate import tabulate

from artifacts import ArtifactError, compose_matrix_figure
from binarygan_config import ExperimentConfig
from binarygan_logger import logger
from mnist_data import BinarizedDataset
from train_model import config_from_args, train

MATRIX_OBJECTIVES = ("GAN", "WGAN", "WGAN_GP")
MATRIX_BN_IN_D = (True, False)
MATRIX_MODES = ("deterministic", "stochastic")
MODE_LABELS = {"deterministic": "DBN", "stochastic": "SBN"}


class MatrixInput(BaseModel):
    config: Optional[str] = Field(None, description="YAML config file holding the shared settings")
    seed: Optional[int] = Field(None, ge=0, description="Master seed shared by every run")
    data_dir: Optional[str] = Field(None, description="Directory holding the MNIST IDX files")
    output_dir: Optional[str] = Field(None, description="Directory receiving the matrix")
    family: Optional[str] = Field(None, description="MLP or CNN")
    epochs: Optional[int] = Field(None, ge=1, description="Training epochs per run")
    max_steps: Optional[int] = Field(None, ge=1, description="Generator steps per run")
    data_limit: Optional[int] = Field(None, ge=1, description="Use only the first N training images")
    batch_size: Optional[int] = Field(None, ge=2, description="Images per batch")
    no_anneal: bool = Field(False, description="Keep the sigmoid slope fixed")
    dry_run: bool = Field(False, description="Write the matrix manifest without training")
    workers: int = Field(1, ge=1, description="Runs trained in parallel processes")


class MatrixRun(BaseModel):
    """
    Attributes:
        run_id : Distinct run name.
        objective, bn_in_d, neuron_mode : The matrix cell.
        optimizer, n_critic : Per-objective defaults the run uses.
        status : planned, done or failed.
    """
    run_id: str
    objective: str
    bn_in_d: bool
    neuron_mode: str
    optimizer: str
    n_critic: int
    status: str = "planned"
    error: Optional[str] = None
    sample_grid: Optional[str] = None
    preactivation_grid: Optional[str] = None


class MatrixResult(BaseModel):
    manifest: str
    runs: List[MatrixRun]
    figure: Optional[str] = None

    def summary(self) -> str:
        rows = [[r.run_id, r.objective, "yes" if r.bn_in_d else "no", MODE_LABELS[r.neuron_mode], r.optimizer,
                 r.n_critic, r.status] for r in self.runs]
        return tabulate(rows, headers=["Run", "Objective", "BN in D", "Neurons", "Optimizer", "n_critic", "Status"],
                        tablefmt="pretty")


def matrix_configs(base: ExperimentConfig) -> List[ExperimentConfig]:
    """
    Twelve run settings, one per matrix cell. The optimizer and n_critic are
    reset so each objective runs with its own conventions.
    """
    output_dir = str(Path(base.output_dir) / "matrix")
    configs = []
    for objective in MATRIX_OBJECTIVES:
        for bn_in_d in MATRIX_BN_IN_D:
            for mode in MATRIX_MODES:
                configs.append(ExperimentConfig(**dict(
                    base.dict(), objective=objective, bn_in_d=bn_in_d, neuron_mode=mode, optimizer=None,
                    n_critic=None, run_id=None, output_dir=output_dir)))
    return configs


def _planned(config: ExperimentConfig) -> MatrixRun:
    return MatrixRun(run_id=config.resolved_run_id, objective=config.objective, bn_in_d=config.resolved_bn_in_d,
                     neuron_mode=config.neuron_mode, optimizer=config.resolved_optimizer,
                     n_critic=config.resolved_n_critic)


def _execute_run(config: ExperimentConfig, dataset: Optional[BinarizedDataset] = None) -> MatrixRun:
    run = _planned(config)
    try:
        artifacts = train(config, dataset)
    except Exception as e:
        logger.error(f"Matrix run {run.run_id} failed: {e}")
        return run.copy(update={"status": "failed", "error": f"{type(e).__name__}: {e}"})
    return run.copy(update={
        "status": "done",
        "sample_grid": artifacts.sample_grids[-1] if artifacts.sample_grids else None,
        "preactivation_grid": artifacts.preactivation_grids[-1] if artifacts.preactivation_grids else None,
    })


def _write_manifest(path: Path, base: ExperimentConfig, runs: List[MatrixRun]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    content = {"base": base.portable_dict(), "runs": [r.dict() for r in runs]}
    with open(path, "w") as f:
        yaml.safe_dump(content, f, sort_keys=False)
    return path


def _overview(runs: List[MatrixRun], path: Path) -> Optional[Path]:
    by_cell: Dict[tuple, MatrixRun] = {(r.objective, r.bn_in_d, r.neuron_mode): r for r in runs}
    rows = []
    for objective in MATRIX_OBJECTIVES:
        for bn_in_d in MATRIX_BN_IN_D:
            cells = []
            for mode in MATRIX_MODES:
                run = by_cell.get((objective, bn_in_d, mode))
                cells.extend([run.sample_grid if run else None, run.preactivation_grid if run else None])
            rows.append((f"{objective} {'w/' if bn_in_d else 'w/o'} BN in D", cells))
    columns = [f"{MODE_LABELS[m]} {kind}" for m in MATRIX_MODES for kind in ("samples", "preactivations")]
    try:
        return compose_matrix_figure(rows, columns, path)
    except ArtifactError as e:
        logger.warning(f"No matrix overview: {e}")
        return None


def run_matrix(base: ExperimentConfig, dry_run: bool = False, workers: int = 1,
               dataset: Optional[BinarizedDataset] = None) -> MatrixResult:
    """
    Train every matrix cell from `base`. A failed run is recorded and the
    matrix carries on.

    Args:
        base : Shared settings.
        dry_run : Only write the manifest.
        workers : Parallel training processes; runs share no state.
        dataset : Training images passed to every run instead of loading them.

    Returns:
        The manifest path, per-run status and the overview figure path.
    """
    configs = matrix_configs(base)
    matrix_dir = Path(configs[0].output_dir)
    manifest_path = matrix_dir / "matrix_manifest.yaml"
    runs = [_planned(c) for c in configs]
    if len({r.run_id for r in runs}) != len(runs):
        raise ValueError("matrix run ids are not distinct")

    if dry_run:
        _write_manifest(manifest_path, base, runs)
        logger.info(f"Dry run: wrote manifest of {len(runs)} runs to {manifest_path}")
        return MatrixResult(manifest=str(manifest_path), runs=runs)

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(_execute_run, configs, [dataset] * len(configs)))
    else:
        runs = []
        for index, config in enumerate(configs, start=1):
            logger.info(f"Matrix run {index}/{len(configs)}: {config.resolved_run_id}")
            runs.append(_execute_run(config, dataset))

    _write_manifest(manifest_path, base, runs)
    figure = _overview(runs, matrix_dir / "matrix_overview.png")
    result = MatrixResult(manifest=str(manifest_path), runs=runs, figure=str(figure) if figure else None)
    logger.info("\n" + result.summary())
    return result


class RunMatrixTool(BaseTool):
    """
    Run Matrix Tool
    Attributes:
        name : The name of the tool.
        description : The description of the tool.
        args_schema : The args schema.
    """
    name: str = "matrix"
    description: str = "Train the objective x BN-in-D x neuron-type matrix and compose its overview figure"
    args_schema: Type[BaseModel] = MatrixInput

    def _execute(self, dry_run: bool = False, workers: int = 1, **kwargs) -> MatrixResult:
        return run_matrix(config_from_args(**kwargs), dry_run=dry_run, workers=workers)
