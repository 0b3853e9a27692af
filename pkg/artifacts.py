"""
Run artifacts: sample grids, preactivation histograms, loss tables and the
matrix overview figure.
"""
import csv
import math
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image, ImageDraw, ImageFont
from pydantic import BaseModel, Field, validator
from tabulate import tabulate

from binary_neurons import PreactivationRecord
from binarygan_logger import logger

IMAGE_SIDE = 28
GUTTER = 2
HISTOGRAM_BINS = 100
GUTTER_VALUE = 255
MISSING_VALUE = 128


class ArtifactError(ValueError):
    """Inputs an artifact cannot be rendered from."""


class RunArtifacts(BaseModel):
    """
    Files produced by one run, every one named with the run id and epoch.
    Attributes:
        run_id : Run name.
        run_dir : Directory holding the files.
        checkpoints, sample_grids, preactivation_grids, histograms : One file per epoch.
        postprocessed_grids : Threshold and Bernoulli grids of real-valued runs.
        loss_table : Per-iteration losses.
        slope : Final sigmoid slope.
    """
    run_id: str
    run_dir: str
    checkpoints: List[str] = Field(default_factory=list)
    sample_grids: List[str] = Field(default_factory=list)
    preactivation_grids: List[str] = Field(default_factory=list)
    histograms: List[str] = Field(default_factory=list)
    postprocessed_grids: List[str] = Field(default_factory=list)
    loss_table: Optional[str] = None
    slope: float = 1.0
    iterations: int = 0

    def summary(self) -> str:
        rows = [
            ["Run", self.run_id],
            ["Iterations", self.iterations],
            ["Checkpoints", len(self.checkpoints)],
            ["Sample grids", len(self.sample_grids)],
            ["Histograms", len(self.histograms)],
            ["Final slope", f"{self.slope:.6f}"],
        ]
        return tabulate(rows, tablefmt="pretty")


def artifact_name(run_id: str, epoch: int, kind: str, suffix: str) -> str:
    return f"{run_id}_epoch{epoch:03d}_{kind}.{suffix}"


def is_square_count(count: int) -> bool:
    """Whether `count` images fill a square sample grid."""
    return count > 0 and math.isqrt(count) ** 2 == count


def _as_images(images: np.ndarray) -> np.ndarray:
    images = np.asarray(images)
    count = images.shape[0]
    if images.size != count * IMAGE_SIDE * IMAGE_SIDE:
        raise ArtifactError(f"cannot view {images.shape} as {IMAGE_SIDE}x{IMAGE_SIDE} images")
    return images.reshape(count, IMAGE_SIDE, IMAGE_SIDE)


def render_sample_grid(images: np.ndarray, gutter: int = GUTTER) -> np.ndarray:
    """
    Tile a square number of images into one grayscale canvas.

    Values in [0, 1] map to 0..255 (binary pixels to black and white);
    tiles are separated and framed by white gutters.

    Returns:
        uint8 array of side n*28 + (n+1)*gutter for n*n images.
    """
    images = _as_images(images)
    if not is_square_count(images.shape[0]):
        raise ArtifactError(f"sample grids need a perfect-square image count, got {images.shape[0]}")
    side = math.isqrt(images.shape[0])
    if not np.all(np.isfinite(images)) or images.min() < 0 or images.max() > 1:
        raise ArtifactError("grid pixels must lie in [0, 1]")
    span = side * IMAGE_SIDE + (side + 1) * gutter
    canvas = np.full((span, span), GUTTER_VALUE, dtype=np.uint8)
    pixels = np.rint(images * 255.0).astype(np.uint8)
    for index, image in enumerate(pixels):
        row, col = divmod(index, side)
        top = gutter + row * (IMAGE_SIDE + gutter)
        left = gutter + col * (IMAGE_SIDE + gutter)
        canvas[top:top + IMAGE_SIDE, left:left + IMAGE_SIDE] = image
    return canvas


def emit_sample_grid(images: np.ndarray, path: Union[str, Path]) -> Path:
    """Render `images` and write the grid as a grayscale PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(render_sample_grid(images), mode="L").save(path, format="PNG")
    logger.debug(f"Wrote sample grid {path}")
    return path


class Histogram(BaseModel):
    """
    Attributes:
        edges : Bin boundaries, 0 to 1 inclusive.
        counts : Values per bin; the last bin is closed on the right.
        total : Number of values.
    """
    edges: np.ndarray
    counts: np.ndarray
    total: int

    class Config:
        arbitrary_types_allowed = True

    @validator("counts")
    def _counts_match_edges(cls, counts, values):
        edges = values.get("edges")
        if edges is not None and counts.shape[0] != edges.shape[0] - 1:
            raise ValueError(f"{counts.shape[0]} counts do not fit {edges.shape[0]} edges")
        return counts

    @validator("total")
    def _total_is_sum(cls, total, values):
        counts = values.get("counts")
        if counts is not None and int(counts.sum()) != total:
            raise ValueError(f"bin counts sum to {int(counts.sum())}, total is {total}")
        return total

    def rows(self) -> List[Tuple[float, float, int]]:
        return [(float(self.edges[i]), float(self.edges[i + 1]), int(self.counts[i]))
                for i in range(len(self.counts))]

    def preview(self, groups: int = 10) -> str:
        """Counts summed into `groups` coarse bins, as a table for the log."""
        coarse = self.counts.reshape(groups, -1).sum(axis=1)
        step = 1.0 / groups
        rows = [[f"[{i * step:.1f}, {(i + 1) * step:.1f})", int(c)] for i, c in enumerate(coarse)]
        return tabulate(rows, headers=["Preactivation", "Count"], tablefmt="pretty")


def compute_preactivation_histogram(records: Sequence[Union[PreactivationRecord, np.ndarray]],
                                    bins: int = HISTOGRAM_BINS) -> Histogram:
    """
    Equal-width histogram over [0, 1] of every preactivated output in `records`.
    Values must lie strictly inside (0, 1).
    """
    if not records:
        raise ArtifactError("histogram needs at least one preactivation record")
    values = np.concatenate([
        np.asarray(r.values if isinstance(r, PreactivationRecord) else r, dtype=np.float64).reshape(-1)
        for r in records
    ])
    if values.size == 0:
        raise ArtifactError("histogram records hold no values")
    if not np.all(np.isfinite(values)) or not (np.all(values > 0) and np.all(values < 1)):
        logger.error("Preactivation values outside (0, 1)")
        raise ArtifactError("preactivation values must lie strictly inside (0, 1)")
    counts, edges = np.histogram(values, bins=bins, range=(0.0, 1.0))
    return Histogram(edges=edges, counts=counts.astype(np.int64), total=int(values.size))


def write_histogram(histogram: Histogram, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, delimiter="\t", lineterminator="\n")
        writer.writerow(["bin_low", "bin_high", "count"])
        for low, high, count in histogram.rows():
            writer.writerow([f"{low:.4f}", f"{high:.4f}", count])
    return path


def read_histogram(path: Union[str, Path]) -> Histogram:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f, delimiter="\t"))
    if not rows:
        raise ArtifactError(f"{path}: empty histogram table")
    edges = np.array([float(r["bin_low"]) for r in rows] + [float(rows[-1]["bin_high"])])
    counts = np.array([int(r["count"]) for r in rows], dtype=np.int64)
    return Histogram(edges=edges, counts=counts, total=int(counts.sum()))


class LossTable:
    """
    One row per generator iteration.
    Attributes:
        rows : (iteration, d_loss, g_loss, wasserstein) tuples; wasserstein is None for GAN.
    """
    columns = ("iteration", "d_loss", "g_loss", "wasserstein")

    def __init__(self):
        self.rows: List[Tuple[int, float, float, Optional[float]]] = []

    def __len__(self) -> int:
        return len(self.rows)

    def append(self, iteration: int, d_loss: float, g_loss: float, wasserstein: Optional[float] = None) -> None:
        if self.rows and iteration != self.rows[-1][0] + 1:
            raise ArtifactError(f"loss table expects iteration {self.rows[-1][0] + 1}, got {iteration}")
        self.rows.append((iteration, float(d_loss), float(g_loss), wasserstein))

    @classmethod
    def read(cls, path: Union[str, Path], upto: Optional[int] = None) -> "LossTable":
        """Rows of a written table, optionally only iterations <= `upto`."""
        table = cls()
        with open(path, newline="") as f:
            for row in csv.DictReader(f, delimiter="\t"):
                iteration = int(row["iteration"])
                if upto is not None and iteration > upto:
                    break
                wasserstein = float(row["wasserstein"]) if row["wasserstein"] else None
                table.append(iteration, float(row["d_loss"]), float(row["g_loss"]), wasserstein)
        return table

    def wasserstein_series(self) -> np.ndarray:
        return np.array([np.nan if w is None else w for *_, w in self.rows], dtype=np.float64)

    def write(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            writer = csv.writer(f, delimiter="\t", lineterminator="\n")
            writer.writerow(self.columns)
            for iteration, d_loss, g_loss, wasserstein in self.rows:
                writer.writerow([iteration, repr(d_loss), repr(g_loss), "" if wasserstein is None else repr(wasserstein)])
        return path


def compose_matrix_figure(rows: Sequence[Tuple[str, Sequence[Optional[Union[str, Path]]]]],
                          column_labels: Sequence[str], path: Union[str, Path],
                          label_width: int = 140, header_height: int = 16, gap: int = 6) -> Path:
    """
    Lay out grid images in labelled rows and columns; missing cells (failed
    runs) are left mid-gray.
    """
    cells = [[Image.open(p).convert("L") if p else None for p in paths] for _, paths in rows]
    present = [c for row in cells for c in row if c is not None]
    if not present:
        raise ArtifactError("matrix figure needs at least one grid image")
    cell_w = max(c.width for c in present)
    cell_h = max(c.height for c in present)
    n_cols = max(len(paths) for _, paths in rows)
    width = label_width + n_cols * (cell_w + gap) + gap
    height = header_height + len(rows) * (cell_h + gap) + gap
    figure = Image.new("L", (width, height), color=GUTTER_VALUE)
    draw = ImageDraw.Draw(figure)
    font = ImageFont.load_default()

    for c, label in enumerate(column_labels):
        draw.text((label_width + gap + c * (cell_w + gap), 2), label, fill=0, font=font)
    for r, (label, paths) in enumerate(rows):
        top = header_height + gap + r * (cell_h + gap)
        draw.text((4, top + cell_h // 2 - 6), label, fill=0, font=font)
        for c in range(n_cols):
            left = label_width + gap + c * (cell_w + gap)
            cell = cells[r][c] if c < len(paths) else None
            if cell is None:
                figure.paste(MISSING_VALUE, (left, top, left + cell_w, top + cell_h))
            else:
                figure.paste(cell, (left, top))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    figure.save(path, format="PNG")
    return path
