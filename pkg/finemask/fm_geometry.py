"""Parameter-space and mask-space analytics."""

from __future__ import annotations

from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
import logging
import math

import numpy as np
from scipy import stats

from .fm_const import MatrixRole
from .fm_encoder import ModelConfig, init_model, matrix_name
from .fm_exceptions import ShapeError, UndefinedStatisticError
from .fm_masking import BinaryMask, magnitude_order
from .fm_numerics import RngStream
from .fm_utilities import TensorMap

_LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True)
class L1Distance:
    """Sums of absolute differences and their per-element means."""

    per_tensor: dict[str, float]
    per_tensor_mean: dict[str, float]
    total: float
    mean: float


@dataclass(frozen=True)
class DistanceReport:
    """L1 and angular distances per tensor and over the flattened set.

    Per-tensor angular distance is None where either tensor is all zeros.
    """

    l1: L1Distance
    per_tensor_angular: dict[str, float | None]
    angular: float


def l1_distance(a: TensorMap, b: TensorMap, names: Iterable[str] | None = None) -> L1Distance:
    """Σ|aᵢ − bᵢ| per tensor and globally."""
    names = a.names if names is None else list(names)
    a.congruent(b, names)
    per_tensor, per_tensor_mean = {}, {}
    total = 0.0
    size = 0
    for name in names:
        value = float(np.abs(a[name] - b[name]).sum())
        per_tensor[name] = value
        per_tensor_mean[name] = value / a[name].size
        total += value
        size += a[name].size
    return L1Distance(per_tensor, per_tensor_mean, total, total / size if size else 0.0)


def angular_distance(a, b) -> float:
    """arccos of the clamped cosine similarity, divided by π.

    Accepts arrays or TensorMaps; maps are flattened in order.

    >>> angular_distance(np.array([1.0, 0.0]), np.array([0.0, 2.0]))
    0.5
    """
    a = a.flatten() if isinstance(a, TensorMap) else np.ravel(a)
    b = b.flatten() if isinstance(b, TensorMap) else np.ravel(b)
    if a.shape != b.shape:
        raise ShapeError(f"angular_distance: shapes {a.shape} and {b.shape} differ")
    norms = float(np.linalg.norm(a)) * float(np.linalg.norm(b))
    if norms == 0.0:
        raise UndefinedStatisticError("angular distance of a zero vector is undefined")
    cosine = min(1.0, max(-1.0, float(np.dot(a, b)) / norms))
    return math.acos(cosine) / math.pi


def distance_report(a: TensorMap, b: TensorMap, names: Iterable[str] | None = None) -> DistanceReport:
    """Per-tensor and global L1 and angular distances."""
    names = a.names if names is None else list(names)
    angular = {}
    for name in names:
        try:
            angular[name] = angular_distance(a[name], b[name])
        except UndefinedStatisticError:
            angular[name] = None
    return DistanceReport(
        l1=l1_distance(a, b, names),
        per_tensor_angular=angular,
        angular=angular_distance(a.flatten(names), b.flatten(names)),
    )


@dataclass(frozen=True)
class LayerDistance:
    """Closeness of one block matrix."""

    block: int
    role: str
    name: str
    l1: float
    l1_mean: float
    angular: float | None


def per_layer_closeness(reference: TensorMap, tuned: TensorMap, config: ModelConfig) -> list[LayerDistance]:
    """Rows keyed by (block, role) over the six block matrices.

    A row whose angular distance is undefined (an all-zero matrix) carries None.
    """
    rows = []
    for block in range(1, config.num_blocks + 1):
        for role in MatrixRole.ALL:
            name = matrix_name(block, role)
            l1 = l1_distance(reference, tuned, [name])
            try:
                angular = angular_distance(reference[name], tuned[name])
            except UndefinedStatisticError:
                _LOGGER.warning("Angular distance of %s is undefined", name)
                angular = None
            rows.append(
                LayerDistance(
                    block=block,
                    role=role,
                    name=name,
                    l1=l1.total,
                    l1_mean=l1.mean,
                    angular=angular,
                )
            )
    return rows


@dataclass(frozen=True)
class LayerSparsity:
    """Sparsity of one masked tensor."""

    block: int
    role: str
    name: str
    sparsity: float


def _block_role(name: str) -> tuple[int, str]:
    """Split `block{i}.attn.{role}.w` into (i, role); embeddings map to block 0."""
    parts = name.split(".")
    if parts[0].startswith("block"):
        return int(parts[0][len("block") :]), parts[2]
    return 0, parts[-1]


def layer_sparsity(mask: BinaryMask) -> list[LayerSparsity]:
    """Fraction of zeros per masked tensor, keyed by (block, role)."""
    rows = []
    for name, value in mask.items():
        block, role = _block_role(name)
        rows.append(LayerSparsity(block, role, name, 1.0 - np.count_nonzero(value) / value.size))
    return rows


@dataclass(frozen=True)
class OverlapGrid:
    """Row-normalized overlap of zero sets between task masks.

    values[a][b] is the fraction of task a's zeros also zero in task b, None
    when a has no zeros. chance[a][b] is sparsity(b). random_reference holds
    the same grid for random masks at matched sparsities, when requested.
    """

    tasks: list[str]
    values: list[list[float | None]]
    chance: list[list[float]]
    random_reference: list[list[float | None]] | None = None


def _zero_vector(mask: BinaryMask, name: str | None) -> np.ndarray:
    if name is None:
        return mask.flatten() == 0
    return mask[name].ravel() == 0


def _overlap_values(zeros: Sequence[np.ndarray]) -> list[list[float | None]]:
    grid = []
    for row in zeros:
        count = int(row.sum())
        grid.append(
            [None if count == 0 else float(np.logical_and(row, col).sum() / count) for col in zeros]
        )
    return grid


def random_mask_like(mask: BinaryMask, rng: RngStream) -> BinaryMask:
    """Mask with the same per-tensor zero counts at uniformly random positions."""
    entries = []
    for name, value in mask.items():
        zeros = int(value.size - np.count_nonzero(value))
        shuffled = np.ones(value.size, dtype=np.uint8)
        shuffled[rng.child(name).choice(value.size, zeros)] = 0
        entries.append((name, shuffled.reshape(value.shape)))
    return BinaryMask(entries)


def mask_overlap(
    masks: Mapping[str, BinaryMask], name: str | None = None, rng: RngStream | None = None
) -> OverlapGrid:
    """Overlap of zero sets for one tensor, or globally when name is None."""
    tasks = list(masks)
    if not tasks:
        raise ShapeError("mask_overlap needs at least one mask")
    first = masks[tasks[0]]
    for task in tasks[1:]:
        if masks[task].names != first.names:
            raise ShapeError(f"Mask {task} covers different tensors than {tasks[0]}")
        first.congruent(masks[task])
    zeros = [_zero_vector(masks[task], name) for task in tasks]
    densities = [float(row.mean()) for row in zeros]
    reference = None
    if rng is not None:
        randomized = [random_mask_like(masks[task], rng.child(f"random.{task}")) for task in tasks]
        reference = _overlap_values([_zero_vector(mask, name) for mask in randomized])
    return OverlapGrid(
        tasks=tasks,
        values=_overlap_values(zeros),
        chance=[list(densities) for _ in tasks],
        random_reference=reference,
    )


@dataclass(frozen=True)
class MagnitudeStats:
    """|θ̃| over supermask zeros against equal-sparsity magnitude-pruned zeros."""

    supermask_max: float
    supermask_mean: float
    pruned_max: float
    pruned_mean: float
    overlap: float
    sparsity: float


def pruned_magnitude_stats(reference: TensorMap, mask: BinaryMask) -> MagnitudeStats:
    """Compare magnitudes under mask zeros with magnitude pruning at equal per-tensor sparsity."""
    reference.congruent(mask, mask.names)
    supermask, pruned = [], []
    shared = 0
    for name, value in mask.items():
        magnitudes = np.abs(reference[name]).ravel()
        zero_set = np.flatnonzero(value.ravel() == 0)
        pruned_set = magnitude_order(reference[name])[: zero_set.size]
        supermask.append(magnitudes[zero_set])
        pruned.append(magnitudes[pruned_set])
        shared += np.intersect1d(zero_set, pruned_set).size
    supermask_values = np.concatenate(supermask)
    if supermask_values.size == 0:
        raise UndefinedStatisticError("mask has no zeros; magnitude statistics are undefined")
    pruned_values = np.concatenate(pruned)
    return MagnitudeStats(
        supermask_max=float(supermask_values.max()),
        supermask_mean=float(supermask_values.mean()),
        pruned_max=float(pruned_values.max()),
        pruned_mean=float(pruned_values.mean()),
        overlap=shared / supermask_values.size,
        sparsity=supermask_values.size / mask.size,
    )


@dataclass(frozen=True)
class PowerLawFit:
    """distance ≈ exp(intercept)·steps^exponent."""

    exponent: float
    intercept: float
    r_squared: float


def powerlaw_fit(points: Sequence[tuple[float, float]]) -> PowerLawFit:
    """Ordinary least squares on (log steps, log distance).

    >>> fit = powerlaw_fit([(1, 3.0), (4, 6.0), (16, 12.0)])
    >>> round(fit.exponent, 9), round(fit.r_squared, 9)
    (0.5, 1.0)
    """
    values = np.asarray(points, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] < 3 or values.shape[1] != 2:
        raise UndefinedStatisticError("power-law fit needs at least three (step, distance) points")
    if (values <= 0).any():
        raise UndefinedStatisticError("power-law fit needs positive steps and distances")
    logs = np.log(values)
    if np.ptp(logs[:, 0]) == 0:
        raise UndefinedStatisticError("power-law fit needs at least two distinct steps")
    fit = stats.linregress(logs[:, 0], logs[:, 1])
    return PowerLawFit(float(fit.slope), float(fit.intercept), float(fit.rvalue**2))


@dataclass(frozen=True)
class DistanceGrowth:
    """Rank correlation of distance with step, and the power-law fit."""

    spearman: float
    fit: PowerLawFit | None


def distance_growth(points: Sequence[tuple[float, float]]) -> DistanceGrowth:
    """Spearman ρ between step and distance; the fit uses the positive points."""
    values = np.asarray(points, dtype=np.float64)
    if values.shape[0] < 3:
        raise UndefinedStatisticError("distance growth needs at least three checkpoints")
    rho = stats.spearmanr(values[:, 0], values[:, 1]).statistic
    positive = values[(values > 0).all(axis=1)]
    fit = powerlaw_fit(positive) if positive.shape[0] >= 3 else None
    return DistanceGrowth(float(rho), fit)


def expected_uniform_l1(bound: float) -> float:
    """E|x − y| for independent x, y ~ U(−bound, bound)."""
    return 2.0 * bound / 3.0


def random_pair_distance(config: ModelConfig, scheme: str, rng: RngStream) -> DistanceReport:
    """Distances between two independent initializations over the block matrices."""
    first = init_model(config, scheme, rng.child("first"))
    second = init_model(config, scheme, rng.child("second"))
    names = [
        matrix_name(block, role)
        for block in range(1, config.num_blocks + 1)
        for role in MatrixRole.ALL
    ]
    return distance_report(first, second, names)
