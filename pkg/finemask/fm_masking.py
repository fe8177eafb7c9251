"""Supermasks, magnitude pruning and tensor freezing."""

from __future__ import annotations

from collections.abc import Iterable
from dataclasses import dataclass, field
import logging
import math

import numpy as np
from scipy.special import expit

from .fm_const import MASK_PARAM_MAGNITUDE, PRUNE_EVERY, FreezePreset, MatrixRole, StraightThrough
from .fm_encoder import (
    ATTENTION_ROLES,
    ModelConfig,
    block_prefix,
    canonical_names,
    matrix_name,
    parameter_count,
    parameter_shapes,
)
from .fm_exceptions import ConfigError, ShapeError
from .fm_numerics import RngStream
from .fm_utilities import TensorMap

_LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True)
class MaskableSet:
    """Ordered names of tensors eligible for masking."""

    names: tuple[str, ...]

    @classmethod
    def default(cls, config: ModelConfig, include_embedding: bool = True) -> MaskableSet:
        """Six block matrices per block, plus the word embedding when asked."""
        names = [
            matrix_name(block, role)
            for block in range(1, config.num_blocks + 1)
            for role in MatrixRole.ALL
        ]
        if include_embedding:
            names.insert(0, "embed.word")
        return cls(tuple(names))

    def excluding(self, names: Iterable[str]) -> MaskableSet:
        """Return the set without names, keeping order."""
        dropped = set(names)
        return MaskableSet(tuple(name for name in self.names if name not in dropped))

    def validate(self, params: TensorMap) -> None:
        """Raise ShapeError for names missing from params or non-matrix entries."""
        for name in self.names:
            if name not in params:
                raise ShapeError(f"Maskable tensor {name} not in parameter set")
            if params[name].ndim != 2:
                raise ShapeError(f"Maskable tensor {name} must be a matrix, got {params[name].shape}")

    def __iter__(self):
        """Iterate names."""
        return iter(self.names)

    def __len__(self) -> int:
        """Return name count."""
        return len(self.names)


class MaskParameters(TensorMap):
    """Real-valued ν tensors, one per maskable tensor."""


class BinaryMask(TensorMap):
    """μ tensors with entries in {0, 1}, stored as uint8."""

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        """Replace a tensor, rejecting entries other than 0 and 1."""
        value = np.asarray(value)
        if value.size and not np.isin(value, (0, 1)).all():
            raise ShapeError(f"{name}: mask entries must be 0 or 1")
        super().__setitem__(name, value.astype(np.uint8))

    @classmethod
    def from_arrays(cls, entries: Iterable[tuple[str, np.ndarray]]) -> BinaryMask:
        """Build a mask, validating every entry."""
        mask = cls()
        for name, value in entries:
            mask[name] = value
        return mask

    @classmethod
    def ones_like(cls, params: TensorMap, maskable: Iterable[str]) -> BinaryMask:
        """Return the all-ones mask over maskable."""
        return cls((name, np.ones(params[name].shape, dtype=np.uint8)) for name in maskable)

    def zeros(self) -> int:
        """Return total count of zero entries."""
        return sum(int(value.size - np.count_nonzero(value)) for _, value in self.items())


@dataclass(frozen=True)
class SparsityReport:
    """Fraction of zeros per tensor and globally.

    `global_sparsity` counts every mask tensor; `block_sparsity` leaves out
    the word embedding so it covers only the block matrices.
    """

    per_tensor: dict[str, float]
    global_sparsity: float
    block_sparsity: float
    zeros: int
    size: int


def sparsity(mask: BinaryMask) -> SparsityReport:
    """Zeros over size per tensor, globally, and over block matrices only."""
    per_tensor = {}
    zeros = size = block_zeros = block_size = 0
    for name, value in mask.items():
        tensor_zeros = int(value.size - np.count_nonzero(value))
        per_tensor[name] = tensor_zeros / value.size if value.size else 0.0
        zeros += tensor_zeros
        size += value.size
        if name.startswith("block"):
            block_zeros += tensor_zeros
            block_size += value.size
    return SparsityReport(
        per_tensor=per_tensor,
        global_sparsity=zeros / size if size else 0.0,
        block_sparsity=block_zeros / block_size if block_size else 0.0,
        zeros=zeros,
        size=size,
    )


def magnitude_order(values: np.ndarray, previous: np.ndarray | None = None) -> np.ndarray:
    """Flat indices sorted by (not previously kept, |value|, index), smallest first."""
    flat = np.abs(values).ravel()
    order = np.argsort(flat, kind="stable")
    if previous is None:
        return order
    pruned_first = np.argsort(previous.ravel()[order], kind="stable")
    return order[pruned_first]


def _prune_count(fraction: float, size: int) -> int:
    return int(math.floor(fraction * size))


def init_mask_params(
    params: TensorMap,
    maskable: MaskableSet,
    initial_sparsity: float,
    magnitude: float = MASK_PARAM_MAGNITUDE,
) -> MaskParameters:
    """Set ν = −magnitude on the ⌊s·size⌋ smallest |θ̃| entries per tensor, +magnitude elsewhere.

    >>> from finemask.fm_utilities import TensorMap
    >>> theta = TensorMap([("w", np.array([[0.1, -0.05], [0.3, 0.02]]))])
    >>> init_mask_params(theta, MaskableSet(("w",)), 0.5)["w"]
    array([[ 5., -5.],
           [ 5., -5.]])
    """
    if not 0.0 <= initial_sparsity < 1.0:
        raise ConfigError(f"initial sparsity must be in [0, 1), got {initial_sparsity}")
    entries = []
    for name in maskable:
        value = params[name]
        nu = np.full(value.size, magnitude)
        nu[magnitude_order(value)[: _prune_count(initial_sparsity, value.size)]] = -magnitude
        entries.append((name, nu.reshape(value.shape)))
    return MaskParameters(entries)


def sample_mask(nu: MaskParameters, rng: RngStream) -> BinaryMask:
    """Draw μ ~ Bernoulli(σ(ν)) with one child stream per tensor."""
    return BinaryMask(
        (name, rng.child(f"mask.{name}").bernoulli(expit(value))) for name, value in nu.items()
    )


def threshold_mask(nu: MaskParameters) -> BinaryMask:
    """Deterministic μ = 1[σ(ν) > 0.5], i.e. 1[ν > 0]."""
    return BinaryMask((name, (value > 0).astype(np.uint8)) for name, value in nu.items())


def straight_through_grad(
    upstream: TensorMap, nu: MaskParameters, rule: str = StraightThrough.SIGMOID
) -> TensorMap:
    """Gradient wrt ν from the gradient wrt μ, treating the sampler as identity.

    The sigmoid rule keeps σ′(ν); the identity rule passes upstream through.
    """
    nu.congruent(upstream)
    if rule == StraightThrough.IDENTITY:
        return TensorMap((name, upstream[name].copy()) for name in nu)
    if rule != StraightThrough.SIGMOID:
        raise ConfigError(f"Unknown straight-through rule: {rule}")
    grads = []
    for name, value in nu.items():
        prob = expit(value)
        grads.append((name, upstream[name] * prob * (1.0 - prob)))
    return TensorMap(grads)


def apply_mask(params: TensorMap, mask: TensorMap) -> TensorMap:
    """Return θ̃ ⊙ μ on masked names; other tensors are copied unchanged."""
    params.congruent(mask, mask.names)
    return params.map(
        lambda name, value: value * mask[name] if name in mask else value.copy()
    )


@dataclass(frozen=True)
class PruneSchedule:
    """Cubic sparsity ramp for iterative magnitude pruning."""

    final_sparsity: float
    total_steps: int
    prune_every: int = PRUNE_EVERY

    def __post_init__(self) -> None:
        """Validate."""
        if not 0.0 <= self.final_sparsity < 1.0:
            raise ConfigError(f"final sparsity must be in [0, 1), got {self.final_sparsity}")
        if self.total_steps < 1 or self.prune_every < 1:
            raise ConfigError("total_steps and prune_every must be positive")


def cubic_sparsity(step: int, schedule: PruneSchedule) -> float:
    """s(t) = s_f·(1 − (1 − t/T)³).

    >>> cubic_sparsity(5, PruneSchedule(0.5, 10))
    0.4375
    """
    if not 0 <= step <= schedule.total_steps:
        raise ConfigError(f"step {step} outside [0, {schedule.total_steps}]")
    remaining = 1.0 - step / schedule.total_steps
    return schedule.final_sparsity * (1.0 - remaining**3)


def magnitude_prune(
    params: TensorMap,
    maskable: Iterable[str],
    target_sparsity: float,
    previous: BinaryMask | None = None,
) -> BinaryMask:
    """Zero the ⌊s·size⌋ smallest-magnitude entries of each tensor.

    Ties prune the lower flat index first. With previous, entries it already
    zeroed are pruned before any others, so zeros never revive as long as the
    target does not decrease.
    """
    if not 0.0 <= target_sparsity < 1.0:
        raise ConfigError(f"target sparsity must be in [0, 1), got {target_sparsity}")
    entries = []
    for name in maskable:
        value = params[name]
        mask = np.ones(value.size, dtype=np.uint8)
        prior = None if previous is None else previous[name]
        mask[magnitude_order(value, prior)[: _prune_count(target_sparsity, value.size)]] = 0
        entries.append((name, mask.reshape(value.shape)))
    return BinaryMask(entries)


def shuffle_within_tensors(params: TensorMap, maskable: Iterable[str], rng: RngStream) -> TensorMap:
    """Permute entries uniformly at random within each maskable tensor."""
    shuffled = params.copy()
    for name in maskable:
        value = params[name]
        permutation = rng.child(f"shuffle.{name}").permutation(value.size)
        shuffled[name] = value.ravel()[permutation].reshape(value.shape)
    return shuffled


@dataclass(frozen=True)
class FreezeSpec:
    """Tensors whose gradients are forced to zero during fine-tuning."""

    excluded: frozenset[str]
    config: ModelConfig = field(compare=False)
    presets: tuple[str, ...] = ()
    allow_full_freeze: bool = field(default=False, compare=False)

    def __post_init__(self) -> None:
        """Validate names and that something is left to train."""
        names = set(canonical_names(self.config))
        unknown = sorted(self.excluded - names)
        if unknown:
            raise ConfigError(f"FreezeSpec names not in parameter set: {unknown}")
        if self.trainable_count <= 0 and not self.allow_full_freeze:
            raise ConfigError("FreezeSpec leaves no encoder parameter trainable")

    @classmethod
    def from_presets(cls, config: ModelConfig, presets: Iterable[str]) -> FreezeSpec:
        """Union of layer-exclusion presets."""
        presets = tuple(presets)
        excluded: set[str] = set()
        for preset in presets:
            excluded |= preset_names(config, preset)
        return cls(frozenset(excluded), config, presets)

    @classmethod
    def head_only(cls, config: ModelConfig) -> FreezeSpec:
        """Freeze the whole encoder."""
        return cls(frozenset(canonical_names(config)), config, allow_full_freeze=True)

    @property
    def excluded_count(self) -> int:
        """Return number of frozen parameters."""
        shapes = parameter_shapes(self.config)
        return sum(int(np.prod(shapes[name])) for name in self.excluded)

    @property
    def trainable_count(self) -> int:
        """Return N minus frozen parameters."""
        return parameter_count(self.config) - self.excluded_count

    def trainable_names(self) -> list[str]:
        """Return canonical names not excluded."""
        return [name for name in canonical_names(self.config) if name not in self.excluded]


def preset_names(config: ModelConfig, preset: str) -> set[str]:
    """Tensor names of one layer-exclusion preset."""
    names = canonical_names(config)
    if preset == FreezePreset.KEY_PROJECTIONS:
        key = ATTENTION_ROLES[1]
        return {
            f"{block_prefix(block)}.attn.{key}.{part}"
            for block in range(1, config.num_blocks + 1)
            for part in ("w", "b")
        }
    if preset == FreezePreset.DEEPEST_BLOCKS:
        deepest = {
            block_prefix(block) + "."
            for block in range(max(1, config.num_blocks - 1), config.num_blocks + 1)
        }
        return {name for name in names if any(name.startswith(prefix) for prefix in deepest)}
    if preset == FreezePreset.WORD_EMBEDDING:
        return {"embed.word"}
    raise ConfigError(f"Unknown freeze preset: {preset}")
