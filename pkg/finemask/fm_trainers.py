"""Pre-training and the fine-tuning procedures.

Every procedure is a pure function of its inputs and RngStream: batches,
dropout, mask samples and head initialization draw from named child streams,
so re-running with the same seed reproduces the RunRecord bit for bit.
"""

from __future__ import annotations

from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from datetime import datetime, timezone
import logging
import math
from pathlib import Path

import numpy as np

from .fm_const import (
    DEFAULT_ADAM_EPS,
    DEFAULT_BATCH_SIZE,
    DEFAULT_BETAS,
    DEFAULT_EVAL_EVERY,
    DEFAULT_LOG_EVERY,
    DEFAULT_MASK_LR,
    DEFAULT_TOTAL_STEPS,
    DEFAULT_WARMUP_FRACTION,
    DEFAULT_WEIGHT_LR,
    MASK_EVAL_SAMPLES,
    MASK_PARAM_MAGNITUDE,
    MASK_TOKEN,
    MLM_MASK_FRACTION,
    RUN_RECORD_COLUMNS,
    HeadKind,
    InitScheme,
    Metric,
    StraightThrough,
)
from .fm_encoder import (
    ModelConfig,
    ParameterSet,
    TaskHead,
    bind_weights,
    encode_batch,
    group_by_length,
    head_forward,
    hidden_states,
    init_head,
    init_model,
    mlm_logits,
    pooled_features,
    validate_tokens,
)
from .fm_exceptions import ConfigError, DivergenceError, FinemaskError, NonFiniteError
from .fm_geometry import angular_distance, l1_distance
from .fm_masking import (
    BinaryMask,
    FreezeSpec,
    MaskableSet,
    MaskParameters,
    PruneSchedule,
    apply_mask,
    cubic_sparsity,
    init_mask_params,
    magnitude_prune,
    sample_mask,
    shuffle_within_tensors,
    sparsity,
    straight_through_grad,
    threshold_mask,
)
from .fm_numerics import (
    RngStream,
    Tensor,
    add,
    cross_entropy,
    gradients,
    index,
    mul,
    reshape,
    squared_error,
)
from .fm_taskgen import Corpus, MetricValue, Task, evaluate
from .fm_utilities import TensorMap, parse_optional_float, read_csv, write_csv

_LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimizerConfig:
    """Adam with linear warmup and linear decay."""

    weight_lr: float = DEFAULT_WEIGHT_LR
    mask_lr: float = DEFAULT_MASK_LR
    beta1: float = DEFAULT_BETAS[0]
    beta2: float = DEFAULT_BETAS[1]
    eps: float = DEFAULT_ADAM_EPS
    warmup_fraction: float = DEFAULT_WARMUP_FRACTION
    total_steps: int = DEFAULT_TOTAL_STEPS
    batch_size: int = DEFAULT_BATCH_SIZE
    weight_decay: float = 0.0
    eval_every: int = DEFAULT_EVAL_EVERY
    log_every: int = DEFAULT_LOG_EVERY

    def __post_init__(self) -> None:
        """Validate."""
        if self.weight_lr <= 0 or self.mask_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ConfigError(f"warmup_fraction must be in [0, 1), got {self.warmup_fraction}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0) or self.eps <= 0:
            raise ConfigError("betas must be in [0, 1) and eps positive")
        if self.total_steps < 0:
            raise ConfigError(f"total_steps must not be negative, got {self.total_steps}")
        if self.batch_size < 1 or self.eval_every < 1 or self.log_every < 1:
            raise ConfigError("batch_size, eval_every and log_every must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must not be negative")

    @property
    def warmup_steps(self) -> int:
        """Return W = ⌊f·T⌋."""
        return int(math.floor(self.warmup_fraction * self.total_steps))


def learning_rate(update: int, peak: float, opt: OptimizerConfig) -> float:
    """Linear warmup to peak over W updates, then linear decay to zero at T.

    >>> opt = OptimizerConfig(total_steps=10, warmup_fraction=0.2)
    >>> [learning_rate(k, 1.0, opt) for k in (0, 1, 2, 6, 10)]
    [0.0, 0.5, 1.0, 0.5, 0.0]
    """
    total, warmup = opt.total_steps, opt.warmup_steps
    if update < warmup:
        return peak * update / warmup
    if total == warmup:
        return 0.0
    return peak * max(0.0, (total - update) / (total - warmup))


class Adam:
    """Adam updating named arrays in place, with decoupled weight decay."""

    def __init__(self, peak_lr: float, opt: OptimizerConfig) -> None:
        """Init."""
        self.peak_lr = peak_lr
        self.opt = opt
        self.updates = 0
        self._first: dict[str, np.ndarray] = {}
        self._second: dict[str, np.ndarray] = {}

    def step(self, values: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> float:
        """Apply one update to every named array in grads; return the lr used."""
        lr = learning_rate(self.updates, self.peak_lr, self.opt)
        self.updates += 1
        beta1, beta2 = self.opt.beta1, self.opt.beta2
        first_correction = 1.0 - beta1**self.updates
        second_correction = 1.0 - beta2**self.updates
        for name, grad in grads.items():
            first = self._first.get(name, 0.0) * beta1 + (1.0 - beta1) * grad
            second = self._second.get(name, 0.0) * beta2 + (1.0 - beta2) * grad * grad
            self._first[name], self._second[name] = first, second
            update = (first / first_correction) / (
                np.sqrt(second / second_correction) + self.opt.eps
            )
            if self.opt.weight_decay:
                update = update + self.opt.weight_decay * values[name]
            values[name] -= lr * update
        return lr


@dataclass(frozen=True)
class Checkpoint:
    """Metrics recorded after a given number of updates."""

    step: int
    metric: float | None = None
    sparsity: float | None = None
    angular_distance: float | None = None
    l1_distance: float | None = None


@dataclass
class RunRecord:
    """Per-step losses and per-checkpoint metrics of one run."""

    losses: list[float] = field(default_factory=list)
    checkpoints: list[Checkpoint] = field(default_factory=list)
    iterations: int = 0
    started_at: datetime | None = None
    finished_at: datetime | None = None
    summary: dict = field(default_factory=dict)

    @property
    def wall_clock(self) -> float | None:
        """Return run time in seconds."""
        if self.started_at is None or self.finished_at is None:
            return None
        return (self.finished_at - self.started_at).total_seconds()

    def add_checkpoint(self, checkpoint: Checkpoint) -> None:
        """Append, keeping steps strictly increasing."""
        if self.checkpoints and checkpoint.step <= self.checkpoints[-1].step:
            raise FinemaskError(
                f"checkpoint step {checkpoint.step} not after {self.checkpoints[-1].step}"
            )
        self.checkpoints.append(checkpoint)

    def rows(self) -> list[dict]:
        """One row per update; checkpoint columns filled where recorded."""
        by_step = {checkpoint.step: checkpoint for checkpoint in self.checkpoints}
        rows = []
        for step in sorted(set(range(1, len(self.losses) + 1)) | set(by_step)):
            checkpoint = by_step.get(step, Checkpoint(step))
            rows.append(
                {
                    "step": step,
                    "loss": self.losses[step - 1] if step <= len(self.losses) else None,
                    "metric": checkpoint.metric,
                    "sparsity": checkpoint.sparsity,
                    "angular_distance": checkpoint.angular_distance,
                    "l1_distance": checkpoint.l1_distance,
                }
            )
        return rows

    def distance_points(self) -> list[tuple[int, float]]:
        """(step, angular distance) at checkpoints that recorded one."""
        return [
            (checkpoint.step, checkpoint.angular_distance)
            for checkpoint in self.checkpoints
            if checkpoint.angular_distance is not None
        ]


def write_run_record(record: RunRecord, path: str | Path) -> Path:
    """Write the RunRecord CSV."""
    return write_csv(path, RUN_RECORD_COLUMNS, record.rows())


def read_run_record(path: str | Path) -> RunRecord:
    """Read a RunRecord CSV back; wall-clock and summary are not stored."""
    record = RunRecord()
    for row in read_csv(path):
        step = int(row["step"])
        loss = parse_optional_float(row["loss"])
        if loss is not None:
            record.losses.append(loss)
        values = {column: parse_optional_float(row[column]) for column in RUN_RECORD_COLUMNS[2:]}
        if any(value is not None for value in values.values()):
            record.add_checkpoint(Checkpoint(step, **values))
    record.iterations = len(record.losses)
    return record


def _start(record: RunRecord) -> None:
    record.started_at = datetime.now(timezone.utc)


def _finish(record: RunRecord, label: str) -> RunRecord:
    record.finished_at = datetime.now(timezone.utc)
    last = record.checkpoints[-1].metric if record.checkpoints else None
    _LOGGER.info(
        "%s finished: %d updates, final loss %s, final metric %s",
        label,
        record.iterations,
        record.losses[-1] if record.losses else None,
        last,
    )
    return record


def _checked_step(
    step: int, record: RunRecord, compute: Callable[[], tuple[Tensor, dict]]
) -> tuple[Tensor, dict]:
    """Run forward and backward, translating non-finite values into divergence."""
    last = record.losses[-1] if record.losses else None
    try:
        loss, grads = compute()
    except NonFiniteError as err:
        _LOGGER.error("Training diverged at step %d (last loss %s)", step, last)
        raise DivergenceError(step, last) from err
    if not math.isfinite(loss.item()):
        _LOGGER.error("Training diverged at step %d (last loss %s)", step, last)
        raise DivergenceError(step, last)
    return loss, grads


def _sample_batch(size: int, batch_size: int, rng: RngStream, step: int) -> np.ndarray:
    return np.sort(rng.child(f"batch.{step}").choice(size, min(batch_size, size)))


def _weighted_sum(parts: Sequence[tuple[Tensor, float]]) -> Tensor:
    total = None
    for loss, weight in parts:
        term = mul(loss, weight)
        total = term if total is None else add(total, term)
    return total


def mlm_positions(length: int, count: int, rng: RngStream) -> np.ndarray:
    """Choose masked positions per sequence, never the CLS position."""
    per_sequence = max(1, int(round(MLM_MASK_FRACTION * (length - 1))))
    return np.stack(
        [
            1 + np.sort(rng.child(str(row)).choice(length - 1, per_sequence))
            for row in range(count)
        ]
    )


def mlm_loss(
    weights: Mapping[str, Tensor],
    tokens: np.ndarray,
    config: ModelConfig,
    rng: RngStream,
    training: bool,
) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Cross-entropy on positions replaced by MASK; returns (loss, logits, targets)."""
    positions = mlm_positions(tokens.shape[1], tokens.shape[0], rng.child("positions"))
    rows = np.repeat(np.arange(tokens.shape[0]), positions.shape[1])
    cols = positions.ravel()
    corrupted = tokens.copy()
    corrupted[rows, cols] = MASK_TOKEN
    states = hidden_states(weights, corrupted, config, rng.child("dropout"), training)
    logits = mlm_logits(weights, index(states, (rows, cols)))
    targets = tokens[rows, cols]
    return cross_entropy(logits, targets), logits.data, targets


def masked_token_accuracy(
    params: ParameterSet, sequences: Sequence[np.ndarray], rng: RngStream
) -> float:
    """Eval-mode accuracy of recovering MASKed tokens."""
    weights = bind_weights(params).weights
    correct = total = 0
    for length, positions in group_by_length(sequences).items():
        tokens = validate_tokens(np.stack([sequences[i] for i in positions]), params.config)
        _, logits, targets = mlm_loss(weights, tokens, params.config, rng.child(f"len{length}"), False)
        correct += int((logits.argmax(axis=1) == targets).sum())
        total += targets.size
    return correct / total


def unigram_baseline(sequences: Sequence[np.ndarray]) -> float:
    """Accuracy of always predicting the most frequent non-CLS token."""
    counts = np.bincount(np.concatenate([tokens[1:] for tokens in sequences]))
    return float(counts.max() / counts.sum())


def pretrain(
    config: ModelConfig,
    corpus: Corpus | Sequence[np.ndarray],
    opt: OptimizerConfig,
    rng: RngStream,
    scheme: str = InitScheme.UNIFORM,
) -> tuple[ParameterSet, RunRecord]:
    """Masked-token pre-training from a fresh initialization."""
    sequences = corpus.sequences if isinstance(corpus, Corpus) else list(corpus)
    if not sequences:
        raise ConfigError("pre-training corpus is empty")
    params = init_model(config, scheme, rng.child("init"))
    names = params.names
    adam = Adam(opt.weight_lr, opt)
    record = RunRecord(summary={"unigram_baseline": unigram_baseline(sequences)})
    probe = sequences[: min(len(sequences), 256)]
    _start(record)
    for step in range(1, opt.total_steps + 1):
        chosen = _sample_batch(len(sequences), opt.batch_size, rng, step)
        batch = [sequences[i] for i in chosen]

        def compute() -> tuple[Tensor, dict]:
            binding = bind_weights(params, trainable=names)
            parts = []
            for length, positions in group_by_length(batch).items():
                tokens = validate_tokens(np.stack([batch[i] for i in positions]), config)
                loss, _, _ = mlm_loss(
                    binding.weights, tokens, config, rng.child(f"step.{step}.len{length}"), True
                )
                parts.append((loss, len(positions) / len(batch)))
            loss = _weighted_sum(parts)
            grads = gradients(loss, list(binding.param_leaves.values()))
            return loss, {name: grads[leaf] for name, leaf in binding.param_leaves.items()}

        loss, grads = _checked_step(step, record, compute)
        adam.step(params, grads)
        record.losses.append(loss.item())
        record.iterations = step
        if step % opt.log_every == 0:
            _LOGGER.debug("pretrain step %d loss %.6f", step, loss.item())
        if step % opt.eval_every == 0 or step == opt.total_steps:
            record.add_checkpoint(
                Checkpoint(step, metric=masked_token_accuracy(params, probe, rng.child("probe")))
            )
    return params, _finish(record, "Pre-training")


def _head_loss(
    weights: Mapping[str, Tensor],
    head: TaskHead,
    head_tensors: tuple[Tensor, Tensor],
    sequences: Sequence[np.ndarray],
    labels: np.ndarray,
    config: ModelConfig,
    rng: RngStream,
    training: bool,
) -> Tensor:
    """Task loss over a batch, grouping sequences of equal length."""
    parts = []
    for length, positions in group_by_length(sequences).items():
        tokens = validate_tokens(np.stack([sequences[i] for i in positions]), config)
        pooled = encode_batch(weights, tokens, config, rng.child(f"len{length}"), training)
        logits = head_forward(head, pooled, head_tensors)
        if head.kind == HeadKind.REGRESSION:
            loss = squared_error(reshape(logits, (len(positions),)), labels[positions])
        else:
            loss = cross_entropy(logits, labels[positions])
        parts.append((loss, len(positions) / len(sequences)))
    return _weighted_sum(parts)


def predict(
    params: ParameterSet,
    head: TaskHead,
    sequences: Sequence[np.ndarray],
    mask: TensorMap | None = None,
) -> np.ndarray:
    """Eval-mode class predictions."""
    if not sequences:
        return np.zeros(0, dtype=np.int64)
    logits = pooled_features(params, sequences, mask) @ head.weights + head.bias
    return logits.argmax(axis=1)


def evaluate_model(
    params: ParameterSet,
    head: TaskHead,
    task: Task,
    metric: str = Metric.ACCURACY,
    mask: TensorMap | None = None,
) -> MetricValue:
    """Metric on the eval split."""
    return evaluate(predict(params, head, task.sequences("eval"), mask), task.labels("eval"), metric)


def _head_arrays(head: TaskHead) -> dict[str, np.ndarray]:
    return {"head.w": head.weights, "head.b": head.bias}


def _distances(reference: TensorMap, current: TensorMap) -> tuple[float, float]:
    return (
        angular_distance(reference.flatten(), current.flatten()),
        l1_distance(reference, current).total,
    )


def _finetune_weights(
    reference: ParameterSet,
    task: Task,
    opt: OptimizerConfig,
    rng: RngStream,
    trainable: Sequence[str],
    metric: str,
    schedule: PruneSchedule | None = None,
    maskable: MaskableSet | None = None,
    dropout: bool = True,
) -> tuple[ParameterSet, BinaryMask | None, TaskHead, RunRecord]:
    """Shared loop of baseline, L0-close, head-only and iterative-prune runs."""
    config = reference.config
    params = reference.copy()
    head = init_head(config, HeadKind.CLASSIFICATION, task.num_classes, rng.child("head"))
    weight_adam = Adam(opt.weight_lr, opt)
    sequences, labels = task.sequences("train"), task.labels("train")
    mask = None
    if schedule is not None:
        maskable = maskable or MaskableSet.default(config)
        mask = BinaryMask.ones_like(params, maskable)
    record = RunRecord()
    _start(record)
    for step in range(1, opt.total_steps + 1):
        chosen = _sample_batch(len(sequences), opt.batch_size, rng, step)
        batch, batch_labels = [sequences[i] for i in chosen], labels[chosen]

        def compute() -> tuple[Tensor, dict]:
            binding = bind_weights(params, mask=mask, trainable=trainable)
            head_tensors = head.tensors(requires_grad=True)
            loss = _head_loss(
                binding.weights,
                head,
                head_tensors,
                batch,
                batch_labels,
                config,
                rng.child(f"dropout.{step}"),
                dropout,
            )
            leaves = list(binding.param_leaves.items())
            grads = gradients(loss, [leaf for _, leaf in leaves] + list(head_tensors))
            named = {name: grads[leaf] for name, leaf in leaves}
            named["head.w"], named["head.b"] = grads[head_tensors[0]], grads[head_tensors[1]]
            return loss, named

        loss, grads = _checked_step(step, record, compute)
        weight_adam.step({**_tensor_dict(params), **_head_arrays(head)}, grads)
        if mask is not None:
            if step % schedule.prune_every == 0 or step == opt.total_steps:
                target = cubic_sparsity(min(step, schedule.total_steps), schedule)
                mask = magnitude_prune(params, maskable, target, previous=mask)
                _LOGGER.debug("Pruned to %.4f at step %d", target, step)
            for name in mask:
                params[name] *= mask[name]
        record.losses.append(loss.item())
        record.iterations = step
        if step % opt.log_every == 0:
            _LOGGER.debug("finetune step %d loss %.6f", step, loss.item())
        if step % opt.eval_every == 0 or step == opt.total_steps:
            angular, l1 = _distances(reference, params)
            record.add_checkpoint(
                Checkpoint(
                    step,
                    metric=evaluate_model(params, head, task, metric).value,
                    sparsity=None if mask is None else sparsity(mask).global_sparsity,
                    angular_distance=angular,
                    l1_distance=l1,
                )
            )
    return params, mask, head, record


def _tensor_dict(params: TensorMap) -> dict[str, np.ndarray]:
    return dict(params.items())


def finetune_baseline(
    reference: ParameterSet,
    task: Task,
    opt: OptimizerConfig,
    rng: RngStream,
    freeze: FreezeSpec | None = None,
    metric: str = Metric.ACCURACY,
    dropout: bool = True,
) -> tuple[ParameterSet, TaskHead, RunRecord]:
    """Train every non-frozen tensor and a new head; frozen tensors stay bit-identical."""
    trainable = reference.names if freeze is None else freeze.trainable_names()
    params, _, head, record = _finetune_weights(
        reference, task, opt, rng, trainable, metric, dropout=dropout
    )
    record.summary.update(
        trainable_parameters=reference.size if freeze is None else freeze.trainable_count,
        metric=record.checkpoints[-1].metric if record.checkpoints else None,
    )
    return params, head, _finish(record, "Fine-tuning")


def finetune_iterative_prune(
    reference: ParameterSet,
    task: Task,
    schedule: PruneSchedule,
    opt: OptimizerConfig,
    rng: RngStream,
    maskable: MaskableSet | None = None,
    metric: str = Metric.ACCURACY,
) -> tuple[ParameterSet, BinaryMask, TaskHead, RunRecord]:
    """Baseline training with magnitude pruning on the cubic schedule.

    Pruned entries are clamped to zero after every update and are ranked first
    at the next prune, so the mask only loses ones.
    """
    params, mask, head, record = _finetune_weights(
        reference, task, opt, rng, reference.names, metric, schedule, maskable
    )
    record.summary.update(
        final_sparsity=sparsity(mask).global_sparsity,
        metric=record.checkpoints[-1].metric if record.checkpoints else None,
    )
    return params, mask, head, _finish(record, "Iterative pruning")


def head_only_control(
    reference: ParameterSet,
    task: Task,
    opt: OptimizerConfig,
    rng: RngStream,
    metric: str = Metric.ACCURACY,
) -> RunRecord:
    """Train only the task head over the frozen encoder."""
    _, _, record = finetune_baseline(
        reference, task, opt, rng, FreezeSpec.head_only(reference.config), metric
    )
    record.summary["majority_rate"] = task.majority_rate
    return record


@dataclass(frozen=True)
class SupermaskEvaluation:
    """Metric over independent mask samples plus the threshold mask."""

    mean: float
    std: float
    values: list[float]
    threshold: float | None


def evaluate_supermask(
    reference: ParameterSet,
    nu: MaskParameters,
    head: TaskHead,
    task: Task,
    rng: RngStream,
    metric: str = Metric.ACCURACY,
    samples: int = MASK_EVAL_SAMPLES,
) -> SupermaskEvaluation:
    """Evaluate `samples` Bernoulli masks; undefined metrics count as zero."""
    values = []
    for number in range(samples):
        mask = sample_mask(nu, rng.child(f"eval.{number}"))
        result = evaluate(
            predict(reference, head, task.sequences("eval"), mask),
            task.labels("eval"),
            metric,
            undefined_as_zero=True,
        )
        values.append(result.value)
    threshold = evaluate_model(reference, head, task, metric, threshold_mask(nu)).value
    return SupermaskEvaluation(float(np.mean(values)), float(np.std(values)), values, threshold)


def finetune_supermask(
    reference: ParameterSet,
    task: Task,
    initial_sparsity: float,
    opt: OptimizerConfig,
    rng: RngStream,
    maskable: MaskableSet | None = None,
    freeze: FreezeSpec | None = None,
    straight_through: str = StraightThrough.SIGMOID,
    resample: bool = True,
    dropout: bool = True,
    magnitude: float = MASK_PARAM_MAGNITUDE,
    metric: str = Metric.ACCURACY,
) -> tuple[MaskParameters, TaskHead, RunRecord]:
    """Learn ν (at mask_lr) and a head (at weight_lr) over frozen θ̃.

    A fresh μ ~ Bernoulli(σ(ν)) is drawn for every update unless resample is
    off, in which case the threshold mask is used. Tensors frozen by freeze
    are dropped from the maskable set.
    """
    config = reference.config
    maskable = maskable or MaskableSet.default(config)
    if freeze is not None:
        maskable = maskable.excluding(freeze.excluded)
    maskable.validate(reference)
    nu = init_mask_params(reference, maskable, initial_sparsity, magnitude)
    initial_signs = np.signbit(nu.flatten())
    head = init_head(config, HeadKind.CLASSIFICATION, task.num_classes, rng.child("head"))
    mask_adam = Adam(opt.mask_lr, opt)
    head_adam = Adam(opt.weight_lr, opt)
    sequences, labels = task.sequences("train"), task.labels("train")
    record = RunRecord()
    _start(record)
    for step in range(1, opt.total_steps + 1):
        chosen = _sample_batch(len(sequences), opt.batch_size, rng, step)
        batch, batch_labels = [sequences[i] for i in chosen], labels[chosen]
        mask = sample_mask(nu, rng.child(f"sample.{step}")) if resample else threshold_mask(nu)

        def compute() -> tuple[Tensor, dict]:
            binding = bind_weights(reference, mask=mask, mask_requires_grad=True)
            head_tensors = head.tensors(requires_grad=True)
            loss = _head_loss(
                binding.weights,
                head,
                head_tensors,
                batch,
                batch_labels,
                config,
                rng.child(f"dropout.{step}"),
                dropout,
            )
            leaves = list(binding.mask_leaves.items())
            grads = gradients(loss, [leaf for _, leaf in leaves] + list(head_tensors))
            named = {name: grads[leaf] for name, leaf in leaves}
            named["head.w"], named["head.b"] = grads[head_tensors[0]], grads[head_tensors[1]]
            return loss, named

        loss, grads = _checked_step(step, record, compute)
        upstream = TensorMap((name, grads[name]) for name in nu)
        mask_adam.step(nu, dict(straight_through_grad(upstream, nu, straight_through).items()))
        head_adam.step(_head_arrays(head), {name: grads[name] for name in ("head.w", "head.b")})
        record.losses.append(loss.item())
        record.iterations = step
        if step % opt.log_every == 0:
            _LOGGER.debug("supermask step %d loss %.6f", step, loss.item())
        if step % opt.eval_every == 0 or step == opt.total_steps:
            current = threshold_mask(nu)
            angular, l1 = _distances(reference, apply_mask(reference, current))
            evaluation = evaluate_supermask(
                reference, nu, head, task, rng.child(f"checkpoint.{step}"), metric
            )
            record.add_checkpoint(
                Checkpoint(
                    step,
                    metric=evaluation.mean,
                    sparsity=sparsity(current).global_sparsity,
                    angular_distance=angular,
                    l1_distance=l1,
                )
            )
    final = evaluate_supermask(reference, nu, head, task, rng.child("final"), metric)
    final_sparsity = sparsity(threshold_mask(nu))
    record.summary.update(
        initial_sparsity=initial_sparsity,
        final_sparsity=final_sparsity.global_sparsity,
        final_block_sparsity=final_sparsity.block_sparsity,
        metric=final.mean,
        metric_std=final.std,
        threshold_metric=final.threshold,
        sign_flip_fraction=float(np.mean(np.signbit(nu.flatten()) != initial_signs)),
    )
    return nu, head, _finish(record, "Supermask training")


def shuffled_control(
    reference: ParameterSet,
    task: Task,
    initial_sparsity: float,
    opt: OptimizerConfig,
    rng: RngStream,
    maskable: MaskableSet | None = None,
    metric: str = Metric.ACCURACY,
) -> RunRecord:
    """Supermask run on per-tensor shuffled θ̃, paired with the run on θ̃ itself.

    The returned record belongs to the shuffled run; its summary holds the
    paired metric and the gap (true minus shuffled).
    """
    maskable = maskable or MaskableSet.default(reference.config)
    shuffled = shuffle_within_tensors(reference, maskable, rng.child("shuffle"))
    _, _, record = finetune_supermask(shuffled, task, initial_sparsity, opt, rng, maskable, metric=metric)
    _, _, paired = finetune_supermask(reference, task, initial_sparsity, opt, rng, maskable, metric=metric)
    record.summary.update(
        true_metric=paired.summary["metric"],
        gap=paired.summary["metric"] - record.summary["metric"],
    )
    _LOGGER.info("Shuffled control gap: %.4f", record.summary["gap"])
    return record
