"""Synthetic pre-training corpus, classification tasks and metrics.

Content token ids 3..V−1 belong to latent class (id − 3) mod K. Corpus
sequences walk an order-2 Markov chain over classes. Each position emits a
member of its class, usually at the member rank of the position before it.
Task bodies emit uniform members. Every sequence starts with the CLS token.
"""

from __future__ import annotations

from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass, field
from json import dumps as to_json
import logging
from pathlib import Path

import numpy as np
from scipy.stats import entropy
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import confusion_matrix

from .fm_const import (
    CLS_TOKEN,
    HEAD_INSEPARABLE_MAX_ACCURACY,
    NUM_RESERVED_TOKENS,
    SEP_TOKEN,
    Difficulty,
    Metric,
    TaskFamily,
)
from .fm_encoder import ParameterSet, pooled_features
from .fm_exceptions import ConfigError, FormatError, MetricError, TokenError
from .fm_numerics import RngStream
from .fm_utilities import TensorMap, json_loads

_LOGGER = logging.getLogger(__name__)

BALANCE_TOLERANCE = 0.02
MAX_DRAWS_PER_EXAMPLE = 50


@dataclass(frozen=True)
class CorpusSpec:
    """Generator of the synthetic token language."""

    vocab_size: int = 64
    num_classes: int = 4
    seq_len: int = 16
    concentration: float = 0.5
    chain_seed: int = 0
    persistence: float = 0.9

    def __post_init__(self) -> None:
        """Validate."""
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        if self.vocab_size - NUM_RESERVED_TOKENS < 4 * self.num_classes:
            raise ConfigError(
                f"vocab_size {self.vocab_size} leaves fewer than four tokens per class"
            )
        if self.seq_len < 8:
            raise ConfigError(f"seq_len must be at least 8, got {self.seq_len}")
        if self.concentration <= 0:
            raise ConfigError("concentration must be positive")
        if not 0.0 <= self.persistence < 1.0:
            raise ConfigError(f"persistence must be in [0, 1), got {self.persistence}")

    @property
    def content_tokens(self) -> np.ndarray:
        """Return all non-reserved ids."""
        return np.arange(NUM_RESERVED_TOKENS, self.vocab_size)

    def class_of(self, tokens: np.ndarray) -> np.ndarray:
        """Latent class of content tokens."""
        return (np.asarray(tokens) - NUM_RESERVED_TOKENS) % self.num_classes

    def members(self, latent: int) -> np.ndarray:
        """Token ids of one latent class."""
        return np.arange(NUM_RESERVED_TOKENS + latent, self.vocab_size, self.num_classes)

    def rank_of(self, tokens: np.ndarray) -> np.ndarray:
        """Position of content tokens within their class."""
        return (np.asarray(tokens) - NUM_RESERVED_TOKENS) // self.num_classes

    def entropy_bound(self) -> float:
        """Upper bound in nats on the entropy of a corpus token given the tokens before it.

        Worst class-transition row plus the worst within-class rank term. Masked
        prediction also sees the right context, so its optimal loss is lower still.
        """
        class_term = float(entropy(self.transitions(), axis=-1).max())
        rank_term = 0.0
        for latent in range(self.num_classes):
            size = len(self.members(latent))
            move = (1.0 - self.persistence) / size
            rank_term = max(rank_term, float(entropy([self.persistence + move] + [move] * (size - 1))))
        return class_term + rank_term

    def transitions(self, variant: int = 0) -> np.ndarray:
        """Transition tensor P[c(t−2), c(t−1), c(t)] of chain variant."""
        alpha = np.full(self.num_classes, self.concentration)
        return RngStream(self.chain_seed).child(f"chain.{variant}").dirichlet(
            alpha, (self.num_classes, self.num_classes)
        )


@dataclass
class Corpus:
    """Unlabeled token sequences."""

    sequences: list[np.ndarray]
    spec: CorpusSpec

    @property
    def vocab_size(self) -> int:
        """Return vocabulary size."""
        return self.spec.vocab_size


def sample_classes(transitions: np.ndarray, length: int, rng: RngStream) -> np.ndarray:
    """Walk the order-2 chain for length steps from a uniform start pair."""
    num_classes = transitions.shape[0]
    draws = rng.random(length)
    classes = np.zeros(length, dtype=np.int64)
    classes[:2] = np.minimum((draws[:2] * num_classes).astype(np.int64), num_classes - 1)
    cumulative = np.cumsum(transitions, axis=-1)
    for position in range(2, length):
        row = cumulative[classes[position - 2], classes[position - 1]]
        classes[position] = min(int(np.searchsorted(row, draws[position], side="right")), num_classes - 1)
    return classes


def emit_tokens(
    classes: np.ndarray,
    spec: CorpusSpec,
    rng: RngStream,
    half: int | None = None,
    persistence: float = 0.0,
) -> np.ndarray:
    """Class member per position; half restricts to even or odd members.

    With probability persistence a position keeps the member rank of the
    position before it, wrapped to its class size. Otherwise the member is
    uniform, so every member stays equally frequent overall.
    """
    draws = rng.random(len(classes))
    keep = rng.child("persist").random(len(classes)) < persistence if persistence else None
    tokens = np.zeros(len(classes), dtype=np.int64)
    rank = 0
    for position, latent in enumerate(classes):
        members = spec.members(int(latent))
        if half is not None:
            members = members[half::2]
        if keep is not None and position and keep[position]:
            rank %= len(members)
        else:
            rank = int(draws[position] * len(members))
        tokens[position] = members[rank]
    return tokens


def gen_corpus(spec: CorpusSpec, size: int, rng: RngStream) -> Corpus:
    """Draw size sequences of spec.seq_len tokens, CLS first."""
    if size <= 0:
        raise ConfigError(f"corpus size must be positive, got {size}")
    transitions = spec.transitions()
    sequences = []
    for number in range(size):
        stream = rng.child(f"corpus.{number}")
        classes = sample_classes(transitions, spec.seq_len - 1, stream.child("classes"))
        body = emit_tokens(classes, spec, stream.child("tokens"), persistence=spec.persistence)
        sequences.append(np.concatenate(([CLS_TOKEN], body)))
    _LOGGER.debug("Generated corpus of %d sequences", size)
    return Corpus(sequences, spec)


@dataclass(frozen=True)
class Certificate:
    """Re-checkable validity claim attached to a task."""

    name: str
    value: float
    threshold: float
    passed: bool


@dataclass
class Task:
    """Labeled synthetic classification task."""

    name: str
    family: str
    difficulty: str
    train: list[tuple[np.ndarray, int]]
    eval: list[tuple[np.ndarray, int]]
    num_classes: int = 2
    details: dict = field(default_factory=dict)
    certificates: dict[str, Certificate] = field(default_factory=dict)

    @property
    def majority_rate(self) -> float:
        """Return the most frequent class rate over the eval split."""
        labels = np.array([label for _, label in self.eval])
        return float(np.bincount(labels, minlength=self.num_classes).max() / labels.size)

    def sequences(self, split: str) -> list[np.ndarray]:
        """Return token sequences of a split."""
        return [tokens for tokens, _ in getattr(self, split)]

    def labels(self, split: str) -> np.ndarray:
        """Return labels of a split."""
        return np.array([label for _, label in getattr(self, split)], dtype=np.int64)


class _ExampleDrawer:
    """Draws one family's bodies (sequence without CLS) for a given label."""

    def __init__(self, spec: CorpusSpec, family: str, difficulty: str, rng: RngStream) -> None:
        self.spec = spec
        self.family = family
        self.difficulty = difficulty
        self.body_len = spec.seq_len - 1
        self.chains = [spec.transitions(0), spec.transitions(1)]
        content = spec.content_tokens
        self.marker = int(spec.members(0)[0])
        pool = content[content != self.marker]
        self.motif = [int(token) for token in pool[rng.child("motif").choice(len(pool), 3)]]
        self.details: dict = {}
        if family == TaskFamily.PARITY:
            self.details = {"marker": self.marker}
        elif family == TaskFamily.PATTERN:
            self.details = {"motif": self.motif}

    def _chain_body(self, rng: RngStream, length: int, chain: int = 0, half: int | None = None):
        classes = sample_classes(self.chains[chain], length, rng.child("classes"))
        return emit_tokens(classes, self.spec, rng.child("tokens"), half)

    def _scrub(self, body: np.ndarray, forbidden: Sequence[int], rng: RngStream) -> np.ndarray:
        """Replace forbidden tokens by another member of their class."""
        body = body.copy()
        for position in np.flatnonzero(np.isin(body, forbidden)):
            members = self.spec.members(int(self.spec.class_of(body[position])))
            allowed = members[~np.isin(members, forbidden)]
            body[position] = allowed[int(rng.integers(len(allowed)))]
        return body

    def draw(self, label: int, rng: RngStream) -> np.ndarray:
        if self.family == TaskFamily.PARITY:
            return self._parity(label, rng)
        if self.family == TaskFamily.PATTERN:
            return self._pattern(label, rng)
        if self.family == TaskFamily.PAIR_MATCH:
            return self._pair_match(label, rng)
        raise ConfigError(f"Unknown task family: {self.family}")

    def _parity(self, label: int, rng: RngStream) -> np.ndarray:
        body = self._scrub(self._chain_body(rng, self.body_len), [self.marker], rng.child("scrub"))
        if self.difficulty == Difficulty.EASY:
            count = label
        else:
            choices = [1, 3] if label else [0, 2, 4]
            count = choices[int(rng.integers(len(choices)))]
        body[rng.child("place").choice(self.body_len, count)] = self.marker
        return body

    def _contains_motif(self, body: np.ndarray) -> bool:
        windows = np.lib.stride_tricks.sliding_window_view(body, 3)
        return bool((windows == self.motif).all(axis=1).any())

    def _pattern(self, label: int, rng: RngStream) -> np.ndarray:
        body = self._scrub(self._chain_body(rng, self.body_len), self.motif, rng.child("scrub"))
        if label:
            start = int(rng.integers(self.body_len - 2))
            body[start : start + 3] = self.motif
            return body
        if self.difficulty == Difficulty.EASY:
            return body
        for attempt in range(MAX_DRAWS_PER_EXAMPLE):
            scattered = body.copy()
            placement = rng.child(f"scatter.{attempt}")
            scattered[placement.choice(self.body_len, 3)] = self.motif
            if not self._contains_motif(scattered):
                return scattered
        raise ConfigError("Could not scatter motif tokens without forming the motif")

    def _pair_match(self, label: int, rng: RngStream) -> np.ndarray:
        first_len = (self.body_len - 1) // 2
        second_len = self.body_len - 1 - first_len
        first_chain = int(rng.integers(2))
        second_chain = first_chain if label else 1 - first_chain
        easy = self.difficulty == Difficulty.EASY
        first = self._chain_body(
            rng.child("first"), first_len, first_chain, first_chain if easy else None
        )
        second = self._chain_body(
            rng.child("second"), second_len, second_chain, second_chain if easy else None
        )
        return np.concatenate((first, [SEP_TOKEN], second))


def _draw_split(
    drawer: _ExampleDrawer, size: int, rng: RngStream, seen: set[tuple[int, ...]]
) -> list[tuple[np.ndarray, int]]:
    """Alternate labels and redraw duplicates, so the split is balanced and unique."""
    examples = []
    for number in range(size):
        label = number % 2
        for attempt in range(MAX_DRAWS_PER_EXAMPLE):
            body = drawer.draw(label, rng.child(f"{number}.{attempt}"))
            tokens = np.concatenate(([CLS_TOKEN], body)).astype(np.int64)
            key = tuple(int(token) for token in tokens)
            if key not in seen:
                seen.add(key)
                examples.append((tokens, label))
                break
        else:
            raise ConfigError(f"Could not draw {size} unique examples for {drawer.family}")
    order = rng.child("order").permutation(size)
    return [examples[index] for index in order]


def gen_task(
    spec: CorpusSpec,
    family: str,
    difficulty: str,
    train_size: int,
    eval_size: int,
    rng: RngStream,
    reference: ParameterSet | None = None,
) -> Task:
    """Generate a balanced binary task with disjoint train and eval splits.

    parity labels the parity of marker-token occurrences (easy: zero or one
    marker; hard: zero to four). pattern labels presence of a contiguous
    three-token motif (easy: motif tokens never appear otherwise; hard:
    negatives carry the same tokens scattered). pair-match joins two segments
    with SEP and labels whether both came from the same chain (easy: chains
    also use disjoint token halves). With reference, the head-inseparability
    certificate is computed on its frozen pooled features.
    """
    if family not in TaskFamily.ALL:
        raise ConfigError(f"Unknown task family: {family}")
    if difficulty not in (Difficulty.EASY, Difficulty.HARD):
        raise ConfigError(f"Unknown difficulty: {difficulty}")
    if train_size < 2 or eval_size < 2:
        raise ConfigError("train and eval sizes must be at least 2")
    drawer = _ExampleDrawer(spec, family, difficulty, rng)
    seen: set[tuple[int, ...]] = set()
    task = Task(
        name=f"{family}-{difficulty}",
        family=family,
        difficulty=difficulty,
        train=_draw_split(drawer, train_size, rng.child("train"), seen),
        eval=_draw_split(drawer, eval_size, rng.child("eval"), seen),
        details=drawer.details,
    )
    certify(task, reference)
    _LOGGER.info(
        "Generated task %s: %d train, %d eval examples", task.name, train_size, eval_size
    )
    return task


def certify_balance(task: Task) -> Certificate:
    """Largest deviation of a split's positive rate from one half."""
    deviation = max(abs(task.labels(split).mean() - 0.5) for split in ("train", "eval"))
    return Certificate(
        "balance", float(deviation), BALANCE_TOLERANCE, bool(deviation <= BALANCE_TOLERANCE)
    )


def _probe_accuracy(
    train_x: np.ndarray, train_y: np.ndarray, eval_x: np.ndarray, eval_y: np.ndarray
) -> float:
    probe = LogisticRegression(C=1e3, max_iter=5000)
    probe.fit(train_x, train_y)
    return float(probe.score(eval_x, eval_y))


def certify_head_inseparable(
    task: Task, reference: ParameterSet, mask: TensorMap | None = None
) -> Certificate:
    """Linear probe on frozen pooled features must stay below the accuracy threshold."""
    accuracy = _probe_accuracy(
        pooled_features(reference, task.sequences("train"), mask),
        task.labels("train"),
        pooled_features(reference, task.sequences("eval"), mask),
        task.labels("eval"),
    )
    passed = accuracy < HEAD_INSEPARABLE_MAX_ACCURACY
    if not passed:
        _LOGGER.warning(
            "Task %s is linearly separable on frozen features (probe accuracy %.3f)",
            task.name,
            accuracy,
        )
    return Certificate("head_inseparable", accuracy, HEAD_INSEPARABLE_MAX_ACCURACY, passed)


def token_counts(sequences: Sequence[np.ndarray], vocab_size: int) -> np.ndarray:
    """Bag-of-tokens count matrix [n, V]."""
    return np.stack([np.bincount(tokens, minlength=vocab_size) for tokens in sequences]).astype(
        np.float64
    )


def bag_of_tokens_baseline(task: Task, vocab_size: int) -> Certificate:
    """Eval accuracy of logistic regression on token counts."""
    accuracy = _probe_accuracy(
        token_counts(task.sequences("train"), vocab_size),
        task.labels("train"),
        token_counts(task.sequences("eval"), vocab_size),
        task.labels("eval"),
    )
    return Certificate("bag_of_tokens", accuracy, task.majority_rate, accuracy > task.majority_rate)


def certify(task: Task, reference: ParameterSet | None = None) -> dict[str, Certificate]:
    """Recompute and attach the task's certificates."""
    task.certificates["balance"] = certify_balance(task)
    if reference is not None:
        task.certificates["head_inseparable"] = certify_head_inseparable(task, reference)
        task.certificates["bag_of_tokens"] = bag_of_tokens_baseline(
            task, reference.config.vocab_size
        )
    return task.certificates


@dataclass(frozen=True)
class MetricValue:
    """Metric result; value is None when the metric is undefined."""

    metric: str
    value: float | None
    undefined: bool = False

    def __post_init__(self) -> None:
        """Check range."""
        if self.value is None:
            return
        low = -1.0 if self.metric == Metric.MATTHEWS else 0.0
        if not low - 1e-12 <= self.value <= 1.0 + 1e-12:
            raise MetricError(f"{self.metric} value {self.value} out of range")

    @property
    def defined(self) -> bool:
        """Return True if a value was computable."""
        return not self.undefined


def evaluate(
    predictions: Sequence[int],
    labels: Sequence[int],
    metric: str,
    undefined_as_zero: bool = False,
) -> MetricValue:
    """Accuracy, positive-class F1 or Matthews correlation.

    Zero denominators yield an undefined marker; with undefined_as_zero the
    value is 0.0 but the undefined flag stays set.
    """
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.shape != labels.shape or predictions.ndim != 1:
        raise MetricError(f"predictions {predictions.shape} and labels {labels.shape} differ")
    if labels.size == 0:
        raise MetricError("Cannot evaluate an empty prediction set")
    if metric == Metric.ACCURACY:
        return MetricValue(metric, float((predictions == labels).mean()))
    if metric not in (Metric.F1, Metric.MATTHEWS):
        raise MetricError(f"Unknown metric: {metric}")
    if not np.isin(np.concatenate((predictions, labels)), (0, 1)).all():
        raise MetricError(f"{metric} requires binary predictions and labels")
    (tn, fp), (fn, tp) = confusion_matrix(labels, predictions, labels=[0, 1])
    if metric == Metric.F1:
        numerator, denominator = 2.0 * tp, float(2 * tp + fp + fn)
    else:
        numerator = float(tp * tn - fp * fn)
        denominator = float(np.sqrt(float(tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)))
    if denominator == 0.0:
        _LOGGER.warning("%s is undefined for these predictions", metric)
        return MetricValue(metric, 0.0 if undefined_as_zero else None, undefined=True)
    return MetricValue(metric, float(numerator / denominator))


def _format_tokens(tokens: Iterable[int]) -> str:
    return " ".join(str(int(token)) for token in tokens)


def _parse_tokens(text: str, path: Path, number: int) -> np.ndarray:
    try:
        return np.array([int(part) for part in text.split()], dtype=np.int64)
    except ValueError as err:
        raise TokenError(f"{path}:{number}: malformed token list") from err


def write_sequences(path: str | Path, sequences: Iterable[np.ndarray]) -> Path:
    """One space-separated sequence per line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        "".join(_format_tokens(tokens) + "\n" for tokens in sequences), encoding="utf-8"
    )
    return path


def read_sequences(path: str | Path) -> list[np.ndarray]:
    """Read a corpus or inference input file; blank lines are skipped."""
    path = Path(path)
    return [
        _parse_tokens(line, path, number)
        for number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1)
        if line.strip()
    ]


def write_examples(path: str | Path, examples: Iterable[tuple[np.ndarray, int]]) -> Path:
    """`label<TAB>tokens` records."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        "".join(f"{label}\t{_format_tokens(tokens)}\n" for tokens, label in examples),
        encoding="utf-8",
    )
    return path


def read_examples(path: str | Path) -> list[tuple[np.ndarray, int]]:
    """Read `label<TAB>tokens` records."""
    path = Path(path)
    examples = []
    for number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        label, _, tokens = line.partition("\t")
        try:
            value = int(label)
        except ValueError as err:
            raise FormatError(f"{path}:{number}: malformed label {label!r}") from err
        examples.append((_parse_tokens(tokens, path, number), value))
    return examples


def save_task(task: Task, directory: str | Path) -> Path:
    """Write train.tsv, eval.tsv and task.json into directory."""
    directory = Path(directory)
    write_examples(directory / "train.tsv", task.train)
    write_examples(directory / "eval.tsv", task.eval)
    meta = {
        "name": task.name,
        "family": task.family,
        "difficulty": task.difficulty,
        "num_classes": task.num_classes,
        "majority_rate": task.majority_rate,
        "details": task.details,
        "certificates": {name: asdict(cert) for name, cert in task.certificates.items()},
    }
    (directory / "task.json").write_text(to_json(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return directory


def load_task(directory: str | Path) -> Task:
    """Read a task written by save_task."""
    directory = Path(directory)
    meta = json_loads((directory / "task.json").read_text(encoding="utf-8"))
    try:
        return Task(
            name=meta["name"],
            family=meta["family"],
            difficulty=meta["difficulty"],
            train=read_examples(directory / "train.tsv"),
            eval=read_examples(directory / "eval.tsv"),
            num_classes=meta["num_classes"],
            details=meta.get("details", {}),
            certificates={
                name: Certificate(**cert) for name, cert in meta.get("certificates", {}).items()
            },
        )
    except (KeyError, TypeError) as err:
        raise FormatError(f"{directory / 'task.json'}: missing task field {err}") from err
