"""Corpus, task and metric tests."""

import math
from unittest import TestCase

import numpy as np
import pytest
from finemask.fm_const import CLS_TOKEN, SEP_TOKEN, Difficulty, Metric, TaskFamily
from finemask.fm_exceptions import ConfigError, FormatError, MetricError, TokenError
from finemask.fm_numerics import RngStream
from finemask.fm_taskgen import (
    CorpusSpec,
    MetricValue,
    bag_of_tokens_baseline,
    evaluate,
    gen_corpus,
    gen_task,
    load_task,
    read_sequences,
    save_task,
    write_sequences,
)

from .fixtures.constants import TEST_SEED, TINY_CORPUS


def contains_motif(tokens, motif) -> bool:
    """Return True if motif occurs contiguously in tokens."""
    return any(list(tokens[i : i + 3]) == list(motif) for i in range(len(tokens) - 2))


class CorpusTest(TestCase):
    """Synthetic language."""

    def setUp(self):
        """Tiny spec."""
        self.spec = CorpusSpec(**TINY_CORPUS)

    def test_spec_validation(self):
        """Test rejected generators."""
        data = {
            "one class": {"num_classes": 1},
            "small vocabulary": {"vocab_size": 10, "num_classes": 4},
            "short sequences": {"seq_len": 4},
            "zero concentration": {"concentration": 0.0},
            "persistence one": {"persistence": 1.0},
        }
        for test_name, kwargs in data.items():
            with self.subTest(msg=test_name):
                with pytest.raises(ConfigError):
                    CorpusSpec(**{**TINY_CORPUS, **kwargs})

    def test_classes(self):
        """Test latent class membership of content tokens."""
        np.testing.assert_array_equal(self.spec.members(1), [4, 8, 12, 16, 20])
        np.testing.assert_array_equal(self.spec.class_of(np.array([3, 4, 7, 23])), [0, 1, 0, 0])
        assert self.spec.content_tokens[0] == 3

    def test_transitions(self):
        """Test every transition row is a distribution."""
        transitions = self.spec.transitions()
        assert transitions.shape == (4, 4, 4)
        np.testing.assert_allclose(transitions.sum(axis=-1), 1.0)
        assert not np.allclose(transitions, self.spec.transitions(1))

    def test_corpus(self):
        """Test sequence format and determinism."""
        corpus = gen_corpus(self.spec, 20, RngStream(TEST_SEED))
        assert len(corpus.sequences) == 20
        for tokens in corpus.sequences:
            assert len(tokens) == 8
            assert tokens[0] == CLS_TOKEN
            assert tokens[1:].min() >= 3
            assert tokens.max() < 24
        again = gen_corpus(self.spec, 20, RngStream(TEST_SEED))
        for first, second in zip(corpus.sequences, again.sequences):
            np.testing.assert_array_equal(first, second)
        with pytest.raises(ConfigError):
            gen_corpus(self.spec, 0, RngStream(TEST_SEED))

    def test_entropy_bound(self):
        """Test the default language leaves room to halve the untrained masked-token loss."""
        spec = CorpusSpec()
        assert spec.entropy_bound() <= 0.5 * math.log(spec.vocab_size)
        assert CorpusSpec(persistence=0.0).entropy_bound() > 0.5 * math.log(spec.vocab_size)

    def test_rank_persistence(self):
        """Test how often a token keeps the member rank of the token before it."""
        for persistence in (0.0, 0.9):
            with self.subTest(msg=f"persistence {persistence}"):
                spec = CorpusSpec(persistence=persistence)
                corpus = gen_corpus(spec, 500, RngStream(TEST_SEED))
                kept = []
                for tokens in corpus.sequences:
                    body = tokens[1:]
                    sizes = np.array([len(spec.members(latent)) for latent in spec.class_of(body)])
                    ranks = spec.rank_of(body)
                    kept.extend(ranks[1:] == ranks[:-1] % sizes[1:])
                expected = persistence + (1 - persistence) * np.mean(
                    [1 / len(spec.members(latent)) for latent in range(spec.num_classes)]
                )
                assert abs(np.mean(kept) - expected) < 0.02


def test_class_transition_frequencies():
    """Test class trigram frequencies of a large corpus against the generator's chain."""
    spec = CorpusSpec(vocab_size=24, num_classes=4, seq_len=256)
    corpus = gen_corpus(spec, 400, RngStream(TEST_SEED))
    counts = np.zeros((4, 4, 4))
    for tokens in corpus.sequences:
        classes = spec.class_of(tokens[1:])
        np.add.at(counts, (classes[:-2], classes[1:-1], classes[2:]), 1)
    assert counts.sum() >= 100_000

    transitions = spec.transitions()
    contexts = counts.sum(axis=-1)
    seen = contexts >= 50
    frequencies = counts[seen] / contexts[seen][:, None]
    expected = transitions[seen]
    deviation = np.abs(frequencies - expected)
    assert np.average(deviation.mean(axis=-1), weights=contexts[seen]) < 0.02
    tolerance = 5 * np.sqrt(expected * (1 - expected) / contexts[seen][:, None]) + 2 / contexts[seen][:, None]
    assert np.all(deviation <= tolerance)


class TaskTest(TestCase):
    """Labeled task generation."""

    def setUp(self):
        """Tiny spec."""
        self.spec = CorpusSpec(**TINY_CORPUS)

    def _task(self, family, difficulty):
        return gen_task(self.spec, family, difficulty, 32, 16, RngStream(TEST_SEED).child(family))

    def test_splits(self):
        """Test balance, disjointness and sequence format for every family."""
        for family in TaskFamily.ALL:
            for difficulty in (Difficulty.EASY, Difficulty.HARD):
                with self.subTest(msg=f"{family}-{difficulty}"):
                    task = self._task(family, difficulty)
                    assert task.name == f"{family}-{difficulty}"
                    assert task.labels("train").mean() == 0.5
                    assert task.labels("eval").mean() == 0.5
                    assert task.majority_rate == 0.5
                    assert task.certificates["balance"].passed
                    train = {tuple(tokens) for tokens in task.sequences("train")}
                    evaluation = {tuple(tokens) for tokens in task.sequences("eval")}
                    assert len(train) == 32
                    assert not train & evaluation
                    for tokens, _ in task.train + task.eval:
                        assert len(tokens) == 8
                        assert tokens[0] == CLS_TOKEN

    def test_parity_labels(self):
        """Test the label is the parity of marker occurrences."""
        for difficulty, counts in ((Difficulty.EASY, {0, 1}), (Difficulty.HARD, {0, 1, 2, 3, 4})):
            with self.subTest(msg=difficulty):
                task = self._task(TaskFamily.PARITY, difficulty)
                marker = task.details["marker"]
                seen = set()
                for tokens, label in task.train + task.eval:
                    count = int((tokens == marker).sum())
                    assert count % 2 == label
                    seen.add(count)
                assert seen <= counts

    def test_pattern_labels(self):
        """Test the label is presence of the contiguous motif."""
        for difficulty in (Difficulty.EASY, Difficulty.HARD):
            with self.subTest(msg=difficulty):
                task = self._task(TaskFamily.PATTERN, difficulty)
                motif = task.details["motif"]
                for tokens, label in task.train + task.eval:
                    assert contains_motif(tokens, motif) == bool(label)

    def test_pattern_hard_negatives_carry_motif_tokens(self):
        """Test hard negatives contain every motif token."""
        task = self._task(TaskFamily.PATTERN, Difficulty.HARD)
        motif = task.details["motif"]
        for tokens, label in task.train:
            if not label:
                assert set(motif) <= set(tokens.tolist())

    def test_pair_match_format(self):
        """Test one separator between two segments."""
        task = self._task(TaskFamily.PAIR_MATCH, Difficulty.EASY)
        for tokens, _ in task.train + task.eval:
            assert int((tokens == SEP_TOKEN).sum()) == 1
            assert tokens[4] == SEP_TOKEN

    def test_invalid_requests(self):
        """Test unknown families, difficulties and sizes."""
        with pytest.raises(ConfigError):
            gen_task(self.spec, "sorting", Difficulty.EASY, 8, 8, RngStream(0))
        with pytest.raises(ConfigError):
            gen_task(self.spec, TaskFamily.PARITY, "medium", 8, 8, RngStream(0))
        with pytest.raises(ConfigError):
            gen_task(self.spec, TaskFamily.PARITY, Difficulty.EASY, 1, 8, RngStream(0))

    def test_deterministic(self):
        """Test equal streams give equal tasks."""
        first = self._task(TaskFamily.PATTERN, Difficulty.HARD)
        second = self._task(TaskFamily.PATTERN, Difficulty.HARD)
        for (tokens_a, label_a), (tokens_b, label_b) in zip(first.train, second.train):
            np.testing.assert_array_equal(tokens_a, tokens_b)
            assert label_a == label_b


def test_bag_of_tokens_solves_easy_parity(corpus_spec):
    """Test the marker count alone separates easy parity."""
    task = gen_task(corpus_spec, TaskFamily.PARITY, Difficulty.EASY, 200, 100, RngStream(TEST_SEED))
    certificate = bag_of_tokens_baseline(task, 24)
    assert certificate.passed
    assert certificate.value > 0.9


def test_head_inseparable_certificate(corpus_spec, tiny_params):
    """Test certificates computed against a reference encoder."""
    task = gen_task(
        corpus_spec, TaskFamily.PAIR_MATCH, Difficulty.HARD, 32, 16, RngStream(3), reference=tiny_params
    )
    certificate = task.certificates["head_inseparable"]
    assert 0.0 <= certificate.value <= 1.0
    assert certificate.threshold == 0.6
    assert certificate.passed == (certificate.value < 0.6)
    assert "bag_of_tokens" in task.certificates


class EvaluateTest(TestCase):
    """Metrics."""

    def test_values(self):
        """Test hand-computed metric values."""
        data = {
            "accuracy": [[1, 1, 0, 0], [1, 0, 1, 0], Metric.ACCURACY, 0.5],
            "f1": [[1, 1, 0, 0], [1, 0, 1, 0], Metric.F1, 0.5],
            "matthews zero": [[1, 1, 0, 0], [1, 0, 1, 0], Metric.MATTHEWS, 0.0],
            "matthews perfect": [[1, 0, 1, 0], [1, 0, 1, 0], Metric.MATTHEWS, 1.0],
            "matthews inverted": [[0, 1, 0, 1], [1, 0, 1, 0], Metric.MATTHEWS, -1.0],
            "f1 perfect": [[1, 0, 1], [1, 0, 1], Metric.F1, 1.0],
            "accuracy multiclass": [[0, 2, 1], [0, 2, 2], Metric.ACCURACY, 2 / 3],
        }
        for test_name, (predictions, labels, metric, expected) in data.items():
            with self.subTest(msg=test_name):
                result = evaluate(predictions, labels, metric)
                assert result.defined
                assert result.value == pytest.approx(expected)

    def test_undefined(self):
        """Test zero denominators are flagged, optionally reported as zero."""
        for metric in (Metric.F1, Metric.MATTHEWS):
            with self.subTest(msg=metric):
                result = evaluate([0, 0, 0], [0, 0, 0], metric)
                assert result.value is None
                assert not result.defined
                zeroed = evaluate([0, 0, 0], [0, 0, 0], metric, undefined_as_zero=True)
                assert zeroed.value == 0.0
                assert zeroed.undefined

    def test_errors(self):
        """Test malformed inputs."""
        data = {
            "length mismatch": [[1, 0], [1], Metric.ACCURACY],
            "empty": [[], [], Metric.ACCURACY],
            "non-binary f1": [[2, 0], [1, 0], Metric.F1],
            "unknown metric": [[1, 0], [1, 0], "auc"],
        }
        for test_name, (predictions, labels, metric) in data.items():
            with self.subTest(msg=test_name):
                with pytest.raises(MetricError):
                    evaluate(predictions, labels, metric)
        with pytest.raises(MetricError):
            MetricValue(Metric.ACCURACY, 1.5)


def test_task_round_trip(tmp_path, parity_task):
    """Test save_task and load_task keep examples, details and certificates."""
    directory = save_task(parity_task, tmp_path / "task")
    assert sorted(path.name for path in directory.iterdir()) == ["eval.tsv", "task.json", "train.tsv"]
    loaded = load_task(directory)
    assert loaded.name == parity_task.name
    assert loaded.details == parity_task.details
    assert loaded.certificates == parity_task.certificates
    assert len(loaded.train) == len(parity_task.train)
    for (tokens_a, label_a), (tokens_b, label_b) in zip(loaded.eval, parity_task.eval):
        np.testing.assert_array_equal(tokens_a, tokens_b)
        assert label_a == label_b
    first_line = (directory / "train.tsv").read_text(encoding="utf-8").splitlines()[0]
    label, tokens = first_line.split("\t")
    assert label in ("0", "1")
    assert tokens.split()[0] == str(CLS_TOKEN)


def test_malformed_task_files(tmp_path, parity_task):
    """Test malformed labels, tokens and metadata."""
    directory = save_task(parity_task, tmp_path / "task")
    (directory / "eval.tsv").write_text("x\t2 3 4\n", encoding="utf-8")
    with pytest.raises(FormatError):
        load_task(directory)
    (directory / "eval.tsv").write_text("1\t2 three\n", encoding="utf-8")
    with pytest.raises(TokenError):
        load_task(directory)
    (directory / "eval.tsv").write_text("1\t2 3 4\n", encoding="utf-8")
    (directory / "task.json").write_text('{"name": "x"}', encoding="utf-8")
    with pytest.raises(FormatError):
        load_task(directory)
    (directory / "task.json").write_text("{", encoding="utf-8")
    with pytest.raises(FormatError):
        load_task(directory)


def test_sequence_files(tmp_path, tiny_corpus):
    """Test corpus files and blank-line handling."""
    path = write_sequences(tmp_path / "corpus.txt", tiny_corpus.sequences)
    assert path.read_text(encoding="utf-8").splitlines()[0].startswith("2 ")
    read = read_sequences(path)
    assert len(read) == 16
    np.testing.assert_array_equal(read[3], tiny_corpus.sequences[3])
    path.write_text("2 3 4\n\n2 5\n", encoding="utf-8")
    assert [tokens.tolist() for tokens in read_sequences(path)] == [[2, 3, 4], [2, 5]]
    path.write_text("2 x\n", encoding="utf-8")
    with pytest.raises(TokenError):
        read_sequences(path)
