"""Masking, pruning and freeze tests."""

from unittest import TestCase

import numpy as np
import pytest
from finemask.fm_const import FreezePreset, StraightThrough
from finemask.fm_encoder import ModelConfig, canonical_names
from finemask.fm_exceptions import ConfigError, ShapeError
from finemask.fm_masking import (
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
from finemask.fm_numerics import RngStream
from finemask.fm_utilities import TensorMap

from .fixtures.constants import TINY_MODEL, TINY_PARAMETER_COUNT


class MaskableSetTest(TestCase):
    """Default maskable tensors."""

    def setUp(self):
        """Tiny config."""
        self.config = ModelConfig(**TINY_MODEL)

    def test_default(self):
        """Test six matrices per block plus the word embedding."""
        maskable = MaskableSet.default(self.config)
        assert len(maskable) == 13
        assert maskable.names[0] == "embed.word"
        assert "block2.ff.out.w" in maskable.names
        assert len(MaskableSet.default(self.config, include_embedding=False)) == 12
        assert "embed.word" not in maskable.excluding(["embed.word"]).names

    def test_validate(self):
        """Test missing names and non-matrices are rejected."""
        params = TensorMap([("w", np.zeros((2, 2))), ("b", np.zeros(2))])
        MaskableSet(("w",)).validate(params)
        with pytest.raises(ShapeError):
            MaskableSet(("b",)).validate(params)
        with pytest.raises(ShapeError):
            MaskableSet(("missing",)).validate(params)


def test_init_mask_params_counts(tiny_config, tiny_params):
    """Test ⌊s·size⌋ negative entries per tensor on the smallest magnitudes."""
    maskable = MaskableSet.default(tiny_config)
    nu = init_mask_params(tiny_params, maskable, 0.3)
    assert nu.names == list(maskable.names)
    for name, value in nu.items():
        negative = value < 0
        assert negative.sum() == int(0.3 * value.size)
        assert set(np.unique(value)) <= {-5.0, 5.0}
        magnitudes = np.abs(tiny_params[name])
        if negative.any():
            assert magnitudes[negative].max() <= magnitudes[~negative].min()
    assert sparsity(threshold_mask(nu)).zeros == sum(int(0.3 * tiny_params[name].size) for name in maskable)
    with pytest.raises(ConfigError):
        init_mask_params(tiny_params, maskable, 1.0)


def test_sampling_extremes():
    """Test saturated ν give deterministic samples."""
    nu = MaskParameters([("w", np.array([[50.0, -50.0], [-50.0, 50.0]]))])
    for seed in range(5):
        np.testing.assert_array_equal(sample_mask(nu, RngStream(seed))["w"], [[1, 0], [0, 1]])
    np.testing.assert_array_equal(threshold_mask(nu)["w"], [[1, 0], [0, 1]])
    assert sample_mask(nu, RngStream(0))["w"].dtype == np.uint8


def test_sampling_rate():
    """Test μ ~ Bernoulli(σ(ν)) at ν = 0."""
    nu = MaskParameters([("w", np.zeros((100, 100)))])
    assert sample_mask(nu, RngStream(1))["w"].mean() == pytest.approx(0.5, abs=0.02)
    np.testing.assert_array_equal(
        sample_mask(nu, RngStream(1))["w"], sample_mask(nu, RngStream(1))["w"]
    )


def test_straight_through():
    """Test σ′(ν) scaling and the identity rule."""
    nu = MaskParameters([("w", np.zeros((2, 3)))])
    upstream = TensorMap([("w", np.ones((2, 3)))])
    np.testing.assert_allclose(straight_through_grad(upstream, nu)["w"], 0.25)
    np.testing.assert_array_equal(
        straight_through_grad(upstream, nu, StraightThrough.IDENTITY)["w"], 1.0
    )
    with pytest.raises(ConfigError):
        straight_through_grad(upstream, nu, "tanh")
    with pytest.raises(ShapeError):
        straight_through_grad(TensorMap([("w", np.ones(6))]), nu)


class CubicScheduleTest(TestCase):
    """Cubic sparsity ramp."""

    def test_values(self):
        """Test start, middle and end of the ramp."""
        schedule = PruneSchedule(0.8, 100)
        data = {
            "start": [0, 0.0],
            "middle": [50, 0.875 * 0.8],
            "end": [100, 0.8],
        }
        for test_name, (step, expected) in data.items():
            with self.subTest(msg=test_name):
                assert cubic_sparsity(step, schedule) == pytest.approx(expected)

    def test_monotone(self):
        """Test the ramp never decreases."""
        schedule = PruneSchedule(0.9, 40)
        values = [cubic_sparsity(step, schedule) for step in range(41)]
        assert values == sorted(values)

    def test_invalid(self):
        """Test bad schedules and steps."""
        with pytest.raises(ConfigError):
            PruneSchedule(1.0, 10)
        with pytest.raises(ConfigError):
            PruneSchedule(0.5, 0)
        with pytest.raises(ConfigError):
            PruneSchedule(0.5, 10, prune_every=0)
        with pytest.raises(ConfigError):
            cubic_sparsity(11, PruneSchedule(0.5, 10))


class MagnitudePruneTest(TestCase):
    """Magnitude pruning."""

    def test_exact_counts(self):
        """Test ⌊s·size⌋ zeros on the smallest entries."""
        params = TensorMap([("w", np.array([[0.5, -0.1], [0.3, -0.7]])), ("v", np.arange(10.0).reshape(2, 5))])
        mask = magnitude_prune(params, ["w", "v"], 0.5)
        np.testing.assert_array_equal(mask["w"], [[1, 0], [0, 1]])
        assert mask.zeros() == 2 + 5
        np.testing.assert_array_equal(magnitude_prune(params, ["v"], 0.35)["v"].ravel()[:4], [0, 0, 0, 1])

    def test_ties_prune_lower_index(self):
        """Test equal magnitudes prune in flat index order."""
        params = TensorMap([("w", np.array([[1.0, -1.0], [1.0, -1.0]]))])
        np.testing.assert_array_equal(magnitude_prune(params, ["w"], 0.5)["w"], [[0, 0], [1, 1]])

    def test_zeros_never_revive(self):
        """Test previous zeros stay pruned when weights move."""
        generator = np.random.default_rng(2)
        params = TensorMap([("w", generator.normal(size=(6, 6)))])
        first = magnitude_prune(params, ["w"], 0.2)
        moved = TensorMap([("w", generator.normal(size=(6, 6)))])
        second = magnitude_prune(moved, ["w"], 0.5, previous=first)
        assert np.all(second["w"][first["w"] == 0] == 0)
        assert second.zeros() == 18

    def test_invalid_target(self):
        """Test targets outside [0, 1)."""
        params = TensorMap([("w", np.ones((2, 2)))])
        with pytest.raises(ConfigError):
            magnitude_prune(params, ["w"], -0.1)


class FreezeSpecTest(TestCase):
    """Layer-exclusion presets."""

    def setUp(self):
        """Tiny config."""
        self.config = ModelConfig(**TINY_MODEL)

    def test_preset_counts(self):
        """Test frozen parameter counts per preset and for the union."""
        data = {
            "key": [[FreezePreset.KEY_PROJECTIONS], 144],
            "deepest2": [[FreezePreset.DEEPEST_BLOCKS], 1744],
            "embed": [[FreezePreset.WORD_EMBEDDING], 192],
            "all": [FreezePreset.ALL, 1936],
        }
        for test_name, (presets, frozen) in data.items():
            with self.subTest(msg=test_name):
                spec = FreezeSpec.from_presets(self.config, presets)
                assert spec.excluded_count == frozen
                assert spec.trainable_count == TINY_PARAMETER_COUNT - frozen

    def test_trainable_names(self):
        """Test the union leaves the position embedding, embedding norm and pooler."""
        spec = FreezeSpec.from_presets(self.config, FreezePreset.ALL)
        assert spec.trainable_names() == ["embed.pos", "embed.ln.gain", "embed.ln.bias", "pool.w", "pool.b"]
        assert spec.trainable_count == 216

    def test_invalid(self):
        """Test unknown names and presets, and full freezes."""
        with pytest.raises(ConfigError):
            FreezeSpec.from_presets(self.config, ["query"])
        with pytest.raises(ConfigError):
            FreezeSpec(frozenset({"block9.attn.k.w"}), self.config)
        with pytest.raises(ConfigError):
            FreezeSpec(frozenset(canonical_names(self.config)), self.config)

    def test_head_only(self):
        """Test the explicit whole-encoder freeze."""
        spec = FreezeSpec.head_only(self.config)
        assert spec.trainable_count == 0
        assert spec.trainable_names() == []


def test_shuffle_within_tensors(tiny_config, tiny_params):
    """Test shuffling permutes values inside each maskable tensor only."""
    maskable = MaskableSet.default(tiny_config)
    shuffled = shuffle_within_tensors(tiny_params, maskable, RngStream(4))
    for name in tiny_params:
        if name in maskable.names:
            np.testing.assert_array_equal(np.sort(shuffled[name].ravel()), np.sort(tiny_params[name].ravel()))
            assert not np.array_equal(shuffled[name], tiny_params[name])
        else:
            np.testing.assert_array_equal(shuffled[name], tiny_params[name])
    assert shuffled.checksum() == shuffle_within_tensors(tiny_params, maskable, RngStream(4)).checksum()


def test_apply_mask():
    """Test θ̃ ⊙ μ on masked names only."""
    params = TensorMap([("w", np.array([[1.0, 2.0], [3.0, 4.0]])), ("b", np.ones(2))])
    mask = BinaryMask.from_arrays([("w", np.array([[1, 0], [0, 1]]))])
    masked = apply_mask(params, mask)
    np.testing.assert_array_equal(masked["w"], [[1.0, 0.0], [0.0, 4.0]])
    np.testing.assert_array_equal(masked["b"], [1.0, 1.0])
    assert params["w"][0, 1] == 2.0
    with pytest.raises(ShapeError):
        apply_mask(params, BinaryMask.from_arrays([("w", np.ones((3, 2)))]))


def test_binary_mask_rejects_other_values():
    """Test entries must be 0 or 1."""
    with pytest.raises(ShapeError):
        BinaryMask.from_arrays([("w", np.array([[0, 2]]))])
    mask = BinaryMask.from_arrays([("w", np.array([[0.0, 1.0]]))])
    assert mask["w"].dtype == np.uint8


def test_sparsity_report():
    """Test global and block-only sparsity."""
    mask = BinaryMask.from_arrays(
        [
            ("embed.word", np.zeros((24, 8))),
            ("block1.attn.q.w", np.repeat([[0], [1]], 32, axis=1).reshape(8, 8)),
        ]
    )
    report = sparsity(mask)
    assert report.zeros == 192 + 32
    assert report.size == 256
    assert report.global_sparsity == pytest.approx(224 / 256)
    assert report.block_sparsity == 0.5
    assert report.per_tensor["embed.word"] == 1.0
