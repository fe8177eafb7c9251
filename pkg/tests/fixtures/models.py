"""Model, task and artifact fixtures shared by the tests."""

import pytest
from finemask.fm_artifacts import save_checkpoint
from finemask.fm_const import Difficulty, InitScheme, TaskFamily
from finemask.fm_encoder import ModelConfig, init_model
from finemask.fm_numerics import RngStream
from finemask.fm_taskgen import CorpusSpec, gen_corpus, gen_task, save_task
from finemask.fm_trainers import OptimizerConfig

from .constants import TEST_SEED, TINY_CONFIG_TEXT, TINY_CORPUS, TINY_MODEL


@pytest.fixture
def rng():
    """Seeded root stream."""
    return RngStream(TEST_SEED)


@pytest.fixture
def tiny_config():
    """Two blocks of width 8 over a 24-token vocabulary."""
    return ModelConfig(**TINY_MODEL)


@pytest.fixture
def tiny_params(tiny_config):
    """Uniformly initialized parameters of the tiny encoder."""
    return init_model(tiny_config, InitScheme.UNIFORM, RngStream(TEST_SEED).child("params"))


@pytest.fixture
def corpus_spec():
    """Synthetic language matching the tiny encoder."""
    return CorpusSpec(**TINY_CORPUS)


@pytest.fixture
def tiny_corpus(corpus_spec):
    """Sixteen unlabeled sequences."""
    return gen_corpus(corpus_spec, 16, RngStream(TEST_SEED).child("corpus"))


@pytest.fixture
def parity_task(corpus_spec):
    """Small easy parity task."""
    return gen_task(
        corpus_spec, TaskFamily.PARITY, Difficulty.EASY, 32, 16, RngStream(TEST_SEED).child("task")
    )


@pytest.fixture
def fast_opt():
    """Four updates on batches of eight, evaluated every other update."""
    return OptimizerConfig(total_steps=4, batch_size=8, eval_every=2, log_every=1)


@pytest.fixture
def checkpoint_file(tmp_path, tiny_params):
    """Tiny parameters saved as a checkpoint; yields (path, crc)."""
    path = tmp_path / "reference.ftck"
    crc = save_checkpoint(tiny_params, path)
    return path, crc


@pytest.fixture
def task_dir(tmp_path, parity_task):
    """Parity task written to disk."""
    return save_task(parity_task, tmp_path / "parity")


@pytest.fixture
def config_file(tmp_path):
    """key=value config for the tiny encoder and a two-update run."""
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CONFIG_TEXT, encoding="utf-8")
    return path
