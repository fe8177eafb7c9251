"""Misc constants and other data for tests."""

TEST_SEED = 1234

TINY_MODEL = {
    "num_blocks": 2,
    "hidden_size": 8,
    "num_heads": 2,
    "vocab_size": 24,
    "max_seq_len": 16,
}
TINY_PARAMETER_COUNT = 2152

TINY_CORPUS = {"vocab_size": 24, "num_classes": 4, "seq_len": 8}

TINY_CONFIG_TEXT = """\
# tiny encoder for tests
num_blocks = 2
hidden_size = 8
num_heads = 2
vocab_size = 24
max_seq_len = 16

total_steps = 2
batch_size = 8
eval_every = 1
log_every = 1
"""
