"""BERT-style encoder stack, pooler and task heads."""

from __future__ import annotations

from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass, field
import logging
import math

import numpy as np

from .fm_const import (
    DEFAULT_DROPOUT_RATE,
    DEFAULT_HIDDEN_SIZE,
    DEFAULT_MAX_SEQ_LEN,
    DEFAULT_NUM_BLOCKS,
    DEFAULT_NUM_HEADS,
    DEFAULT_VOCAB_SIZE,
    LAYERNORM_EPS,
    HeadKind,
    InitScheme,
    MatrixRole,
)
from .fm_exceptions import ConfigError, ShapeError, TokenError
from .fm_numerics import (
    RngStream,
    Tensor,
    add,
    dropout,
    embedding,
    gelu,
    index,
    layernorm,
    matmul,
    mul,
    reshape,
    softmax_rows,
    tanh,
    transpose,
)
from .fm_utilities import TensorMap

_LOGGER = logging.getLogger(__name__)

ATTENTION_ROLES = [MatrixRole.QUERY, MatrixRole.KEY, MatrixRole.VALUE, MatrixRole.DENSE]
FEEDFORWARD_ROLES = [MatrixRole.INTERMEDIATE, MatrixRole.OUTPUT]


@dataclass(frozen=True)
class ModelConfig:
    """Encoder hyperparameters."""

    num_blocks: int = DEFAULT_NUM_BLOCKS
    hidden_size: int = DEFAULT_HIDDEN_SIZE
    num_heads: int = DEFAULT_NUM_HEADS
    intermediate_size: int = 0
    vocab_size: int = DEFAULT_VOCAB_SIZE
    max_seq_len: int = DEFAULT_MAX_SEQ_LEN
    dropout_rate: float = DEFAULT_DROPOUT_RATE

    def __post_init__(self) -> None:
        """Fill the intermediate size and validate."""
        if self.intermediate_size == 0:
            object.__setattr__(self, "intermediate_size", 4 * self.hidden_size)
        for name in (
            "num_blocks",
            "hidden_size",
            "num_heads",
            "intermediate_size",
            "vocab_size",
            "max_seq_len",
        ):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1, got {getattr(self, name)}")
        if self.hidden_size % self.num_heads:
            raise ConfigError(
                f"hidden_size {self.hidden_size} is not divisible by num_heads {self.num_heads}"
            )
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    @property
    def head_dim(self) -> int:
        """Return per-head width."""
        return self.hidden_size // self.num_heads


def block_prefix(block: int) -> str:
    """Return the name prefix of a 1-based block index."""
    return f"block{block}"


def matrix_name(block: int, role: str) -> str:
    """Return the weight name of a block matrix role."""
    if role in ATTENTION_ROLES:
        return f"{block_prefix(block)}.attn.{role}.w"
    if role in FEEDFORWARD_ROLES:
        return f"{block_prefix(block)}.ff.{role}.w"
    raise ConfigError(f"Unknown matrix role: {role}")


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Return canonical tensor names and shapes, in canonical order."""
    hidden, inter = config.hidden_size, config.intermediate_size
    shapes: dict[str, tuple[int, ...]] = {
        "embed.word": (config.vocab_size, hidden),
        "embed.pos": (config.max_seq_len, hidden),
        "embed.ln.gain": (hidden,),
        "embed.ln.bias": (hidden,),
    }
    for block in range(1, config.num_blocks + 1):
        prefix = block_prefix(block)
        for role in ATTENTION_ROLES:
            shapes[f"{prefix}.attn.{role}.w"] = (hidden, hidden)
            shapes[f"{prefix}.attn.{role}.b"] = (hidden,)
        shapes[f"{prefix}.ff.in.w"] = (hidden, inter)
        shapes[f"{prefix}.ff.in.b"] = (inter,)
        shapes[f"{prefix}.ff.out.w"] = (inter, hidden)
        shapes[f"{prefix}.ff.out.b"] = (hidden,)
        for norm in ("ln1", "ln2"):
            shapes[f"{prefix}.{norm}.gain"] = (hidden,)
            shapes[f"{prefix}.{norm}.bias"] = (hidden,)
    shapes["pool.w"] = (hidden, hidden)
    shapes["pool.b"] = (hidden,)
    return shapes


def canonical_names(config: ModelConfig) -> list[str]:
    """Return tensor names in canonical order."""
    return list(parameter_shapes(config))


def parameter_count(config: ModelConfig) -> int:
    """Closed-form total parameter count N."""
    hidden, inter = config.hidden_size, config.intermediate_size
    embed = (config.vocab_size + config.max_seq_len) * hidden + 2 * hidden
    block = 4 * (hidden * hidden + hidden) + (hidden * inter + inter) + (inter * hidden + hidden)
    block += 4 * hidden
    return embed + config.num_blocks * block + hidden * hidden + hidden


def is_weight_matrix(name: str) -> bool:
    """Return True for matrices drawn at initialization."""
    return name.endswith(".w") or name in ("embed.word", "embed.pos")


class ParameterSet(TensorMap):
    """Encoder parameters keyed by canonical name, in canonical order."""

    def __init__(self, config: ModelConfig, entries: Mapping[str, np.ndarray]) -> None:
        """Init, validating names and shapes against config."""
        shapes = parameter_shapes(config)
        if set(entries) != set(shapes):
            missing = sorted(set(shapes) - set(entries))
            extra = sorted(set(entries) - set(shapes))
            raise ShapeError(f"ParameterSet names mismatch: missing {missing}, unexpected {extra}")
        values = []
        for name, shape in shapes.items():
            value = np.asarray(entries[name], dtype=np.float64)
            if value.shape != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {value.shape}")
            values.append((name, value))
        super().__init__(values)
        self.config = config


def init_model(config: ModelConfig, scheme: str, rng: RngStream) -> ParameterSet:
    """Draw matrices at scale 1/√H; zero biases, unit layernorm gains.

    Uniform draws cover (−1/√H, 1/√H). Normal draws use σ = 1/(2√H), so the
    same interval spans ±2σ.
    """
    scale = 1.0 / math.sqrt(config.hidden_size)
    entries = {}
    for name, shape in parameter_shapes(config).items():
        if is_weight_matrix(name):
            stream = rng.child(f"init.{name}")
            if scheme == InitScheme.UNIFORM:
                entries[name] = stream.uniform(-scale, scale, shape)
            elif scheme == InitScheme.NORMAL:
                entries[name] = stream.normal(scale / 2.0, shape)
            else:
                raise ConfigError(f"Unknown init scheme: {scheme}")
        elif name.endswith(".gain"):
            entries[name] = np.ones(shape)
        else:
            entries[name] = np.zeros(shape)
    _LOGGER.debug("Initialized %s parameters (%s scheme)", parameter_count(config), scheme)
    return ParameterSet(config, entries)


@dataclass
class WeightBinding:
    """Tensors used by one forward pass and the leaves gradients flow to."""

    weights: dict[str, Tensor]
    param_leaves: dict[str, Tensor] = field(default_factory=dict)
    mask_leaves: dict[str, Tensor] = field(default_factory=dict)


def bind_weights(
    params: TensorMap,
    mask: TensorMap | None = None,
    trainable: Iterable[str] = (),
    mask_requires_grad: bool = False,
) -> WeightBinding:
    """Wrap parameters as tensors, replacing masked tensors by W ⊙ μ.

    Names in trainable become differentiable leaves. With mask_requires_grad
    the mask entries become leaves instead, so gradients reach μ.
    """
    trainable = set(trainable)
    binding = WeightBinding(weights={})
    for name, value in params.items():
        weight = Tensor(value, requires_grad=name in trainable, name=name)
        if name in trainable:
            binding.param_leaves[name] = weight
        if mask is not None and name in mask:
            mu = Tensor(mask[name], requires_grad=mask_requires_grad, name=f"mask.{name}")
            if mask_requires_grad:
                binding.mask_leaves[name] = mu
            weight = mul(weight, mu)
        binding.weights[name] = weight
    return binding


Projection = Callable[[Mapping[str, Tensor], str, Tensor], Tensor]


def dense_projection(weights: Mapping[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    """Affine map x·W + b for the tensors under prefix."""
    return add(matmul(x, weights[f"{prefix}.w"]), weights[f"{prefix}.b"])


def validate_tokens(tokens: np.ndarray, config: ModelConfig) -> np.ndarray:
    """Check ids and length, returning a 2-D int64 batch."""
    batch = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    if batch.shape[-1] < 1 or batch.shape[-1] > config.max_seq_len:
        raise TokenError(
            f"Sequence length {batch.shape[-1]} outside [1, {config.max_seq_len}]"
        )
    if batch.min() < 0 or batch.max() >= config.vocab_size:
        raise TokenError(
            f"Token ids must be in [0, {config.vocab_size}), got range "
            f"[{batch.min()}, {batch.max()}]"
        )
    return batch


def embed(weights: Mapping[str, Tensor], tokens: np.ndarray, config: ModelConfig) -> Tensor:
    """Word plus position embeddings, then layernorm. Returns [B, S, H]."""
    length = tokens.shape[-1]
    summed = add(embedding(weights["embed.word"], tokens), index(weights["embed.pos"], slice(0, length)))
    return layernorm(summed, weights["embed.ln.gain"], weights["embed.ln.bias"], LAYERNORM_EPS)


def _split_heads(x: Tensor, num_heads: int) -> Tensor:
    lead, length, width = x.shape[:-2], x.shape[-2], x.shape[-1]
    n = len(lead)
    split = reshape(x, (*lead, length, num_heads, width // num_heads))
    return transpose(split, [*range(n), n + 1, n, n + 2])


def _merge_heads(x: Tensor) -> Tensor:
    lead, num_heads, length, width = x.shape[:-3], x.shape[-3], x.shape[-2], x.shape[-1]
    n = len(lead)
    merged = transpose(x, [*range(n), n + 1, n, n + 2])
    return reshape(merged, (*lead, length, num_heads * width))


def attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    num_heads: int,
    rng: RngStream | None = None,
    training: bool = False,
    dropout_rate: float = 0.0,
) -> Tensor:
    """Multi-head scaled dot-product attention over [..., S, H] inputs.

    dropout_rate applies to attention probabilities; the block composition
    uses zero.
    """
    if q.shape != k.shape or q.shape != v.shape:
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape} differ")
    if q.shape[-1] % num_heads:
        raise ShapeError(f"attention: width {q.shape[-1]} not divisible by {num_heads} heads")
    head_dim = q.shape[-1] // num_heads
    qh, kh, vh = (_split_heads(t, num_heads) for t in (q, k, v))
    kt = transpose(kh, [*range(kh.ndim - 2), kh.ndim - 1, kh.ndim - 2])
    scores = mul(matmul(qh, kt), 1.0 / math.sqrt(head_dim))
    probs = softmax_rows(scores)
    if dropout_rate:
        probs = dropout(probs, dropout_rate, rng.child("attention.probs"), training)
    return _merge_heads(matmul(probs, vh))


def block_forward(
    weights: Mapping[str, Tensor],
    block: int,
    x: Tensor,
    config: ModelConfig,
    rng: RngStream | None,
    training: bool,
    project: Projection = dense_projection,
) -> Tensor:
    """Transformer block in post-layernorm order.

    inner = LN(x + DO(W_D·A(W_Q x, W_K x, W_V x)))
    out = LN(inner + DO(W_O·GeLU(W_I·inner)))
    """
    if x.shape[-1] != config.hidden_size:
        raise ShapeError(f"block{block}: input width {x.shape[-1]} != {config.hidden_size}")
    prefix = block_prefix(block)
    rate = config.dropout_rate if training else 0.0
    attended = attention(
        project(weights, f"{prefix}.attn.q", x),
        project(weights, f"{prefix}.attn.k", x),
        project(weights, f"{prefix}.attn.v", x),
        config.num_heads,
    )
    dense = project(weights, f"{prefix}.attn.d", attended)
    if rate:
        dense = dropout(dense, rate, rng.child(f"{prefix}.attn.dropout"), training)
    inner = layernorm(
        add(x, dense), weights[f"{prefix}.ln1.gain"], weights[f"{prefix}.ln1.bias"], LAYERNORM_EPS
    )
    hidden = gelu(project(weights, f"{prefix}.ff.in", inner))
    output = project(weights, f"{prefix}.ff.out", hidden)
    if rate:
        output = dropout(output, rate, rng.child(f"{prefix}.ff.dropout"), training)
    return layernorm(
        add(inner, output), weights[f"{prefix}.ln2.gain"], weights[f"{prefix}.ln2.bias"], LAYERNORM_EPS
    )


def hidden_states(
    weights: Mapping[str, Tensor],
    tokens: np.ndarray,
    config: ModelConfig,
    rng: RngStream | None,
    training: bool,
    project: Projection = dense_projection,
) -> Tensor:
    """Embedding followed by every block. Returns [B, S, H]."""
    state = embed(weights, tokens, config)
    for block in range(1, config.num_blocks + 1):
        state = block_forward(weights, block, state, config, rng, training, project)
    return state


def pool(weights: Mapping[str, Tensor], states: Tensor) -> Tensor:
    """tanh(W_pool · h_first + b) over [B, S, H] states."""
    return tanh(dense_projection(weights, "pool", index(states, (slice(None), 0))))


def encode_batch(
    weights: Mapping[str, Tensor],
    tokens: np.ndarray,
    config: ModelConfig,
    rng: RngStream | None,
    training: bool,
    project: Projection = dense_projection,
) -> Tensor:
    """Pooled representations [B, H] of a batch of equal-length sequences."""
    return pool(weights, hidden_states(weights, tokens, config, rng, training, project))


def encode(
    params: ParameterSet,
    mask: TensorMap | None,
    tokens: Sequence[int],
    rng: RngStream | None = None,
    training: bool = False,
) -> Tensor:
    """Pooled representation [H] of one sequence, optionally under θ̃ ⊙ μ."""
    batch = validate_tokens(np.asarray(tokens)[None, :], params.config)
    weights = bind_weights(params, mask).weights
    return index(encode_batch(weights, batch, params.config, rng, training), 0)


def group_by_length(sequences: Sequence[np.ndarray]) -> dict[int, list[int]]:
    """Indices of sequences keyed by length, in first-seen order."""
    groups: dict[int, list[int]] = {}
    for position, tokens in enumerate(sequences):
        groups.setdefault(len(tokens), []).append(position)
    return groups


def pooled_features(
    params: ParameterSet,
    sequences: Sequence[np.ndarray],
    mask: TensorMap | None = None,
    batch_size: int = 256,
) -> np.ndarray:
    """Eval-mode pooled vectors [n, H], batching sequences of equal length."""
    weights = bind_weights(params, mask).weights
    features = np.zeros((len(sequences), params.config.hidden_size))
    for positions in group_by_length(sequences).values():
        for start in range(0, len(positions), batch_size):
            chunk = positions[start : start + batch_size]
            batch = validate_tokens(np.stack([sequences[i] for i in chunk]), params.config)
            features[chunk] = encode_batch(weights, batch, params.config, None, False).data
    return features


def mlm_logits(weights: Mapping[str, Tensor], states: Tensor) -> Tensor:
    """Vocabulary logits from hidden states through the tied word embedding."""
    word = weights["embed.word"]
    return matmul(states, transpose(word, [1, 0]))


@dataclass
class TaskHead:
    """Task-specific last layer G_φ."""

    kind: str
    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self) -> None:
        """Validate shapes against kind."""
        if self.kind not in (HeadKind.CLASSIFICATION, HeadKind.REGRESSION):
            raise ConfigError(f"Unknown head kind: {self.kind}")
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[1],):
            raise ShapeError(
                f"TaskHead weights {self.weights.shape} and bias {self.bias.shape} disagree"
            )
        if self.kind == HeadKind.REGRESSION and self.num_outputs != 1:
            raise ShapeError("Regression heads have exactly one output")

    @property
    def num_outputs(self) -> int:
        """Return output width."""
        return int(self.weights.shape[1])

    @property
    def size(self) -> int:
        """Return parameter count."""
        return int(self.weights.size + self.bias.size)

    def copy(self) -> TaskHead:
        """Return a deep copy."""
        return TaskHead(self.kind, self.weights.copy(), self.bias.copy())

    def tensors(self, requires_grad: bool = False) -> tuple[Tensor, Tensor]:
        """Return (weights, bias) as tensors."""
        return (
            Tensor(self.weights, requires_grad=requires_grad, name="head.w"),
            Tensor(self.bias, requires_grad=requires_grad, name="head.b"),
        )


def init_head(
    config: ModelConfig, kind: str, num_classes: int, rng: RngStream, std: float = 0.02
) -> TaskHead:
    """New head with normal(0, std) weights and zero bias."""
    outputs = num_classes if kind == HeadKind.CLASSIFICATION else 1
    return TaskHead(
        kind,
        rng.child("head.w").normal(std, (config.hidden_size, outputs)),
        np.zeros(outputs),
    )


def head_forward(
    head: TaskHead, pooled: Tensor, weights: tuple[Tensor, Tensor] | None = None
) -> Tensor:
    """Affine head on [H] or [B, H] pooled input.

    weights overrides the head arrays, e.g. with differentiable leaves.
    """
    head_w, head_b = weights if weights is not None else head.tensors()
    if pooled.shape[-1] != head_w.shape[0]:
        raise ShapeError(f"head_forward: pooled {pooled.shape} vs weights {head_w.shape}")
    if pooled.ndim == 1:
        out = add(matmul(reshape(pooled, (1, pooled.shape[0])), head_w), head_b)
        return reshape(out, (head_w.shape[1],))
    return add(matmul(pooled, head_w), head_b)
