"""Checkpoint and mask-bundle files, and the sparse masked-inference engine.

All multi-byte integers are little-endian u32; tensor payloads are
little-endian float32. Both formats end with a CRC-32 (zlib) of every byte
before it. See FORMATS.md for annotated hex dumps.
"""

from __future__ import annotations

from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from json import dumps as to_json
import logging
import math
import os
from pathlib import Path
import struct
import zlib

import numpy as np
from scipy.sparse import csr_array

from .fm_const import (
    BUNDLE_MAGIC,
    CHECKPOINT_MAGIC,
    DEFAULT_DROPOUT_RATE,
    DEFAULT_NUM_HEADS,
    FORMAT_VERSION,
    HeadKind,
)
from .fm_encoder import (
    ModelConfig,
    ParameterSet,
    TaskHead,
    bind_weights,
    dense_projection,
    encode_batch,
    group_by_length,
    parameter_shapes,
    validate_tokens,
)
from .fm_exceptions import (
    ArtifactError,
    BindingError,
    ChecksumError,
    FormatError,
    ShapeError,
    TruncationError,
    VersionError,
)
from .fm_masking import BinaryMask, FreezeSpec, MaskableSet
from .fm_numerics import Tensor
from .fm_utilities import TensorMap, json_loads

_LOGGER = logging.getLogger(__name__)

HEADER = struct.Struct("<4sIII")
U32 = struct.Struct("<I")
CRC_SIZE = 4
HEAD_KINDS = [HeadKind.CLASSIFICATION, HeadKind.REGRESSION]

# CRC-32 of one byte followed by nothing, with the affine part removed.
_CRC_BYTE = [zlib.crc32(bytes([value])) ^ zlib.crc32(b"\x00") for value in range(256)]
_CRC_BY_TOP = {entry >> 24: value for value, entry in enumerate(_CRC_BYTE)}
_CRC_SINGLE = frozenset(_CRC_BYTE[1:])


class _Reader:
    """Sequential reader that raises TruncationError past the end."""

    def __init__(self, body: bytes, offset: int = 0) -> None:
        self.body = body
        self.offset = offset

    def take(self, size: int) -> bytes:
        if size < 0 or self.offset + size > len(self.body):
            raise TruncationError(
                f"record needs {size} bytes at offset {self.offset}, "
                f"{len(self.body) - self.offset} left"
            )
        chunk = self.body[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def u32(self) -> int:
        return U32.unpack(self.take(U32.size))[0]

    def name(self) -> str:
        try:
            return self.take(self.u32()).decode("utf-8")
        except UnicodeDecodeError as err:
            raise FormatError(f"tensor name at offset {self.offset} is not UTF-8") from err

    def dims(self) -> tuple[int, ...]:
        return tuple(self.u32() for _ in range(self.u32()))

    @property
    def exhausted(self) -> bool:
        return self.offset == len(self.body)


def _encode_name_dims(name: str, shape: tuple[int, ...]) -> bytes:
    encoded = name.encode("utf-8")
    return b"".join(
        [U32.pack(len(encoded)), encoded, U32.pack(len(shape)), *(U32.pack(dim) for dim in shape)]
    )


def _seal(body: bytes) -> bytes:
    return body + U32.pack(zlib.crc32(body))


def _write_atomic(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    staging = path.with_name(path.name + ".partial")
    staging.write_bytes(data)
    os.replace(staging, path)


def _one_byte_error(body_length: int, syndrome: int) -> bool:
    """Whether changing one byte of the body or the trailer explains a CRC mismatch.

    The syndrome is crc32(body) ^ stored. A one-byte error at distance k from
    the end of the body leaves the syndrome of that byte shifted through k zero
    bytes, so the shift is undone one byte at a time.
    """
    if any(syndrome == syndrome & (0xFF << shift) for shift in (0, 8, 16, 24)):
        return True
    register = syndrome
    for _ in range(body_length):
        if register in _CRC_SINGLE:
            return True
        value = _CRC_BY_TOP[register >> 24]
        register = ((register ^ _CRC_BYTE[value]) << 8) | value
    return False


def _open_sealed(
    data: bytes, magic: bytes, path: Path, parse: Callable[[_Reader], object]
) -> object:
    """Verify and parse a sealed file.

    Order: minimum length, CRC, magic, version, records. A CRC mismatch is a
    TruncationError only when no single changed byte explains it and the
    records run past the end of the file.
    """
    if len(data) < HEADER.size + CRC_SIZE:
        _LOGGER.error("%s is truncated (%d bytes)", path, len(data))
        raise TruncationError(f"{path}: {len(data)} bytes is shorter than the header")
    body, stored = data[:-CRC_SIZE], U32.unpack(data[-CRC_SIZE:])[0]
    syndrome = zlib.crc32(body) ^ stored
    if syndrome:
        if not _one_byte_error(len(body), syndrome):
            try:
                parse(_Reader(body))
            except TruncationError as err:
                _LOGGER.error("%s is truncated", path)
                raise TruncationError(f"{path}: {err}") from err
            except (ArtifactError, ShapeError, ValueError, struct.error):
                pass
        _LOGGER.error("%s fails its CRC-32 check", path)
        raise ChecksumError(f"{path}: CRC-32 mismatch (stored {stored:#010x})")
    found, version, _, _ = HEADER.unpack(body[: HEADER.size])
    if found != magic:
        raise FormatError(f"{path}: bad magic {found!r}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: format version {version}, supported {FORMAT_VERSION}")
    try:
        return parse(_Reader(body))
    except TruncationError as err:
        raise FormatError(f"{path}: records overrun the payload: {err}") from err


def encode_checkpoint(params: TensorMap) -> bytes:
    """Serialize tensors in order as an FTCK image.

    A ParameterSet records its head count in the header; other maps write 0.
    """
    config = getattr(params, "config", None)
    num_heads = config.num_heads if config is not None else 0
    parts = [HEADER.pack(CHECKPOINT_MAGIC, FORMAT_VERSION, len(params), num_heads)]
    for name, value in params.items():
        parts.append(_encode_name_dims(name, value.shape))
        parts.append(np.ascontiguousarray(value, dtype="<f4").tobytes())
    return _seal(b"".join(parts))


def save_checkpoint(params: TensorMap, path: str | Path) -> int:
    """Write an FTCK file; return its CRC-32."""
    path = Path(path)
    data = encode_checkpoint(params)
    _write_atomic(path, data)
    crc = U32.unpack(data[-CRC_SIZE:])[0]
    _LOGGER.info("Wrote checkpoint %s (%d bytes, crc %#010x)", path, len(data), crc)
    return crc


def _parse_checkpoint(reader: _Reader) -> TensorMap:
    _, _, count, _ = HEADER.unpack(reader.take(HEADER.size))
    tensors = TensorMap()
    for _ in range(count):
        name = reader.name()
        shape = reader.dims()
        size = math.prod(shape)
        values = np.frombuffer(reader.take(4 * size), dtype="<f4").reshape(shape)
        tensors[name] = values.astype(np.float64)
    if not reader.exhausted:
        raise FormatError(f"{len(reader.body) - reader.offset} bytes after the last record")
    return tensors


def config_from_tensors(
    tensors: TensorMap, num_heads: int = DEFAULT_NUM_HEADS, dropout_rate: float = DEFAULT_DROPOUT_RATE
) -> ModelConfig:
    """Recover a ModelConfig from canonical tensor shapes."""
    try:
        vocab_size, hidden = tensors["embed.word"].shape
        blocks = sum(1 for name in tensors if name.endswith(".ff.in.w"))
        return ModelConfig(
            num_blocks=blocks,
            hidden_size=hidden,
            num_heads=num_heads if hidden % num_heads == 0 else 1,
            intermediate_size=tensors["block1.ff.in.w"].shape[1],
            vocab_size=vocab_size,
            max_seq_len=tensors["embed.pos"].shape[0],
            dropout_rate=dropout_rate,
        )
    except (KeyError, ValueError) as err:
        raise FormatError(f"tensors do not describe an encoder: {err}") from err


def load_checkpoint(path: str | Path, config: ModelConfig | None = None) -> ParameterSet:
    """Read and verify an FTCK file.

    Without config, the model geometry is recovered from tensor shapes
    and the head count from the header.
    """
    path = Path(path)
    data = path.read_bytes()
    tensors = _open_sealed(data, CHECKPOINT_MAGIC, path, _parse_checkpoint)
    num_heads = HEADER.unpack_from(data)[3] or DEFAULT_NUM_HEADS
    config = config or config_from_tensors(tensors, num_heads)
    return ParameterSet(config, dict(tensors.items()))


def checkpoint_crc(path: str | Path) -> int:
    """Stored CRC-32 of a checkpoint, after verifying it."""
    path = Path(path)
    data = path.read_bytes()
    _open_sealed(data, CHECKPOINT_MAGIC, path, _parse_checkpoint)
    return U32.unpack(data[-CRC_SIZE:])[0]


def checkpoint_size(params: TensorMap) -> int:
    """Exact FTCK byte size."""
    records = sum(
        U32.size * (2 + value.ndim) + len(name.encode("utf-8")) + 4 * value.size
        for name, value in params.items()
    )
    return HEADER.size + records + CRC_SIZE


def pack_bits(mask: np.ndarray) -> bytes:
    """Row-major, least significant bit first, zero-padded final byte.

    >>> pack_bits(np.array([1, 0, 0, 0, 0, 0, 0, 0, 1], dtype=np.uint8))
    b'\\x01\\x01'
    """
    return np.packbits(np.ravel(mask).astype(np.uint8), bitorder="little").tobytes()


def unpack_bits(data: bytes, shape: tuple[int, ...]) -> np.ndarray:
    """Inverse of pack_bits."""
    size = math.prod(shape)
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), count=size, bitorder="little")
    return bits.reshape(shape)


@dataclass
class MaskBundle:
    """Loaded per-task artifact."""

    mask: BinaryMask
    head: TaskHead
    meta: dict = field(default_factory=dict)
    reference_crc: int = 0


def encode_bundle(mask: BinaryMask, head: TaskHead, meta: Mapping, reference_crc: int) -> bytes:
    """Serialize an FTMK image."""
    parts = [HEADER.pack(BUNDLE_MAGIC, FORMAT_VERSION, reference_crc, len(mask))]
    for name, value in mask.items():
        parts.append(_encode_name_dims(name, value.shape))
        parts.append(pack_bits(value))
    parts.append(struct.pack("<BII", HEAD_KINDS.index(head.kind), head.num_outputs, head.weights.shape[0]))
    parts.append(np.ascontiguousarray(head.weights, dtype="<f4").tobytes())
    parts.append(np.ascontiguousarray(head.bias, dtype="<f4").tobytes())
    encoded = to_json(dict(meta), sort_keys=True).encode("utf-8")
    parts.append(U32.pack(len(encoded)) + encoded)
    return _seal(b"".join(parts))


def _parse_bundle(reader: _Reader) -> MaskBundle:
    _, _, reference_crc, count = HEADER.unpack(reader.take(HEADER.size))
    mask = BinaryMask()
    for _ in range(count):
        name = reader.name()
        shape = reader.dims()
        mask[name] = unpack_bits(reader.take((math.prod(shape) + 7) // 8), shape)
    kind, outputs, hidden = struct.unpack("<BII", reader.take(9))
    if kind >= len(HEAD_KINDS):
        raise FormatError(f"unknown head kind {kind}")
    weights = np.frombuffer(reader.take(4 * hidden * outputs), dtype="<f4").reshape(hidden, outputs)
    bias = np.frombuffer(reader.take(4 * outputs), dtype="<f4")
    head = TaskHead(HEAD_KINDS[kind], weights.astype(np.float64), bias.astype(np.float64))
    meta = json_loads(reader.take(reader.u32()))
    if not reader.exhausted:
        raise FormatError(f"{len(reader.body) - reader.offset} bytes after the metadata")
    return MaskBundle(mask, head, meta, reference_crc)


def pack_bundle(
    mask: BinaryMask,
    head: TaskHead,
    meta: Mapping,
    path: str | Path,
    reference_crc: int,
    reference: TensorMap | None = None,
) -> int:
    """Write an FTMK bundle bound to a checkpoint CRC; return the bundle size."""
    if reference is not None:
        reference.congruent(mask, mask.names)
    path = Path(path)
    data = encode_bundle(mask, head, meta, reference_crc)
    _write_atomic(path, data)
    _LOGGER.info("Wrote mask bundle %s (%d bytes)", path, len(data))
    return len(data)


def load_bundle(
    path: str | Path, reference_crc: int, reference: TensorMap | None = None
) -> MaskBundle:
    """Read and verify an FTMK bundle, refusing one bound to another checkpoint."""
    path = Path(path)
    bundle = _open_sealed(path.read_bytes(), BUNDLE_MAGIC, path, _parse_bundle)
    if bundle.reference_crc != reference_crc:
        _LOGGER.error(
            "%s is bound to checkpoint %#010x, not %#010x", path, bundle.reference_crc, reference_crc
        )
        raise BindingError(
            f"{path}: bound to checkpoint crc {bundle.reference_crc:#010x}, got {reference_crc:#010x}"
        )
    if reference is not None:
        reference.congruent(bundle.mask, bundle.mask.names)
    return bundle


def bundle_size_limit(mask: BinaryMask, head: TaskHead, allowance: int) -> int:
    """Upper bound ⌈N_maskable/8⌉ + head bytes + allowance."""
    return (mask.size + 7) // 8 + 4 * head.size + allowance


@dataclass(frozen=True)
class SparseMatrix:
    """Compressed-row matrix holding only the entries kept by a mask."""

    matrix: csr_array

    @property
    def indptr(self) -> np.ndarray:
        """Return row pointers."""
        return self.matrix.indptr

    @property
    def indices(self) -> np.ndarray:
        """Return column indices."""
        return self.matrix.indices

    @property
    def data(self) -> np.ndarray:
        """Return stored values."""
        return self.matrix.data

    @property
    def shape(self) -> tuple[int, int]:
        """Return dims."""
        return self.matrix.shape

    @property
    def nnz(self) -> int:
        """Return stored entry count, explicit zeros included."""
        return int(self.indptr[-1])


def to_sparse(weight: np.ndarray, mask: np.ndarray, transpose: bool = False) -> SparseMatrix:
    """Keep weight entries where mask is one; optionally store the transpose."""
    if weight.shape != mask.shape or weight.ndim != 2:
        raise ShapeError(f"to_sparse: weight {weight.shape} and mask {mask.shape} differ")
    if transpose:
        weight, mask = weight.T, mask.T
    rows, cols = np.nonzero(mask)
    indptr = np.zeros(weight.shape[0] + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=weight.shape[0]), out=indptr[1:])
    matrix = csr_array(
        (np.asarray(weight[rows, cols], dtype=np.float64), cols.astype(np.int64), indptr),
        shape=weight.shape,
    )
    return SparseMatrix(matrix)


def sparse_matvec(sparse: SparseMatrix, x: np.ndarray) -> tuple[np.ndarray, int]:
    """Row-wise products A·x for a vector or A·xᵢ for rows of x; return (y, multiplies)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != sparse.shape[1] or x.ndim not in (1, 2):
        raise ShapeError(f"sparse_matvec: matrix {sparse.shape} vs input {x.shape}")
    if x.ndim == 1:
        return sparse.matrix @ x, sparse.nnz
    return (sparse.matrix @ x.T).T, sparse.nnz * x.shape[0]


@dataclass
class MultiplyCount:
    """Multiplications in masked projections, sparse against dense."""

    sparse: int = 0
    dense: int = 0

    @property
    def ratio(self) -> float:
        """Return sparse over dense count; 1.0 when nothing was counted."""
        return self.sparse / self.dense if self.dense else 1.0

    @property
    def savings(self) -> float:
        """Return 1 − ratio."""
        return 1.0 - self.ratio


class SparseEncoder:
    """Masked encoder whose masked projections run as sparse products.

    Masked matrices are stored transposed so each output unit is one
    compressed row. The masked word embedding stays a dense lookup table.
    """

    def __init__(self, params: ParameterSet, mask: BinaryMask) -> None:
        """Init."""
        params.congruent(mask, mask.names)
        self.config = params.config
        self.counts = MultiplyCount()
        self.matrices = {
            name: to_sparse(params[name], mask[name], transpose=True)
            for name in mask
            if name.endswith(".w")
        }
        self._weights = bind_weights(params, mask).weights

    def _project(self, weights: Mapping[str, Tensor], prefix: str, x: Tensor) -> Tensor:
        name = f"{prefix}.w"
        sparse = self.matrices.get(name)
        if sparse is None:
            return dense_projection(weights, prefix, x)
        rows = x.data.reshape(-1, x.shape[-1])
        product, multiplies = sparse_matvec(sparse, rows)
        self.counts.sparse += multiplies
        self.counts.dense += rows.shape[0] * sparse.shape[0] * sparse.shape[1]
        out = product + weights[f"{prefix}.b"].data
        return Tensor(out.reshape(*x.shape[:-1], sparse.shape[0]))

    def encode(self, tokens: np.ndarray) -> np.ndarray:
        """Pooled vectors [B, H] for a batch of equal-length sequences."""
        batch = validate_tokens(tokens, self.config)
        return encode_batch(self._weights, batch, self.config, None, False, self._project).data

    def features(self, sequences: Sequence[np.ndarray]) -> np.ndarray:
        """Pooled vectors [n, H] for sequences of any lengths."""
        features = np.zeros((len(sequences), self.config.hidden_size))
        for positions in group_by_length(sequences).values():
            features[positions] = self.encode(np.stack([sequences[i] for i in positions]))
        return features


def sparse_encode(params: ParameterSet, mask: BinaryMask, tokens: Sequence[int]) -> tuple[np.ndarray, MultiplyCount]:
    """Pooled vector [H] of one sequence through the sparse engine."""
    engine = SparseEncoder(params, mask)
    pooled = engine.encode(np.asarray(tokens)[None, :])[0]
    return pooled, engine.counts


@dataclass(frozen=True)
class StorageAccount:
    """Task-specific storage beyond the shared checkpoint."""

    total_parameters: int
    stored_entries: int
    fraction: float
    bytes: int
    binary: bool


def storage_accounting(
    config: ModelConfig,
    freeze: FreezeSpec | None = None,
    binary: bool = False,
    maskable: MaskableSet | None = None,
) -> StorageAccount:
    """Entries and bytes a task adds: float32 for trainable tensors, one bit per masked entry."""
    total = sum(math.prod(shape) for shape in parameter_shapes(config).values())
    if binary:
        maskable = maskable or MaskableSet.default(config)
        if freeze is not None:
            maskable = maskable.excluding(freeze.excluded)
        shapes = parameter_shapes(config)
        stored = sum(math.prod(shapes[name]) for name in maskable)
        size = (stored + 7) // 8
    else:
        stored = total if freeze is None else freeze.trainable_count
        size = 4 * stored
    return StorageAccount(total, stored, stored / total, size, binary)
