"""Common utility functions."""

from __future__ import annotations

from collections.abc import Callable, Iterable, Iterator
import csv
import dataclasses
import hashlib
import json
import logging
import math
from pathlib import Path
import typing

import numpy as np

from .fm_exceptions import ConfigError, FormatError, ShapeError

_LOGGER = logging.getLogger(__name__)


class TensorMap:
    """Ordered map from tensor name to numpy array.

    Base container of parameter sets, masks and mask parameters. Iteration
    order is insertion order, which callers keep canonical so flattening is
    stable.
    """

    def __init__(self, entries: Iterable[tuple[str, np.ndarray]] | None = None) -> None:
        """Init."""
        self._entries: dict[str, np.ndarray] = {}
        for name, value in entries or ():
            self._entries[name] = value

    def __repr__(self) -> str:
        """Return string representation of class."""
        return f"{type(self).__name__}({len(self)} tensors, {self.size} entries)"

    def __getitem__(self, name: str) -> np.ndarray:
        """Return tensor by name."""
        return self._entries[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        """Replace a tensor, keeping its position."""
        if name in self._entries and self._entries[name].shape != value.shape:
            raise ShapeError(
                f"{name}: cannot replace shape {self._entries[name].shape} with {value.shape}"
            )
        self._entries[name] = value

    def __contains__(self, name: object) -> bool:
        """Check name membership."""
        return name in self._entries

    def __iter__(self) -> Iterator[str]:
        """Iterate names in order."""
        return iter(self._entries)

    def __len__(self) -> int:
        """Return tensor count."""
        return len(self._entries)

    @property
    def names(self) -> list[str]:
        """Return names in order."""
        return list(self._entries)

    @property
    def size(self) -> int:
        """Return total entry count."""
        return sum(int(value.size) for value in self._entries.values())

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        """Iterate (name, tensor) pairs in order."""
        return iter(self._entries.items())

    def copy(self):
        """Return a deep copy of the same type."""
        clone = type(self).__new__(type(self))
        clone.__dict__.update(self.__dict__)
        clone._entries = {name: value.copy() for name, value in self._entries.items()}
        return clone

    def subset(self, names: Iterable[str]) -> TensorMap:
        """Return a plain TensorMap holding the named tensors, in given order."""
        return TensorMap((name, self._entries[name]) for name in names)

    def map(self, func: Callable[[str, np.ndarray], np.ndarray]):
        """Return a copy of the same type with func applied to every tensor."""
        clone = self.copy()
        clone._entries = {name: func(name, value) for name, value in self._entries.items()}
        return clone

    def flatten(self, names: Iterable[str] | None = None) -> np.ndarray:
        """Concatenate tensors into one vector, in order."""
        selected = self.names if names is None else list(names)
        if not selected:
            return np.zeros(0)
        return np.concatenate([self._entries[name].ravel() for name in selected])

    def checksum(self) -> str:
        """Return SHA-256 over names, shapes, dtypes and raw bytes."""
        digest = hashlib.sha256()
        for name, value in self._entries.items():
            digest.update(name.encode("utf-8"))
            digest.update(str(value.shape).encode("ascii"))
            digest.update(value.dtype.str.encode("ascii"))
            digest.update(np.ascontiguousarray(value).tobytes())
        return digest.hexdigest()

    def congruent(self, other: TensorMap, names: Iterable[str] | None = None) -> None:
        """Raise ShapeError unless other has the same shapes for names."""
        for name in self.names if names is None else names:
            if name not in other:
                raise ShapeError(f"{name}: missing from {type(other).__name__}")
            if self[name].shape != other[name].shape:
                raise ShapeError(
                    f"{name}: shape {self[name].shape} does not match {other[name].shape}"
                )


def stable_hash64(text: str) -> int:
    """Return a platform independent 64-bit hash of text.

    >>> stable_hash64("dropout") == stable_hash64("dropout")
    True

    >>> stable_hash64("a") != stable_hash64("b")
    True
    """
    return int.from_bytes(
        hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "little"
    )


def parse_key_values(text: str) -> dict[str, str]:
    """Parse flat key=value text.

    >>> parse_key_values("a = 1\\n# comment\\n\\nb=x")
    {'a': '1', 'b': 'x'}

    >>> parse_key_values("broken")
    Traceback (most recent call last):
    ...
    finemask.fm_exceptions.ConfigError: Line 1: expected key=value, got 'broken'
    """
    values: dict[str, str] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"Line {number}: expected key=value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"Line {number}: empty key")
        values[key] = value
    return values


def _coerce(value: str, annotation: object) -> object:
    """Convert a config string to the annotated field type."""
    origin = typing.get_origin(annotation)
    if origin is tuple:
        item_type = typing.get_args(annotation)[0]
        return tuple(_coerce(part.strip(), item_type) for part in value.split(","))
    if annotation is bool:
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value}")
    if annotation in (int, float, str):
        return annotation(value)
    return value


def dataclass_from_values(cls: type, values: dict[str, str], strict: bool = True):
    """Build a dataclass from string values, coercing to field types.

    Keys that are not fields raise ConfigError when strict, and are ignored
    otherwise.
    """
    hints = typing.get_type_hints(cls)
    fields = {field.name for field in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in values.items():
        if key not in fields:
            if strict:
                raise ConfigError(f"Unknown {cls.__name__} key: {key}")
            continue
        try:
            kwargs[key] = _coerce(value, hints[key])
        except ValueError as err:
            raise ConfigError(f"Invalid value for {key}: {value!r}") from err
    return cls(**kwargs)


def format_float(value: float | None) -> str:
    """Format a float for CSV output, empty cell for undefined.

    >>> format_float(0.5)
    '0.5'

    >>> format_float(None)
    ''

    >>> format_float(float("nan"))
    ''
    """
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return ""
    return repr(float(value))


def write_csv(path: str | Path, columns: list[str], rows: Iterable[dict]) -> Path:
    """Write rows as UTF-8 CSV with a header row.

    Float cells use `format_float`, so output is byte-stable for equal values.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow(
                [
                    format_float(row.get(column))
                    if isinstance(row.get(column), float) or row.get(column) is None
                    else row.get(column)
                    for column in columns
                ]
            )
    _LOGGER.debug("Wrote CSV %s", path)
    return path


def read_csv(path: str | Path) -> list[dict[str, str]]:
    """Read a CSV written by write_csv."""
    with Path(path).open(encoding="utf-8", newline="") as handle:
        return list(csv.DictReader(handle))


def parse_optional_float(value: str) -> float | None:
    """Parse a CSV cell, empty meaning undefined.

    >>> parse_optional_float("")

    >>> parse_optional_float("0.25")
    0.25
    """
    return float(value) if value != "" else None


def json_loads(text: str | bytes) -> object:
    """Load JSON, raising FormatError on malformed text.

    >>> json_loads('{"a": 1}')
    {'a': 1}
    """
    try:
        return json.loads(text)
    except (json.JSONDecodeError, UnicodeDecodeError) as err:
        raise FormatError(f"Malformed JSON: {err}") from err
