"""Core tensor and mask types, seeded RNG streams, and bit-exact file formats.

All numerics are float64. Types are immutable after construction and safe to
share across threads. Every stochastic operation in this package takes an
explicit 64-bit seed; there is no global RNG state. Independent streams are
derived from (seed, tags) with a counter-based Philox generator, so the same
seed and tags always reproduce the same draws.

On-disk formats (stable, bit-exact contracts):

* RMT tensor file: one ASCII header line ``RMT1 <I> <J> <K>\\n`` followed by
  I*J*K little-endian float64 payload values in row-major order (i slowest,
  k fastest).
* Mask file: plain text lines ``i,j``, one observed grid cell per line.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

__all__ = [
    "RmcError",
    "InvalidArgumentError",
    "TensorFormatError",
    "MalformedHeaderError",
    "TruncatedPayloadError",
    "NegativeEntryError",
    "RadioMapTensor",
    "SlfMatrix",
    "PsdMatrix",
    "SamplingMask",
    "FiberMeasurements",
    "validate_seed",
    "derive_seed",
    "substream",
    "tensor_read",
    "tensor_write",
    "mask_read",
    "mask_write",
    "mask_sample",
    "apply_mask",
]

_MASK64 = (1 << 64) - 1


class RmcError(Exception):
    """Base class for all errors raised by this package."""


class InvalidArgumentError(RmcError, ValueError):
    """An argument violates a documented precondition."""


class TensorFormatError(RmcError):
    """An RMT file violates the format contract."""


class MalformedHeaderError(TensorFormatError):
    """Header line is missing, has the wrong magic, or bad dimensions."""


class TruncatedPayloadError(TensorFormatError):
    """Payload holds fewer values than the header promises."""


class NegativeEntryError(TensorFormatError):
    """Payload contains negative or non-finite entries."""


def _frozen_array(data, dtype=np.float64) -> np.ndarray:
    arr = np.array(data, dtype=dtype, order="C", copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class RadioMapTensor:
    """Dense nonnegative I x J x K power map in linear units."""

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = _frozen_array(self.data)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise InvalidArgumentError(f"expected a 3-d tensor, got shape {arr.shape}")
        if not np.all(arr >= 0.0):
            raise InvalidArgumentError("radio map entries must be finite and >= 0")
        object.__setattr__(self, "data", arr)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]


@dataclass(frozen=True, eq=False)
class SlfMatrix:
    """Per-emitter spatial loss field, an I x J matrix of nonnegative gains."""

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = _frozen_array(self.data)
        if arr.ndim != 2 or min(arr.shape) < 1:
            raise InvalidArgumentError(f"expected a 2-d field, got shape {arr.shape}")
        if not np.all(arr >= 0.0):
            raise InvalidArgumentError("spatial loss field entries must be finite and >= 0")
        object.__setattr__(self, "data", arr)


@dataclass(frozen=True, eq=False)
class PsdMatrix:
    """Per-emitter power spectral densities, one K-vector per column."""

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = _frozen_array(self.data)
        if arr.ndim != 2 or min(arr.shape) < 1:
            raise InvalidArgumentError(f"expected a K x R matrix, got shape {arr.shape}")
        if not np.all(arr >= 0.0):
            raise InvalidArgumentError("PSD entries must be finite and >= 0")
        object.__setattr__(self, "data", arr)

    @property
    def num_emitters(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True, eq=False)
class SamplingMask:
    """Set of observed grid cells on an I x J grid.

    Locations are stored as an (N, 2) int64 array in row-major order
    (sorted by i, then j), which fixes a canonical ordering for measurement
    vectors and files.
    """

    I: int
    J: int
    locations: np.ndarray

    def __post_init__(self) -> None:
        if self.I < 1 or self.J < 1:
            raise InvalidArgumentError("grid dims must be positive")
        locs = np.array(self.locations, dtype=np.int64, copy=True).reshape(-1, 2)
        if locs.shape[0] < 1:
            raise InvalidArgumentError("mask must contain at least one location")
        if np.any(locs < 0) or np.any(locs[:, 0] >= self.I) or np.any(locs[:, 1] >= self.J):
            raise InvalidArgumentError("mask location outside the grid")
        order = np.lexsort((locs[:, 1], locs[:, 0]))
        locs = locs[order]
        if np.any(np.all(np.diff(locs, axis=0) == 0, axis=1)):
            raise InvalidArgumentError("mask contains duplicate locations")
        locs.setflags(write=False)
        object.__setattr__(self, "locations", locs)

    @property
    def n(self) -> int:
        return self.locations.shape[0]

    def flat_indices(self) -> np.ndarray:
        """Row-major flat indices i*J + j of the observed cells."""
        return self.locations[:, 0] * self.J + self.locations[:, 1]

    def dense(self) -> np.ndarray:
        """Boolean I x J indicator of observed cells."""
        out = np.zeros((self.I, self.J), dtype=bool)
        out[self.locations[:, 0], self.locations[:, 1]] = True
        return out


@dataclass(frozen=True, eq=False)
class FiberMeasurements:
    """Spectral fibers collected at the observed cells, one row per cell.

    ``values[n]`` is the length-K fiber at ``mask.locations[n]``. Iterating
    yields ``(i, j, fiber)`` triples in mask order.
    """

    mask: SamplingMask
    values: np.ndarray

    def __post_init__(self) -> None:
        vals = _frozen_array(self.values)
        if vals.ndim != 2 or vals.shape[0] != self.mask.n:
            raise InvalidArgumentError(
                f"values must be (N, K) with N={self.mask.n}, got {vals.shape}"
            )
        object.__setattr__(self, "values", vals)

    @property
    def num_bands(self) -> int:
        return self.values.shape[1]

    def __len__(self) -> int:
        return self.mask.n

    def __iter__(self) -> Iterator[tuple[int, int, np.ndarray]]:
        for (i, j), fiber in zip(self.mask.locations, self.values):
            yield int(i), int(j), fiber


# --------------------------------------------------------------------------
# Seeding
# --------------------------------------------------------------------------

def validate_seed(seed: int) -> int:
    if not isinstance(seed, (int, np.integer)) or isinstance(seed, bool):
        raise InvalidArgumentError(f"seed must be an integer, got {type(seed).__name__}")
    seed = int(seed)
    if seed < 0 or seed > _MASK64:
        raise InvalidArgumentError("seed must fit in an unsigned 64-bit integer")
    return seed


def _tag_word(tag: int | str) -> int:
    if isinstance(tag, (int, np.integer)) and not isinstance(tag, bool):
        if tag < 0:
            raise InvalidArgumentError("integer stream tags must be >= 0")
        return int(tag) & _MASK64
    if isinstance(tag, str):
        digest = hashlib.blake2s(tag.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little")
    raise InvalidArgumentError(f"stream tag must be int or str, got {type(tag).__name__}")


def substream(seed: int, *tags: int | str) -> np.random.Generator:
    """Independent counter-based generator for (seed, tags).

    Equal inputs always yield identical streams; distinct tags yield
    statistically independent streams from the same seed.
    """
    entropy = [validate_seed(seed)] + [_tag_word(t) for t in tags]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def derive_seed(seed: int, *tags: int | str) -> int:
    """Deterministic child seed for handing to another seeded operation."""
    return int(substream(seed, *tags).integers(0, 1 << 64, dtype=np.uint64))


# --------------------------------------------------------------------------
# File formats
# --------------------------------------------------------------------------

_RMT_MAGIC = b"RMT1"
_HEADER_LIMIT = 256


def tensor_write(tensor: RadioMapTensor, path: str | Path) -> None:
    """Write ``tensor`` in the RMT format. Round-trips bit-exactly."""
    I, J, K = tensor.dims
    with open(path, "wb") as fh:
        fh.write(f"RMT1 {I} {J} {K}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())


def tensor_read(path: str | Path) -> RadioMapTensor:
    """Read an RMT file written by :func:`tensor_write`."""
    with open(path, "rb") as fh:
        header = fh.readline(_HEADER_LIMIT)
        if not header.endswith(b"\n"):
            raise MalformedHeaderError(f"{path}: missing or oversized header line")
        parts = header.strip().split()
        if len(parts) != 4 or parts[0] != _RMT_MAGIC:
            raise MalformedHeaderError(f"{path}: expected 'RMT1 <I> <J> <K>' header")
        try:
            dims = tuple(int(p) for p in parts[1:])
        except ValueError as exc:
            raise MalformedHeaderError(f"{path}: non-integer dimension in header") from exc
        if min(dims) < 1:
            raise MalformedHeaderError(f"{path}: dimensions must be positive, got {dims}")
        count = dims[0] * dims[1] * dims[2]
        payload = fh.read(count * 8)
        if len(payload) < count * 8:
            raise TruncatedPayloadError(
                f"{path}: expected {count} values, found {len(payload) // 8}"
            )
        if fh.read(1):
            raise TensorFormatError(f"{path}: trailing bytes after payload")
    data = np.frombuffer(payload, dtype="<f8").reshape(dims)
    if not np.all(data >= 0.0):
        raise NegativeEntryError(f"{path}: payload contains negative or non-finite entries")
    return RadioMapTensor(data)


def mask_write(mask: SamplingMask, path: str | Path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for i, j in mask.locations:
            fh.write(f"{i},{j}\n")


def mask_read(path: str | Path, I: int, J: int) -> SamplingMask:
    locs = []
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                si, sj = line.split(",")
                locs.append((int(si), int(sj)))
            except ValueError as exc:
                raise InvalidArgumentError(f"{path}:{lineno}: expected 'i,j'") from exc
    return SamplingMask(I, J, np.asarray(locs, dtype=np.int64))


# --------------------------------------------------------------------------
# Sampling
# --------------------------------------------------------------------------

def mask_sample(I: int, J: int, rho: float, seed: int) -> SamplingMask:
    """Sample N = round(rho * I * J) distinct cells uniformly without replacement.

    Rounding is half away from zero, so rho = 0.10 on a 64 x 64 grid gives
    N = 410.
    """
    if I < 1 or J < 1:
        raise InvalidArgumentError("grid dims must be positive")
    if not 0.0 < rho <= 1.0:
        raise InvalidArgumentError(f"rho must lie in (0, 1], got {rho}")
    n = int(math.floor(rho * I * J + 0.5))
    if n < 1:
        raise InvalidArgumentError(f"rho={rho} rounds to an empty mask on a {I}x{J} grid")
    rng = substream(seed, "mask-sample")
    flat = rng.choice(I * J, size=n, replace=False)
    locs = np.stack(np.unravel_index(np.sort(flat), (I, J)), axis=1)
    return SamplingMask(I, J, locs)


def apply_mask(tensor: RadioMapTensor, mask: SamplingMask) -> FiberMeasurements:
    """Collect the full spectral fiber at every observed cell."""
    I, J, _ = tensor.dims
    if mask.I != I or mask.J != J:
        raise InvalidArgumentError(
            f"mask grid {mask.I}x{mask.J} does not match tensor grid {I}x{J}"
        )
    values = tensor.data[mask.locations[:, 0], mask.locations[:, 1], :]
    return FiberMeasurements(mask, values)
