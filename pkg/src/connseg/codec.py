"""Mask <-> connectivity cube conversion.

A cube has shape ``(H, W, C)`` (channel-minor, flat index ``(i*W + j)*C + c``).
Entry ``(i, j, c)`` says whether pixel ``(i, j)`` and its neighbour at
``pattern.offsets[c]`` are both salient. Out-of-image neighbours count as
background.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .grid import Pattern, as_mask, shift


@dataclass(frozen=True, eq=False)
class ConnectivityCube:
    values: np.ndarray
    pattern: Pattern

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 3 or v.shape[2] != self.pattern.channels:
            raise ValueError(
                f"cube shape {v.shape} does not match {self.pattern.name} "
                f"({self.pattern.channels} channels)"
            )
        object.__setattr__(self, "values", v)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def is_binary(self) -> bool:
        v = self.values
        return v.dtype == bool or bool(np.all((v == 0) | (v == 1)))

    @classmethod
    def from_chw(cls, array: np.ndarray, pattern: Pattern) -> "ConnectivityCube":
        """Wrap a channel-first ``(C, H, W)`` model output."""
        return cls(np.ascontiguousarray(np.moveaxis(np.asarray(array), 0, -1)), pattern)

    def to_chw(self) -> np.ndarray:
        return np.ascontiguousarray(np.moveaxis(self.values, -1, 0))

    def __eq__(self, other):
        if not isinstance(other, ConnectivityCube):
            return NotImplemented
        return self.pattern is other.pattern and np.array_equal(self.values, other.values)


def encode(mask, pattern: Pattern) -> ConnectivityCube:
    m = as_mask(mask)
    planes = [m & shift(m, dr, dc, False) for dr, dc in pattern.offsets]
    return ConnectivityCube(np.stack(planes, axis=-1).astype(np.uint8), pattern)


def _check_threshold(t: float) -> None:
    if not 0.0 < t < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {t}")


def threshold_cube(cube: ConnectivityCube, t: float) -> ConnectivityCube:
    _check_threshold(t)
    return ConnectivityCube((cube.values > t).astype(np.uint8), cube.pattern)


def agreement(cube: ConnectivityCube) -> np.ndarray:
    """Boolean ``(H, W, C)`` map of mutually confirmed connections."""
    b = cube.values.astype(bool)
    p = cube.pattern
    out = np.empty_like(b)
    for c, (dr, dc) in enumerate(p.offsets):
        out[..., c] = b[..., c] & shift(b[..., p.opposite[c]], dr, dc, False)
    return out


def connection_counts(cube: ConnectivityCube, t: float = 0.5) -> np.ndarray:
    return agreement(threshold_cube(cube, t)).sum(axis=-1)


def decode(cube: ConnectivityCube, t: float = 0.5, k: int = 1) -> np.ndarray:
    """Salient mask: pixels with at least ``k`` agreed connections at threshold ``t``."""
    _check_threshold(t)
    if not 1 <= k <= cube.pattern.channels:
        raise ValueError(f"k must lie in [1, {cube.pattern.channels}], got {k}")
    return connection_counts(cube, t) >= k


def fuse_cubes(cubes: Sequence[ConnectivityCube]) -> ConnectivityCube:
    """Element-wise mean, summed strictly left to right."""
    if not cubes:
        raise ValueError("cannot fuse an empty list of cubes")
    first = cubes[0]
    for c in cubes[1:]:
        if c.pattern is not first.pattern or c.shape != first.shape:
            raise ValueError(
                f"cube mismatch: {c.pattern.name}{c.shape} vs {first.pattern.name}{first.shape}"
            )
    dtype = np.result_type(first.values.dtype, np.float32)
    total = first.values.astype(dtype, copy=True)
    for c in cubes[1:]:
        total += c.values
    return ConnectivityCube(total / dtype.type(len(cubes)), first.pattern)


def hflip_cube(cube: ConnectivityCube) -> ConnectivityCube:
    """Mirror a cube left-right, remapping channels so it describes the mirrored mask.

    The operation is its own inverse.
    """
    perm = list(cube.pattern.hflip)
    return ConnectivityCube(np.ascontiguousarray(cube.values[:, ::-1][..., perm]), cube.pattern)
