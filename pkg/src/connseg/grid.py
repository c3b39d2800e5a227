"""Neighbourhood patterns and mask helpers shared by the codec, trainer and TTA."""

from __future__ import annotations

import enum
from functools import cached_property

import numpy as np


class Pattern(enum.Enum):
    """Pixel connectivity pattern.

    Channels are ordered row-major over offsets sorted by ``(drow, dcol)``;
    for ``N8`` this gives C1 = top-left, C4 = left, C5 = right.
    """

    N4 = 0
    N8 = 1
    N12 = 2

    @classmethod
    def parse(cls, name: str | "Pattern") -> "Pattern":
        if isinstance(name, Pattern):
            return name
        try:
            return cls[str(name).upper()]
        except KeyError:
            raise ValueError(f"unknown connectivity pattern {name!r}; expected n4, n8 or n12") from None

    @cached_property
    def offsets(self) -> tuple[tuple[int, int], ...]:
        return pattern_offsets(self)

    @property
    def channels(self) -> int:
        return len(self.offsets)

    @cached_property
    def opposite(self) -> tuple[int, ...]:
        index = {o: c for c, o in enumerate(self.offsets)}
        return tuple(index[(-dr, -dc)] for dr, dc in self.offsets)

    @cached_property
    def hflip(self) -> tuple[int, ...]:
        index = {o: c for c, o in enumerate(self.offsets)}
        return tuple(index[(dr, -dc)] for dr, dc in self.offsets)


def pattern_offsets(kind: Pattern) -> tuple[tuple[int, int], ...]:
    if kind is Pattern.N4:
        keep = lambda dr, dc: abs(dr) + abs(dc) == 1
        reach = 1
    elif kind is Pattern.N8:
        keep = lambda dr, dc: max(abs(dr), abs(dc)) == 1
        reach = 1
    elif kind is Pattern.N12:
        keep = lambda dr, dc: 0 < abs(dr) + abs(dc) <= 2
        reach = 2
    else:
        raise ValueError(kind)
    span = range(-reach, reach + 1)
    return tuple((dr, dc) for dr in span for dc in span if keep(dr, dc))


def opposite_channel(c: int, pattern: Pattern) -> int:
    if not 0 <= c < pattern.channels:
        raise IndexError(f"channel {c} out of range for {pattern.name}")
    return pattern.opposite[c]


def hflip_channel_permutation(pattern: Pattern) -> tuple[int, ...]:
    return pattern.hflip


def as_mask(mask) -> np.ndarray:
    """Validate and return a 2-D boolean mask (row 0, col 0 at top-left)."""
    m = np.asarray(mask)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ValueError(f"mask must be a non-empty 2-D grid, got shape {m.shape}")
    return m.astype(bool, copy=False)


def shift(plane: np.ndarray, dr: int, dc: int, fill=0) -> np.ndarray:
    """Return ``out[i, j] = plane[i + dr, j + dc]`` with out-of-bounds reads set to ``fill``.

    Works on the two leading axes; trailing axes are carried along.
    """
    h, w = plane.shape[:2]
    out = np.full_like(plane, fill)
    r0, r1 = max(0, -dr), min(h, h - dr)
    c0, c1 = max(0, -dc), min(w, w - dc)
    if r0 < r1 and c0 < c1:
        out[r0:r1, c0:c1] = plane[r0 + dr:r1 + dr, c0 + dc:c1 + dc]
    return out


def isolated_pixels(mask, pattern: Pattern = Pattern.N4) -> np.ndarray:
    """Salient pixels that have no salient neighbour under ``pattern``."""
    m = as_mask(mask)
    has_neighbour = np.zeros_like(m)
    for dr, dc in pattern.offsets:
        has_neighbour |= shift(m, dr, dc, False)
    return m & ~has_neighbour


def remove_isolated(mask, pattern: Pattern = Pattern.N4) -> np.ndarray:
    # Dropping an isolated pixel never isolates another one, so one pass is enough.
    m = as_mask(mask)
    return m & ~isolated_pixels(m, pattern)
