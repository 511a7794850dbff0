"""Rotary position embeddings over consecutive coordinate pairs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigurationError
from .tensor import Tensor, _make


def _angles(positions: np.ndarray, head_dim: int, base: float) -> np.ndarray:
    inv_freq = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    return np.outer(positions.astype(np.float64), inv_freq)


@dataclass(frozen=True)
class RopeTable:
    """Precomputed cos/sin rows, one per absolute position.

    ``cos[m, j]`` and ``sin[m, j]`` hold the rotation for coordinate pair
    ``(2j, 2j+1)`` at position ``m``; the angle is ``m * base**(-2j/head_dim)``.
    The frequencies are fixed, so the table is immutable and shareable.
    """

    head_dim: int
    base: float
    cos: np.ndarray
    sin: np.ndarray

    @classmethod
    def build(cls, head_dim: int, max_positions: int, base: float = 10000.0) -> RopeTable:
        if head_dim <= 0 or head_dim % 2:
            raise ConfigurationError(f"rotary head dimension must be even and positive, got {head_dim}")
        if max_positions <= 0:
            raise ConfigurationError(f"max_positions must be positive, got {max_positions}")
        ang = _angles(np.arange(max_positions), head_dim, base)
        cos, sin = np.cos(ang), np.sin(ang)
        cos.flags.writeable = False
        sin.flags.writeable = False
        return cls(head_dim, float(base), cos, sin)

    @property
    def max_positions(self) -> int:
        return self.cos.shape[0]

    def rows(self, positions) -> tuple[np.ndarray, np.ndarray]:
        """cos/sin rows for (possibly negative) integer positions."""
        pos = np.asarray(positions, dtype=np.int64)
        if pos.size and np.abs(pos).max() >= self.max_positions:
            raise ConfigurationError(
                f"position {int(np.abs(pos).max())} outside rotary table of {self.max_positions} rows"
            )
        idx = np.abs(pos)
        sign = np.where(pos < 0, -1.0, 1.0)[..., None]
        return self.cos[idx], self.sin[idx] * sign


def rope_extend(table: RopeTable, new_max: int) -> RopeTable:
    """Grow ``table`` to ``new_max`` rows; existing rows are kept verbatim."""
    if new_max <= table.max_positions:
        raise ConfigurationError(f"new_max {new_max} must exceed current {table.max_positions}")
    ang = _angles(np.arange(table.max_positions, new_max), table.head_dim, table.base)
    cos = np.concatenate([table.cos, np.cos(ang)])
    sin = np.concatenate([table.sin, np.sin(ang)])
    cos.flags.writeable = False
    sin.flags.writeable = False
    return RopeTable(table.head_dim, table.base, cos, sin)


def _rotate(v: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    even, odd = v[..., 0::2], v[..., 1::2]
    out = np.empty_like(v)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def rope_apply(x: Tensor, positions, table: RopeTable) -> Tensor:
    """Rotate each pair ``(x[2j], x[2j+1])`` of the last axis by its position angle.

    ``x`` has shape ``[..., n, head_dim]`` and ``positions`` has length ``n``.
    """
    if x.shape[-1] != table.head_dim:
        raise ConfigurationError(f"last extent {x.shape[-1]} != rotary head dim {table.head_dim}")
    positions = np.asarray(positions, dtype=np.int64)
    if positions.shape != (x.shape[-2],):
        raise ConfigurationError(f"{positions.shape[0]} positions for sequence length {x.shape[-2]}")
    cos, sin = table.rows(positions)
    cos = cos.astype(x.dtype)
    sin = sin.astype(x.dtype)
    out = _rotate(x.data, cos, sin)
    # inverse rotation is the transpose
    return _make(out, (x,), lambda g: (_rotate(g, cos, -sin),), "rope")
