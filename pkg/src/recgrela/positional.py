"""Positional encodings: fixed sinusoidal, learnable additive, and rotary.

Rotary convention: features are grouped into adjacent pairs (2t, 2t+1)
treated as (real, imaginary) components; position m rotates pair t by
m * theta_t with theta_t = 10000^(-2t / dim) for t = 0 .. dim/2 - 1 (0-based
frequency index).  Checkpoints depend on this pairing, so it is fixed here.
"""

import math

import numpy as np

from .errors import BoundsError, ContractError
from .numerics import Tensor, record


def ape_encode(position: int, dim_index: int, dim: int) -> float:
    """Fixed sinusoidal value for one (position, feature) slot.

    Even slots 2t carry sin(p / 10000^(2t/(dim/2))), odd slots the paired
    cosine at the same frequency.
    """
    if not 0 <= dim_index < dim:
        raise BoundsError(f"dim_index {dim_index} outside [0, {dim})")
    if position < 0:
        raise BoundsError(f"position must be non-negative, got {position}")
    t = dim_index // 2
    freq = 1.0 / (10000.0 ** (2.0 * t / (dim / 2.0)))
    angle = position * freq
    return math.sin(angle) if dim_index % 2 == 0 else math.cos(angle)


def ape_table(n_positions: int, dim: int) -> np.ndarray:
    """Deterministic (n_positions, dim) sinusoidal table; regeneration is
    bitwise identical."""
    t = np.arange(dim // 2 + dim % 2)
    freqs = 1.0 / (10000.0 ** (2.0 * t / (dim / 2.0)))
    angles = np.arange(n_positions)[:, None] * freqs[None, :]
    table = np.empty((n_positions, dim))
    table[:, 0::2] = np.sin(angles[:, : (dim + 1) // 2])
    table[:, 1::2] = np.cos(angles[:, : dim // 2])
    return table


class LearnablePositionTable:
    """Trainable (max_len, dim) additive position parameters."""

    def __init__(self, max_len: int, dim: int, init=None):
        data = np.zeros((max_len, dim)) if init is None else np.asarray(init)
        if data.shape != (max_len, dim):
            raise ContractError(
                f"init shape {data.shape} != ({max_len}, {dim})")
        self.max_len = max_len
        self.dim = dim
        self.table = Tensor(data, requires_grad=True, name="position_table")


def lpe_add(x: Tensor, table: LearnablePositionTable) -> Tensor:
    """Row m of x gets table row m added; sequences longer than the table
    are rejected."""
    n = x.shape[-2]
    if n > table.max_len:
        raise BoundsError(
            f"sequence length {n} exceeds position table ({table.max_len})")
    prefix = table.table.data[:n]
    out = Tensor(x.data + prefix)

    def bwd(g):
        gt = np.zeros_like(table.table.data)
        gt[:n] = g.reshape(-1, n, table.dim).sum(axis=0)
        return (g, gt)

    return record(out, (x, table.table), bwd)


class RopeTable:
    """Precomputed cos/sin rotation tables for rotary position encoding.

    ``dim`` must be even (pairwise complex grouping).  Tables are immutable
    after construction; positions past ``max_len`` are rejected rather than
    extrapolated.
    """

    def __init__(self, max_len: int, dim: int, base: float = 10000.0):
        if dim % 2 != 0:
            raise ContractError(f"rotary dim must be even, got {dim}")
        if max_len < 1:
            raise ContractError(f"max_len must be positive, got {max_len}")
        t = np.arange(dim // 2)
        self.theta = base ** (-2.0 * t / dim)
        self.angles = np.arange(max_len)[:, None] * self.theta[None, :]
        self.cos = np.cos(self.angles)
        self.sin = np.sin(self.angles)
        self.max_len = max_len
        self.dim = dim

    @classmethod
    def identity(cls, max_len: int, dim: int) -> "RopeTable":
        """All-zero angles: rotation is the identity at every position."""
        table = cls(max_len, dim)
        table.theta = np.zeros_like(table.theta)
        table.angles = np.zeros_like(table.angles)
        table.cos = np.ones_like(table.cos)
        table.sin = np.zeros_like(table.sin)
        return table


def rotate_pairs(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Apply per-position pair rotation to a (..., N, dim) array.

    cos/sin are (N, dim/2) slices of a RopeTable.
    """
    x0 = x[..., 0::2]
    x1 = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = x0 * cos - x1 * sin
    out[..., 1::2] = x0 * sin + x1 * cos
    return out


def rope_apply(x: Tensor, table: RopeTable, position_offset: int = 0) -> Tensor:
    """Rotate each feature pair of x (..., N, dim) by (m + offset) * theta_t.

    Norm of each pair is preserved (rotations are orthogonal); gradient is
    the inverse rotation.
    """
    d = x.shape[-1]
    if d != table.dim:
        raise ContractError(f"last extent {d} != rotary dim {table.dim}")
    n = x.shape[-2]
    if position_offset < 0:
        raise BoundsError(f"position offset must be >= 0, got {position_offset}")
    if n + position_offset > table.max_len:
        raise BoundsError(
            f"positions up to {n + position_offset} exceed table ({table.max_len})")
    cos = table.cos[position_offset:position_offset + n]
    sin = table.sin[position_offset:position_offset + n]
    out = Tensor(rotate_pairs(x.data, cos, sin))
    return record(out, (x,), lambda g: (rotate_pairs(g, cos, -sin),))
