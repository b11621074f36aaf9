"""Window-based serialization of sparse 3D features and fixed-size grouping.

Features are ordered window-major, then by offset inside the window, with
x -> y -> z priority for the X-axis partition.  The Y-axis partition swaps the
roles of the x and y coordinates (the window dimensions are not swapped), so
serializing swapped coordinates under the X partition is the same as
serializing the originals under the Y partition.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .geometry import SparseFeatureMap

Axis = Literal["x", "y"]


@dataclass(frozen=True)
class WindowSpec:
    wx: int
    wy: int
    wz: int
    axis: Axis = "x"
    # Literal window-index strides (W_y*W_z, W_z).  Only injective while the
    # window grid stays below the window dims; kept for A/B comparisons.
    literal_strides: bool = False

    def __post_init__(self):
        if min(self.wx, self.wy, self.wz) < 1:
            raise ValueError(f"window dims must be >= 1, got {(self.wx, self.wy, self.wz)}")
        if self.axis not in ("x", "y"):
            raise ValueError(f"axis must be 'x' or 'y', got {self.axis!r}")

    @property
    def dims(self) -> np.ndarray:
        return np.array([self.wx, self.wy, self.wz], dtype=np.int64)

    @property
    def volume(self) -> int:
        return self.wx * self.wy * self.wz

    def with_axis(self, axis: Axis) -> "WindowSpec":
        return WindowSpec(self.wx, self.wy, self.wz, axis, self.literal_strides)


@dataclass(frozen=True)
class SerializationKey:
    window_index: int
    in_window_index: int
    global_index: int


def _partition_frame(coords: np.ndarray, axis: Axis) -> np.ndarray:
    c = np.asarray(coords, dtype=np.int64)
    if axis == "y":
        c = c[..., [1, 0, 2]]
    return c


def _check_non_negative(coords: np.ndarray) -> None:
    if np.any(coords < 0):
        bad = np.argwhere(np.atleast_2d(coords) < 0)[0][0]
        raise ValueError(f"negative coordinate at feature {bad}: features must be shifted to the non-negative grid")


def window_coords(c, spec: WindowSpec) -> np.ndarray:
    """Window coordinate(s) of cell(s) ``c`` in the partition frame."""
    c = np.asarray(c, dtype=np.int64)
    _check_non_negative(c)
    return _partition_frame(c, spec.axis) // spec.dims


def in_window_index(c, spec: WindowSpec):
    c = np.asarray(c, dtype=np.int64)
    _check_non_negative(c)
    local = _partition_frame(c, spec.axis) % spec.dims
    idx = (local[..., 0] * spec.wy + local[..., 1]) * spec.wz + local[..., 2]
    return int(idx) if idx.ndim == 0 else idx


def window_counts(coords: np.ndarray, spec: WindowSpec) -> np.ndarray:
    """Windows per axis (original axis order) needed to cover ``coords``."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    if len(coords) == 0:
        return np.ones(3, dtype=np.int64)
    per_axis = coords.max(axis=0) // spec.dims[[1, 0, 2] if spec.axis == "y" else [0, 1, 2]] + 1
    return per_axis


def window_index(wc, spec: WindowSpec, counts) -> np.ndarray | int:
    """Row-major linear index of window coordinate(s) ``wc``.

    ``wc`` is in the partition frame (as returned by :func:`window_coords`);
    ``counts`` is given in the original axis order and swapped here for the
    Y partition.
    """
    wc = np.asarray(wc, dtype=np.int64)
    counts = _partition_frame(np.asarray(counts, dtype=np.int64), spec.axis)
    if np.any(wc < 0) or np.any(wc >= counts):
        raise ValueError(f"window coordinate outside window grid {counts.tolist()}")
    if spec.literal_strides:
        sy, sz = spec.wy * spec.wz, spec.wz
    else:
        sy, sz = counts[1] * counts[2], counts[2]
    idx = wc[..., 0] * sy + wc[..., 1] * sz + wc[..., 2]
    return int(idx) if idx.ndim == 0 else idx


def serialization_keys(coords: np.ndarray, spec: WindowSpec, counts=None):
    """Vectorised ``(window_index, in_window_index, global_index)`` arrays."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    if counts is None:
        counts = window_counts(coords, spec)
    wc = window_coords(coords, spec)
    win = np.asarray(window_index(wc, spec, counts), dtype=np.int64).reshape(-1)
    inwin = np.asarray(in_window_index(coords, spec), dtype=np.int64).reshape(-1)
    return win, inwin, win * spec.volume + inwin


def serialize(sparse: SparseFeatureMap, spec: WindowSpec, counts=None):
    """Order features by global serialization index.

    Returns ``(ordered_features, permutation)`` where
    ``ordered_features[i] == sparse.features[permutation[i]]``.  The sort is
    stable: features sharing a cell keep their input order.
    """
    _, _, glob = serialization_keys(sparse.coords, spec, counts)
    perm = np.argsort(glob, kind="stable")
    return sparse.features[perm], perm


@dataclass(frozen=True)
class GroupedSequence:
    groups: np.ndarray  # K x G x D
    mask: np.ndarray  # K x G bool, True = real feature
    permutation: np.ndarray  # sequence position -> original feature index

    @property
    def num_features(self) -> int:
        return int(self.mask.sum())


def group(ordered: np.ndarray, group_size: int, pad_value=None, permutation=None) -> GroupedSequence:
    if group_size < 1:
        raise ValueError("group_size must be >= 1")
    ordered = np.asarray(ordered, dtype=np.float64)
    n, d = ordered.shape
    k = max(1, -(-n // group_size)) if n else 0
    pad = np.zeros(d) if pad_value is None else np.asarray(pad_value, dtype=np.float64)
    flat = np.empty((k * group_size, d))
    flat[:n] = ordered
    flat[n:] = pad
    mask = np.zeros(k * group_size, dtype=bool)
    mask[:n] = True
    perm = np.arange(n) if permutation is None else np.asarray(permutation)
    return GroupedSequence(flat.reshape(k, group_size, d), mask.reshape(k, group_size), perm)


def ungroup(grouped: GroupedSequence) -> np.ndarray:
    """Real (unpadded) features in sequence order."""
    return grouped.groups[grouped.mask]


def positional_encoding(coords, dim: int, base: float = 10000.0) -> np.ndarray:
    """Sinusoidal encoding of integer 3D coordinates, ``dim/3`` channels per axis.

    Each axis block is ``[sin(c * f_0..f_{h-1}), cos(c * f_0..f_{h-1})]`` with
    ``h = dim/6`` and ``f_i = base**(-i/h)``.
    """
    if dim % 6 != 0 or dim <= 0:
        raise ValueError(f"positional encoding dim must be a positive multiple of 6, got {dim}")
    c = np.asarray(coords, dtype=np.float64)
    single = c.ndim == 1
    c = np.atleast_2d(c)
    half = dim // 6
    freqs = base ** (-np.arange(half) / half)
    blocks = []
    for axis in range(3):
        ang = c[:, axis:axis + 1] * freqs
        blocks += [np.sin(ang), np.cos(ang)]
    out = np.concatenate(blocks, axis=1)
    return out[0] if single else out
