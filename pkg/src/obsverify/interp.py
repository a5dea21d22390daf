"""Multilinear interpolation on rectilinear grids with zero fill outside.

Queries outside the grid get weight zero on every corner, which encodes
the absorbing SINK value 0 used throughout the verification structure.
"""
from __future__ import annotations

import itertools

import numpy as np


def axis_locate(axis: np.ndarray, pts: np.ndarray):
    """Bracket pts on a sorted axis: (lower index, fraction toward upper, inside)."""
    n = axis.shape[0]
    idx = np.searchsorted(axis, pts, side="right") - 1
    idx = np.clip(idx, 0, n - 2)
    width = axis[idx + 1] - axis[idx]
    frac = np.where(width > 0, (pts - axis[idx]) / np.where(width > 0, width, 1.0), 0.0)
    inside = (pts >= axis[0]) & (pts <= axis[-1])
    frac = np.clip(frac, 0.0, 1.0)
    return idx, frac, inside


def corner_terms(axes, pts: np.ndarray):
    """Corners of the cell containing each point.

    axes: list of d sorted node arrays; pts: (n, d).
    Returns a list of 2**d entries (flat_index (n,), weight (n,)) where
    flat_index addresses the row-major flattened grid and weights of
    points outside the grid are zero on every corner.
    """
    pts = np.atleast_2d(pts)
    d = len(axes)
    locs = [axis_locate(axes[k], pts[:, k]) for k in range(d)]
    inside = np.ones(pts.shape[0], dtype=bool)
    for _idx, _frac, ins in locs:
        inside &= ins
    strides = np.ones(d, dtype=np.int64)
    for k in range(d - 2, -1, -1):
        strides[k] = strides[k + 1] * len(axes[k + 1])
    out = []
    for corner in itertools.product((0, 1), repeat=d):
        flat = np.zeros(pts.shape[0], dtype=np.int64)
        w = np.ones(pts.shape[0])
        for k, c in enumerate(corner):
            idx, frac, _ins = locs[k]
            flat += (idx + c) * strides[k]
            w = w * (frac if c else (1.0 - frac))
        out.append((flat, w * inside))
    return out


def interp_flat(values_flat: np.ndarray, terms) -> np.ndarray:
    """Interpolate a flattened grid at points given their corner terms."""
    out = np.zeros(terms[0][0].shape[0])
    for flat, w in terms:
        out += w * values_flat[flat]
    return out


def interpolate(axes, values: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Multilinear interpolation of `values` (grid-shaped) at pts (n, d)."""
    return interp_flat(np.asarray(values).reshape(-1), corner_terms(axes, pts))
