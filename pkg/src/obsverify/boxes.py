"""Axis-aligned boxes and finite box unions.

Boxes are the only region shape used anywhere: model domains, initial
sets, secret regions and grid specifications are all boxes or finite
unions of boxes, so membership tests stay exact.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Box:
    """Axis-aligned box [lo, hi] in R^d, closed on both sides."""

    lo: tuple[float, ...]
    hi: tuple[float, ...]

    def __post_init__(self):
        if len(self.lo) != len(self.hi):
            raise ValueError("lo and hi must have equal length")
        if len(self.lo) == 0:
            raise ValueError("box must have dimension >= 1")
        if any(l > h for l, h in zip(self.lo, self.hi)):
            raise ValueError(f"empty box: lo={self.lo} hi={self.hi}")

    @staticmethod
    def make(lo, hi) -> "Box":
        lo = np.atleast_1d(np.asarray(lo, dtype=float))
        hi = np.atleast_1d(np.asarray(hi, dtype=float))
        return Box(tuple(lo.tolist()), tuple(hi.tolist()))

    @property
    def dim(self) -> int:
        return len(self.lo)

    @property
    def lo_arr(self) -> np.ndarray:
        return np.asarray(self.lo, dtype=float)

    @property
    def hi_arr(self) -> np.ndarray:
        return np.asarray(self.hi, dtype=float)

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Vectorized membership: points (n, d) -> bool (n,)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return np.all((pts >= self.lo_arr) & (pts <= self.hi_arr), axis=-1)

    def contains_box(self, other: "Box") -> bool:
        return bool(
            np.all(other.lo_arr >= self.lo_arr) and np.all(other.hi_arr <= self.hi_arr)
        )

    def center(self) -> np.ndarray:
        return 0.5 * (self.lo_arr + self.hi_arr)

    def widths(self) -> np.ndarray:
        return self.hi_arr - self.lo_arr

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """n uniform points, shape (n, d)."""
        return rng.uniform(self.lo_arr, self.hi_arr, size=(n, self.dim))

    def grid_axes(self, nodes_per_dim: int) -> list[np.ndarray]:
        """Per-dimension uniformly spaced node coordinates (endpoints included)."""
        if nodes_per_dim < 2:
            raise ValueError("need at least 2 nodes per dimension")
        return [
            np.linspace(self.lo[k], self.hi[k], nodes_per_dim)
            for k in range(self.dim)
        ]

    def grid_points(self, nodes_per_dim: int) -> np.ndarray:
        """All grid nodes as an (nodes_per_dim**d, d) array, row-major order."""
        axes = self.grid_axes(nodes_per_dim)
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)


@dataclass(frozen=True)
class BoxUnion:
    """Finite union of boxes; the concrete representation of state regions."""

    boxes: tuple[Box, ...]

    def __post_init__(self):
        if not self.boxes:
            raise ValueError("union must contain at least one box")
        d = self.boxes[0].dim
        if any(b.dim != d for b in self.boxes):
            raise ValueError("all boxes in a union must share a dimension")

    @staticmethod
    def make(boxes) -> "BoxUnion":
        out = []
        for b in boxes:
            out.append(b if isinstance(b, Box) else Box.make(*b))
        return BoxUnion(tuple(out))

    @property
    def dim(self) -> int:
        return self.boxes[0].dim

    def contains(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        inside = np.zeros(pts.shape[0], dtype=bool)
        for b in self.boxes:
            inside |= b.contains(pts)
        return inside

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Uniform over the union, weighting boxes by volume (point boxes by count)."""
        vols = np.array([float(np.prod(b.widths())) for b in self.boxes])
        if vols.sum() <= 0.0:
            vols = np.ones(len(self.boxes))
        probs = vols / vols.sum()
        idx = rng.choice(len(self.boxes), size=n, p=probs)
        pts = np.empty((n, self.dim))
        for i, b in enumerate(self.boxes):
            sel = idx == i
            if np.any(sel):
                pts[sel] = b.sample(rng, int(sel.sum()))
        return pts


def as_region(obj) -> BoxUnion:
    """Coerce a Box, BoxUnion, or (lo, hi) pair into a BoxUnion."""
    if isinstance(obj, BoxUnion):
        return obj
    if isinstance(obj, Box):
        return BoxUnion((obj,))
    return BoxUnion.make([obj])
