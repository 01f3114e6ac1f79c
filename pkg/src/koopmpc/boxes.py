"""Axis-aligned boxes used for state and input constraint sets."""

from dataclasses import dataclass
from itertools import product

import numpy as np

from .errors import InvalidParameter


@dataclass(frozen=True)
class Box:
    """Compact box {v : lo <= v <= hi}, the constraint-set primitive.

    Attributes
    ----------
    lo, hi : np.ndarray
        Lower and upper bounds, shape (dim,).
    """

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise InvalidParameter("box bounds must be 1-D arrays of equal length")
        if np.any(hi < lo):
            raise InvalidParameter("box upper bound below lower bound")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def symmetric(cls, half_width, dim=None):
        """Box [-w, w]^dim; `half_width` may be a scalar or per-axis array."""
        w = np.atleast_1d(np.asarray(half_width, dtype=float))
        if dim is not None and w.size == 1:
            w = np.full(dim, w[0])
        return cls(-w, w)

    @property
    def dim(self):
        return self.lo.size

    @property
    def half_width(self):
        return 0.5 * (self.hi - self.lo)

    @property
    def center(self):
        return 0.5 * (self.hi + self.lo)

    def contains(self, v, tol=0.0):
        v = np.asarray(v, dtype=float)
        return bool(np.all(v >= self.lo - tol) & np.all(v <= self.hi + tol))

    def clip(self, v):
        return np.clip(np.asarray(v, dtype=float), self.lo, self.hi)

    def sample(self, rng, size=None):
        """Uniform i.i.d. draws; shape (dim,) or (size, dim)."""
        if size is None:
            return rng.uniform(self.lo, self.hi)
        return rng.uniform(self.lo, self.hi, size=(size, self.dim))

    def corners(self):
        """All 2^dim vertices, shape (2^dim, dim)."""
        return np.array(list(product(*zip(self.lo, self.hi))))

    def shrink(self, margin):
        """Pontryagin difference with the `margin`-ball, realized per axis.

        Raises
        ------
        InvalidParameter
            If the margin exceeds a half-width (empty difference).
        """
        margin = float(margin)
        if np.any(margin > self.half_width):
            raise InvalidParameter("shrink margin exceeds box half-width")
        return Box(self.lo + margin, self.hi - margin)

    def scale(self, factor):
        c, w = self.center, self.half_width
        return Box(c - factor * w, c + factor * w)

    def grid(self, points_per_axis):
        """Regular grid including the boundary, shape (points^dim, dim)."""
        axes = [np.linspace(l, h, points_per_axis) for l, h in zip(self.lo, self.hi)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def to_dict(self):
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["lo"], dtype=float), np.asarray(d["hi"], dtype=float))
