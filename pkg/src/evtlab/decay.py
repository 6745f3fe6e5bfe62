"""Spatial distance and decay matrices over a flattened token grid.

Token ``n`` sits at ``(x_n, y_n)`` with ``n = y_n * width + x_n``. A decay
matrix holds, for every token pair, the factor multiplied into the
post-softmax attention weight; it carries no learned parameters.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

PAD = -1


class DecayKind(str, enum.Enum):
    EUCLIDEAN = "euclidean"
    MANHATTAN = "manhattan"
    MINKOWSKI = "minkowski"
    GAUSSIAN_RBF = "gaussian_rbf"
    MULTIQUADRIC_RBF = "multiquadric_rbf"
    INVERSE_MULTIQUADRIC_RBF = "inverse_multiquadric_rbf"
    NONE = "none"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "_")
        aliases = {"gaussian": "gaussian_rbf", "rbf": "gaussian_rbf", "multiquadric": "multiquadric_rbf",
                   "imq": "inverse_multiquadric_rbf", "inverse_multiquadric": "inverse_multiquadric_rbf",
                   "l2": "euclidean", "l1": "manhattan"}
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise ValueError(f"unknown decay kind {value!r}") from None

    @property
    def is_distance(self):
        return self in (DecayKind.EUCLIDEAN, DecayKind.MANHATTAN, DecayKind.MINKOWSKI)

    @property
    def is_rbf(self):
        return self.value.endswith("_rbf")


@dataclass(frozen=True)
class GridCoords:
    height: int
    width: int

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError(f"grid must be at least 1x1, got {self.height}x{self.width}")

    @property
    def n_tokens(self):
        return self.height * self.width

    def coords(self):
        """(N, 2) float array of ``(x_n, y_n)`` in flattening order."""
        y, x = np.divmod(np.arange(self.n_tokens), self.width)
        return np.stack([x, y], axis=1).astype(np.float64)

    def index(self, x, y):
        if not (0 <= x < self.width and 0 <= y < self.height):
            raise IndexError(f"({x}, {y}) outside {self.height}x{self.width} grid")
        return y * self.width + x

    def position(self, n):
        if not 0 <= n < self.n_tokens:
            raise IndexError(f"token {n} outside grid of {self.n_tokens}")
        y, x = divmod(n, self.width)
        return x, y


@dataclass(frozen=True)
class DecaySpec:
    kind: DecayKind = DecayKind.EUCLIDEAN
    gamma: float = 0.875
    p: float = 2.0
    rbf_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", DecayKind.parse(self.kind))
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie strictly in (0, 1), got {self.gamma}")
        if self.kind is DecayKind.MINKOWSKI and not self.p >= 1.0:
            raise ValueError(f"Minkowski order must be >= 1, got {self.p}")
        if self.rbf_scale <= 0:
            raise ValueError(f"rbf_scale must be positive, got {self.rbf_scale}")

    def with_gamma(self, gamma):
        return DecaySpec(self.kind, gamma, self.p, self.rbf_scale)


def gamma_schedule(num_heads, base_exponent=3):
    """Per-head decay bases ``1 - 2**(-base_exponent - n)`` for ``n = 0..num_heads-1``."""
    if num_heads < 1:
        raise ValueError(f"num_heads must be >= 1, got {num_heads}")
    return [1.0 - 2.0 ** (-base_exponent - n) for n in range(num_heads)]


def _axis_distance(dx, dy, kind, p):
    if kind is DecayKind.MANHATTAN or (kind is DecayKind.MINKOWSKI and p == 1.0):
        return dx + dy
    if kind is DecayKind.MINKOWSKI:
        return (dx ** p + dy ** p) ** (1.0 / p)
    if kind is DecayKind.NONE:
        return np.zeros(dx.shape)
    return np.sqrt(dx * dx + dy * dy)


def pairwise_distance(coords_a, coords_b, kind, p=2.0):
    """Distance between every row of ``coords_a`` and every row of ``coords_b``.

    RBF kinds use the Euclidean distance as their radius; ``none`` yields zeros.
    """
    dx = np.abs(coords_a[:, None, 0] - coords_b[None, :, 0])
    dy = np.abs(coords_a[:, None, 1] - coords_b[None, :, 1])
    return _axis_distance(dx, dy, DecayKind.parse(kind), p)


def distance_matrix(grid, kind, p=2.0):
    c = grid.coords()
    return pairwise_distance(c, c, kind, p)


def decay_from_distance(dist, spec):
    """Turn a distance array into decay factors according to ``spec.kind``."""
    kind = spec.kind
    if kind is DecayKind.NONE:
        return np.ones(dist.shape)
    if kind.is_distance:
        return spec.gamma ** dist
    r = dist / spec.rbf_scale
    if kind is DecayKind.GAUSSIAN_RBF:
        return np.exp(-0.5 * r * r)
    if kind is DecayKind.MULTIQUADRIC_RBF:
        return spec.gamma ** np.sqrt(1.0 + r * r)
    return 1.0 / np.sqrt(1.0 + r * r)


@lru_cache(maxsize=64)
def _cached_decay(height, width, spec):
    grid = GridCoords(height, width)
    out = decay_from_distance(distance_matrix(grid, spec.kind, spec.p), spec)
    out.setflags(write=False)
    return out


def decay_matrix_2d(grid, spec):
    """N x N decay matrix for ``grid``; cached and read-only."""
    if not isinstance(spec, DecaySpec):
        raise ValueError(f"expected a DecaySpec, got {type(spec).__name__}")
    return _cached_decay(grid.height, grid.width, spec)


def decay_matrix_1d_axis(length, gamma):
    """Toeplitz matrix ``gamma ** |i - j|`` used by the axis-decomposed attention."""
    if length < 1:
        raise ValueError("length must be >= 1")
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must lie strictly in (0, 1), got {gamma}")
    i = np.arange(length)
    return gamma ** np.abs(i[:, None] - i[None, :]).astype(np.float64)


def decay_submatrix(full, indices):
    """Slice ``full`` to the rows/columns in ``indices``; :data:`PAD` rows and columns are 0.

    ``indices`` may carry extra leading dimensions (e.g. one row per group);
    the result then has shape ``indices.shape + (k,)``.
    """
    full = np.asarray(full)
    idx = np.asarray(indices, dtype=np.int64)
    n = full.shape[-1]
    bad = (idx != PAD) & ((idx < 0) | (idx >= n))
    if bad.any():
        raise IndexError(f"index {int(idx[bad][0])} out of range for {n} tokens")
    safe = np.where(idx == PAD, 0, idx)
    out = full[..., safe[..., :, None], safe[..., None, :]]
    valid = (idx != PAD)
    return np.where(valid[..., :, None] & valid[..., None, :], out, 0.0)


def group_decay(grid, spec, groups):
    """Decay restricted to each group, computed from coordinates directly.

    Equivalent to ``decay_submatrix(decay_matrix_2d(grid, spec), groups)`` but
    never materialises the N x N matrix.
    """
    groups = np.asarray(groups, dtype=np.int64)
    coords = grid.coords()
    safe = np.where(groups == PAD, 0, groups)
    c = coords[safe]
    dx = np.abs(c[..., :, None, 0] - c[..., None, :, 0])
    dy = np.abs(c[..., :, None, 1] - c[..., None, :, 1])
    dist = _axis_distance(dx, dy, spec.kind, spec.p)
    out = decay_from_distance(dist, spec)
    valid = groups != PAD
    return np.where(valid[..., :, None] & valid[..., None, :], out, 0.0)


def head_decay_stack(grid, spec, gammas):
    """(heads, N, N) stack with one decay base per head."""
    return np.stack([decay_matrix_2d(grid, spec.with_gamma(g)) for g in gammas])
