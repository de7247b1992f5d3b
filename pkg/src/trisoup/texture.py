"""Atlas-free multi-resolution per-triangle feature lattices.

Every triangle carries a barycentric lattice at each active level ``R``:
points ``(i / 2**R, j / 2**R)`` with ``i + j <= 2**R``.  A point ``(b1, b2)``
is the surface point ``v1 + b1 * (v2 - v1) + b2 * (v3 - v1)``, so the corner
weights of ``(v1, v2, v3)`` are ``(1 - b1 - b2, b1, b2)``.

Lattice storage index for ``(i, j)`` is ``i * (n + 1) - i * (i - 1) // 2 + j``
with ``n = 2**R`` (rows of constant ``i``).

All triangles share the same active level range, so features are stored
stacked along a leading triangle axis: ``levels[R]`` has shape
``(T, grid_point_count(R), 8)``.  Channels 0..6 are color features and
channel 7 is alpha, all pre-sigmoid.
"""
from __future__ import annotations

import functools

import numpy as np
from numba import njit
from scipy import sparse

N_COLOR = 7
N_CHANNELS = 8
ALPHA = 7

ATLAS_SIDE = 4096


class AtlasCapacityError(ValueError):
    pass


def grid_point_count(level: int) -> int:
    """Number of lattice points of a level-``level`` subdivided triangle."""
    if level < 0:
        raise ValueError("level must be >= 0")
    n = 1 << level
    return (n + 1) * (n + 2) // 2


def atlas_capacity(level: int = 5, side: int = ATLAS_SIDE) -> int:
    return (side * side) // grid_point_count(level)


def sigmoid(x):
    return 0.5 * (np.tanh(0.5 * np.asarray(x, dtype=np.float64)) + 1.0)


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@njit(cache=True)
def lattice_index(i, j, n):
    return i * (n + 1) - (i * (i - 1)) // 2 + j


@njit(cache=True)
def _cell(b1, b2, n):
    if b1 < 0.0:
        b1 = 0.0
    if b2 < 0.0:
        b2 = 0.0
    s = b1 + b2
    if s > 1.0:
        b1 /= s
        b2 /= s
    x = b1 * n
    y = b2 * n
    i0 = min(int(np.floor(x)), n - 1)
    j0 = min(int(np.floor(y)), n - 1)
    if i0 + j0 > n - 1:
        # only reachable on the outer edge i + j == n
        if i0 > 0:
            i0 -= 1
        else:
            j0 -= 1
    return i0, j0, x - i0, y - j0


@njit(cache=True)
def locate(b1, b2, n):
    """Micro-triangle containing ``(b1, b2)`` on an ``n``-subdivision.

    Returns the three lattice indices and their interpolation weights.
    """
    i0, j0, fx, fy = _cell(b1, b2, n)
    if fx + fy <= 1.0 or i0 + j0 == n - 1:  # the outer row has no upper micro-triangle
        a = lattice_index(i0, j0, n)
        b = lattice_index(i0 + 1, j0, n)
        c = lattice_index(i0, j0 + 1, n)
        return a, b, c, 1.0 - fx - fy, fx, fy
    a = lattice_index(i0 + 1, j0 + 1, n)
    b = lattice_index(i0, j0 + 1, n)
    c = lattice_index(i0 + 1, j0, n)
    return a, b, c, fx + fy - 1.0, 1.0 - fx, 1.0 - fy


@njit(cache=True)
def locate_grad(b1, b2, n, v0, v1, v2):
    """d(value)/d(b1, b2) of the interpolant with corner values from ``locate``.

    Linear inside a micro-triangle, so the gradient is piecewise constant.
    """
    i0, j0, fx, fy = _cell(b1, b2, n)
    if fx + fy <= 1.0 or i0 + j0 == n - 1:  # the outer row has no upper micro-triangle
        return n * (v1 - v0), n * (v2 - v0)
    return n * (v0 - v1), n * (v0 - v2)


@njit(cache=True)
def _locate_many(b, n):
    m = b.shape[0]
    idx = np.empty((m, 3), dtype=np.int64)
    w = np.empty((m, 3), dtype=np.float64)
    for k in range(m):
        a, bb, c, w0, w1, w2 = locate(b[k, 0], b[k, 1], n)
        idx[k, 0] = a
        idx[k, 1] = bb
        idx[k, 2] = c
        w[k, 0] = w0
        w[k, 1] = w1
        w[k, 2] = w2
    return idx, w


def micro_triangles(b, level: int):
    """Vectorized ``locate``: ``b`` of shape (..., 2) -> indices, weights (..., 3)."""
    b = np.asarray(b, dtype=np.float64)
    flat = np.ascontiguousarray(b.reshape(-1, 2))
    idx, w = _locate_many(flat, 1 << level)
    return idx.reshape(b.shape[:-1] + (3,)), w.reshape(b.shape[:-1] + (3,))


@functools.lru_cache(maxsize=None)
def lattice_coords(level: int) -> np.ndarray:
    """Barycentric coordinates ``(b1, b2)`` of every lattice point, in index order."""
    n = 1 << level
    out = np.empty((grid_point_count(level), 2))
    k = 0
    for i in range(n + 1):
        for j in range(n + 1 - i):
            out[k] = (i / n, j / n)
            k += 1
    out.setflags(write=False)
    return out


def interpolate(lattice, b, level: int | None = None):
    """Interpolate a single-triangle lattice of shape (P, C) at ``b`` (..., 2)."""
    lattice = np.asarray(lattice, dtype=np.float64)
    if level is None:
        level = level_of(lattice.shape[0])
    idx, w = micro_triangles(b, level)
    return np.einsum("...k,...kc->...c", w, lattice[idx])


def level_of(n_points: int) -> int:
    for level in range(16):
        if grid_point_count(level) == n_points:
            return level
    raise ValueError(f"{n_points} is not a lattice size")


@functools.lru_cache(maxsize=None)
def upsample_matrix(src_level: int, dst_level: int) -> np.ndarray:
    """Dense (P_dst, P_src) matrix evaluating a level-``src`` field at level-``dst`` points."""
    coords = lattice_coords(dst_level)
    idx, w = micro_triangles(coords, src_level)
    m = np.zeros((coords.shape[0], grid_point_count(src_level)))
    rows = np.repeat(np.arange(coords.shape[0]), 3)
    np.add.at(m, (rows, idx.ravel()), w.ravel())
    m.setflags(write=False)
    return m


@functools.lru_cache(maxsize=None)
def _upsample_sparse(src_level: int, dst_level: int):
    return sparse.csr_matrix(upsample_matrix(src_level, dst_level))


def _apply(mat, levels):
    """``mat`` (P, Q) applied to (T, Q, C) along the lattice axis."""
    t, q, c = levels.shape
    flat = np.ascontiguousarray(levels.transpose(1, 0, 2)).reshape(q, t * c)
    return (mat @ flat).reshape(mat.shape[0], t, c).transpose(1, 0, 2)


class TextureGridSet:
    """Per-triangle feature lattices, stacked over triangles.

    ``activated`` marks a deployment texture: a single finest level holding
    post-sigmoid values, evaluated without a further sigmoid.
    """

    def __init__(self, levels: dict[int, np.ndarray], r_min: int, r_max: int,
                 activated: bool = False):
        if sorted(levels) != list(range(r_min, r_max + 1)):
            raise ValueError(f"levels {sorted(levels)} do not match range {r_min}..{r_max}")
        counts = {lv.shape[0] for lv in levels.values()}
        if len(counts) > 1:
            raise ValueError("levels disagree on triangle count")
        for r, lv in levels.items():
            if lv.ndim != 3 or lv.shape[1:] != (grid_point_count(r), N_CHANNELS):
                raise ValueError(f"level {r} has shape {lv.shape}")
        if activated and r_min != r_max:
            raise ValueError("activated textures hold a single level")
        self.levels = {r: np.asarray(v, dtype=np.float64) for r, v in sorted(levels.items())}
        self.r_min = r_min
        self.r_max = r_max
        self.activated = activated
        self._effective = None

    @classmethod
    def zeros(cls, n_triangles: int, r_min: int = 3, r_max: int = 3) -> "TextureGridSet":
        levels = {r: np.zeros((n_triangles, grid_point_count(r), N_CHANNELS))
                  for r in range(r_min, r_max + 1)}
        return cls(levels, r_min, r_max)

    def __len__(self):
        return next(iter(self.levels.values())).shape[0]

    @property
    def n_finest(self) -> int:
        return grid_point_count(self.r_max)

    def copy(self) -> "TextureGridSet":
        return TextureGridSet({r: v.copy() for r, v in self.levels.items()},
                              self.r_min, self.r_max, self.activated)

    def invalidate(self):
        self._effective = None

    @property
    def effective(self) -> np.ndarray:
        if self._effective is None:
            self._effective = accumulate_levels(self)
        return self._effective

    def select(self, keep) -> "TextureGridSet":
        return TextureGridSet({r: v[keep] for r, v in self.levels.items()},
                              self.r_min, self.r_max, self.activated)

    def append(self, other: "TextureGridSet") -> "TextureGridSet":
        if (other.r_min, other.r_max, other.activated) != (self.r_min, self.r_max, self.activated):
            raise ValueError("incompatible texture layouts")
        return TextureGridSet({r: np.concatenate([v, other.levels[r]]) for r, v in self.levels.items()},
                              self.r_min, self.r_max, self.activated)


def accumulate_levels(grids: TextureGridSet) -> np.ndarray:
    """Sum every active level, evaluated on the finest lattice (pre-sigmoid)."""
    if grids.activated:
        return grids.levels[grids.r_max]
    out = np.zeros((len(grids), grids.n_finest, N_CHANNELS))
    for r, lv in grids.levels.items():
        if r == grids.r_max:
            out += lv
        else:
            out += _apply(_upsample_sparse(r, grids.r_max), lv)
    return out


def distribute_to_levels(grids: TextureGridSet, grad_effective: np.ndarray) -> dict[int, np.ndarray]:
    """Adjoint of ``accumulate_levels``: finest-lattice gradient -> per-level gradients."""
    out = {}
    for r in grids.levels:
        if r == grids.r_max:
            out[r] = grad_effective.copy()
        else:
            out[r] = np.ascontiguousarray(_apply(_upsample_sparse(r, grids.r_max).T, grad_effective))
    return out


def evaluate_texture(grids: TextureGridSet, tri, b):
    """Color features (..., 7) and alpha (...) of triangles ``tri`` at ``b``."""
    eff = grids.effective
    tri = np.asarray(tri)
    idx, w = micro_triangles(b, grids.r_max)
    vals = np.einsum("...k,...kc->...c", w, eff[tri[..., None], idx])
    if not grids.activated:
        vals = sigmoid(vals)
    return vals[..., :N_COLOR], vals[..., ALPHA]


def transition_coarse_to_fine(grids: TextureGridSet, r_min: int = 2, r_max: int = 5) -> TextureGridSet:
    """Move a single coarse level onto the multi-level fine layout.

    Color features of the coarse field are sampled at the new ``r_min``
    lattice and copied there; every other level starts at zero.  Alpha is
    reset to zero (0.5 after the sigmoid) at all levels.
    """
    if grids.r_min != grids.r_max:
        raise ValueError("expected a single-level coarse texture")
    coarse = grids.levels[grids.r_max]
    t = coarse.shape[0]
    levels = {r: np.zeros((t, grid_point_count(r), N_CHANNELS)) for r in range(r_min, r_max + 1)}
    sampled = np.einsum("pq,tqc->tpc", upsample_matrix(grids.r_max, r_min), coarse)
    levels[r_min][..., :N_COLOR] = sampled[..., :N_COLOR]
    return TextureGridSet(levels, r_min, r_max)


def finalize(grids: TextureGridSet) -> TextureGridSet:
    """Deployment texture: post-sigmoid finest lattice only."""
    if grids.activated:
        return grids.copy()
    return TextureGridSet({grids.r_max: sigmoid(grids.effective)}, grids.r_max, grids.r_max,
                          activated=True)


def quantize_pack_atlas(grids: TextureGridSet, side: int = ATLAS_SIDE):
    """Pack finalized textures into two 8-bit RGBA atlases.

    Returns ``(atlas_a, atlas_b, layout)`` where ``layout[t, k]`` is the
    ``(x, y)`` atlas pixel of lattice point ``k`` of triangle ``t``.
    Channels 0-3 go to ``atlas_a`` and 4-7 to ``atlas_b``.
    """
    final = finalize(grids)
    texels = final.levels[final.r_max]
    t, per_tri, _ = texels.shape
    cap = (side * side) // per_tri
    if t > cap:
        raise AtlasCapacityError(
            f"{t} triangles exceed the atlas capacity of {cap} "
            f"({side}x{side} texels / {per_tri} per triangle)")
    total = t * per_tri
    width = min(side, max(total, 1))
    height = max(1, -(-total // width))
    q = np.clip(np.rint(texels * 255.0), 0, 255).astype(np.uint8).reshape(total, N_CHANNELS)
    atlas_a = np.zeros((height * width, 4), dtype=np.uint8)
    atlas_b = np.zeros((height * width, 4), dtype=np.uint8)
    atlas_a[:total] = q[:, :4]
    atlas_b[:total] = q[:, 4:]
    lin = np.arange(total).reshape(t, per_tri)
    layout = np.stack([lin % width, lin // width], axis=-1)
    return atlas_a.reshape(height, width, 4), atlas_b.reshape(height, width, 4), layout


def unpack_atlas(atlas_a, atlas_b, layout) -> TextureGridSet:
    layout = np.asarray(layout)
    xs, ys = layout[..., 0], layout[..., 1]
    texels = np.concatenate([atlas_a[ys, xs], atlas_b[ys, xs]], axis=-1).astype(np.float64) / 255.0
    level = level_of(layout.shape[1])
    return TextureGridSet({level: texels}, level, level, activated=True)
