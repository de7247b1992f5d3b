"""Optimization loop: per-step gradients over a few views, Adam/VectorAdam updates,
coarse-to-fine texture switch and periodic split/prune."""
from __future__ import annotations

import csv
import dataclasses
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adaptive import coverage_counts, prune_to_budget, resample_random_init, split_long_edges
from .engine import GradientBuffers, view_gradients
from .metrics import psnr, ssim
from .optim import Moments, adam_step, lr_at, vectoradam_step
from .raster import render_deterministic
from .scene import Dataset, TriangleSoup
from .shading import ShadingNet
from .texture import distribute_to_levels, transition_coarse_to_fine

log = logging.getLogger(__name__)

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

CSV_COLUMNS = ("iter", "loss", "l1", "ssim", "psnr_holdout", "n_triangles", "wall_seconds")


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 10000
    views_per_step: int = 4
    lam: float = 0.8
    lr_features: float = 5e-2
    lr_net: float = 1e-2
    lr_vertices: float = 1e-2
    lr_decay: float = 100.0
    coarse_end: int = 5000
    adaptive_period: int = 100
    adaptive_end: int | None = None  # last iteration with adaptive control; None = whole run
    split_fraction: float = 0.2
    split_views: int = 20
    budget: int = 15000
    background: tuple = (1.0, 1.0, 1.0)
    seed: int = 0
    score_loss: str = "combined"
    log_every: int = 100
    record_wall_time: bool = False
    num_threads: int = 1
    # data and initialization
    train_cameras: str = ""
    test_cameras: str = ""
    image_dir: str = ""
    output_dir: str = "out"
    init: str = "points"  # "points" or "random_bbox"
    points: str = ""
    bbox: tuple = ()  # (xmin, ymin, zmin, xmax, ymax, zmax)
    init_radius: float = 0.01
    near: float | None = None

    _POSITIVE = ("views_per_step", "lr_features", "lr_net", "lr_vertices", "lr_decay",
                 "adaptive_period", "split_fraction", "split_views", "budget", "log_every", "num_threads")

    def __post_init__(self):
        self.background = tuple(float(c) for c in self.background)
        self.bbox = tuple(float(c) for c in self.bbox)
        self.validate()

    def validate(self):
        bad = [k for k in self._POSITIVE if not getattr(self, k) > 0]
        if bad:
            raise ConfigError(f"must be positive: {', '.join(bad)}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError("lam must lie in [0, 1]")
        negative = [k for k in ("iterations", "coarse_end") if getattr(self, k) < 0]
        if negative:
            raise ConfigError(f"must be non-negative: {', '.join(negative)}")
        if self.score_loss not in ("combined", "l1"):
            raise ConfigError("score_loss must be 'combined' or 'l1'")
        if self.init not in ("points", "random_bbox"):
            raise ConfigError("init must be 'points' or 'random_bbox'")
        if len(self.background) != 3:
            raise ConfigError("background needs 3 components")
        if self.bbox and len(self.bbox) != 6:
            raise ConfigError("bbox needs 6 numbers")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def from_dict(cls, values: dict, base_dir: Path | None = None) -> "TrainConfig":
        unknown = sorted(set(values) - set(cls.field_names()))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        values = dict(values)
        if base_dir is not None:
            for key in ("train_cameras", "test_cameras", "image_dir", "output_dir", "points"):
                if values.get(key):
                    values[key] = str((base_dir / values[key]).resolve())
        try:
            return cls(**values)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        path = Path(path)
        try:
            with open(path, "rb") as fh:
                values = tomllib.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config not found: {path}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls.from_dict(values, path.parent)


@dataclass
class TrainState:
    soup: TriangleSoup
    net: ShadingNet
    iteration: int = 0
    tex_moments: dict = field(default_factory=dict)
    vert_moments: Moments | None = None
    net_moments: dict = field(default_factory=dict)
    rng: np.random.Generator | None = None
    coverage: np.ndarray | None = None

    @classmethod
    def fresh(cls, soup: TriangleSoup, net: ShadingNet, seed: int) -> "TrainState":
        st = cls(soup, net, rng=np.random.default_rng(seed))
        st.reset_texture_moments()
        st.vert_moments = Moments.like(soup.vertices, vector=True)
        st.net_moments = {k: Moments.like(v) for k, v in net.params().items()}
        return st

    def reset_texture_moments(self):
        self.tex_moments = {r: Moments.like(v) for r, v in self.soup.textures.levels.items()}

    def apply_structure(self, soup: TriangleSoup, source: np.ndarray):
        """Swap in an edited soup; moments follow ``source`` (fresh triangles start at zero)."""
        old = source >= 0

        def remap(mom: Moments) -> Moments:
            m = np.zeros((len(source),) + mom.m.shape[1:])
            v = np.zeros((len(source),) + mom.v.shape[1:])
            m[old] = mom.m[source[old]]
            v[old] = mom.v[source[old]]
            return Moments(m, v, mom.t)

        self.tex_moments = {r: remap(m) for r, m in self.tex_moments.items()}
        self.vert_moments = remap(self.vert_moments)
        self.soup = soup

    def check_shapes(self):
        for r, lv in self.soup.textures.levels.items():
            assert self.tex_moments[r].m.shape == lv.shape
        assert self.vert_moments.m.shape == self.soup.vertices.shape
        assert self.vert_moments.v.shape == self.soup.vertices.shape[:2]


def initial_soup(cfg: TrainConfig, dataset: Dataset) -> TriangleSoup:
    from .initialization import init_random_bbox, init_triangles
    from .scene import read_ply_points

    r = 3 if cfg.coarse_end > 0 else 5
    if cfg.init == "points":
        if not cfg.points:
            raise ConfigError("init = 'points' needs a points file")
        return init_triangles(read_ply_points(cfg.points), cfg.budget, cfg.seed, r, r)
    if cfg.bbox:
        lo, hi = np.array(cfg.bbox[:3]), np.array(cfg.bbox[3:])
    else:
        centers = np.array([c.center for c in dataset.cameras])
        mid = centers.mean(axis=0)
        half = 0.5 * np.abs(centers - mid).max(axis=0)
        lo, hi = mid - half, mid + half
    return init_random_bbox((lo, hi), cfg.budget, cfg.init_radius, cfg.seed, r, r)


def evaluate(soup: TriangleSoup, net: ShadingNet, dataset: Dataset | None):
    """Mean deterministic-render PSNR and SSIM over ``dataset``; NaN when absent."""
    if dataset is None or len(dataset) == 0:
        return float("nan"), float("nan")
    ps, ss = [], []
    for cam, img in zip(dataset.cameras, dataset.images):
        rgb, _, _ = render_deterministic(soup, cam, net, dataset.background)
        ps.append(psnr(rgb, img))
        ss.append(ssim(rgb, img)[0])
    return float(np.mean(ps)), float(np.mean(ss))


def _finite_grads(g: GradientBuffers) -> bool:
    return (np.all(np.isfinite(g.effective)) and np.all(np.isfinite(g.vertices))
            and all(np.all(np.isfinite(v)) for v in g.net.values()))


def train_step(state: TrainState, dataset: Dataset, cfg: TrainConfig, pool=None) -> dict:
    it = state.iteration
    total = cfg.iterations
    soup, net = state.soup, state.net
    tex = soup.textures

    n_views = len(dataset)
    views = state.rng.choice(n_views, cfg.views_per_step, replace=n_views < cfg.views_per_step)

    def one(v):
        return view_gradients(soup, net, dataset.cameras[v], dataset.images[v], dataset.background,
                              cfg.lam, cfg.seed, it, int(v), cfg.score_loss)[:2]

    results = list(pool.map(one, views)) if pool is not None else [one(v) for v in views]
    grads = GradientBuffers.zeros(len(soup), tex.n_finest)
    scale = 1.0 / len(views)
    info = {"loss": 0.0, "l1": 0.0, "ssim": 0.0}
    for g, inf in results:  # fixed view order
        grads.add(g, scale)
        for k in info:
            info[k] += scale * inf[k]
    if not (np.isfinite(info["loss"]) and _finite_grads(grads)):
        raise TrainingError(f"non-finite loss or gradient at iteration {it}")

    lr_f = lr_at(it, cfg.lr_features, total, cfg.lr_decay)
    lr_n = lr_at(it, cfg.lr_net, total, cfg.lr_decay)
    lr_v = lr_at(it, cfg.lr_vertices, total, cfg.lr_decay)
    for r, g in distribute_to_levels(tex, grads.effective).items():
        adam_step(tex.levels[r], g, state.tex_moments[r], lr_f)
    tex.invalidate()
    for k, p in net.params().items():
        adam_step(p, grads.net[k], state.net_moments[k], lr_n)
    vectoradam_step(soup.vertices, grads.vertices, state.vert_moments, lr_v)
    if not np.all(np.isfinite(soup.vertices)):
        raise TrainingError(f"non-finite vertices at iteration {it}")
    return info


def adaptive_control(state: TrainState, dataset: Dataset, cfg: TrainConfig):
    n_views = len(dataset)
    pick = state.rng.choice(n_views, min(cfg.split_views, n_views), replace=False)
    cams = [dataset.cameras[i] for i in pick]
    if cfg.init == "random_bbox":
        # resampling does its own splitting and holds the count at the budget
        cov = coverage_counts(state.soup, cams)
        soup, source = resample_random_init(state.soup, cov, cfg.budget, cams)
        cov = np.zeros(len(soup), dtype=np.int64)  # stale after resampling
    else:
        soup, source = split_long_edges(state.soup, cams, cfg.split_fraction)
        state.apply_structure(soup, source)
        cov = coverage_counts(state.soup, cams)
        soup, source = prune_to_budget(state.soup, cov, cfg.budget)
        cov = cov[source]
    state.apply_structure(soup, source)
    state.coverage = cov
    state.check_shapes()


def train(dataset: Dataset, cfg: TrainConfig, soup: TriangleSoup | None = None,
          net: ShadingNet | None = None, test: Dataset | None = None, log_path=None,
          state: TrainState | None = None):
    """Run the optimization; returns ``(soup, net, rows)``.

    ``rows`` holds one dict per logged iteration with the CSV columns.
    """
    if state is None:
        soup = initial_soup(cfg, dataset) if soup is None else soup.copy()
        net = ShadingNet.xavier(np.random.default_rng(cfg.seed)) if net is None else net.copy()
        state = TrainState.fresh(soup, net, cfg.seed)
    adaptive_end = cfg.iterations if cfg.adaptive_end is None else cfg.adaptive_end
    rows = []
    start = time.perf_counter()
    threads = int(os.environ.get("TRISOUP_NUM_THREADS", cfg.num_threads))
    pool = ThreadPoolExecutor(threads) if threads > 1 else None
    writer = None
    fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
    try:
        while state.iteration < cfg.iterations:
            it = state.iteration
            tex = state.soup.textures
            if it == cfg.coarse_end and tex.r_min == tex.r_max and tex.r_max < 5:
                state.soup.textures = transition_coarse_to_fine(tex)
                state.reset_texture_moments()
            info = train_step(state, dataset, cfg, pool)
            state.iteration += 1
            done = state.iteration
            if done % cfg.adaptive_period == 0 and done < adaptive_end:
                adaptive_control(state, dataset, cfg)
            if done % cfg.log_every == 0 or done == cfg.iterations:
                ps, _ = evaluate(state.soup, state.net, test)
                row = {"iter": done, "loss": info["loss"], "l1": info["l1"], "ssim": info["ssim"],
                       "psnr_holdout": ps, "n_triangles": len(state.soup),
                       "wall_seconds": time.perf_counter() - start if cfg.record_wall_time else 0.0}
                rows.append(row)
                if writer is not None:
                    writer.writerow(row)
                    fh.flush()
                log.info("iter %d loss %.5f psnr %.2f tris %d", done, info["loss"], ps, len(state.soup))
    finally:
        if pool is not None:
            pool.shutdown()
        if fh is not None:
            fh.close()
    return state.soup, state.net, rows
