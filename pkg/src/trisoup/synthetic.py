"""Random ground-truth soups and their rendered datasets, for desk-scale experiments."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .initialization import equilateral
from .raster import render_deterministic
from .scene import (Camera, TriangleSoup, load_cameras, look_at, write_ply_points,
                    write_transforms)
from .shading import ShadingNet
from .texture import ALPHA, TextureGridSet, lattice_coords

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


@dataclass
class SyntheticSpec:
    n_triangles: int = 30
    n_views: int = 20
    n_test: int = 4
    width: int = 64
    height: int = 64
    seed: int = 0
    camera_radius: float = 4.0
    camera_angle_x: float = 0.69
    extent: float = 0.8  # triangle centers in [-extent, extent]^3
    min_radius: float = 0.4
    max_radius: float = 0.7
    alpha_logit: float = 6.0  # binary-ish alpha is +-alpha_logit before the sigmoid
    cut_fraction: float = 0.5  # share of triangles with a straight alpha cut
    n_points: int = 2000  # surface samples written as a point cloud

    @classmethod
    def load(cls, path) -> "SyntheticSpec":
        path = Path(path)
        text = path.read_text()
        values = json.loads(text) if path.suffix == ".json" else tomllib.loads(text)
        unknown = sorted(set(values) - set(asdict(cls())))
        if unknown:
            raise ValueError(f"unknown synthetic spec keys: {', '.join(unknown)}")
        return cls(**values)


def sphere_cameras(n: int, spec: SyntheticSpec, rng: np.random.Generator) -> list[Camera]:
    """Cameras at ``camera_radius`` looking at the origin, elevation within +-60 degrees."""
    az = rng.uniform(0.0, 2.0 * np.pi, n)
    el = np.arcsin(rng.uniform(-np.sin(np.pi / 3), np.sin(np.pi / 3), n))
    eyes = spec.camera_radius * np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], -1)
    focal = 0.5 * spec.width / np.tan(0.5 * spec.camera_angle_x)
    near = 1e-4 * spec.camera_radius
    return [Camera(look_at(e, np.zeros(3)), focal, focal, spec.width / 2.0, spec.height / 2.0,
                   spec.width, spec.height, near) for e in eyes]


def ground_truth_soup(spec: SyntheticSpec, rng: np.random.Generator) -> TriangleSoup:
    """Smooth random colors, opaque skip channel, binary-ish alpha with optional straight cuts."""
    n = spec.n_triangles
    centers = rng.uniform(-spec.extent, spec.extent, (n, 3))
    radii = rng.uniform(spec.min_radius, spec.max_radius, n)
    verts = equilateral(centers, radii, rng)
    verts += rng.normal(scale=0.1, size=verts.shape) * radii[:, None, None]
    tex = TextureGridSet.zeros(n, 3, 3)
    lv = tex.levels[3]
    c = lattice_coords(3)
    bw = np.column_stack([1.0 - c[:, 0] - c[:, 1], c[:, 0], c[:, 1]])  # (P, 3)
    corner_colors = rng.uniform(-2.0, 2.0, (n, 3, 3))
    lv[..., :3] = np.einsum("pk,tkc->tpc", bw, corner_colors)
    lv[..., 3] = spec.alpha_logit
    alpha = np.full((n, len(c)), spec.alpha_logit)
    for t in np.flatnonzero(rng.random(n) < spec.cut_fraction):
        # drop the lattice points beyond a random line, keeping the side with the centroid
        normal = rng.normal(size=3)
        side = bw @ normal
        cut = rng.uniform(np.quantile(side, 0.6), np.quantile(side, 0.85))
        alpha[t, side > cut] = -spec.alpha_logit
    lv[..., ALPHA] = alpha
    return TriangleSoup(verts, tex)


def surface_points(soup: TriangleSoup, n: int, rng: np.random.Generator) -> np.ndarray:
    t = rng.integers(len(soup), size=n)
    u = rng.random((n, 2))
    flip = u.sum(axis=1) > 1.0
    u[flip] = 1.0 - u[flip]
    v = soup.vertices[t]
    return v[:, 0] + u[:, :1] * (v[:, 1] - v[:, 0]) + u[:, 1:] * (v[:, 2] - v[:, 0])


def to_png(rgb) -> np.ndarray:
    return np.clip(np.rint(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)


def make_synthetic(spec: SyntheticSpec, out_dir):
    """Write train/test PNGs, transforms JSONs, the ground-truth scene and a point cloud."""
    from .sceneio import save_scene

    out = Path(out_dir)
    rng = np.random.default_rng(spec.seed)
    soup = ground_truth_soup(spec, rng)
    net = ShadingNet.zeros()
    background = np.ones(3)
    for split, count in (("train", spec.n_views), ("test", spec.n_test)):
        (out / split).mkdir(parents=True, exist_ok=True)
        names = [f"{split}/r_{i:03d}" for i in range(count)]
        cam_file = out / f"transforms_{split}.json"
        write_transforms(cam_file, sphere_cameras(count, spec, rng), names)
        # render from the cameras as they read back, so reloading reproduces the images exactly
        for name, cam in zip(names, load_cameras(cam_file, spec.width, spec.height)):
            rgb, _, _ = render_deterministic(soup, cam, net, background)
            Image.fromarray(to_png(rgb), "RGB").save(out / f"{name}.png")
    save_scene(out / "gt_scene.bin", soup, net, background)
    write_ply_points(out / "points.ply", surface_points(soup, spec.n_points, rng))
    (out / "synthetic_spec.json").write_text(json.dumps(asdict(spec), indent=1))
    return soup
