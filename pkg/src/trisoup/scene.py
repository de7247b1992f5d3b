"""Triangles, cameras, datasets and pinhole projection.

Camera space is +z forward, +x right, +y down, so projected pixel
coordinates grow to the right and downwards like image rows/columns.
Pixel ``(ix, iy)`` has its center at ``(ix + 0.5, iy + 0.5)``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .texture import TextureGridSet

# OpenGL camera axes (x right, y up, looking down -z) -> internal axes.
GL_TO_INTERNAL = np.diag([1.0, -1.0, -1.0, 1.0])


class DatasetError(ValueError):
    pass


@dataclass
class Camera:
    world_to_camera: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 1e-4

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64)
        rot = self.world_to_camera[:3, :3]
        if (self.world_to_camera.shape != (4, 4) or not np.allclose(rot @ rot.T, np.eye(3), atol=1e-9)
                or np.linalg.det(rot) <= 0 or not np.array_equal(self.world_to_camera[3], [0, 0, 0, 1])):
            raise ValueError("world_to_camera must be a rigid transform")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.near <= 0:
            raise ValueError("near must be positive")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def to_camera(self, points):
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def pixel_rays(self) -> np.ndarray:
        """Unit world-space view directions through every pixel center, (H, W, 3)."""
        xs = (np.arange(self.width) + 0.5 - self.cx) / self.fx
        ys = (np.arange(self.height) + 0.5 - self.cy) / self.fy
        d = np.stack(np.broadcast_arrays(xs[None, :], ys[:, None], 1.0), axis=-1)
        d = d @ self.rotation  # camera -> world for row vectors
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def transformed(self, rigid: np.ndarray) -> "Camera":
        """Same camera after moving the world by the 4x4 rigid transform ``rigid``."""
        w2c = self.world_to_camera @ np.linalg.inv(rigid)
        return Camera(w2c, self.fx, self.fy, self.cx, self.cy, self.width, self.height, self.near)


def project_vertex(camera: Camera, p):
    """Project world points ``p`` (..., 3).

    Returns ``(x, y, depth, clipped)``; ``clipped`` flags depth <= near.
    """
    pc = camera.to_camera(p)
    d = pc[..., 2]
    clipped = d <= camera.near
    with np.errstate(divide="ignore", invalid="ignore"):
        x = camera.fx * pc[..., 0] / d + camera.cx
        y = camera.fy * pc[..., 1] / d + camera.cy
    return x, y, d, clipped


def unproject(camera: Camera, x, y, depth):
    """Inverse of ``project_vertex`` at a known camera-space depth."""
    xc = (np.asarray(x) - camera.cx) / camera.fx * depth
    yc = (np.asarray(y) - camera.cy) / camera.fy * depth
    pc = np.stack(np.broadcast_arrays(xc, yc, depth), axis=-1)
    return (pc - camera.translation) @ camera.rotation


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Internal-convention world-to-camera matrix for a camera at ``eye``."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    if abs(np.dot(up, fwd)) > 0.999:
        up = np.array([0.0, 1.0, 0.0]) if abs(fwd[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])
    w2c = np.eye(4)
    w2c[:3, :3] = rot
    w2c[:3, 3] = -rot @ eye
    return w2c


@dataclass
class TriangleSoup:
    """Unconnected triangles with one texture lattice stack per triangle."""

    vertices: np.ndarray  # (T, 3, 3)
    textures: TextureGridSet

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3, 3)
        if len(self.textures) != self.vertices.shape[0]:
            raise ValueError(f"{self.vertices.shape[0]} triangles but {len(self.textures)} textures")
        if not np.all(np.isfinite(self.vertices)):
            raise ValueError("non-finite vertex")

    def __len__(self):
        return self.vertices.shape[0]

    @classmethod
    def empty(cls, r_min=3, r_max=3) -> "TriangleSoup":
        return cls(np.zeros((0, 3, 3)), TextureGridSet.zeros(0, r_min, r_max))

    def copy(self) -> "TriangleSoup":
        return TriangleSoup(self.vertices.copy(), self.textures.copy())

    def select(self, keep) -> "TriangleSoup":
        return TriangleSoup(self.vertices[keep], self.textures.select(keep))

    def bbox(self):
        v = self.vertices.reshape(-1, 3)
        return v.min(axis=0), v.max(axis=0)


@dataclass
class Dataset:
    cameras: list[Camera]
    images: list[np.ndarray]
    background: np.ndarray = field(default_factory=lambda: np.ones(3))
    names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.cameras) != len(self.images):
            raise ValueError("cameras and images differ in length")
        for cam, img in zip(self.cameras, self.images):
            if img.shape != (cam.height, cam.width, 3):
                raise ValueError(f"image shape {img.shape} != camera {cam.height}x{cam.width}")
        self.background = np.asarray(self.background, dtype=np.float64)

    def __len__(self):
        return len(self.cameras)


def camera_from_transform(c2w_gl, camera_angle_x: float, width: int, height: int,
                          near: float = 1e-4) -> Camera:
    c2w = np.asarray(c2w_gl, dtype=np.float64) @ GL_TO_INTERNAL
    w2c = np.linalg.inv(c2w)
    # snap the inverse back to an exactly rigid matrix
    w2c[3] = (0.0, 0.0, 0.0, 1.0)
    focal = 0.5 * width / math.tan(0.5 * camera_angle_x)
    return Camera(w2c, focal, focal, width / 2.0, height / 2.0, width, height, near)


def camera_to_transform(camera: Camera) -> np.ndarray:
    """Camera-to-world matrix in the OpenGL convention of transforms JSON files."""
    return np.linalg.inv(camera.world_to_camera) @ GL_TO_INTERNAL


def default_near(cameras: list[Camera]) -> float:
    if len(cameras) < 2:
        return 1e-4
    centers = np.array([c.center for c in cameras])
    diag = float(np.linalg.norm(centers.max(0) - centers.min(0)))
    return max(1e-4 * diag, 1e-8)


def _resolve_frame_path(image_dir: Path, file_path: str) -> Path:
    p = image_dir / file_path
    if p.suffix.lower() != ".png":
        p = p.with_name(p.name + ".png")
    return p


def load_image(path, background) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode in ("RGBA", "LA") or (im.mode == "P" and "transparency" in im.info):
            arr = np.asarray(im.convert("RGBA"), dtype=np.float64) / 255.0
            rgb, a = arr[..., :3], arr[..., 3:]
            return rgb * a + np.asarray(background) * (1.0 - a)
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def read_transforms(camera_file_path):
    path = Path(camera_file_path)
    try:
        meta = json.loads(path.read_text())
        angle = float(meta["camera_angle_x"])
        frames = meta["frames"]
        for fr in frames:
            fr["file_path"], fr["transform_matrix"]
    except FileNotFoundError:
        raise DatasetError(f"camera file not found: {path}") from None
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"malformed camera file {path}: {exc}") from None
    return meta, angle, frames


def load_cameras(camera_file_path, width: int, height: int, near: float | None = None) -> list[Camera]:
    """Cameras of a transforms JSON file for a known image size."""
    meta, angle, frames = read_transforms(camera_file_path)
    width = int(meta.get("w", width))
    height = int(meta.get("h", height))
    cams = [camera_from_transform(fr["transform_matrix"], angle, width, height) for fr in frames]
    near = default_near(cams) if near is None else near
    for c in cams:
        c.near = near
    return cams


def load_dataset(camera_file_path, image_dir=None, background=(1.0, 1.0, 1.0),
                 near: float | None = None) -> Dataset:
    """Load a NeRF-synthetic style ``transforms`` JSON and its PNG frames."""
    camera_file_path = Path(camera_file_path)
    image_dir = camera_file_path.parent if image_dir is None else Path(image_dir)
    _, angle, frames = read_transforms(camera_file_path)
    background = np.asarray(background, dtype=np.float64)
    cameras, images, names = [], [], []
    for fr in frames:
        img_path = _resolve_frame_path(image_dir, fr["file_path"])
        if not img_path.exists():
            raise DatasetError(f"missing frame image: {img_path}")
        img = load_image(img_path, background)
        h, w = img.shape[:2]
        if images and images[0].shape != img.shape:
            raise DatasetError(f"resolution mismatch: {img_path} is {w}x{h}, "
                               f"expected {images[0].shape[1]}x{images[0].shape[0]}")
        cameras.append(camera_from_transform(fr["transform_matrix"], angle, w, h))
        images.append(img)
        names.append(Path(fr["file_path"]).name)
    near = default_near(cameras) if near is None else near
    for c in cameras:
        c.near = near
    return Dataset(cameras, images, background, names)


def write_transforms(path, cameras: list[Camera], file_paths: list[str]):
    cam0 = cameras[0]
    angle = 2.0 * math.atan(0.5 * cam0.width / cam0.fx)
    frames = [{"file_path": fp, "transform_matrix": camera_to_transform(c).tolist()}
              for c, fp in zip(cameras, file_paths)]
    Path(path).write_text(json.dumps({"camera_angle_x": angle, "w": cam0.width, "h": cam0.height,
                                      "frames": frames}, indent=1))


def read_ply_points(path) -> np.ndarray:
    """x, y, z columns of an ASCII PLY vertex element."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise DatasetError(f"not a PLY file: {path}")
    n_vertex, props, in_vertex, start = None, [], False, None
    for k, line in enumerate(lines[1:], start=1):
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format" and tok[1] != "ascii":
            raise DatasetError(f"only ASCII PLY is supported: {path}")
        if tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                n_vertex = int(tok[2])
        elif tok[0] == "property" and in_vertex:
            props.append(tok[-1])
        elif tok[0] == "end_header":
            start = k + 1
            break
    if n_vertex is None or start is None or not {"x", "y", "z"} <= set(props):
        raise DatasetError(f"PLY without x/y/z vertex properties: {path}")
    rows = np.array([lines[start + i].split() for i in range(n_vertex)], dtype=np.float64)
    return rows[:, [props.index("x"), props.index("y"), props.index("z")]]


def write_ply_points(path, points):
    points = np.asarray(points, dtype=np.float64)
    head = ["ply", "format ascii 1.0", f"element vertex {len(points)}",
            "property float x", "property float y", "property float z", "end_header"]
    body = [" ".join(repr(float(c)) for c in p) for p in points]
    Path(path).write_text("\n".join(head + body) + "\n")
