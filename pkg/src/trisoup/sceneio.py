"""Scene files and packed deployment output.

A scene file is ``MAGIC``, a little-endian uint64 header length, a JSON
header describing every array (name, dtype, shape, byte offset), then the
raw little-endian array bytes.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .scene import TriangleSoup
from .shading import PARAM_NAMES, ShadingNet
from .texture import TextureGridSet, quantize_pack_atlas, unpack_atlas

MAGIC = b"TRISOUP\x00"
SCENE_VERSION = 1
REAL = "<f8"


class SceneFormatError(ValueError):
    pass


def save_scene(path, soup: TriangleSoup, net: ShadingNet, background=(1.0, 1.0, 1.0)):
    tex = soup.textures
    arrays = {"vertices": soup.vertices, "background": np.asarray(background, dtype=np.float64)}
    for r, lv in tex.levels.items():
        arrays[f"level_{r}"] = lv
    for k, v in net.params().items():
        arrays[f"net_{k}"] = v
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype=REAL).tobytes()
        entries.append({"name": name, "dtype": REAL, "shape": list(arr.shape), "offset": offset,
                        "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = json.dumps({"version": SCENE_VERSION, "n_triangles": len(soup), "r_min": tex.r_min,
                         "r_max": tex.r_max, "activated": tex.activated, "arrays": entries}).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_scene(path):
    """Returns ``(soup, net, background)``."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise SceneFormatError(f"scene file not found: {path}") from None
    if raw[:len(MAGIC)] != MAGIC:
        raise SceneFormatError(f"not a scene file: {path}")
    (hlen,) = struct.unpack_from("<Q", raw, len(MAGIC))
    start = len(MAGIC) + 8
    header = json.loads(raw[start:start + hlen])
    if header.get("version") != SCENE_VERSION:
        raise SceneFormatError(f"{path}: scene version {header.get('version')}, "
                               f"this build reads version {SCENE_VERSION}")
    body = start + hlen
    arrays = {}
    for e in header["arrays"]:
        a = np.frombuffer(raw, dtype=e["dtype"], count=int(np.prod(e["shape"], dtype=np.int64)),
                          offset=body + e["offset"])
        arrays[e["name"]] = a.reshape(e["shape"]).astype(np.float64)
    r_min, r_max = header["r_min"], header["r_max"]
    tex = TextureGridSet({r: arrays[f"level_{r}"] for r in range(r_min, r_max + 1)}, r_min, r_max,
                         header["activated"])
    net = ShadingNet(**{k: arrays[f"net_{k}"] for k in PARAM_NAMES})
    return TriangleSoup(arrays["vertices"], tex), net, arrays["background"]


def pack_scene(out_dir, soup: TriangleSoup, net: ShadingNet, background=(1.0, 1.0, 1.0)):
    """Write two RGBA atlases, the layout JSON, float32 geometry and the shading net."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    atlas_a, atlas_b, layout = quantize_pack_atlas(soup.textures)
    Image.fromarray(atlas_a, "RGBA").save(out / "atlas_a.png")
    Image.fromarray(atlas_b, "RGBA").save(out / "atlas_b.png")
    (out / "layout.json").write_text(json.dumps({
        "n_triangles": len(soup), "points_per_triangle": int(layout.shape[1]),
        "atlas_width": int(atlas_a.shape[1]), "atlas_height": int(atlas_a.shape[0]),
        "background": [float(c) for c in background],
        "net": {k: v.tolist() for k, v in net.params().items()},
        "texels": layout.reshape(len(soup), 2 * layout.shape[1]).tolist(),
    }))
    soup.vertices.astype("<f4").tofile(out / "geometry.bin")
    return out


def unpack_scene(pack_dir):
    """Inverse of ``pack_scene``; returns ``(soup, net, background)`` with activated textures."""
    d = Path(pack_dir)
    meta = json.loads((d / "layout.json").read_text())
    atlas_a = np.asarray(Image.open(d / "atlas_a.png").convert("RGBA"))
    atlas_b = np.asarray(Image.open(d / "atlas_b.png").convert("RGBA"))
    t = meta["n_triangles"]
    layout = np.asarray(meta["texels"], dtype=np.int64).reshape(t, meta["points_per_triangle"], 2)
    verts = np.fromfile(d / "geometry.bin", dtype="<f4").astype(np.float64).reshape(t, 3, 3)
    net = ShadingNet(**{k: np.asarray(meta["net"][k], dtype=np.float64) for k in PARAM_NAMES})
    return TriangleSoup(verts, unpack_atlas(atlas_a, atlas_b, layout)), net, np.asarray(meta["background"])
