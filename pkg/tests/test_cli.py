import json
import struct

import numpy as np
import pytest
from numpy.testing import assert_array_equal
from PIL import Image

from trisoup.cli import main
from trisoup.scene import TriangleSoup, write_transforms
from trisoup.sceneio import MAGIC, SceneFormatError, load_scene, pack_scene, save_scene, unpack_scene
from trisoup.shading import ShadingNet
from trisoup.synthetic import SyntheticSpec, sphere_cameras
from trisoup.texture import TextureGridSet


def random_scene(t=5, seed=0):
    rng = np.random.default_rng(seed)
    tex = TextureGridSet.zeros(t, 2, 5)
    for lv in tex.levels.values():
        lv[:] = rng.normal(size=lv.shape)
    return TriangleSoup(rng.uniform(-1, 1, (t, 3, 3)), tex), ShadingNet.xavier(rng)


@pytest.fixture(scope="module")
def synthetic(tmp_path_factory):
    root = tmp_path_factory.mktemp("syn")
    (root / "spec.toml").write_text("n_triangles = 6\nn_views = 3\nn_test = 2\nwidth = 16\nheight = 16\nseed = 3\n")
    assert main(["make-synthetic", "--spec", str(root / "spec.toml"), "--out", str(root / "data")]) == 0
    return root


def test_scene_roundtrip_is_bit_exact(tmp_path):
    soup, net = random_scene()
    save_scene(tmp_path / "s.bin", soup, net, (0.1, 0.2, 0.3))
    soup2, net2, bg = load_scene(tmp_path / "s.bin")
    assert_array_equal(soup2.vertices, soup.vertices)
    for r in soup.textures.levels:
        assert_array_equal(soup2.textures.levels[r], soup.textures.levels[r])
    for k, v in net.params().items():
        assert_array_equal(net2.params()[k], v)
    assert_array_equal(bg, [0.1, 0.2, 0.3])
    save_scene(tmp_path / "t.bin", soup2, net2, bg)
    assert (tmp_path / "s.bin").read_bytes() == (tmp_path / "t.bin").read_bytes()


def test_scene_version_mismatch(tmp_path):
    soup, net = random_scene()
    save_scene(tmp_path / "s.bin", soup, net)
    raw = bytearray((tmp_path / "s.bin").read_bytes())
    (hlen,) = struct.unpack_from("<Q", raw, len(MAGIC))
    start = len(MAGIC) + 8
    header = json.loads(raw[start:start + hlen])
    header["version"] = 99
    new = json.dumps(header).encode()
    (tmp_path / "v.bin").write_bytes(MAGIC + struct.pack("<Q", len(new)) + new + raw[start + hlen:])
    with pytest.raises(SceneFormatError, match="version 99"):
        load_scene(tmp_path / "v.bin")
    (tmp_path / "junk.bin").write_bytes(b"hello world")
    with pytest.raises(SceneFormatError, match="junk.bin"):
        load_scene(tmp_path / "junk.bin")


def test_pack_sizes_and_roundtrip(tmp_path):
    soup, net = random_scene(t=7)
    pack_scene(tmp_path / "p", soup, net)
    assert (tmp_path / "p" / "geometry.bin").stat().st_size == 36 * 7
    meta = json.loads((tmp_path / "p" / "layout.json").read_text())
    assert meta["points_per_triangle"] == 561
    soup2, net2, _ = unpack_scene(tmp_path / "p")
    assert np.max(np.abs(soup2.vertices - soup.vertices)) < 1e-6
    assert soup2.textures.activated
    assert_array_equal(net2.W1, net.W1)


def test_make_synthetic_outputs_and_determinism(synthetic, tmp_path):
    data = synthetic / "data"
    assert len(list((data / "train").glob("*.png"))) == 3
    assert len(list((data / "test").glob("*.png"))) == 2
    for name in ("transforms_train.json", "transforms_test.json", "gt_scene.bin", "points.ply"):
        assert (data / name).exists()
    assert main(["make-synthetic", "--spec", str(synthetic / "spec.toml"), "--out", str(tmp_path / "again")]) == 0
    for f in sorted((data / "train").glob("*.png")):
        assert f.read_bytes() == (tmp_path / "again" / "train" / f.name).read_bytes()


def test_render_reproduces_synthetic_images(synthetic, tmp_path):
    data = synthetic / "data"
    args = ["render", "--scene", str(data / "gt_scene.bin"), "--cameras", str(data / "transforms_train.json")]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    for f in sorted((data / "train").glob("*.png")):
        assert (tmp_path / "a" / f.name).read_bytes() == (tmp_path / "b" / f.name).read_bytes()
        assert_array_equal(np.asarray(Image.open(tmp_path / "a" / f.name)), np.asarray(Image.open(f)))


def test_empty_scene_renders_background(tmp_path):
    save_scene(tmp_path / "e.bin", TriangleSoup.empty(), ShadingNet.zeros(), (0.0, 1.0, 0.0))
    spec = SyntheticSpec(width=8, height=6)
    cams = sphere_cameras(2, spec, np.random.default_rng(0))
    write_transforms(tmp_path / "cams.json", cams, ["a", "b"])
    assert main(["render", "--scene", str(tmp_path / "e.bin"), "--cameras", str(tmp_path / "cams.json"),
                 "--out", str(tmp_path / "r")]) == 0
    img = np.asarray(Image.open(tmp_path / "r" / "a.png"))
    assert img.shape == (6, 8, 3)
    assert np.all(img == [0, 255, 0])


def test_eval_of_ground_truth_is_perfect(synthetic, capsys):
    data = synthetic / "data"
    assert main(["eval", "--scene", str(data / "gt_scene.bin"), "--data", str(data)]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].split() == ["view", "PSNR", "SSIM", "MAE"]
    assert len(lines) == 2 + 2  # header, two test views, mean
    mean = lines[-1].split()
    # only 8-bit rounding separates the render from the PNGs: error <= 0.5/255 gives >= 54.15 dB
    assert mean[0] == "mean" and float(mean[1]) >= 54.15
    assert float(mean[2]) == pytest.approx(1.0, abs=1e-4)


def test_bad_paths_exit_nonzero_naming_path(tmp_path, capsys):
    missing = tmp_path / "nowhere"
    assert main(["eval", "--scene", str(missing / "s.bin"), "--data", str(missing)]) == 2
    assert "s.bin" in capsys.readouterr().err
    soup, net = random_scene()
    save_scene(tmp_path / "s.bin", soup, net)
    assert main(["eval", "--scene", str(tmp_path / "s.bin"), "--data", str(missing)]) == 2
    assert str(missing) in capsys.readouterr().err
    assert main(["train", "--config", str(tmp_path / "none.toml")]) == 2
    assert "none.toml" in capsys.readouterr().err


def test_train_command_end_to_end(synthetic, tmp_path, capsys):
    data = synthetic / "data"
    cfg = tmp_path / "c.toml"
    cfg.write_text(
        f'train_cameras = "{data / "transforms_train.json"}"\n'
        f'test_cameras = "{data / "transforms_test.json"}"\n'
        f'output_dir = "{tmp_path / "out"}"\n'
        'init = "points"\n'
        f'points = "{data / "points.ply"}"\n'
        "iterations = 6\nbudget = 12\ncoarse_end = 3\nadaptive_period = 3\nlog_every = 3\n")
    assert main(["train", "--config", str(cfg), "--seed", "4"]) == 0
    assert "held-out PSNR" in capsys.readouterr().out
    out = tmp_path / "out"
    assert (out / "metrics.csv").read_text().count("\n") == 3
    report = json.loads((out / "report.json").read_text())
    assert report["n_triangles"] <= 12
    load_scene(out / "scene.bin")
    assert main(["pack", "--scene", str(out / "scene.bin"), "--out", str(tmp_path / "pk")]) == 0
    assert (tmp_path / "pk" / "geometry.bin").stat().st_size == 36 * report["n_triangles"]
