"""Command-line entry points: train, render, make-synthetic, eval, pack."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .metrics import mae, psnr, ssim
from .raster import render_deterministic
from .scene import DatasetError, load_cameras, load_dataset, read_transforms
from .sceneio import SceneFormatError, load_scene, pack_scene, save_scene
from .synthetic import SyntheticSpec, make_synthetic, to_png
from .texture import AtlasCapacityError
from .train import ConfigError, TrainConfig, TrainingError, evaluate, train

EXPECTED_ERRORS = (ConfigError, DatasetError, SceneFormatError, AtlasCapacityError, TrainingError,
                   FileNotFoundError)


def cmd_train(args) -> int:
    cfg = TrainConfig.from_file(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if not cfg.train_cameras:
        raise ConfigError("train_cameras is required")
    image_dir = cfg.image_dir or None
    data = load_dataset(cfg.train_cameras, image_dir, cfg.background, cfg.near)
    test = load_dataset(cfg.test_cameras, image_dir, cfg.background, cfg.near) if cfg.test_cameras else None
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    soup, net, _ = train(data, cfg, test=test, log_path=out / "metrics.csv")
    save_scene(out / "scene.bin", soup, net, cfg.background)
    ps, ss = evaluate(soup, net, test)
    report = {"psnr_holdout": ps, "ssim_holdout": ss, "n_triangles": len(soup)}
    (out / "report.json").write_text(json.dumps(report, indent=1))
    print(f"held-out PSNR {ps:.3f} dB  SSIM {ss:.4f}  triangles {len(soup)}")
    return 0


def _frame_names(camera_path, n):
    _, _, frames = read_transforms(camera_path)
    names = [Path(fr["file_path"]).name for fr in frames]
    return names if len(set(names)) == n else [f"r_{i:03d}" for i in range(n)]


def cmd_render(args) -> int:
    soup, net, background = load_scene(args.scene)
    meta, _, _ = read_transforms(args.cameras)
    if "w" not in meta or "h" not in meta:
        raise DatasetError(f"camera file {args.cameras} lacks image size keys 'w' and 'h'")
    cams = load_cameras(args.cameras, meta["w"], meta["h"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, cam in zip(_frame_names(args.cameras, len(cams)), cams):
        rgb, _, _ = render_deterministic(soup, cam, net, background)
        Image.fromarray(to_png(rgb), "RGB").save(out / f"{Path(name).stem}.png")
    print(f"rendered {len(cams)} views to {out}")
    return 0


def cmd_make_synthetic(args) -> int:
    spec = SyntheticSpec.load(args.spec)
    if args.seed is not None:
        spec.seed = args.seed
    make_synthetic(spec, args.out)
    print(f"wrote synthetic dataset to {args.out}")
    return 0


def _data_cameras(data) -> Path:
    p = Path(data)
    if p.is_file():
        return p
    for name in ("transforms_test.json", "transforms.json", "transforms_train.json"):
        if (p / name).exists():
            return p / name
    raise DatasetError(f"no transforms JSON found in {p}")


def eval_table(soup, net, background, dataset):
    rows = []
    for name, cam, img in zip(dataset.names, dataset.cameras, dataset.images):
        rgb, _, _ = render_deterministic(soup, cam, net, background)
        rows.append((name, psnr(rgb, img), ssim(rgb, img)[0], mae(rgb, img)))
    return rows


def cmd_eval(args) -> int:
    soup, net, background = load_scene(args.scene)
    data = load_dataset(_data_cameras(args.data), background=background)
    rows = eval_table(soup, net, background, data)
    print(f"{'view':<16}{'PSNR':>10}{'SSIM':>10}{'MAE':>10}")
    for name, p, s, m in rows:
        print(f"{name:<16}{p:>10.3f}{s:>10.4f}{m:>10.5f}")
    if rows:
        means = np.array([r[1:] for r in rows]).mean(axis=0)
        print(f"{'mean':<16}{means[0]:>10.3f}{means[1]:>10.4f}{means[2]:>10.5f}")
    return 0


def cmd_pack(args) -> int:
    soup, net, background = load_scene(args.scene)
    pack_scene(args.out, soup, net, background)
    print(f"packed {len(soup)} triangles into {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trisoup", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="optimize a soup from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render a scene for every camera of a transforms file")
    p.add_argument("--scene", required=True)
    p.add_argument("--cameras", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("make-synthetic", help="generate a random ground-truth dataset")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_make_synthetic)

    p = sub.add_parser("eval", help="PSNR / SSIM / MAE of a scene against a dataset")
    p.add_argument("--scene", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pack", help="quantize textures into atlases plus raw geometry")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pack)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except EXPECTED_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
