"""Desk-scale run end to end through the command line.

Generates a 30-triangle synthetic scene, reconstructs it from a random
soup of 200 triangles, evaluates the held-out views and packs the result.
Takes a few minutes on one core.

    python3 demos/desk_scale/run.py
"""
from pathlib import Path

from trisoup.cli import main

here = Path(__file__).resolve().parent
steps = [
    ["make-synthetic", "--spec", str(here / "synthetic.toml"), "--out", str(here / "data")],
    ["train", "--config", str(here / "train.toml")],
    ["eval", "--scene", str(here / "out" / "scene.bin"), "--data", str(here / "data" / "transforms_test.json")],
    ["pack", "--scene", str(here / "out" / "scene.bin"), "--out", str(here / "pack")],
]
for argv in steps:
    print("$ trisoup", " ".join(argv))
    code = main(argv)
    if code:
        raise SystemExit(code)
