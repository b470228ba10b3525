"""Builds the toy host folder from photos bundled with scikit-image.

Each source is downscaled so its short side is 160 px, then random 96x96 crops are
written as PNG. Deterministic for a fixed --seed.
"""
import argparse
import pathlib

import numpy as np
from PIL import Image
import skimage.data as skd

SOURCES = ["astronaut", "chelsea", "coffee", "rocket", "hubble_deep_field", "retina",
           "immunohistochemistry", "colorwheel", "motorcycle_left", "brick", "grass", "gravel"]


def load(name):
    fn = getattr(skd, name, None)
    if name == "motorcycle_left":
        img = np.asarray(Image.open(pathlib.Path(skd.__file__).parent / "motorcycle_left.png"))
    else:
        img = fn()
    if img.ndim == 2:
        img = np.stack([img] * 3, -1)
    return Image.fromarray(img[..., :3].astype(np.uint8))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="data/hosts")
    ap.add_argument("--count", type=int, default=32)
    ap.add_argument("--side", type=int, default=96)
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args()
    rng = np.random.default_rng(a.seed)
    out = pathlib.Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    imgs = []
    for name in SOURCES:
        im = load(name)
        s = 160 / min(im.size)
        imgs.append(im.resize((round(im.size[0] * s), round(im.size[1] * s)), Image.BICUBIC))
    for i in range(a.count):
        im = imgs[i % len(imgs)]
        x = rng.integers(0, im.size[0] - a.side + 1)
        y = rng.integers(0, im.size[1] - a.side + 1)
        im.crop((x, y, x + a.side, y + a.side)).save(out / f"host_{i:03d}.png")


if __name__ == "__main__":
    main()
