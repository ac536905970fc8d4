#!/usr/bin/env python3
"""
Write a procedurally generated RGB image folder with train/val/test splits.
Usage:
  python scripts/make_synthetic_dataset.py --out data/desk --train 240 --val 32 --test 64 --side 64
Images mix smooth colour gradients, filled shapes, stripes and soft texture so
covers and secrets carry both flat regions and edges.
"""
import argparse
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFilter


def gradient(rng: np.random.Generator, side: int) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side] / max(side - 1, 1)
    angle = rng.uniform(0, 2 * np.pi)
    t = np.cos(angle) * xx + np.sin(angle) * yy
    t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
    a, b = rng.uniform(0, 1, size=3), rng.uniform(0, 1, size=3)
    return a[None, None, :] * (1 - t[..., None]) + b[None, None, :] * t[..., None]


def stripes(rng: np.random.Generator, side: int) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side]
    freq = rng.uniform(2, 10) / side
    phase = rng.uniform(0, 2 * np.pi, size=3)
    direction = rng.uniform(-1, 1, size=2)
    s = direction[0] * xx + direction[1] * yy
    return 0.5 + 0.5 * np.sin(2 * np.pi * freq * s[..., None] + phase[None, None, :])


def make_image(rng: np.random.Generator, side: int) -> Image.Image:
    base = gradient(rng, side)
    if rng.random() < 0.5:
        mix = rng.uniform(0.2, 0.6)
        base = (1 - mix) * base + mix * stripes(rng, side)
    img = Image.fromarray((base.clip(0, 1) * 255).astype(np.uint8), mode="RGB")

    draw = ImageDraw.Draw(img)
    for _ in range(int(rng.integers(2, 7))):
        x0, y0 = rng.integers(0, side, size=2)
        w, h = rng.integers(side // 8, side // 2, size=2)
        colour = tuple(int(c) for c in rng.integers(0, 256, size=3))
        box = [int(x0), int(y0), int(x0 + w), int(y0 + h)]
        if rng.random() < 0.5:
            draw.ellipse(box, fill=colour)
        else:
            draw.rectangle(box, fill=colour)

    if rng.random() < 0.5:
        img = img.filter(ImageFilter.GaussianBlur(radius=float(rng.uniform(0.5, 1.5))))
    texture = rng.normal(0, rng.uniform(0, 8), size=(side, side, 3))
    arr = np.asarray(img, dtype=np.float64) + texture
    return Image.fromarray(arr.clip(0, 255).astype(np.uint8), mode="RGB")


def write_split(out: Path, split: str, count: int, side: int, seed: int):
    split_dir = out / split
    split_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([seed, {"train": 0, "val": 1, "test": 2}[split]])
    for i in range(count):
        make_image(rng, side).save(split_dir / f"{split}_{i:05d}.png", format="PNG")
    print(f"[OK] Wrote {count} images to {split_dir}")


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--out", default="data/desk", help="dataset root folder")
    parser.add_argument("--train", type=int, default=240, help="number of training images")
    parser.add_argument("--val", type=int, default=32, help="number of validation images")
    parser.add_argument("--test", type=int, default=64, help="number of test images")
    parser.add_argument("--side", type=int, default=64, help="image side length")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    out = Path(args.out)
    print(f"[INFO] Generating synthetic images at {args.side}x{args.side} under {out} ...")
    for split, count in (("train", args.train), ("val", args.val), ("test", args.test)):
        if count > 0:
            write_split(out, split, count, args.side, args.seed)
        else:
            print(f"[WARN] Skipping empty split '{split}'")


if __name__ == "__main__":
    main()
