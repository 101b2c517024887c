"""Seeded synthetic corpora: colored tissue-like blobs on a pale background.

Used by the test suite and the demo CLI paths. Each class has a distinct
base color; blobs are rotated ellipses with per-blob color jitter and
per-pixel noise. A slide generator produces large multi-blob canvases,
optionally with a color shift so a model trained on the clean palette sees
an out-of-distribution stain.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imaging import save_image, save_mask
from .model import TrainSample
from .corpus import prompt_text

CLASS_NAMES = {1: "tumor", 2: "stroma", 3: "lymphocytes", 4: "mucosa"}

PALETTE = {
    0: np.array([0.93, 0.91, 0.94]),
    1: np.array([0.80, 0.20, 0.26]),
    2: np.array([0.24, 0.70, 0.32]),
    3: np.array([0.22, 0.38, 0.84]),
    4: np.array([0.64, 0.30, 0.74]),
}


@dataclass
class SyntheticSample:
    image: np.ndarray  # HxWx3 uint8
    mask: np.ndarray  # HxW uint8
    classes: list[int]


def _ellipse_mask(size_y: int, size_x: int, cx: float, cy: float, a: float, b: float,
                  theta: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size_y, 0:size_x]
    dx = xx + 0.5 - cx
    dy = yy + 0.5 - cy
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _paint(mask: np.ndarray, palette_shift: float, rng: np.random.Generator,
           noise: float) -> np.ndarray:
    h, w = mask.shape
    img = np.empty((h, w, 3))
    for c in np.unique(mask):
        color = PALETTE[int(c)].copy()
        if palette_shift > 0 and c != 0:
            color = (1.0 - palette_shift) * color + palette_shift * np.roll(color, 1)
        jitter = rng.normal(0.0, 0.02, size=3)
        img[mask == c] = np.clip(color + jitter, 0.0, 1.0)
    img += rng.normal(0.0, noise, size=img.shape)
    return (np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)


def make_sample(rng: np.random.Generator, size: int = 224, class_pool=(1, 2, 3, 4),
                min_blobs: int = 1, max_blobs: int = 2, noise: float = 0.03,
                radius_frac: tuple[float, float] = (0.11, 0.18)) -> SyntheticSample:
    """One image with min..max elliptical blobs of distinct classes.

    Blobs are placed on shuffled grid cells with jitter so they rarely
    occlude each other; heavy occlusion leaves sliver-sized ground-truth
    regions that no segmenter can score on.
    """
    mask = np.zeros((size, size), dtype=np.uint8)
    n = int(rng.integers(min_blobs, max_blobs + 1))
    classes = rng.choice(class_pool, size=n, replace=False)
    side = int(np.ceil(np.sqrt(n)))
    cells = rng.permutation(side * side)[:n]
    cell_px = size / side
    for c, cell in zip(classes, cells):
        cy_cell, cx_cell = divmod(int(cell), side)
        a = rng.uniform(*radius_frac) * size
        b = rng.uniform(*radius_frac) * size
        cx = (cx_cell + 0.5) * cell_px + rng.uniform(-0.08, 0.08) * size
        cy = (cy_cell + 0.5) * cell_px + rng.uniform(-0.08, 0.08) * size
        theta = rng.uniform(0, np.pi)
        mask[_ellipse_mask(size, size, cx, cy, a, b, theta)] = c
    image = _paint(mask, 0.0, rng, noise)
    return SyntheticSample(image=image, mask=mask,
                           classes=sorted(int(c) for c in np.unique(mask) if c))


def make_corpus(n_images: int, seed: int, size: int = 224, class_pool=(1, 2, 3, 4),
                min_blobs: int = 4, max_blobs: int = 4) -> list[SyntheticSample]:
    """Seeded corpus; by default every image carries a blob of every class."""
    rng = np.random.default_rng(seed)
    return [make_sample(rng, size=size, class_pool=class_pool,
                        min_blobs=min_blobs, max_blobs=max_blobs)
            for _ in range(n_images)]


def to_train_samples(samples: list[SyntheticSample]) -> list[TrainSample]:
    """One (image, binary mask, prompt) unit per class present in each image."""
    out = []
    for s in samples:
        for c in s.classes:
            out.append(TrainSample(image=s.image, label=(s.mask == c).astype(np.uint8),
                                   prompt=prompt_text(CLASS_NAMES[c])))
    return out


def make_slide(size: int = 2048, seed: int = 0, class_pool=(1, 2, 3), n_blobs: int = 36,
               color_shift: float = 0.0, noise: float = 0.03,
               radius_frac: tuple[float, float] = (0.03, 0.075)) -> SyntheticSample:
    """A large canvas scattered with blobs of the given classes."""
    rng = np.random.default_rng(seed)
    mask = np.zeros((size, size), dtype=np.uint8)
    for i in range(n_blobs):
        c = int(class_pool[i % len(class_pool)])
        a = rng.uniform(*radius_frac) * size
        b = rng.uniform(*radius_frac) * size
        cx = rng.uniform(0.05 * size, 0.95 * size)
        cy = rng.uniform(0.05 * size, 0.95 * size)
        theta = rng.uniform(0, np.pi)
        mask[_ellipse_mask(size, size, cx, cy, a, b, theta)] = c
    image = _paint(mask, color_shift, rng, noise)
    return SyntheticSample(image=image, mask=mask,
                           classes=sorted(int(c) for c in np.unique(mask) if c))


def write_corpus_dir(root, samples: list[SyntheticSample],
                     class_names: dict[int, str] | None = None) -> None:
    """Materialize samples in the corpus directory layout."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    names = class_names or CLASS_NAMES
    with open(root / "classes.json", "w") as fh:
        json.dump({str(k): v for k, v in sorted(names.items())}, fh, indent=2)
    for i, s in enumerate(samples):
        stem = f"sample{i:05d}"
        save_image(root / "images" / f"{stem}.png", s.image)
        save_mask(root / "masks" / f"{stem}.png", s.mask)


def main(argv=None) -> int:
    import argparse

    parser = argparse.ArgumentParser(description="generate synthetic fixtures")
    sub = parser.add_subparsers(dest="cmd", required=True)
    p_corpus = sub.add_parser("corpus")
    p_corpus.add_argument("--out", required=True)
    p_corpus.add_argument("--n", type=int, default=50)
    p_corpus.add_argument("--seed", type=int, default=0)
    p_corpus.add_argument("--size", type=int, default=224)
    p_slide = sub.add_parser("slide")
    p_slide.add_argument("--out", required=True)
    p_slide.add_argument("--size", type=int, default=2048)
    p_slide.add_argument("--seed", type=int, default=0)
    p_slide.add_argument("--classes", type=int, default=3)
    p_slide.add_argument("--color-shift", type=float, default=0.0)
    args = parser.parse_args(argv)
    if args.cmd == "corpus":
        write_corpus_dir(args.out, make_corpus(args.n, args.seed, size=args.size))
    else:
        slide = make_slide(size=args.size, seed=args.seed,
                           class_pool=tuple(range(1, args.classes + 1)),
                           color_shift=args.color_shift)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        save_image(out / "slide.png", slide.image)
        save_mask(out / "gt.png", slide.mask)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
