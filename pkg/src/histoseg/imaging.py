"""Raster geometry: polygon rasterization, mask algebra, tiling, resampling.

Masks are H x W arrays of class indices (0 = background). Images are
H x W x 3 uint8 RGB arrays. Pixel (x, y) is sampled at its center
(x + 0.5, y + 0.5); polygon membership uses the even-odd rule.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import AnnotationError, GeometryError, InputError


@dataclass
class PolygonAnnotation:
    """One labeled polygon in pixel units."""

    class_index: int
    vertices: list[tuple[float, float]]
    class_name: str = ""

    def __post_init__(self):
        if len(self.vertices) < 3:
            raise AnnotationError(f"polygon needs >= 3 vertices, got {len(self.vertices)}")
        if not all(np.isfinite(v).all() for v in np.asarray(self.vertices, dtype=float)):
            raise AnnotationError("polygon coordinates must be finite")


@dataclass(frozen=True)
class BBox:
    """Inclusive pixel bounding box."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise GeometryError(f"degenerate box {self}")

    def normalized(self, width: int, height: int) -> tuple[float, float, float, float]:
        """Corners scaled to [0,1]^4; the max edge covers the full pixel."""
        return (self.x_min / width, self.y_min / height,
                (self.x_max + 1) / width, (self.y_max + 1) / height)


def _polygon_interior(vertices: np.ndarray, width: int, height: int) -> np.ndarray:
    """Boolean H x W mask of pixel centers inside the polygon (even-odd rule).

    Vectorized ray casting: for each edge, toggle every pixel center whose
    horizontal ray to -x crosses it.
    """
    xs = np.arange(width) + 0.5
    ys = np.arange(height) + 0.5
    xg = np.broadcast_to(xs, (height, width))
    yg = ys[:, None]
    inside = np.zeros((height, width), dtype=bool)
    n = len(vertices)
    for i in range(n):
        x1, y1 = vertices[i]
        x2, y2 = vertices[(i + 1) % n]
        if y1 == y2:
            continue
        crosses = (y1 > yg) != (y2 > yg)
        x_at = x1 + (yg - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (xg < x_at)
    return inside


def rasterize_polygons(polys: list[PolygonAnnotation], width: int, height: int) -> np.ndarray:
    """Paint polygons onto a class-index grid; later polygons overwrite earlier.

    Pixels whose center falls inside no polygon stay background (0).
    """
    if width < 1 or height < 1:
        raise GeometryError(f"canvas {width}x{height} is empty")
    mask = np.zeros((height, width), dtype=np.uint8)
    for poly in polys:
        verts = np.asarray(poly.vertices, dtype=float)
        inside = _polygon_interior(verts, width, height)
        mask[inside] = poly.class_index
    return mask


def tight_bbox(mask: np.ndarray, class_index: int) -> BBox | None:
    """Minimal box containing every pixel of the class, or None if absent."""
    ys, xs = np.nonzero(mask == class_index)
    if len(xs) == 0:
        return None
    return BBox(int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max()))


def binary_view(mask: np.ndarray, class_index: int) -> np.ndarray:
    """1 where mask == class_index else 0."""
    return (mask == class_index).astype(np.uint8)


@dataclass
class Tile:
    """One aligned image/mask tile with its origin and recorded padding."""

    x: int
    y: int
    image: np.ndarray
    mask: np.ndarray
    pad_right: int
    pad_bottom: int


def tile(image: np.ndarray, mask: np.ndarray, tile_size: int = 1024) -> list[Tile]:
    """Cut a non-overlapping grid of tiles, zero/background-padding remainders."""
    if tile_size < 1:
        raise InputError(f"tile size must be >= 1, got {tile_size}")
    if image.size == 0:
        raise InputError("empty image")
    h, w = image.shape[:2]
    if mask.shape[:2] != (h, w):
        raise InputError(f"mask {mask.shape[:2]} does not match image {(h, w)}")
    tiles = []
    for y in range(0, h, tile_size):
        for x in range(0, w, tile_size):
            img_t = image[y:y + tile_size, x:x + tile_size]
            msk_t = mask[y:y + tile_size, x:x + tile_size]
            pad_b = tile_size - img_t.shape[0]
            pad_r = tile_size - img_t.shape[1]
            if pad_b or pad_r:
                pad_img = [(0, pad_b), (0, pad_r)] + [(0, 0)] * (image.ndim - 2)
                img_t = np.pad(img_t, pad_img)
                msk_t = np.pad(msk_t, [(0, pad_b), (0, pad_r)])
            tiles.append(Tile(x=x, y=y, image=img_t, mask=msk_t,
                              pad_right=pad_r, pad_bottom=pad_b))
    return tiles


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize under the half-pixel-center convention. Returns float64."""
    h, w = image.shape[:2]
    src = image.astype(np.float64)

    def axis_coords(n_out, n_in):
        coords = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        lo = np.floor(coords).astype(int)
        t = coords - lo
        return np.clip(lo, 0, n_in - 1), np.clip(lo + 1, 0, n_in - 1), t

    y0, y1, ty = axis_coords(out_h, h)
    x0, x1, tx = axis_coords(out_w, w)
    ty = ty[:, None] if src.ndim == 2 else ty[:, None, None]
    txb = tx[None, :] if src.ndim == 2 else tx[None, :, None]
    top = src[y0][:, x0] * (1 - txb) + src[y0][:, x1] * txb
    bot = src[y1][:, x0] * (1 - txb) + src[y1][:, x1] * txb
    return top * (1 - ty) + bot * ty


def resize_nearest(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor resize (label-preserving), half-pixel centers."""
    h, w = mask.shape[:2]
    ys = np.clip(np.floor((np.arange(out_h) + 0.5) * h / out_h).astype(int), 0, h - 1)
    xs = np.clip(np.floor((np.arange(out_w) + 0.5) * w / out_w).astype(int), 0, w - 1)
    return mask[ys][:, xs]


def sample_and_resize(image: np.ndarray, mask: np.ndarray, rng: np.random.Generator,
                      crop: int = 512, out: int = 224) -> tuple[np.ndarray, np.ndarray]:
    """Random aligned crop of both arrays, then resize to the model input size.

    The image is resized bilinearly, the mask by nearest neighbor so class
    labels survive. The same rng state yields the same crop window.
    """
    h, w = image.shape[:2]
    if h < crop or w < crop:
        raise GeometryError(f"tile {w}x{h} smaller than crop {crop}")
    y = int(rng.integers(0, h - crop + 1))
    x = int(rng.integers(0, w - crop + 1))
    img_c = image[y:y + crop, x:x + crop]
    msk_c = mask[y:y + crop, x:x + crop]
    img_r = resize_bilinear(img_c, out, out)
    if image.dtype == np.uint8:
        img_r = np.clip(np.rint(img_r), 0, 255).astype(np.uint8)
    return img_r, resize_nearest(msk_c, out, out)


# ---------------------------------------------------------------------------
# File formats: PNG images (8-bit RGB), PNG masks (8-bit grayscale class
# indices), polygons as JSON [{class_name, class_index, points: [[x, y], ...]}]

def load_image(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"))


def save_image(path, image: np.ndarray) -> None:
    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="RGB").save(path, format="PNG")


def load_mask(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("L"))


def save_mask(path, mask: np.ndarray) -> None:
    Image.fromarray(np.asarray(mask, dtype=np.uint8), mode="L").save(path, format="PNG")


def load_polygons(path) -> list[PolygonAnnotation]:
    with open(path) as fh:
        raw = json.load(fh)
    return [PolygonAnnotation(class_index=int(rec["class_index"]),
                              vertices=[(float(x), float(y)) for x, y in rec["points"]],
                              class_name=rec.get("class_name", ""))
            for rec in raw]
