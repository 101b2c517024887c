"""Spatial-transcriptomics to segmentation-label conversion.

Expression vectors are clustered with full-batch Lloyd k-means, spatial
context is injected through multi-hop neighbor pooling on a symmetric
k-nearest-neighbor graph, and cluster labels are painted onto pixel grids
either as axis-aligned bin squares or through cell contour rasterization.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import GraphError, InputError
from .imaging import PolygonAnnotation, rasterize_polygons


@dataclass
class BinRecord:
    """One square spatial bin: center in pixels, expression vector, side length."""

    x: float
    y: float
    side_px: float
    expression: np.ndarray

    def __post_init__(self):
        if self.side_px <= 0:
            raise InputError(f"bin side must be positive, got {self.side_px}")


@dataclass
class CellRecord:
    """One segmented cell: contour polygon, expression vector, centroid."""

    contour: list[tuple[float, float]]
    expression: np.ndarray
    centroid: tuple[float, float]


@dataclass
class ClusterModel:
    k: int
    centroids: np.ndarray  # (K, d)
    assignments: np.ndarray  # (N,) values in 0..K-1
    objective: float


def _kmeans_objective(x: np.ndarray, centroids: np.ndarray, assign: np.ndarray) -> float:
    return float(((x - centroids[assign]) ** 2).sum())


def _plus_plus_seed(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    d2 = ((x - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[j] = x[rng.integers(n)]
            continue
        centroids[j] = x[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((x - centroids[j]) ** 2).sum(axis=1))
    return centroids


def _lloyd(x: np.ndarray, centroids: np.ndarray, max_iter: int) -> tuple[np.ndarray, np.ndarray, float]:
    k = centroids.shape[0]
    prev_obj = np.inf
    assign = np.zeros(len(x), dtype=int)
    for _ in range(max_iter):
        d2 = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        assign = d2.argmin(axis=1)
        for j in range(k):
            members = x[assign == j]
            if len(members) == 0:
                # re-seed an empty cluster to the point farthest from its centroid
                far = d2[np.arange(len(x)), assign].argmax()
                centroids[j] = x[far]
                assign[far] = j
            else:
                centroids[j] = members.mean(axis=0)
        obj = _kmeans_objective(x, centroids, assign)
        assert obj <= prev_obj + 1e-9, "k-means objective increased"
        if prev_obj - obj < 1e-12:
            break
        prev_obj = obj
    return centroids, assign, _kmeans_objective(x, centroids, assign)


def kmeans(x: np.ndarray, k: int, seed: int = 0, max_iter: int = 100,
           n_init: int = 10) -> ClusterModel:
    """Lloyd iterations from k-means++ seeding; best of ``n_init`` restarts.

    The within-cluster variance objective is non-increasing per iteration
    (asserted) and each point ends assigned to its nearest centroid.
    Deterministic under the seed.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or len(x) == 0:
        raise InputError("kmeans needs a non-empty N x d matrix")
    distinct = np.unique(x, axis=0)
    if k > len(distinct):
        raise InputError(f"k={k} exceeds {len(distinct)} distinct points")
    rng = np.random.default_rng(seed)
    best: tuple[np.ndarray, np.ndarray, float] | None = None
    for _ in range(n_init):
        centroids = _plus_plus_seed(x, k, rng)
        result = _lloyd(x, centroids.copy(), max_iter)
        if best is None or result[2] < best[2]:
            best = result
    centroids, assign, obj = best
    return ClusterModel(k=k, centroids=centroids, assignments=assign, objective=obj)


def knn_graph(coords: np.ndarray, k_neighbors: int) -> list[np.ndarray]:
    """Symmetric k-nearest-neighbor adjacency (ties broken by point index)."""
    n = len(coords)
    if n < k_neighbors + 1:
        raise GraphError(f"{n} points cannot support k={k_neighbors} neighbors")
    d2 = ((coords[:, None, :] - coords[None, :, :]) ** 2).sum(axis=2)
    np.fill_diagonal(d2, np.inf)
    neighbors = [set() for _ in range(n)]
    for i in range(n):
        order = np.lexsort((np.arange(n), d2[i]))[:k_neighbors]
        for j in order:
            neighbors[i].add(int(j))
            neighbors[int(j)].add(i)
    return [np.array(sorted(s), dtype=int) for s in neighbors]


def neighborhood_embed(x: np.ndarray, coords: np.ndarray, levels: int = 3,
                       k_neighbors: int = 6) -> np.ndarray:
    """Concatenate multi-hop neighbor-mean features: [X0 | X1 | ... | XL].

    X^(l+1)_i is the mean of X^(l) over i's graph neighbors, so each extra
    level pools a progressively larger spatial context.
    """
    x = np.asarray(x, dtype=float)
    coords = np.asarray(coords, dtype=float)
    if len(x) != len(coords):
        raise InputError("expression matrix and coordinates are misaligned")
    if k_neighbors < 1:
        raise InputError("k_neighbors must be >= 1")
    adj = knn_graph(coords, k_neighbors)
    levels_out = [x]
    cur = x
    for _ in range(levels):
        nxt = np.stack([cur[nbrs].mean(axis=0) for nbrs in adj])
        levels_out.append(nxt)
        cur = nxt
    return np.concatenate(levels_out, axis=1)


def bins_to_mask(bins: list[BinRecord], cluster_labels: np.ndarray,
                 cluster_to_class: dict[int, int], width: int, height: int) -> np.ndarray:
    """Paint each bin's square with its cluster's class index.

    Overlapping bins are resolved by later-bin overwrite (with a warning);
    unpainted pixels stay background.
    """
    mask = np.zeros((height, width), dtype=np.uint8)
    painted = np.zeros((height, width), dtype=bool)
    overlap_warned = False
    for b, lab in zip(bins, cluster_labels):
        # half-open square so abutting bins never double-paint a pixel
        half = b.side_px / 2.0
        x0 = int(np.ceil(b.x - half - 0.5))
        x1 = int(np.ceil(b.x + half - 0.5)) - 1
        y0 = int(np.ceil(b.y - half - 0.5))
        y1 = int(np.ceil(b.y + half - 0.5)) - 1
        x0, y0 = max(x0, 0), max(y0, 0)
        x1, y1 = min(x1, width - 1), min(y1, height - 1)
        if x1 < x0 or y1 < y0:
            continue
        region = painted[y0:y1 + 1, x0:x1 + 1]
        if region.any() and not overlap_warned:
            warnings.warn("overlapping bins: later bins overwrite earlier ones")
            overlap_warned = True
        mask[y0:y1 + 1, x0:x1 + 1] = cluster_to_class[int(lab)]
        region[...] = True
    return mask


def cells_to_mask(cells: list[CellRecord], cluster_labels: np.ndarray,
                  cluster_to_class: dict[int, int], width: int, height: int) -> np.ndarray:
    """Rasterize each cell contour with its cluster's class index."""
    polys = [PolygonAnnotation(class_index=cluster_to_class[int(lab)], vertices=c.contour)
             for c, lab in zip(cells, cluster_labels)]
    return rasterize_polygons(polys, width, height)


# ---------------------------------------------------------------------------
# File formats

def read_bins_csv(path) -> list[BinRecord]:
    """CSV with header x,y,side_px,f1..fd."""
    bins = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        d = len(header) - 3
        for row in reader:
            bins.append(BinRecord(x=float(row[0]), y=float(row[1]), side_px=float(row[2]),
                                  expression=np.array([float(v) for v in row[3:3 + d]])))
    return bins


def read_cells_json(path) -> list[CellRecord]:
    with open(path) as fh:
        raw = json.load(fh)
    cells = []
    for rec in raw:
        contour = [(float(x), float(y)) for x, y in rec["contour"]]
        arr = np.asarray(contour)
        cells.append(CellRecord(contour=contour,
                                expression=np.array(rec["expression"], dtype=float),
                                centroid=tuple(arr.mean(axis=0))))
    return cells


def read_cluster_class_map(path, class_indices: dict[str, int] | None = None
                           ) -> dict[int, int]:
    """JSON {cluster_id: class_name} from the human annotation step.

    Class names resolve through ``class_indices``; numeric values are
    accepted directly as class indices.
    """
    with open(path) as fh:
        raw = json.load(fh)
    out = {}
    for k, v in raw.items():
        if isinstance(v, str) and not v.isdigit():
            if not class_indices or v not in class_indices:
                raise InputError(f"no class index for cluster label {v!r}")
            out[int(k)] = class_indices[v]
        else:
            out[int(k)] = int(v)
    return out
