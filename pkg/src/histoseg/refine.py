"""Human-in-the-loop refinement: patch features, uncertainty sampling,
annotation, box derivation, and whole-slide pixel re-segmentation.

A slide is tiled into a fixed patch grid with deterministic per-patch
features. Each round: the most uncertain unannotated patches are selected,
labeled (by the ground-truth oracle or by submitted human events), a
multinomial logistic classifier is refit on all labels, every patch is
re-predicted, the patch-level mask is rendered and converted to per-window
class boxes, and the segmentation model re-segments each window with those
boxes to stitch an updated pixel mask.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import model as model_mod
from .errors import InputError
from .imaging import BBox, resize_bilinear, tight_bbox
from .metrics import multiclass_dice


def extract_patch_features(patch: np.ndarray) -> np.ndarray:
    """Deterministic 54-d descriptor of an RGB patch.

    Layout: 8-bin intensity histogram per channel (24), per-channel mean and
    std (6), and a per-channel 8-bin gradient-orientation histogram weighted
    by gradient magnitude (24). The orientation bins of one channel sum to
    that channel's mean gradient magnitude, and every gradient feature is
    exactly zero on constant patches.
    """
    img = patch.astype(np.float64) / 255.0
    n = img.shape[0] * img.shape[1]
    feats = []
    for c in range(3):
        ch = img[:, :, c]
        hist, _ = np.histogram(ch, bins=8, range=(0.0, 1.0))
        feats.append(hist / n)
    means = img.mean(axis=(0, 1))
    stds = img.std(axis=(0, 1))
    feats.append(means)
    feats.append(stds)
    for c in range(3):
        ch = img[:, :, c]
        gy, gx = np.gradient(ch)
        mag = np.hypot(gx, gy)
        ang = np.arctan2(gy, gx)  # [-pi, pi]
        bins = np.clip(((ang + np.pi) / (2 * np.pi) * 8).astype(int), 0, 7)
        ohist = np.bincount(bins.ravel(), weights=mag.ravel(), minlength=8)
        feats.append(ohist / n)
    out = np.concatenate(feats)
    assert out.shape == (54,)
    return out


class PatchClassifier:
    """Multinomial logistic regression fit by full-batch gradient descent."""

    def __init__(self, classes: list[int], weights: np.ndarray, mean: np.ndarray,
                 scale: np.ndarray):
        self.classes = classes
        self.weights = weights  # (C, F+1) with bias column
        self.mean = mean
        self.scale = scale

    def predict_proba(self, features: np.ndarray) -> np.ndarray:
        x = (features - self.mean) / self.scale
        xb = np.hstack([x, np.ones((len(x), 1))])
        z = xb @ self.weights.T
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, features: np.ndarray) -> np.ndarray:
        proba = self.predict_proba(features)
        return np.array(self.classes)[proba.argmax(axis=1)]

    def to_json(self) -> dict:
        return {"classes": self.classes, "weights": self.weights.tolist(),
                "mean": self.mean.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_json(cls, data: dict) -> "PatchClassifier":
        return cls(classes=list(data["classes"]), weights=np.array(data["weights"]),
                   mean=np.array(data["mean"]), scale=np.array(data["scale"]))


def fit_patch_classifier(features: np.ndarray, labels: np.ndarray, seed: int = 0,
                         lr: float = 0.5, tol: float = 1e-6,
                         max_iter: int = 500) -> PatchClassifier:
    """Softmax regression to tolerance ``tol`` on the loss, deterministic."""
    features = np.asarray(features, dtype=float)
    labels = np.asarray(labels, dtype=int)
    classes = sorted(set(labels.tolist()))
    if len(classes) == 1:
        warnings.warn("single-class labels: classifier is constant")
    mean = features.mean(axis=0)
    scale = features.std(axis=0)
    scale[scale < 1e-12] = 1.0
    x = (features - mean) / scale
    xb = np.hstack([x, np.ones((len(x), 1))])
    idx = {c: i for i, c in enumerate(classes)}
    y = np.zeros((len(labels), len(classes)))
    y[np.arange(len(labels)), [idx[v] for v in labels]] = 1.0
    w = np.zeros((len(classes), xb.shape[1]))
    prev = math.inf
    for _ in range(max_iter):
        z = xb @ w.T
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=1, keepdims=True)
        loss = -np.log(np.clip((p * y).sum(axis=1), 1e-300, None)).mean()
        w -= lr * ((p - y).T @ xb) / len(labels)
        if abs(prev - loss) < tol:
            break
        prev = loss
    return PatchClassifier(classes=classes, weights=w, mean=mean, scale=scale)


@dataclass
class PatchGrid:
    """Fixed tiling of a slide with per-patch features and predictions."""

    patch_size: int
    rows: int
    cols: int
    features: np.ndarray  # (P, 54)
    pred_class: np.ndarray  # (P,)
    entropy: np.ndarray  # (P,)
    human_label: dict[int, int] = field(default_factory=dict)

    @property
    def n_patches(self) -> int:
        return self.rows * self.cols

    def patch_bounds(self, pid: int, height: int, width: int) -> tuple[int, int, int, int]:
        r, c = divmod(pid, self.cols)
        y0 = r * self.patch_size
        x0 = c * self.patch_size
        return (y0, x0, min(y0 + self.patch_size, height), min(x0 + self.patch_size, width))


def build_patch_grid(slide: np.ndarray, patch_size: int = 64,
                     n_classes: int = 2) -> PatchGrid:
    h, w = slide.shape[:2]
    rows = (h + patch_size - 1) // patch_size
    cols = (w + patch_size - 1) // patch_size
    feats = np.empty((rows * cols, 54))
    for r in range(rows):
        for c in range(cols):
            patch = slide[r * patch_size:(r + 1) * patch_size,
                          c * patch_size:(c + 1) * patch_size]
            feats[r * cols + c] = extract_patch_features(patch)
    uniform = math.log(max(n_classes, 2))
    return PatchGrid(patch_size=patch_size, rows=rows, cols=cols, features=feats,
                     pred_class=np.zeros(rows * cols, dtype=int),
                     entropy=np.full(rows * cols, uniform))


def select_uncertain(grid: PatchGrid, budget: int) -> list[int]:
    """Top-budget unannotated patch ids by prediction entropy (ties by id)."""
    if budget < 1:
        raise InputError("budget must be >= 1")
    candidates = [i for i in range(grid.n_patches) if i not in grid.human_label]
    candidates.sort(key=lambda i: (-grid.entropy[i], i))
    return candidates[:budget]


@dataclass
class AnnotationEvent:
    patch_id: int
    class_index: int
    timestamp: float = 0.0

    def to_json(self) -> dict:
        return {"patch_id": self.patch_id, "class_index": self.class_index,
                "timestamp": self.timestamp}


def annotate_oracle(grid: PatchGrid, ids: list[int], gt_mask: np.ndarray) -> list[AnnotationEvent]:
    """Label each patch with the majority ground-truth class (ties -> lowest)."""
    h, w = gt_mask.shape
    events = []
    for pid in ids:
        y0, x0, y1, x1 = grid.patch_bounds(pid, h, w)
        region = gt_mask[y0:y1, x0:x1]
        values, counts = np.unique(region, return_counts=True)
        best = values[counts == counts.max()].min()
        events.append(AnnotationEvent(patch_id=pid, class_index=int(best)))
    return events


def apply_annotations(grid: PatchGrid, events: list[AnnotationEvent]) -> None:
    """Apply events in order; conflicting events for one patch -> last wins."""
    seen: dict[int, int] = {}
    for ev in events:
        if not 0 <= ev.patch_id < grid.n_patches:
            raise InputError(f"patch id {ev.patch_id} out of range")
        if ev.patch_id in seen:
            warnings.warn(f"conflicting annotations for patch {ev.patch_id}: last event wins")
        seen[ev.patch_id] = ev.class_index
    grid.human_label.update(seen)


def render_patch_mask(grid: PatchGrid, height: int, width: int,
                      patch_classes: np.ndarray) -> np.ndarray:
    """Paint each grid cell's class over its pixel footprint."""
    mask = np.zeros((height, width), dtype=np.uint8)
    for pid in range(grid.n_patches):
        y0, x0, y1, x1 = grid.patch_bounds(pid, height, width)
        mask[y0:y1, x0:x1] = patch_classes[pid]
    return mask


def patch_mask_to_boxes(pixel_mask: np.ndarray, window: int = 224, stride: int | None = None
                        ) -> list[tuple[int, int, dict[int, BBox]]]:
    """Per-window tight boxes for every class present in that window.

    Returns (x, y, {class: window-local box}) per window. Windows tile the
    canvas at ``stride`` (= window by default); a trailing window is shifted
    back to stay inside the canvas.
    """
    if window < 1:
        raise InputError("window must be >= 1")
    stride = stride or window
    h, w = pixel_mask.shape
    xs = _window_starts(w, window, stride)
    ys = _window_starts(h, window, stride)
    out = []
    for y in ys:
        for x in xs:
            local = pixel_mask[y:y + window, x:x + window]
            present = [int(c) for c in np.unique(local) if c != 0]
            boxes = {}
            for c in present:
                box = tight_bbox(local, c)
                if box is not None:
                    boxes[c] = box
            out.append((x, y, boxes))
    return out


def _window_starts(extent: int, window: int, stride: int) -> list[int]:
    if extent <= window:
        return [0]
    starts = list(range(0, extent - window + 1, stride))
    if starts[-1] + window < extent:
        starts.append(extent - window)
    return starts


@dataclass
class RoundState:
    """One HITL session: cumulative annotations, classifier, masks, Dice log."""

    round_index: int
    class_names: dict[int, str]
    patch_size: int
    window: int
    annotated: dict[int, int] = field(default_factory=dict)
    events_log: list[dict] = field(default_factory=list)
    classifier: PatchClassifier | None = None
    patch_classes: np.ndarray | None = None
    dice_log: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "round_index": self.round_index,
            "class_names": {str(k): v for k, v in self.class_names.items()},
            "patch_size": self.patch_size,
            "window": self.window,
            "annotated": {str(k): v for k, v in self.annotated.items()},
            "events_log": self.events_log,
            "classifier": self.classifier.to_json() if self.classifier else None,
            "patch_classes": None if self.patch_classes is None else self.patch_classes.tolist(),
            "dice_log": self.dice_log,
        }

    @classmethod
    def from_json(cls, data: dict) -> "RoundState":
        state = cls(
            round_index=data["round_index"],
            class_names={int(k): v for k, v in data["class_names"].items()},
            patch_size=data["patch_size"],
            window=data["window"],
            annotated={int(k): v for k, v in data["annotated"].items()},
            events_log=list(data["events_log"]),
            classifier=PatchClassifier.from_json(data["classifier"]) if data["classifier"] else None,
            dice_log=list(data["dice_log"]),
        )
        if data["patch_classes"] is not None:
            state.patch_classes = np.array(data["patch_classes"], dtype=int)
        return state


class RefineSession:
    """Owns a slide, its patch grid, the model, and the evolving RoundState."""

    def __init__(self, slide: np.ndarray, params: model_mod.ModelParams,
                 class_names: dict[int, str], gt_mask: np.ndarray | None = None,
                 patch_size: int = 64, window: int | None = None,
                 classifier_seed: int = 0):
        self.slide = slide
        self.params = params
        self.gt_mask = gt_mask
        self.class_names = class_names
        self.window = window or params.config.image_size
        n_classes = len(class_names) + 1
        self.grid = build_patch_grid(slide, patch_size=patch_size, n_classes=n_classes)
        self.classifier_seed = classifier_seed
        self.pixel_mask = self._segment_plain()
        self.state = RoundState(round_index=0, class_names=dict(class_names),
                                patch_size=patch_size, window=self.window)
        self.grid.pred_class = self._mask_majority(self.pixel_mask)
        self.state.patch_classes = self.grid.pred_class.copy()
        self._log_dice()

    # -- internals ---------------------------------------------------------

    def _classes(self) -> list[tuple[int, str]]:
        return sorted(self.class_names.items())

    def _mask_majority(self, mask: np.ndarray) -> np.ndarray:
        h, w = mask.shape
        out = np.zeros(self.grid.n_patches, dtype=int)
        for pid in range(self.grid.n_patches):
            y0, x0, y1, x1 = self.grid.patch_bounds(pid, h, w)
            region = mask[y0:y1, x0:x1]
            values, counts = np.unique(region, return_counts=True)
            out[pid] = int(values[counts == counts.max()].min())
        return out

    def _windows(self) -> list[tuple[int, int]]:
        h, w = self.slide.shape[:2]
        return [(x, y) for y in _window_starts(h, self.window, self.window)
                for x in _window_starts(w, self.window, self.window)]

    def _window_image(self, x: int, y: int) -> np.ndarray:
        win = self.slide[y:y + self.window, x:x + self.window]
        if win.shape[:2] != (self.window, self.window):  # edge remnant, should not happen
            raise InputError("window outside slide")
        size = self.params.config.image_size
        if self.window != size:
            win = np.clip(np.rint(resize_bilinear(win, size, size)), 0, 255).astype(np.uint8)
        return win

    def _segment_plain(self) -> np.ndarray:
        """Model-only segmentation of every window, no boxes (round 0)."""
        h, w = self.slide.shape[:2]
        out = np.zeros((h, w), dtype=np.uint8)
        for x, y in self._windows():
            pred = model_mod.segment_multiclass(self._window_image(x, y),
                                                self._classes(), None, self.params)
            out[y:y + self.window, x:x + self.window] = self._to_window(pred)
        return out

    def _to_window(self, pred: np.ndarray) -> np.ndarray:
        if pred.shape[0] != self.window:
            ys = np.clip((np.arange(self.window) + 0.5) * pred.shape[0] / self.window, 0,
                         pred.shape[0] - 1).astype(int)
            pred = pred[ys][:, ys]
        return pred

    def _scale_box(self, box: BBox) -> BBox:
        """Window-local box -> model input coordinates."""
        size = self.params.config.image_size
        if self.window == size:
            return box
        f = size / self.window
        return BBox(int(box.x_min * f), int(box.y_min * f),
                    min(int((box.x_max + 1) * f) - 1, size - 1),
                    min(int((box.y_max + 1) * f) - 1, size - 1))

    def _log_dice(self) -> None:
        if self.gt_mask is None:
            return
        class_ids = sorted(self.class_names)
        patch_pixel = render_patch_mask(self.grid, *self.gt_mask.shape, self.state.patch_classes)
        _, patch_dice = multiclass_dice(patch_pixel, self.gt_mask, class_ids)
        _, pixel_dice = multiclass_dice(self.pixel_mask, self.gt_mask, class_ids)
        self.state.dice_log.append({"round": self.state.round_index,
                                    "patch_dice": round(float(patch_dice), 6),
                                    "pixel_dice": round(float(pixel_dice), 6)})

    def restore(self, state: RoundState) -> None:
        """Resume a serialized session; the next round reproduces the original."""
        self.state = state
        self.grid.human_label = dict(state.annotated)
        if state.classifier is not None:
            proba = state.classifier.predict_proba(self.grid.features)
            self.grid.pred_class = np.array(state.classifier.classes)[proba.argmax(axis=1)]
            with np.errstate(divide="ignore", invalid="ignore"):
                plogp = np.where(proba > 0, proba * np.log(proba), 0.0)
            self.grid.entropy = -plogp.sum(axis=1)

    # -- the round ---------------------------------------------------------

    def run_round(self, budget: int | None = None,
                  events: list[AnnotationEvent] | None = None) -> RoundState:
        """One refinement round, oracle-driven (budget) or human-driven (events).

        Select -> annotate -> refit classifier -> re-predict all patches ->
        derive per-window boxes -> re-segment windows -> stitch; Dice is
        appended when ground truth is available. Zero new annotations makes
        the round a warned no-op.
        """
        if events is None:
            if self.gt_mask is None:
                raise InputError("oracle rounds need a ground-truth mask")
            if budget is None:
                raise InputError("oracle rounds need a budget")
            ids = select_uncertain(self.grid, budget)
            events = annotate_oracle(self.grid, ids, self.gt_mask)
        new_events = [ev for ev in events if self.grid.human_label.get(ev.patch_id) != ev.class_index]
        if not events or not new_events:
            warnings.warn("round with zero new annotations is a no-op")
            return self.state
        apply_annotations(self.grid, events)
        self.state.round_index += 1
        self.state.annotated = dict(sorted(self.grid.human_label.items()))
        self.state.events_log.extend(
            {"round": self.state.round_index, **ev.to_json()} for ev in events)

        labeled_ids = sorted(self.grid.human_label)
        labels = np.array([self.grid.human_label[i] for i in labeled_ids])
        clf = fit_patch_classifier(self.grid.features[labeled_ids], labels,
                                   seed=self.classifier_seed)
        self.state.classifier = clf
        proba = clf.predict_proba(self.grid.features)
        self.grid.pred_class = np.array(clf.classes)[proba.argmax(axis=1)]
        with np.errstate(divide="ignore", invalid="ignore"):
            plogp = np.where(proba > 0, proba * np.log(proba), 0.0)
        self.grid.entropy = -plogp.sum(axis=1)
        # reviewed patches keep their human label in the patch-level mask
        patch_classes = self.grid.pred_class.copy()
        for pid, lab in self.grid.human_label.items():
            patch_classes[pid] = lab
        self.state.patch_classes = patch_classes

        h, w = self.slide.shape[:2]
        patch_pixel = render_patch_mask(self.grid, h, w, patch_classes)
        out = np.zeros((h, w), dtype=np.uint8)
        for x, y, boxes in patch_mask_to_boxes(patch_pixel, self.window, self.window):
            if not boxes:
                continue  # no class present per the patch mask: background window
            classes = [(c, self.class_names[c]) for c in boxes if c in self.class_names]
            if not classes:
                continue
            scaled = {c: self._scale_box(b) for c, b in boxes.items() if c in self.class_names}
            pred = model_mod.segment_multiclass(self._window_image(x, y), classes,
                                                scaled, self.params)
            out[y:y + self.window, x:x + self.window] = self._to_window(pred)
        self.pixel_mask = out
        self._log_dice()
        return self.state


def save_state(path, state: RoundState) -> None:
    with open(path, "w") as fh:
        json.dump(state.to_json(), fh, sort_keys=True)
        fh.write("\n")


def load_state(path) -> RoundState:
    with open(path) as fh:
        return RoundState.from_json(json.load(fh))
