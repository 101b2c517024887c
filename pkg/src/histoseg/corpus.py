"""Image-mask-text triplet management: manifests, ontology, splits, prompts.

Corpus directory layout::

    root/
      classes.json      {"1": "tumor", "2": "stroma", ...}   (index -> name)
      ontology.json     optional [{class_name, organ, category}, ...]
      images/NAME.png   8-bit RGB
      masks/NAME.png    8-bit grayscale class indices

The parent image id of NAME is the stem up to the first ``__`` (tiles cut
from one source image share their parent), so splits never leak patches of
one image across train/test.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import imaging
from .errors import InputError, ManifestError

PROMPT_TEMPLATE = "an image of {}"

CATEGORIES = ("tumor-related", "microenvironment-related", "normal anatomical")


@dataclass
class OntologyEntry:
    class_name: str
    organ: str
    category: str

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise InputError(f"unknown category {self.category!r}")


@dataclass
class Triplet:
    """One (image, class mask, class text) training unit."""

    image_path: str
    mask_path: str
    class_index: int
    class_name: str
    organ: str
    source: str
    parent_id: str
    mean_intensity: float = 0.0
    unmapped: bool = False

    def __post_init__(self):
        if not self.class_name:
            raise ManifestError("triplet class name must be non-empty")
        if not self.parent_id:
            raise ManifestError("triplet parent id must be present")


@dataclass
class SplitSpec:
    train_fraction: float = 0.95
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise InputError(f"train fraction must be in (0, 1), got {self.train_fraction}")


def parent_id_of(stem: str) -> str:
    return stem.split("__", 1)[0]


def prompt_text(class_name: str) -> str:
    """The class prompt fed to the text encoder; the name is kept verbatim."""
    if not class_name:
        raise InputError("class name must be non-empty")
    return PROMPT_TEMPLATE.format(class_name)


def load_ontology(path) -> list[OntologyEntry]:
    with open(path) as fh:
        raw = json.load(fh)
    return [OntologyEntry(**rec) for rec in raw]


def build_manifest(root, ontology: list[OntologyEntry] | None = None) -> list[Triplet]:
    """Scan a corpus directory into one Triplet per (image, class in its mask).

    Ordering is deterministic: by image path, then class index. Images whose
    mask disagrees in size raise; class names come from classes.json and are
    flagged unmapped when the ontology (root/ontology.json or the argument)
    has no entry for them.
    """
    root = Path(root)
    classes_file = root / "classes.json"
    class_names: dict[int, str] = {}
    if classes_file.exists():
        with open(classes_file) as fh:
            class_names = {int(k): str(v) for k, v in json.load(fh).items()}
    if ontology is None and (root / "ontology.json").exists():
        ontology = load_ontology(root / "ontology.json")
    by_name = {e.class_name: e for e in (ontology or [])}

    image_dir = root / "images"
    mask_dir = root / "masks"
    triplets: list[Triplet] = []
    if not image_dir.is_dir():
        return triplets
    for image_path in sorted(image_dir.glob("*.png")):
        mask_path = mask_dir / image_path.name
        if not mask_path.exists():
            raise ManifestError(f"no mask for {image_path.name}")
        image = imaging.load_image(image_path)
        mask = imaging.load_mask(mask_path)
        if image.shape[:2] != mask.shape:
            raise ManifestError(
                f"{image_path.name}: image {image.shape[:2]} vs mask {mask.shape}")
        mean_intensity = float(image.mean())
        present = sorted(int(c) for c in np.unique(mask) if c != 0)
        for c in present:
            name = class_names.get(c, f"class {c}")
            entry = by_name.get(name)
            triplets.append(Triplet(
                image_path=str(image_path),
                mask_path=str(mask_path),
                class_index=c,
                class_name=name,
                organ=entry.organ if entry else "",
                source=root.name,
                parent_id=parent_id_of(image_path.stem),
                mean_intensity=mean_intensity,
                unmapped=entry is None,
            ))
    return triplets


def split(manifest: list[Triplet], spec: SplitSpec) -> tuple[list[Triplet], list[Triplet]]:
    """Partition triplets by parent image id into train/test.

    All triplets sharing a parent land on the same side; the number of train
    parents is round(fraction * n_parents), clamped so neither side exceeds
    the manifest. Deterministic under the split seed.
    """
    if not manifest:
        raise InputError("manifest is empty")
    parents = sorted({t.parent_id for t in manifest})
    if len(parents) == 1:
        warnings.warn("single parent image: assigning everything to train")
        return list(manifest), []
    rng = np.random.default_rng(spec.seed)
    order = [parents[i] for i in rng.permutation(len(parents))]
    n_train = int(round(spec.train_fraction * len(parents)))
    n_train = min(max(n_train, 1), len(parents) - 1)
    train_parents = set(order[:n_train])
    train = [t for t in manifest if t.parent_id in train_parents]
    test = [t for t in manifest if t.parent_id not in train_parents]
    return train, test


def save_manifest(path, manifest: list[Triplet]) -> None:
    with open(path, "w") as fh:
        for t in manifest:
            fh.write(json.dumps(asdict(t), sort_keys=True) + "\n")


def load_manifest(path) -> list[Triplet]:
    triplets = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                triplets.append(Triplet(**json.loads(line)))
    return triplets
