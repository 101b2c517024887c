import json

import numpy as np
import pytest

from histoseg import corpus, imaging
from histoseg.errors import InputError, ManifestError


def write_sample(root, name, mask_values, size=16):
    (root / "images").mkdir(exist_ok=True, parents=True)
    (root / "masks").mkdir(exist_ok=True, parents=True)
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    img = rng.integers(0, 255, size=(size, size, 3), dtype=np.uint8)
    mask = np.zeros((size, size), dtype=np.uint8)
    for i, c in enumerate(mask_values):
        mask[i * 2:(i + 1) * 2, :] = c
    imaging.save_image(root / "images" / f"{name}.png", img)
    imaging.save_mask(root / "masks" / f"{name}.png", mask)


class TestManifest:
    def test_empty_dir(self, tmp_path):
        assert corpus.build_manifest(tmp_path) == []

    def test_two_classes_two_triplets(self, tmp_path):
        (tmp_path / "classes.json").write_text(json.dumps({"1": "tumor", "3": "stroma"}))
        write_sample(tmp_path, "a", [1, 3])
        manifest = corpus.build_manifest(tmp_path)
        # histogram oracle: mask contains exactly classes {1, 3}
        assert [(t.class_index, t.class_name) for t in manifest] == [(1, "tumor"), (3, "stroma")]

    def test_each_class_listed_once(self, tmp_path):
        (tmp_path / "classes.json").write_text(json.dumps({"2": "gland"}))
        write_sample(tmp_path, "a", [2, 2, 2])
        manifest = corpus.build_manifest(tmp_path)
        assert len(manifest) == 1

    def test_size_mismatch_rejected(self, tmp_path):
        write_sample(tmp_path, "a", [1])
        imaging.save_mask(tmp_path / "masks" / "a.png", np.zeros((8, 8), dtype=np.uint8))
        with pytest.raises(ManifestError):
            corpus.build_manifest(tmp_path)

    def test_ontology_mapping_and_unmapped_flag(self, tmp_path):
        (tmp_path / "classes.json").write_text(json.dumps({"1": "tumor", "2": "mystery"}))
        (tmp_path / "ontology.json").write_text(json.dumps(
            [{"class_name": "tumor", "organ": "colon", "category": "tumor-related"}]))
        write_sample(tmp_path, "a", [1, 2])
        manifest = corpus.build_manifest(tmp_path)
        tumor = next(t for t in manifest if t.class_name == "tumor")
        mystery = next(t for t in manifest if t.class_name == "mystery")
        assert tumor.organ == "colon" and not tumor.unmapped
        assert mystery.unmapped

    def test_roundtrip_jsonl(self, tmp_path):
        (tmp_path / "classes.json").write_text(json.dumps({"1": "tumor"}))
        write_sample(tmp_path, "img__t0", [1])
        manifest = corpus.build_manifest(tmp_path)
        assert manifest[0].parent_id == "img"
        out = tmp_path / "manifest.jsonl"
        corpus.save_manifest(out, manifest)
        assert corpus.load_manifest(out) == manifest


def make_triplets(n_parents, per_parent=2):
    triplets = []
    for p in range(n_parents):
        for k in range(per_parent):
            triplets.append(corpus.Triplet(
                image_path=f"images/p{p}__t{k}.png", mask_path=f"masks/p{p}__t{k}.png",
                class_index=1, class_name="tumor", organ="colon", source="synown",
                parent_id=f"p{p}"))
    return triplets


class TestSplit:
    def test_rounding_oracle_19_of_20(self):
        train, test = corpus.split(make_triplets(20), corpus.SplitSpec(0.95, seed=0))
        assert len({t.parent_id for t in train}) == 19  # round(20 * 0.95)
        assert len({t.parent_id for t in test}) == 1

    def test_deterministic_under_seed(self):
        m = make_triplets(30)
        a = corpus.split(m, corpus.SplitSpec(0.8, seed=5))
        b = corpus.split(m, corpus.SplitSpec(0.8, seed=5))
        assert a == b

    def test_partition_by_parent(self):
        m = make_triplets(12, per_parent=3)
        train, test = corpus.split(m, corpus.SplitSpec(0.75, seed=1))
        train_parents = {t.parent_id for t in train}
        test_parents = {t.parent_id for t in test}
        assert not train_parents & test_parents
        assert sorted(train + test, key=lambda t: t.image_path) == sorted(
            m, key=lambda t: t.image_path)

    def test_single_parent_warns_all_train(self):
        m = make_triplets(1)
        with pytest.warns(UserWarning):
            train, test = corpus.split(m, corpus.SplitSpec(0.95, seed=0))
        assert train == m and test == []

    def test_empty_manifest_rejected(self):
        with pytest.raises(InputError):
            corpus.split([], corpus.SplitSpec())


class TestPromptText:
    def test_template(self):
        assert corpus.prompt_text("tumor") == "an image of tumor"

    def test_empty_name_rejected(self):
        with pytest.raises(InputError):
            corpus.prompt_text("")

    def test_spaces_preserved_verbatim(self):
        assert corpus.prompt_text("invasive  carcinoma ") == "an image of invasive  carcinoma "

    def test_bad_category_rejected(self):
        with pytest.raises(InputError):
            corpus.OntologyEntry("x", "colon", "other")
