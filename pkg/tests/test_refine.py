import numpy as np
import pytest

from histoseg import model, refine
from histoseg.errors import InputError
from histoseg.imaging import BBox
from histoseg.synthetic import make_slide


class TestPatchFeatures:
    def test_constant_patch_zero_std_and_gradient(self):
        patch = np.full((32, 32, 3), 128, dtype=np.uint8)
        f = refine.extract_patch_features(patch)
        assert f.shape == (54,)
        np.testing.assert_allclose(f[27:30], 0.0, atol=1e-12)  # per-channel std
        np.testing.assert_allclose(f[30:], 0.0, atol=1e-12)  # gradient features

    def test_deterministic(self):
        rng = np.random.default_rng(0)
        patch = rng.integers(0, 255, (64, 64, 3), dtype=np.uint8)
        np.testing.assert_array_equal(refine.extract_patch_features(patch),
                                      refine.extract_patch_features(patch.copy()))

    def test_red_vs_blue_histogram_concentration(self):
        red = np.zeros((16, 16, 3), dtype=np.uint8)
        red[:, :, 0] = 250
        blue = np.zeros((16, 16, 3), dtype=np.uint8)
        blue[:, :, 2] = 250
        f_red = refine.extract_patch_features(red)
        f_blue = refine.extract_patch_features(blue)
        # histogram blocks: [0:8] red channel, [8:16] green, [16:24] blue
        assert f_red[7] == 1.0 and f_red[16] == 1.0  # red top bin, blue bottom bin
        assert f_blue[23] == 1.0 and f_blue[0] == 1.0


class TestPatchClassifier:
    def test_linearly_separable_perfect_accuracy(self):
        rng = np.random.default_rng(1)
        a = rng.normal((0, 0), 0.3, size=(20, 2))
        b = rng.normal((4, 4), 0.3, size=(20, 2))
        x54 = np.zeros((40, 54))
        x54[:, :2] = np.vstack([a, b])
        labels = np.array([1] * 20 + [2] * 20)
        # exhaustive check of separability along the diagonal direction
        proj = x54[:, :2].sum(axis=1)
        assert max(proj[:20]) < min(proj[20:])
        clf = refine.fit_patch_classifier(x54, labels)
        assert (clf.predict(x54) == labels).all()

    def test_duplicate_rows_still_converge(self):
        x = np.zeros((8, 54))
        x[:4, 0] = 1.0
        labels = np.array([1, 1, 1, 1, 0, 0, 0, 0])
        clf = refine.fit_patch_classifier(np.vstack([x, x]), np.concatenate([labels, labels]))
        assert (clf.predict(x) == labels).all()

    def test_probabilities_normalized(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(30, 54))
        labels = rng.integers(0, 3, size=30)
        clf = refine.fit_patch_classifier(x, labels)
        proba = clf.predict_proba(rng.normal(size=(10, 54)))
        np.testing.assert_allclose(proba.sum(axis=1), np.ones(10), atol=1e-9)

    def test_single_class_warns(self):
        with pytest.warns(UserWarning):
            refine.fit_patch_classifier(np.zeros((3, 54)), np.array([1, 1, 1]))


def make_grid(n=9, cols=3, entropy=None):
    grid = refine.PatchGrid(patch_size=4, rows=n // cols, cols=cols,
                            features=np.zeros((n, 54)),
                            pred_class=np.zeros(n, dtype=int),
                            entropy=np.zeros(n) if entropy is None else np.asarray(entropy))
    return grid


class TestSelectUncertain:
    def test_uniform_ties_resolve_to_first_ids(self):
        grid = make_grid(entropy=[1.0] * 9)
        assert refine.select_uncertain(grid, 4) == [0, 1, 2, 3]

    def test_zero_entropy_selected_last(self):
        ent = [np.log(3)] * 9
        ent[4] = 0.0
        grid = make_grid(entropy=ent)
        assert 4 not in refine.select_uncertain(grid, 8)
        assert refine.select_uncertain(grid, 9)[-1] == 4

    def test_budget_zero_rejected(self):
        with pytest.raises(InputError):
            refine.select_uncertain(make_grid(), 0)

    def test_excess_budget_returns_remaining(self):
        grid = make_grid()
        grid.human_label = {0: 1, 1: 1}
        assert len(refine.select_uncertain(grid, 100)) == 7

    def test_annotated_excluded(self):
        grid = make_grid(entropy=[9.0] + [1.0] * 8)
        grid.human_label = {0: 2}
        assert 0 not in refine.select_uncertain(grid, 3)


class TestAnnotate:
    def _grid_and_mask(self):
        grid = refine.PatchGrid(patch_size=4, rows=2, cols=2,
                                features=np.zeros((4, 54)),
                                pred_class=np.zeros(4, dtype=int), entropy=np.zeros(4))
        mask = np.zeros((8, 8), dtype=np.uint8)
        return grid, mask

    def test_unanimous_patch(self):
        grid, mask = self._grid_and_mask()
        mask[0:4, 0:4] = 2
        events = refine.annotate_oracle(grid, [0], mask)
        assert events[0].class_index == 2

    def test_majority_60_40(self):
        grid, mask = self._grid_and_mask()
        patch = np.full(16, 3)
        patch[:10] = 1  # 10 vs 6 pixels
        mask[0:4, 0:4] = patch.reshape(4, 4)
        assert refine.annotate_oracle(grid, [0], mask)[0].class_index == 1

    def test_tie_resolves_to_lowest(self):
        grid, mask = self._grid_and_mask()
        mask[0:4, 0:2] = 5
        mask[0:4, 2:4] = 2
        assert refine.annotate_oracle(grid, [0], mask)[0].class_index == 2

    def test_conflicting_events_last_wins(self):
        grid, _ = self._grid_and_mask()
        events = [refine.AnnotationEvent(1, 2), refine.AnnotationEvent(1, 3)]
        with pytest.warns(UserWarning):
            refine.apply_annotations(grid, events)
        assert grid.human_label[1] == 3

    def test_idempotent(self):
        grid, mask = self._grid_and_mask()
        mask[0:4, 0:4] = 2
        first = refine.annotate_oracle(grid, [0], mask)
        second = refine.annotate_oracle(grid, [0], mask)
        assert first[0].class_index == second[0].class_index


class TestPatchMaskToBoxes:
    def test_empty_mask_no_boxes(self):
        windows = refine.patch_mask_to_boxes(np.zeros((448, 448), dtype=np.uint8), 224)
        assert len(windows) == 4
        assert all(not boxes for _, _, boxes in windows)

    def test_class_filling_one_window(self):
        mask = np.zeros((448, 448), dtype=np.uint8)
        mask[0:224, 0:224] = 1
        windows = refine.patch_mask_to_boxes(mask, 224)
        by_origin = {(x, y): boxes for x, y, boxes in windows}
        assert by_origin[(0, 0)][1] == BBox(0, 0, 223, 223)
        assert not by_origin[(224, 224)]

    def test_class_spanning_two_windows(self):
        mask = np.zeros((448, 448), dtype=np.uint8)
        mask[100:120, 200:260] = 2  # crosses the x=224 boundary
        windows = refine.patch_mask_to_boxes(mask, 224)
        by_origin = {(x, y): boxes for x, y, boxes in windows}
        left = by_origin[(0, 0)][2]
        right = by_origin[(224, 0)][2]
        assert (left.x_min, left.x_max) == (200, 223)
        assert (right.x_min + 224, right.x_max + 224) == (224, 259)
        assert (left.y_min, left.y_max) == (100, 119)
        # union of the two boxes bounds the full region
        assert right.y_min == 100 and right.y_max == 119

    def test_trailing_window_shifted_inside(self):
        starts = refine._window_starts(500, 224, 224)
        assert starts == [0, 224, 276]


@pytest.fixture(scope="module")
def tiny_session_parts():
    cfg = model.ModelConfig(image_size=224, patch_size=32, dim=16, fusion_depth=1,
                            encoder_depth=1, seed=3)
    params = model.init_params(cfg)
    slide = make_slide(size=448, seed=5, class_pool=(1, 2), n_blobs=6,
                       radius_frac=(0.08, 0.16))
    return params, slide


class TestRefineSession:
    def test_full_budget_oracle_patch_mask_matches_majority(self, tiny_session_parts):
        params, slide = tiny_session_parts
        session = refine.RefineSession(slide.image, params, {1: "tumor", 2: "stroma"},
                                       gt_mask=slide.mask, patch_size=64)
        session.run_round(budget=session.grid.n_patches)
        majority = session._mask_majority(slide.mask)
        np.testing.assert_array_equal(session.state.patch_classes, majority)

    def test_round_monotonicity_and_log(self, tiny_session_parts):
        params, slide = tiny_session_parts
        session = refine.RefineSession(slide.image, params, {1: "tumor", 2: "stroma"},
                                       gt_mask=slide.mask, patch_size=64)
        assert session.state.dice_log[0]["round"] == 0
        ids_per_round = []
        for r in range(2):
            session.run_round(budget=5)
            ids_per_round.append(set(session.state.annotated))
        assert ids_per_round[0] <= ids_per_round[1]
        assert session.state.round_index == 2
        assert [e["round"] for e in session.state.dice_log] == [0, 1, 2]

    def test_stitched_mask_covers_slide(self, tiny_session_parts):
        params, slide = tiny_session_parts
        session = refine.RefineSession(slide.image, params, {1: "tumor", 2: "stroma"},
                                       gt_mask=slide.mask, patch_size=64)
        session.run_round(budget=8)
        assert session.pixel_mask.shape == slide.mask.shape

    def test_serialize_restore_identical_next_round(self, tiny_session_parts, tmp_path):
        params, slide = tiny_session_parts
        a = refine.RefineSession(slide.image, params, {1: "tumor", 2: "stroma"},
                                 gt_mask=slide.mask, patch_size=64)
        a.run_round(budget=6)
        refine.save_state(tmp_path / "state.json", a.state)

        b = refine.RefineSession(slide.image, params, {1: "tumor", 2: "stroma"},
                                 gt_mask=slide.mask, patch_size=64)
        b.restore(refine.load_state(tmp_path / "state.json"))
        a.run_round(budget=6)
        b.run_round(budget=6)
        assert a.state.dice_log == b.state.dice_log
        np.testing.assert_array_equal(a.pixel_mask, b.pixel_mask)

    def test_zero_new_annotations_noop(self, tiny_session_parts):
        params, slide = tiny_session_parts
        session = refine.RefineSession(slide.image, params, {1: "tumor", 2: "stroma"},
                                       gt_mask=slide.mask, patch_size=64)
        session.run_round(budget=4)
        idx = session.state.round_index
        repeat = [refine.AnnotationEvent(pid, lab) for pid, lab in session.state.annotated.items()]
        with pytest.warns(UserWarning):
            session.run_round(events=repeat)
        assert session.state.round_index == idx
