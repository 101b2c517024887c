import json

import pytest

from histoseg import model
from histoseg.synthetic import make_corpus, make_slide, write_corpus_dir

TINY_CONFIG = dict(image_size=224, patch_size=32, dim=16, fusion_depth=1,
                   encoder_depth=1, seed=3)


@pytest.fixture(scope="session")
def tiny_checkpoint(tmp_path_factory):
    """Untrained but fully functional model checkpoint for wiring tests."""
    path = tmp_path_factory.mktemp("ckpt") / "tiny.ckpt"
    params = model.init_params(model.ModelConfig(**TINY_CONFIG))
    model.save_checkpoint(path, params)
    return path


@pytest.fixture(scope="session")
def small_corpus_dir(tmp_path_factory):
    """Corpus directory of small synthetic samples plus a config JSON."""
    root = tmp_path_factory.mktemp("corpus")
    samples = make_corpus(6, seed=21, size=64, min_blobs=1, max_blobs=2)
    write_corpus_dir(root, samples)
    config = dict(image_size=64, patch_size=32, dim=16, fusion_depth=1,
                  encoder_depth=1, seed=0)
    (root / "model_config.json").write_text(json.dumps(config))
    return root


@pytest.fixture(scope="session")
def small_slide_files(tmp_path_factory):
    """A small slide + ground truth on disk for hitl/serve tests."""
    from histoseg.imaging import save_image, save_mask

    root = tmp_path_factory.mktemp("slide")
    slide = make_slide(size=448, seed=9, class_pool=(1, 2), n_blobs=6,
                       radius_frac=(0.08, 0.16))
    save_image(root / "slide.png", slide.image)
    save_mask(root / "gt.png", slide.mask)
    return root / "slide.png", root / "gt.png"
