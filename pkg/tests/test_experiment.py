import numpy as np

import helpers
from scenedecomp import experiment, trainer
from scenedecomp.eval import ColorSegmenter
from scenedecomp.model import Model


def test_iou_examples():
    a = np.zeros((4, 4), bool)
    a[:2] = True
    b = np.zeros((4, 4), bool)
    b[1:3] = True
    assert experiment.iou(a, b) == 4 / 12
    assert experiment.iou(a, a) == 1.0
    assert experiment.iou(a, ~a) == 0.0
    assert experiment.iou(np.zeros((2, 2)), np.zeros((2, 2))) == 1.0


def setup_tiny():
    scene = helpers.tiny_scene(8)
    state = trainer.setup(Model.init(0, d_model=8, image_size=8), scene, trainer.TrainConfig())
    return state.model, scene, state.handle_names


def test_mean_attention_maps_normalised_and_reproducible():
    model, scene, names = setup_tiny()
    a = experiment.mean_attention_maps(model, scene, names, seed=3)
    b = experiment.mean_attention_maps(model, scene, names, seed=3)
    assert set(a) == set(names)
    for h in names:
        assert a[h].shape == (4, 4)
        assert a[h].min() >= 0 and a[h].max() <= 1
        np.testing.assert_array_equal(a[h], b[h])


def test_attention_iou_in_unit_interval():
    model, scene, names = setup_tiny()
    assert 0.0 <= experiment.attention_iou(model, scene, names) <= 1.0


class Everything:
    def segment(self, image, class_word):
        return np.ones(image.shape[:2])


def test_generation_score_shapes_and_spurious():
    model, scene, names = setup_tiny()
    g = experiment.generation_score(model, scene, names, [0], samples=2, steps=3,
                                    segmenter=Everything())
    assert g.images.shape == (2, 8, 8, 3)
    assert set(g.per_concept) == {"red square"}
    assert g.spurious == {"blue disc": 1.0}
    assert -1 <= g.identity <= 1


def test_generation_score_empty_segmentation_counts_zero():
    model, scene, names = setup_tiny()

    class Nothing:
        def segment(self, image, class_word):
            return np.zeros(image.shape[:2])
    g = experiment.generation_score(model, scene, names, [0, 1], samples=2, steps=2,
                                    segmenter=Nothing())
    assert g.identity == 0.0 and g.spurious == {}


def test_color_segmenter_default_used():
    model, scene, names = setup_tiny()
    g = experiment.generation_score(model, scene, names, [1], samples=1, steps=2)
    assert 0.0 <= g.spurious["red square"] <= 1.0
    assert isinstance(ColorSegmenter().segment(g.images[0], "red square"), np.ndarray)
