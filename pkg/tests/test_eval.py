import json
import math

import numpy as np
import pytest
from PIL import Image

from scenedecomp import synthetic
from scenedecomp.concepts import Scene
from scenedecomp.eval import (
    TEMPLATES, ColorSegmenter, EmptySegmentation, HarvestError, Report, ToyEmbedder,
    build_eval_suite, decode_rle, evaluate_run, harvest_scenes, identity_similarity,
    prompt_similarity, suite_size,
)

EMB = ToyEmbedder()
SEG = ColorSegmenter()


class FixedEmbedder:
    def __init__(self, img_vec, txt_vec):
        self.i, self.t = np.asarray(img_vec, float), np.asarray(txt_vec, float)

    def embed_image(self, image):
        return self.i

    def embed_text(self, text):
        return self.t


class MaskSegmenter:
    def __init__(self, mask):
        self.mask = mask

    def segment(self, image, class_word):
        return self.mask


# -- metrics -------------------------------------------------------------------
def test_prompt_similarity_identical_and_orthogonal():
    img = np.zeros((4, 4, 3))
    assert prompt_similarity(img, "x", FixedEmbedder([0, 1], [0, 1])) == 1.0
    assert prompt_similarity(img, "x", FixedEmbedder([0, 1], [1, 0])) == 0.0


def test_pure_red_matches_red_square():
    img = synthetic.solid(synthetic.COLORS["red"], 32)
    assert prompt_similarity(img, "a photo of red square", EMB) > 0.9
    assert prompt_similarity(img, "a photo of blue disc", EMB) < 0.5


def test_embeddings_are_unit():
    rng = np.random.default_rng(0)
    for _ in range(20):
        v = EMB.embed_image(rng.uniform(size=(8, 8, 3)))
        assert abs(np.linalg.norm(v) - 1) < 1e-9
    for text in ["a photo of red square", "a photo of", "a photo of blue disc at the beach"]:
        assert abs(np.linalg.norm(EMB.embed_text(text)) - 1) < 1e-9


def test_prompt_similarity_bounded():
    rng = np.random.default_rng(1)
    for tpl in TEMPLATES:
        s = prompt_similarity(rng.uniform(size=(32, 32, 3)), tpl.format(tokens="red square"), EMB)
        assert -1 <= s <= 1


def test_identity_self_similarity():
    scene = synthetic.reference_scene()
    for i, name in enumerate(scene.names):
        s = identity_similarity(scene.image, scene.masks[i], scene.image, name,
                                MaskSegmenter(scene.masks[i]), EMB)
        assert abs(s - 1.0) < 1e-6


def test_identity_empty_segmentation_signal():
    scene = synthetic.reference_scene()
    gray = np.full((32, 32, 3), 0.5)
    with pytest.raises(EmptySegmentation):
        identity_similarity(scene.image, scene.masks[0], gray, "red square", SEG, EMB)


def test_identity_position_invariant():
    a = synthetic.solid((0.5, 0.5, 0.5), 32)
    b = a.copy()
    ma = synthetic.shape_mask("square", 9.0, 9.0, 6.0, 32)
    mb = synthetic.shape_mask("square", 21.0, 19.0, 6.0, 32)
    a = synthetic.paint(a, ma, synthetic.COLORS["red"], "stripes")
    b = synthetic.paint(b, mb, synthetic.COLORS["red"], "stripes")
    assert identity_similarity(a, ma, b, "red square", SEG, EMB) > 0.9


def test_color_segmenter_finds_reference_concepts():
    scene = synthetic.reference_scene()
    for m, name in zip(scene.masks, scene.names):
        seg = SEG.segment(scene.image, name)
        assert seg.shape == m.shape
        inter = (seg * m).sum()
        assert inter / m.sum() > 0.9 and inter / seg.sum() > 0.9


def test_metrics_do_not_mutate_inputs():
    scene = synthetic.reference_scene()
    img = scene.image.copy()
    identity_similarity(scene.image, scene.masks[0], scene.image, "red square", SEG, EMB)
    prompt_similarity(scene.image, "a photo of red square", EMB)
    np.testing.assert_array_equal(img, scene.image)


# -- suites ----------------------------------------------------------------------
def scene_n(n):
    masks = [np.eye(4)[i][None].repeat(4, 0) for i in range(n)]
    return Scene(np.zeros((4, 4, 3)), masks, [f"c{i}" for i in range(n)])


def test_suite_counts():
    assert len(build_eval_suite([scene_n(2)])) == 30
    assert len(build_eval_suite([scene_n(1)])) == 10
    mix = [scene_n(2), scene_n(3), scene_n(4), scene_n(1)]
    assert len(build_eval_suite(mix)) == suite_size(mix) == 10 * (3 + 7 + 15 + 1)


def test_suite_renderings_differ_only_at_handles():
    for pair in build_eval_suite([scene_n(3)]):
        a, b = pair.prompt.split(), pair.class_prompt.split()
        assert len(a) == len(b)
        for x, y in zip(a, b):
            assert x == y or (x.startswith("[v") and y.startswith("c"))


def test_templates_verbatim():
    assert len(TEMPLATES) == 10
    assert TEMPLATES[0] == "a photo of {tokens} at the beach"
    assert "Eiffel" in TEMPLATES[8]


def test_empty_templates_rejected():
    with pytest.raises(ValueError):
        build_eval_suite([scene_n(1)], templates=())


def test_empty_report_marks_means_undefined(tmp_path):
    rep = evaluate_run({}, [], [], EMB, SEG)
    assert math.isnan(rep.mean_identity_similarity)
    assert rep.summary()["mean_prompt_similarity"] is None
    _, summ = rep.write(tmp_path)
    assert "undefined" in summ.read_text()


# -- harvesting ------------------------------------------------------------------
def rle_counts(mask):
    """Column-major run lengths starting with a zero run (encoder oracle)."""
    flat = np.asarray(mask, bool).T.ravel()
    counts, cur, run = [], False, 0
    for v in flat:
        if v == cur:
            run += 1
        else:
            counts.append(run)
            cur, run = v, 1
    counts.append(run)
    return counts


def rle_string(counts):
    """Compressed COCO string (LEB128-like, delta against counts[i-2])."""
    out = []
    for i, x in enumerate(counts):
        if i > 2:
            x -= counts[i - 2]
        more = True
        while more:
            c = x & 0x1F
            x >>= 5
            more = (x != -1) if (c & 0x10) else (x != 0)
            if more:
                c |= 0x20
            out.append(chr(c + 48))
    return "".join(out)


def test_rle_round_trip():
    rng = np.random.default_rng(0)
    for _ in range(20):
        m = rng.uniform(size=(13, 7)) > 0.6
        np.testing.assert_array_equal(decode_rle(rle_counts(m), 13, 7), m)
        np.testing.assert_array_equal(decode_rle(rle_string(rle_counts(m)), 13, 7), m)


def test_rle_large_runs_string():
    m = np.zeros((100, 90), bool)
    m[10:80, 5:70] = True
    np.testing.assert_array_equal(decode_rle(rle_string(rle_counts(m)), 100, 90), m)


def rect(h, w, top, left, hh, ww):
    m = np.zeros((h, w), bool)
    m[top:top + hh, left:left + ww] = True
    return m


CATS = [
    {"id": 1, "name": "cat", "isthing": 1}, {"id": 2, "name": "dog", "isthing": 1},
    {"id": 3, "name": "zebra", "isthing": 1}, {"id": 4, "name": "grass", "isthing": 0},
]


def write_coco(tmp_path, images):
    """``images``: list of ``(h, w, [(category_id, mask, iscrowd), ...])``."""
    data = {"images": [], "annotations": [], "categories": CATS}
    for k, (h, w, segs) in enumerate(images):
        name = f"img{k}.png"
        arr = np.random.default_rng(k).integers(0, 256, (h, w, 3)).astype(np.uint8)
        Image.fromarray(arr).save(tmp_path / name)
        data["images"].append({"id": k, "file_name": name, "height": h, "width": w})
        for cat, mask, crowd in segs:
            data["annotations"].append({
                "id": len(data["annotations"]), "image_id": k, "category_id": cat,
                "iscrowd": crowd, "segmentation": {"size": [h, w], "counts": rle_counts(mask)},
            })
    path = tmp_path / "ann.json"
    path.write_text(json.dumps(data, indent=1))
    return path


def test_harvest_rules(tmp_path):
    # 20x20 crop = 400 px; 15% = 60 px
    h, w = 20, 30  # centre crop columns 5..24
    images = [
        (h, w, [(1, rect(h, w, 0, 5, 4, 20), 0), (2, rect(h, w, 10, 5, 6, 20), 0)]),   # 20%, 30% accept
        (h, w, [(1, rect(h, w, 0, 5, 14, 4), 0), (2, rect(h, w, 0, 5, 10, 20), 0)]),   # 14%, 50% reject
        (h, w, [(3, rect(h, w, 0, 5, 10, 20), 0), (3, rect(h, w, 10, 5, 10, 20), 0)]),  # zebra x2
        (h, w, [(1, rect(h, w, 0, 5, 10, 20), 0), (1, rect(h, w, 10, 5, 10, 20), 0)]),  # cat x2
        (h, w, [(1, rect(h, w, 0, 5, 10, 20), 1), (2, rect(h, w, 10, 5, 10, 20), 0)]),  # crowd
        (h, w, [(4, rect(h, w, 0, 5, 10, 20), 0), (2, rect(h, w, 10, 5, 10, 20), 0)]),  # stuff
        (h, w, [(1, rect(h, w, 0, 0, 20, 5), 0), (2, rect(h, w, 10, 5, 10, 20), 0)]),   # outside crop
    ]
    scenes = harvest_scenes(write_coco(tmp_path, images), tmp_path, size=None)
    assert len(scenes) == 1
    s = scenes[0]
    assert s.names == ["cat", "dog"]
    assert s.image.shape == (20, 20, 3)
    assert [m.sum() for m in s.masks] == [80, 120]


def test_harvest_resize_and_crop(tmp_path):
    h, w = 64, 96
    images = [(h, w, [(1, rect(h, w, 0, 16, 32, 64), 0), (2, rect(h, w, 32, 16, 32, 64), 0)])]
    scenes = harvest_scenes(write_coco(tmp_path, images), tmp_path, size=32)
    s = scenes[0]
    assert s.image.shape == (32, 32, 3)
    np.testing.assert_array_equal(s.masks[0][:16], 1)
    np.testing.assert_array_equal(s.masks[0][16:], 0)


def test_harvest_polygons(tmp_path):
    data = {
        "images": [{"id": 0, "file_name": "p.png", "height": 20, "width": 20}],
        "categories": CATS,
        "annotations": [
            {"id": 0, "image_id": 0, "category_id": 1, "iscrowd": 0,
             "segmentation": [[0, 0, 19, 0, 19, 9, 0, 9]]},
            {"id": 1, "image_id": 0, "category_id": 2, "iscrowd": 0,
             "segmentation": [[0, 12, 19, 12, 19, 19, 0, 19]]},
        ],
    }
    Image.fromarray(np.zeros((20, 20, 3), np.uint8)).save(tmp_path / "p.png")
    (tmp_path / "a.json").write_text(json.dumps(data))
    scenes = harvest_scenes(tmp_path / "a.json", tmp_path, size=None)
    assert len(scenes) == 1
    assert abs(scenes[0].masks[0].sum() - 200) <= 20


def test_harvest_panoptic(tmp_path):
    ids = np.zeros((20, 20), np.int64)
    ids[:10] = 7
    ids[10:] = 300
    png = np.stack([ids % 256, ids // 256 % 256, ids // 65536], axis=-1).astype(np.uint8)
    (tmp_path / "seg").mkdir()
    Image.fromarray(png).save(tmp_path / "seg" / "p.png")
    Image.fromarray(np.zeros((20, 20, 3), np.uint8)).save(tmp_path / "p.jpg.png")
    data = {
        "images": [{"id": 0, "file_name": "p.jpg.png", "height": 20, "width": 20}],
        "categories": CATS,
        "annotations": [{"image_id": 0, "file_name": "p.png", "segments_info": [
            {"id": 7, "category_id": 1, "iscrowd": 0}, {"id": 300, "category_id": 2, "iscrowd": 0}]}],
    }
    (tmp_path / "pan.json").write_text(json.dumps(data))
    scenes = harvest_scenes(tmp_path / "pan.json", tmp_path, size=None, segments_dir=tmp_path / "seg")
    assert [m.sum() for m in scenes[0].masks] == [200, 200]


def test_harvest_parse_error_has_location(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{\n  "images": [,]\n}')
    with pytest.raises(HarvestError, match=r"bad\.json:2:\d+"):
        harvest_scenes(p, tmp_path)


def test_harvest_missing_image(tmp_path):
    h, w = 20, 20
    path = write_coco(tmp_path, [(h, w, [(1, rect(h, w, 0, 0, 10, 20), 0), (2, rect(h, w, 10, 0, 10, 20), 0)])])
    (tmp_path / "img0.png").unlink()
    with pytest.raises(HarvestError, match="img0.png"):
        harvest_scenes(path, tmp_path)


# -- evaluate_run ---------------------------------------------------------------
@pytest.fixture(scope="module")
def tiny_ckpt():
    import helpers
    from scenedecomp.model import Model
    from scenedecomp.trainer import PhaseConfig, TrainConfig, train
    cfg = TrainConfig(phase1=PhaseConfig(5e-4, 1), phase2=PhaseConfig(2e-6, 0), batch_size=1)
    return train(Model.init(0, d_model=8, image_size=8), helpers.tiny_scene(), cfg), helpers.tiny_scene()


def test_evaluate_run_deterministic(tiny_ckpt, tmp_path):
    ck, scene = tiny_ckpt
    suite = build_eval_suite([scene], templates=TEMPLATES[:2])
    a = evaluate_run(ck, suite, [scene], EMB, SEG, steps=3, seed=1)
    b = evaluate_run(ck, suite, [scene], EMB, SEG, steps=3, seed=1)
    assert len(a.results) == 6
    assert all(r.error is None for r in a.results)
    a.write(tmp_path / "a")
    b.write(tmp_path / "b")
    assert (tmp_path / "a" / "report.jsonl").read_bytes() == (tmp_path / "b" / "report.jsonl").read_bytes()
    for r in a.results:
        assert -1 <= r.prompt_similarity <= 1 and -1 <= r.identity_similarity <= 1


def test_evaluate_run_records_errors(tiny_ckpt):
    ck, scene = tiny_ckpt
    suite = build_eval_suite([scene], templates=("a photo of {tokens} near a zeppelin",))
    rep = evaluate_run(ck, suite, [scene], EMB, SEG, steps=2)
    assert all(r.error and r.error.startswith("TokenizeError") for r in rep.results)
    assert isinstance(rep, Report)
