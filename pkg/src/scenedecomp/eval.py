"""Prompt/identity metrics, toy embedder and segmenter, COCO harvesting, eval suites."""
from __future__ import annotations

import hashlib
import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
from PIL import Image, ImageDraw

from . import synthetic
from .concepts import Scene, read_image

TEMPLATES = (
    "a photo of {tokens} at the beach",
    "a photo of {tokens} in the jungle",
    "a photo of {tokens} in the snow",
    "a photo of {tokens} in the street",
    "a photo of {tokens} on top of a pink fabric",
    "a photo of {tokens} on top of a wooden floor",
    "a photo of {tokens} with a city in the background",
    "a photo of {tokens} with a mountain in the background",
    "a photo of {tokens} with the Eiffel tower in the background",
    "a photo of {tokens} floating on top of water",
)

EXCLUDED_CLASSES = ("orange", "banana", "broccoli", "carrot", "zebra", "giraffe")
MIN_SEGMENT_FRACTION = 0.15


class Embedder(Protocol):
    def embed_image(self, image: np.ndarray) -> np.ndarray: ...

    def embed_text(self, text: str) -> np.ndarray: ...


class Segmenter(Protocol):
    def segment(self, image: np.ndarray, class_word: str) -> np.ndarray: ...


class EmptySegmentation(Exception):
    """The segmenter found no pixels of the requested class."""


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


# -- toy embedder ---------------------------------------------------------------
class ToyEmbedder:
    """Colour histogram plus 2x2-patch luminance statistics, L2-normalised.

    Exactly black pixels are treated as fill and ignored, so masked images
    compare only their visible content.  Text is embedded by looking up the
    colours its words name (object colours and template backgrounds).
    """

    bins = 4
    std_edges = (0.0, 0.02, 0.06, 0.12, np.inf)
    texture_weight = 0.5

    def _features(self, image: np.ndarray) -> np.ndarray:
        img = np.asarray(image, dtype=np.float64)
        visible = img.sum(axis=2) > 1e-9
        nb = self.bins
        hist = np.zeros(nb ** 3)
        tex = np.zeros(len(self.std_edges) - 1)
        void = np.zeros(1)
        if not visible.any():
            void[0] = 1.0
            return np.concatenate([hist, tex, void])
        q = np.minimum((img[visible] * nb).astype(int), nb - 1)
        np.add.at(hist, q[:, 0] * nb * nb + q[:, 1] * nb + q[:, 2], 1.0)
        hist /= hist.sum()
        lum = img @ np.array([0.299, 0.587, 0.114])
        h, w = lum.shape
        h2, w2 = h // 2 * 2, w // 2 * 2
        pl = lum[:h2, :w2].reshape(h2 // 2, 2, w2 // 2, 2).transpose(0, 2, 1, 3).reshape(-1, 4)
        pv = visible[:h2, :w2].reshape(h2 // 2, 2, w2 // 2, 2).transpose(0, 2, 1, 3).reshape(-1, 4)
        full = pv.all(axis=1)
        if full.any():
            tex = np.histogram(pl[full].std(axis=1), bins=self.std_edges)[0].astype(np.float64)
            tex = self.texture_weight * tex / tex.sum()
        return np.concatenate([hist, tex, void])

    def embed_image(self, image) -> np.ndarray:
        return _unit(self._features(image))

    def text_colors(self, text: str) -> list[tuple[float, float, float]]:
        words = text.lower().split()
        cols = [synthetic.COLORS[w] for w in words if w in synthetic.COLORS]
        cols += [synthetic.CONTEXTS[synthetic.CONTEXT_WORDS[w]] for w in words
                 if w in synthetic.CONTEXT_WORDS]
        return list(dict.fromkeys(cols))

    def embed_text(self, text: str) -> np.ndarray:
        cols = self.text_colors(text)
        if not cols:
            f = np.zeros(self.bins ** 3 + len(self.std_edges))
            f[-1] = 1.0
            return _unit(f)
        # canonical picture: equal-area flat patches of each named colour
        strip = np.concatenate([synthetic.solid(c, 8)[:, :8] for c in cols], axis=1)
        return self.embed_image(strip)


class ColorSegmenter:
    """Chromaticity threshold against the colour named in the class word."""

    def __init__(self, tolerance: float = 0.3, min_brightness: float = 0.15):
        self.tolerance = tolerance
        self.min_brightness = min_brightness

    def prototype(self, class_word: str):
        for w in class_word.lower().split():
            if w in synthetic.COLORS:
                return np.asarray(synthetic.COLORS[w])
        raise KeyError(f"no colour known for class {class_word!r}")

    def segment(self, image, class_word: str) -> np.ndarray:
        img = np.asarray(image, dtype=np.float64)
        p = self.prototype(class_word)
        s = img.sum(axis=2, keepdims=True)
        chroma = img / np.maximum(s, 1e-9)
        dist = np.abs(chroma - p / p.sum()).sum(axis=2)
        return ((dist < self.tolerance) & (s[..., 0] > self.min_brightness)).astype(np.float64)


# -- metrics -----------------------------------------------------------------
def prompt_similarity(image, class_prompt: str, embedder: Embedder) -> float:
    sim = float(np.dot(embedder.embed_image(image), embedder.embed_text(class_prompt)))
    return min(1.0, max(-1.0, sim))


def masked(image, mask) -> np.ndarray:
    return np.asarray(image, dtype=np.float64) * (np.asarray(mask) > 0)[..., None]


def identity_similarity(input_image, input_mask, gen_image, class_word: str,
                        segmenter: Segmenter, embedder: Embedder) -> float:
    """Cosine between embeddings of the masked input and segmented generated concept.

    Raises :class:`EmptySegmentation` when the concept is absent from ``gen_image``.
    """
    if not np.asarray(input_mask).any():
        raise ValueError("input mask is empty")
    seg = segmenter.segment(gen_image, class_word)
    if not seg.any():
        raise EmptySegmentation(class_word)
    a = embedder.embed_image(masked(input_image, input_mask))
    b = embedder.embed_image(masked(gen_image, seg))
    return min(1.0, max(-1.0, float(np.dot(a, b))))


# -- COCO harvesting -------------------------------------------------------------
class HarvestError(ValueError):
    pass


def decode_rle(counts, h: int, w: int) -> np.ndarray:
    """COCO run-length encoding (list or compressed string), column-major."""
    if isinstance(counts, str):
        counts = _rle_string_to_counts(counts)
    flat = np.zeros(h * w, dtype=bool)
    pos, val = 0, False
    for c in counts:
        if val:
            flat[pos:pos + c] = True
        pos += c
        val = not val
    return flat.reshape(w, h).T


def _rle_string_to_counts(s: str) -> list[int]:
    counts: list[int] = []
    p = 0
    while p < len(s):
        x, k, more = 0, 0, True
        while more:
            c = ord(s[p]) - 48
            x |= (c & 0x1F) << (5 * k)
            more = bool(c & 0x20)
            p += 1
            k += 1
            if not more and (c & 0x10):
                x |= -1 << (5 * k)
        if len(counts) > 2:
            x += counts[-2]
        counts.append(x)
    return counts


def _polygon_mask(polys, h: int, w: int) -> np.ndarray:
    im = Image.new("L", (w, h), 0)
    draw = ImageDraw.Draw(im)
    for poly in polys:
        pts = list(zip(poly[0::2], poly[1::2]))
        if len(pts) >= 3:
            draw.polygon(pts, fill=1)
    return np.asarray(im, dtype=bool)


def _segment_mask(ann: dict, h: int, w: int) -> np.ndarray:
    seg = ann.get("segmentation")
    if isinstance(seg, list):
        return _polygon_mask(seg, h, w)
    if isinstance(seg, dict):
        return decode_rle(seg["counts"], *seg.get("size", (h, w)))
    raise HarvestError(f"annotation {ann.get('id')}: unsupported segmentation")


def center_crop_box(h: int, w: int):
    s = min(h, w)
    top, left = (h - s) // 2, (w - s) // 2
    return top, left, s


def _load_json(path: Path):
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise HarvestError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from None


def _resize(img: np.ndarray, size: int | None, mask=False) -> np.ndarray:
    if size is None or img.shape[0] == size:
        return img
    if mask:
        im = Image.fromarray((img * 255).astype(np.uint8))
        return (np.asarray(im.resize((size, size), Image.BOX), dtype=np.float64) >= 128).astype(np.float64)
    im = Image.fromarray(np.round(img * 255).astype(np.uint8))
    return np.asarray(im.resize((size, size), Image.BOX), dtype=np.float64) / 255.0


def harvest_scenes(annotations, images_dir, size: int | None = 32, segments_dir=None,
                   excluded=EXCLUDED_CLASSES, min_fraction: float = MIN_SEGMENT_FRACTION):
    """Scenes with at least two distinct qualifying thing classes.

    A segment qualifies when it is a non-crowd "thing" outside ``excluded``
    covering at least ``min_fraction`` of the square centre crop.  The
    largest qualifying segment of each class becomes one concept.  Supports
    instance files (polygon/RLE ``segmentation``) and panoptic files
    (``segments_info`` plus PNGs under ``segments_dir``).
    """
    path = Path(annotations)
    data = _load_json(path)
    images_dir = Path(images_dir)
    for key in ("images", "annotations", "categories"):
        if key not in data:
            raise HarvestError(f"{path}: missing top-level key {key!r}")
    cats = {c["id"]: c for c in data["categories"]}
    by_image: dict = {}
    for ann in data["annotations"]:
        by_image.setdefault(ann["image_id"], []).append(ann)
    excluded = {e.lower() for e in excluded}
    scenes = []
    for info in sorted(data["images"], key=lambda r: r["id"]):
        anns = by_image.get(info["id"], [])
        h, w = int(info["height"]), int(info["width"])
        top, left, s = center_crop_box(h, w)
        segs = []
        for ann in anns:
            if "segments_info" in ann:
                segs.extend(_panoptic_segments(ann, h, w, segments_dir or images_dir))
            else:
                segs.append((ann, ann["category_id"], None))
        best: dict[int, tuple[float, np.ndarray]] = {}
        for ann, cat_id, mask in segs:
            cat = cats.get(cat_id)
            if cat is None:
                raise HarvestError(f"{path}: unknown category {cat_id}")
            if not cat.get("isthing", 1) or ann.get("iscrowd", 0):
                continue
            if cat["name"].lower() in excluded:
                continue
            m = _segment_mask(ann, h, w) if mask is None else mask
            crop = m[top:top + s, left:left + s]
            frac = crop.sum() / float(s * s)
            if frac >= min_fraction and frac > best.get(cat_id, (0.0, None))[0]:
                best[cat_id] = (frac, crop)
        if len(best) < 2:
            continue
        img_path = images_dir / info["file_name"]
        if not img_path.is_file():
            raise HarvestError(f"missing image file {img_path}")
        img = read_image(img_path)[top:top + s, left:left + s]
        order = sorted(best)
        masks = [_resize(best[c][1].astype(np.float64), size, mask=True) for c in order]
        scenes.append(Scene(_resize(img, size), masks, [cats[c]["name"] for c in order]))
    return scenes


def _panoptic_segments(ann, h, w, segments_dir):
    png = Path(segments_dir) / ann["file_name"]
    if not png.is_file():
        raise HarvestError(f"missing segment file {png}")
    with Image.open(png) as im:
        rgb = np.asarray(im.convert("RGB"), dtype=np.int64)
    ids = rgb[..., 0] + 256 * rgb[..., 1] + 256 * 256 * rgb[..., 2]
    return [(seg, seg["category_id"], ids == seg["id"]) for seg in ann["segments_info"]]


# -- evaluation suites ------------------------------------------------------------
@dataclass
class EvalPair:
    pair_id: int
    scene_id: int
    template: str
    subset: tuple[int, ...]
    prompt: str
    class_prompt: str


def nonempty_subsets(n: int):
    for k in range(1, n + 1):
        yield from itertools.combinations(range(n), k)


def render(template: str, words) -> str:
    return template.format(tokens=" and ".join(words))


def build_eval_suite(scenes, templates=TEMPLATES, handle_names=None) -> list[EvalPair]:
    """One pair per scene x template x nonempty concept subset."""
    if not templates:
        raise ValueError("need at least one template")
    pairs = []
    for sid, scene in enumerate(scenes):
        names = scene.names
        handles = handle_names or [f"[v{i + 1}]" for i in range(len(names))]
        for tpl in templates:
            for sub in nonempty_subsets(len(names)):
                pairs.append(EvalPair(len(pairs), sid, tpl, sub,
                                      render(tpl, [handles[i] for i in sub]),
                                      render(tpl, [names[i] for i in sub])))
    return pairs


def suite_size(scenes, templates=TEMPLATES) -> int:
    return len(templates) * sum(2 ** s.n - 1 for s in scenes)


@dataclass
class PairResult:
    pair_id: int
    scene_id: int
    prompt: str
    class_prompt: str
    prompt_similarity: float | None = None
    identity_similarity: float | None = None
    concept_scores: dict = field(default_factory=dict)
    missing: list = field(default_factory=list)
    error: str | None = None


@dataclass
class Report:
    results: list[PairResult]

    @property
    def mean_prompt_similarity(self) -> float:
        v = [r.prompt_similarity for r in self.results if r.prompt_similarity is not None]
        return float(np.mean(v)) if v else math.nan

    @property
    def mean_identity_similarity(self) -> float:
        v = [r.identity_similarity for r in self.results if r.identity_similarity is not None]
        return float(np.mean(v)) if v else math.nan

    def summary(self) -> dict:
        return {
            "pairs": len(self.results),
            "errors": sum(r.error is not None for r in self.results),
            "missing_concepts": sum(len(r.missing) for r in self.results),
            "mean_prompt_similarity": _json_num(self.mean_prompt_similarity),
            "mean_identity_similarity": _json_num(self.mean_identity_similarity),
        }

    def write(self, directory) -> tuple[Path, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        rec = directory / "report.jsonl"
        with rec.open("w") as f:
            for r in sorted(self.results, key=lambda r: r.pair_id):
                f.write(json.dumps(asdict(r), sort_keys=True) + "\n")
        summ = directory / "summary.txt"
        s = self.summary()
        lines = [f"{k:<26}{'undefined' if v is None else v}" for k, v in s.items()]
        summ.write_text("\n".join(lines) + "\n")
        return rec, summ


def _json_num(x):
    return None if x is None or (isinstance(x, float) and math.isnan(x)) else x


def pair_seed(seed: int, pair_id: int) -> int:
    h = hashlib.sha256(f"{seed}:{pair_id}".encode()).digest()
    return int.from_bytes(h[:4], "little")


def evaluate_run(checkpoints, suite, scenes, embedder: Embedder, segmenter: Segmenter,
                 steps: int = 50, seed: int = 0) -> Report:
    """Generate one image per pair and score it.

    ``checkpoints`` maps scene id to a trained checkpoint (a single checkpoint
    is used for every scene).  Failures are recorded per pair.
    """
    from .diffusion import sample

    if not isinstance(checkpoints, dict):
        checkpoints = {sid: checkpoints for sid in range(len(scenes))}
    results = []
    for pair in suite:
        res = PairResult(pair.pair_id, pair.scene_id, pair.prompt, pair.class_prompt)
        try:
            ckpt = checkpoints[pair.scene_id]
            scene = scenes[pair.scene_id]
            img = sample(ckpt.model, pair.prompt, steps, pair_seed(seed, pair.pair_id))[0]
            res.prompt_similarity = prompt_similarity(img, pair.class_prompt, embedder)
            scores = []
            for i in pair.subset:
                try:
                    s = identity_similarity(scene.image, scene.masks[i], img, scene.names[i],
                                            segmenter, embedder)
                except EmptySegmentation:
                    res.missing.append(scene.names[i])
                    s = 0.0
                res.concept_scores[scene.names[i]] = s
                scores.append(s)
            res.identity_similarity = float(np.mean(scores))
        except Exception as e:  # noqa: BLE001 - recorded per pair, run continues
            res.error = f"{type(e).__name__}: {e}"
        results.append(res)
    return Report(results)
