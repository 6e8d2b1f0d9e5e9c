"""Scenes, union-sampling, prompt construction and baseline collections."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import yaml
from PIL import Image


class SceneError(ValueError):
    pass


@dataclass
class Scene:
    """One image with ``N`` binary concept masks and their class words."""

    image: np.ndarray
    masks: list[np.ndarray]
    names: list[str]

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.masks = [(np.asarray(m) > 0).astype(np.float64) for m in self.masks]
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise SceneError(f"image must be HxWx3, got {self.image.shape}")
        if not self.masks:
            raise SceneError("a scene needs at least one concept mask")
        if len(self.names) != len(self.masks):
            raise SceneError(f"{len(self.masks)} masks but {len(self.names)} names")
        for i, m in enumerate(self.masks):
            if m.shape != self.image.shape[:2]:
                raise SceneError(f"mask {i} has shape {m.shape}, image is {self.image.shape[:2]}")
            if not m.any():
                raise SceneError(f"mask {i} ({self.names[i]}) is empty")

    @property
    def n(self) -> int:
        return len(self.masks)


def union_sample(rng: np.random.Generator, n: int) -> list[int]:
    """Nonempty subset of ``range(n)``: size uniform on 1..n, then a uniform subset."""
    if n < 1:
        raise ValueError("need at least one concept")
    k = int(rng.integers(1, n + 1))
    return sorted(int(i) for i in rng.choice(n, size=k, replace=False))


def subset_probability(subset, n: int) -> float:
    """Probability that :func:`union_sample` returns ``subset``."""
    from math import comb
    k = len(subset)
    return 1.0 / (n * comb(n, k))


def build_prompt(subset, handle_names) -> str:
    """``"a photo of [v2] and [v5]"`` for indices in ascending order."""
    subset = sorted(subset)
    if not subset:
        raise ValueError("empty subset")
    for i in subset:
        if not 0 <= i < len(handle_names):
            raise IndexError(f"concept index {i} out of range")
    return "a photo of " + " and ".join(handle_names[i] for i in subset)


def mask_union(masks, subset) -> np.ndarray:
    subset = list(subset)
    if not subset:
        raise ValueError("empty subset")
    return np.max([np.asarray(masks[i], dtype=np.float64) for i in subset], axis=0)


def background_mask(scene: Scene) -> np.ndarray:
    return 1.0 - mask_union(scene.masks, range(scene.n))


class BaselineSample(NamedTuple):
    image: np.ndarray
    prompt: str
    subset: list[int]


def synthesize_baseline_collection(scene: Scene, count: int, rng: np.random.Generator,
                                   handle_names=None) -> list[BaselineSample]:
    """Paste random concept subsets onto random solid colours, random h-flips."""
    if count < 1:
        raise ValueError("count must be >= 1")
    names = handle_names or [f"[v{i + 1}]" for i in range(scene.n)]
    out = []
    for _ in range(count):
        subset = union_sample(rng, scene.n)
        union = mask_union(scene.masks, subset)
        color = rng.uniform(0.0, 1.0, 3)
        img = np.where(union[..., None] > 0, scene.image, color[None, None, :])
        if rng.random() < 0.5:
            img = img[:, ::-1].copy()
        out.append(BaselineSample(img, build_prompt(subset, names), subset))
    return out


# -- disk format ---------------------------------------------------------------
def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        a = np.asarray(im)
    if a.ndim == 3:
        a = a.max(axis=2)
    return (a > 0).astype(np.float64)


def write_image(path, img: np.ndarray):
    a = np.asarray(img, dtype=np.float64)
    a = np.round(np.clip(a, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(a.squeeze()).save(path)


def load_scene(manifest) -> Scene:
    """Read a scene manifest (YAML: ``image`` plus ``concepts`` of name/mask)."""
    manifest = Path(manifest)
    if not manifest.is_file():
        raise FileNotFoundError(f"scene manifest not found: {manifest}")
    doc = yaml.safe_load(manifest.read_text())
    if not isinstance(doc, dict) or "image" not in doc or "concepts" not in doc:
        raise SceneError(f"{manifest}: manifest needs 'image' and 'concepts'")
    base = manifest.parent
    img_path = base / doc["image"]
    if not img_path.is_file():
        raise FileNotFoundError(f"image file not found: {img_path}")
    masks, names = [], []
    for c in doc["concepts"]:
        p = base / c["mask"]
        if not p.is_file():
            raise FileNotFoundError(f"mask file not found: {p}")
        masks.append(read_mask(p))
        names.append(str(c["name"]))
    return Scene(read_image(img_path), masks, names)


def save_scene(scene: Scene, directory, stem: str = "scene") -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_image(directory / f"{stem}.png", scene.image)
    concepts = []
    for i, (m, name) in enumerate(zip(scene.masks, scene.names)):
        fn = f"{stem}_mask{i + 1}.png"
        write_image(directory / fn, m)
        concepts.append({"name": name, "mask": fn})
    path = directory / f"{stem}.yaml"
    path.write_text(yaml.safe_dump({"image": f"{stem}.png", "concepts": concepts}, sort_keys=False))
    return path
