"""A small world of coloured, textured shapes on context-coloured backgrounds.

It supplies three things: the captioned corpus the miniature backbone is
pretrained on, the two-concept reference scene used by the experiments, and
the colour tables the toy embedder/segmenter read.
"""
from __future__ import annotations

import numpy as np

from .concepts import Scene

COLORS = {
    "red": (0.85, 0.12, 0.10),
    "green": (0.15, 0.70, 0.20),
    "blue": (0.12, 0.22, 0.88),
    "yellow": (0.92, 0.85, 0.12),
    "purple": (0.58, 0.18, 0.78),
    "orange": (0.95, 0.52, 0.08),
    "cyan": (0.10, 0.80, 0.85),
    "white": (0.96, 0.96, 0.96),
}

SHAPES = ("square", "disc", "triangle", "ring", "cross", "bar")
TEXTURES = ("flat", "stripes", "checker", "dots")

# template tail -> background colour it depicts in this world
CONTEXTS = {
    "at the beach": (0.93, 0.84, 0.60),
    "in the jungle": (0.10, 0.35, 0.12),
    "in the snow": (0.90, 0.93, 0.97),
    "in the street": (0.35, 0.35, 0.38),
    "on top of a pink fabric": (0.95, 0.60, 0.75),
    "on top of a wooden floor": (0.55, 0.35, 0.18),
    "with a city in the background": (0.45, 0.50, 0.62),
    "with a mountain in the background": (0.52, 0.56, 0.44),
    "with the eiffel tower in the background": (0.62, 0.80, 0.95),
    "floating on top of water": (0.10, 0.48, 0.55),
}

CONTEXT_WORDS = {
    "beach": "at the beach",
    "jungle": "in the jungle",
    "snow": "in the snow",
    "street": "in the street",
    "pink": "on top of a pink fabric",
    "wooden": "on top of a wooden floor",
    "city": "with a city in the background",
    "mountain": "with a mountain in the background",
    "eiffel": "with the eiffel tower in the background",
    "water": "floating on top of water",
}

TEXTURE_AMPLITUDE = 0.22


def shape_mask(shape: str, cy: float, cx: float, r: float, size: int = 32) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = yy - cy, xx - cx
    if shape == "square":
        m = (np.abs(dy) <= r) & (np.abs(dx) <= r)
    elif shape == "disc":
        m = dy ** 2 + dx ** 2 <= r ** 2
    elif shape == "triangle":
        m = (dy <= r) & (dy >= -r) & (np.abs(dx) <= (dy + r) / 2)
    elif shape == "ring":
        d2 = dy ** 2 + dx ** 2
        m = (d2 <= r ** 2) & (d2 >= (0.5 * r) ** 2)
    elif shape == "cross":
        w = max(r / 3, 1.0)
        m = ((np.abs(dy) <= r) & (np.abs(dx) <= w)) | ((np.abs(dx) <= r) & (np.abs(dy) <= w))
    elif shape == "bar":
        m = (np.abs(dy) <= r / 2.5) & (np.abs(dx) <= r)
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return m.astype(np.float64)


def texture(kind: str, size: int = 32) -> np.ndarray:
    """Brightness multiplier pattern in ``[1 - a, 1 + a]``."""
    yy, xx = np.mgrid[0:size, 0:size]
    a = TEXTURE_AMPLITUDE
    if kind == "flat":
        return np.ones((size, size))
    if kind == "stripes":
        return 1.0 + a * np.where(yy % 4 < 2, 1.0, -1.0)
    if kind == "checker":
        return 1.0 + a * np.where((yy // 2 + xx // 2) % 2 == 0, 1.0, -1.0)
    if kind == "dots":
        return 1.0 + a * np.where((yy % 4 < 2) & (xx % 4 < 2), 1.0, -1.0)
    raise ValueError(f"unknown texture {kind!r}")


def paint(image: np.ndarray, mask: np.ndarray, color, tex: str) -> np.ndarray:
    col = np.asarray(color)[None, None, :] * texture(tex, image.shape[0])[..., None]
    col = np.clip(col, 0.0, 1.0)
    return np.where(mask[..., None] > 0, col, image)


def solid(color, size: int = 32) -> np.ndarray:
    return np.broadcast_to(np.asarray(color, dtype=np.float64), (size, size, 3)).copy()


def reference_scene(size: int = 32) -> Scene:
    """Red striped square (upper left) and blue checkered disc (lower right) on gray."""
    img = solid((0.5, 0.5, 0.5), size)
    sq = shape_mask("square", 10.0, 10.0, 6.0, size)
    disc = shape_mask("disc", 22.0, 22.0, 6.5, size)
    img = paint(img, sq, COLORS["red"], "stripes")
    img = paint(img, disc, COLORS["blue"], "checker")
    return Scene(img, [sq, disc], ["red square", "blue disc"])


def random_object(rng: np.random.Generator):
    return (str(rng.choice(list(COLORS))), str(rng.choice(SHAPES)), str(rng.choice(TEXTURES)))


def corpus_sample(rng: np.random.Generator, size: int = 32):
    """One captioned image: 1-2 objects, optional context background.

    Returns ``(image, caption, object_masks)``.
    """
    k = 1 if rng.random() < 0.5 else 2
    objs = []
    while len(objs) < k:
        o = random_object(rng)
        if all(o[0] != p[0] for p in objs):
            objs.append(o)
    if rng.random() < 0.6:
        ctx = str(rng.choice(list(CONTEXTS)))
        bg = np.asarray(CONTEXTS[ctx])
    else:
        ctx = None
        bg = np.full(3, rng.uniform(0.3, 0.7))
    img = solid(bg, size)
    img = np.clip(img + rng.normal(0.0, 0.02, img.shape), 0.0, 1.0)
    masks = []
    occupied = np.zeros((size, size))
    for color, shp, tex in objs:
        for _ in range(20):
            r = rng.uniform(4.5, 8.0)
            cy, cx = rng.uniform(r + 0.5, size - r - 0.5, 2)
            m = shape_mask(shp, cy, cx, r, size)
            if (m * occupied).sum() < 0.1 * m.sum():
                break
        occupied = np.maximum(occupied, m)
        img = paint(img, m, COLORS[color], tex)
        masks.append(m)
    words = " and ".join(f"{c} {s}" for c, s, _ in objs)
    caption = f"a photo of {words}" + (f" {ctx}" if ctx else "")
    return img, caption, masks
