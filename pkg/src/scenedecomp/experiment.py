"""Desk-scale disentanglement experiment on the synthetic two-concept scene.

Trains the full method and two ablations on :func:`synthetic.reference_scene`
and measures attention/mask agreement and generated-concept identity.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import concepts, diffusion, synthetic
from .denoiser import attention_map
from .eval import ColorSegmenter, EmptySegmentation, ToyEmbedder, identity_similarity
from .model import Model
from .trainer import Checkpoint, TrainConfig, train

log = logging.getLogger(__name__)

ATTN_TIMESTEPS = (100, 250, 400)


def mean_attention_maps(model: Model, scene: concepts.Scene, handle_names, ts=ATTN_TIMESTEPS,
                        draws: int = 4, seed: int = 0) -> dict[str, np.ndarray]:
    """Handle maps for the all-concept prompt, averaged over noise draws and timesteps."""
    prompt = concepts.build_prompt(range(len(handle_names)), handle_names)
    tokens = model.tokenize(prompt)
    text = model.encode_tokens(np.repeat(tokens.ids[None], draws, axis=0))
    rng = np.random.default_rng(seed)
    z0 = np.repeat(diffusion.to_model(scene.image).transpose(2, 0, 1)[None], draws, axis=0)
    pos = tokens.handle_positions
    acc = {h: 0.0 for h in handle_names}
    for t in ts:
        zt = diffusion.add_noise(z0, t, rng.standard_normal(z0.shape), model.schedule)
        _, records = model.predict(zt, t, text)
        for b in range(draws):
            for h in handle_names:
                acc[h] = acc[h] + attention_map(records, pos[h], pos.values(), batch_index=b)
    n = len(ts) * draws
    return {h: a / n for h, a in acc.items()}


def iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    union = (a | b).sum()
    return float((a & b).sum() / union) if union else 1.0


def attention_iou(model: Model, scene: concepts.Scene, handle_names, threshold: float = 0.5,
                  seed: int = 0) -> float:
    """Mean IoU between thresholded handle maps and downsampled concept masks."""
    res = model.image_size // 2
    maps = mean_attention_maps(model, scene, handle_names[:scene.n], seed=seed)
    scores = []
    for i, h in enumerate(handle_names[:scene.n]):
        m = diffusion.downsample_mask(scene.masks[i], res)
        scores.append(iou(maps[h] >= threshold, m >= 0.5))
    return float(np.mean(scores))


@dataclass
class GenerationScore:
    identity: float                      # mean over images and requested concepts
    per_concept: dict[str, float]
    spurious: dict[str, float]           # mean area fraction of concepts not requested
    images: np.ndarray = field(repr=False, default=None)


def generation_score(model: Model, scene: concepts.Scene, handle_names, subset,
                     samples: int = 8, steps: int = 50, seed: int = 0,
                     segmenter=None, embedder=None) -> GenerationScore:
    segmenter = segmenter or ColorSegmenter()
    embedder = embedder or ToyEmbedder()
    prompt = concepts.build_prompt(subset, handle_names)
    imgs = diffusion.sample(model, prompt, steps=steps, seed=seed, count=samples)
    per = {}
    for i in subset:
        vals = []
        for img in imgs:
            try:
                vals.append(identity_similarity(scene.image, scene.masks[i], img, scene.names[i],
                                                segmenter, embedder))
            except EmptySegmentation:
                vals.append(0.0)
        per[scene.names[i]] = float(np.mean(vals))
    spurious = {}
    for i in range(scene.n):
        if i not in subset:
            spurious[scene.names[i]] = float(np.mean(
                [segmenter.segment(img, scene.names[i]).mean() for img in imgs]))
    return GenerationScore(float(np.mean(list(per.values()))), per, spurious, imgs)


@dataclass
class DeskResult:
    iou: dict[str, float]
    multi_identity: dict[str, float]
    single: GenerationScore
    seconds: float
    checkpoints: dict[str, Checkpoint] = field(repr=False, default_factory=dict)


def run(model: Model | None = None, config: TrainConfig | None = None, samples: int = 8,
        steps: int = 50, seed: int = 0) -> DeskResult:
    """Train ours / no-attn-loss / no-union on the reference scene and score them."""
    t0 = time.time()
    model = model or Model.pretrained()
    scene = synthetic.reference_scene(model.image_size)
    base = config or TrainConfig(seed=seed)
    arms = {
        "ours": base,
        "no-attn-loss": TrainConfig(**{**base.to_dict(), "use_attn_loss": False}),
        "no-union": TrainConfig(**{**base.to_dict(), "use_union_sampling": False}),
    }
    ious, multi, ckpts = {}, {}, {}
    single = None
    for name, cfg in arms.items():
        ck = train(model, scene, cfg)
        ckpts[name] = ck
        ious[name] = attention_iou(ck.model, scene, ck.handle_names, seed=seed)
        multi[name] = generation_score(ck.model, scene, ck.handle_names, [0, 1], samples,
                                       steps, seed).identity
        if name == "ours":
            single = generation_score(ck.model, scene, ck.handle_names, [0], samples, steps, seed)
        log.info("%s: iou %.3f multi-identity %.3f (%.0fs)", name, ious[name], multi[name],
                 time.time() - t0)
    return DeskResult(ious, multi, single, time.time() - t0, ckpts)
