"""Noise schedule, forward noising, training losses and the ancestral sampler.

Images live in ``[0, 1]`` at the API boundary and in ``[-1, 1]`` inside the
diffusion process (``to_model`` / ``from_model`` convert).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .gradcore import Graph

LAMBDA_ATTN = 0.01


@dataclass(frozen=True)
class NoiseSchedule:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if not 0 < self.beta_start <= self.beta_end < 1:
            raise ValueError("need 0 < beta_start <= beta_end < 1")

    @property
    def beta(self) -> np.ndarray:
        return np.linspace(self.beta_start, self.beta_end, self.T)

    @property
    def alpha(self) -> np.ndarray:
        return 1.0 - self.beta

    @property
    def alpha_bar(self) -> np.ndarray:
        return np.cumprod(self.alpha)

    def check(self, t):
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t >= self.T):
            raise ValueError(f"timestep {t.tolist()} outside [0, {self.T})")


@dataclass(frozen=True)
class LossBreakdown:
    rec: float
    attn: float
    total: float


def to_model(img):
    return 2.0 * np.asarray(img, dtype=np.float64) - 1.0


def from_model(x):
    return np.clip((np.asarray(x) + 1.0) / 2.0, 0.0, 1.0)


def add_noise(z0: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """``sqrt(abar_t) z0 + sqrt(1 - abar_t) eps``; ``t`` may be per batch element."""
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z0.shape != eps.shape:
        raise ValueError(f"noise shape {eps.shape} != image shape {z0.shape}")
    sched.check(t)
    ab = sched.alpha_bar[np.asarray(t)]
    ab = np.reshape(ab, np.shape(ab) + (1,) * (z0.ndim - np.ndim(ab)))
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


# -- losses as graph builders ----------------------------------------------
def rec_loss_node(g: Graph, eps: int, eps_hat: int, mask: int, normalize: str = "all") -> int:
    """Masked epsilon-prediction loss.

    ``normalize="all"`` averages over every element (zeros outside the mask);
    ``"mask"`` divides by the number of masked elements instead.
    """
    es, hs, ms = (g.value(i).shape for i in (eps, eps_hat, mask))
    if es != hs:
        raise ValueError(f"rec_loss: shape mismatch {es} vs {hs}")
    resid = g.mul(g.sub(eps, eps_hat), mask)
    sq = g.square(resid)
    if normalize == "all":
        return g.mean(sq)
    if normalize == "mask":
        count = float(np.broadcast_to(g.value(mask), es).sum())
        return g.scale(g.sum(sq), 1.0 / max(count, 1.0))
    raise ValueError(f"unknown normalisation {normalize!r}")


def attn_loss_node(g: Graph, maps: int, targets: np.ndarray, valid: np.ndarray) -> int:
    """Mean over used (map, mask) pairs of per-map MSE.

    ``maps`` is an ``(N, Q, K)`` node, ``targets`` matches it and ``valid`` is
    ``(N, K)`` marking which columns hold a real handle.
    """
    valid = np.asarray(valid, dtype=np.float64)
    n_pairs = valid.sum()
    if n_pairs == 0:
        return g.const(0.0)
    diff = g.sub(maps, g.const(targets))
    w = valid[:, None, :] / (n_pairs * g.value(maps).shape[1])
    return g.sum(g.mul(g.square(diff), g.const(w)))


# -- plain-array front ends --------------------------------------------------
def rec_loss(eps, eps_hat, mask, normalize: str = "all") -> float:
    """Masked MSE; a mask without a channel axis is broadcast over channels."""
    eps = np.asarray(eps, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim == eps.ndim - 1:
        mask = mask[..., None]
    if eps.shape != eps_hat.shape or np.broadcast_shapes(mask.shape, eps.shape) != eps.shape:
        raise ValueError(f"rec_loss: shape mismatch {eps.shape}, {eps_hat.shape}, {mask.shape}")
    g = Graph()
    out = rec_loss_node(g, g.const(eps), g.const(eps_hat), g.const(mask), normalize)
    return float(g.value(out))


def downsample_mask(mask, res: int = 16) -> np.ndarray:
    mask = np.asarray(mask, dtype=np.float64)
    h, w = mask.shape
    if h % res or w % res:
        raise ValueError(f"mask {h}x{w} not divisible into {res}x{res} cells")
    return mask.reshape(res, h // res, res, w // res).mean(axis=(1, 3))


def attn_loss(maps, masks) -> float:
    if len(maps) != len(masks):
        raise ValueError(f"{len(maps)} maps but {len(masks)} masks")
    if not maps:
        return 0.0
    m = np.stack([np.asarray(x, dtype=np.float64).ravel() for x in maps], axis=1)[None]
    t = np.stack([np.asarray(x, dtype=np.float64).ravel() for x in masks], axis=1)[None]
    g = Graph()
    out = attn_loss_node(g, g.const(m), t, np.ones((1, m.shape[2])))
    return float(g.value(out))


def total_loss(rec: float, attn: float, lambda_attn: float = LAMBDA_ATTN) -> LossBreakdown:
    if lambda_attn < 0:
        raise ValueError("lambda_attn must be >= 0")
    return LossBreakdown(float(rec), float(attn), float(rec) + lambda_attn * float(attn))


# -- sampling ---------------------------------------------------------------
def respaced(sched: NoiseSchedule, steps: int):
    """Evenly spaced timesteps and the matching per-step betas."""
    if not 1 <= steps <= sched.T:
        raise ValueError(f"steps must be in [1, {sched.T}], got {steps}")
    ts = np.unique(np.round(np.linspace(0, sched.T - 1, steps)).astype(int))
    ab = sched.alpha_bar[ts]
    ab_prev = np.concatenate([[1.0], ab[:-1]])
    return ts, 1.0 - ab / ab_prev, ab, ab_prev


def ancestral_sample(eps_fn: Callable[[np.ndarray, int], np.ndarray], shape, sched: NoiseSchedule,
                     steps: int, rng: np.random.Generator, clip: bool = True) -> np.ndarray:
    """DDPM ancestral sampling in model space, starting from pure noise.

    ``eps_fn(x, t)`` returns the predicted noise for a batch at timestep ``t``.
    With ``clip`` the implied clean image is clamped to ``[-1, 1]`` before the
    posterior mean is formed (and the result is clamped too).
    """
    ts, betas, ab, ab_prev = respaced(sched, steps)
    x = rng.standard_normal(shape)
    for i in range(len(ts) - 1, -1, -1):
        eps = eps_fn(x, int(ts[i]))
        x0 = (x - np.sqrt(1.0 - ab[i]) * eps) / np.sqrt(ab[i])
        if clip:
            x0 = np.clip(x0, -1.0, 1.0)
        # posterior q(x_{i-1} | x_i, x0)
        mean = (np.sqrt(ab_prev[i]) * betas[i] * x0
                + np.sqrt(1.0 - betas[i]) * (1.0 - ab_prev[i]) * x) / (1.0 - ab[i])
        if i > 0:
            var = betas[i] * (1.0 - ab_prev[i]) / (1.0 - ab[i])
            x = mean + np.sqrt(var) * rng.standard_normal(shape)
        else:
            x = mean
    return np.clip(x, -1.0, 1.0) if clip else x


def sample(model, prompt: str, steps: int = 50, seed: int = 0, count: int = 1) -> np.ndarray:
    """Generate ``count`` images ``(count, H, W, 3)`` in ``[0, 1]`` for ``prompt``.

    ``model`` is a :class:`scenedecomp.model.Model`; identical seeds give
    bit-identical output.
    """
    tokens = model.tokenize(prompt)
    text = model.encode_tokens(np.repeat(tokens.ids[None], count, axis=0))
    size = model.image_size
    rng = np.random.default_rng(seed)

    def eps_fn(x, t):
        return model.predict(x, t, text)[0]

    x = ancestral_sample(eps_fn, (count, 3, size, size), model.schedule, steps, rng)
    return from_model(x).transpose(0, 2, 3, 1)
