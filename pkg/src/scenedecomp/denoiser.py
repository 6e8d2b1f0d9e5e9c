"""Miniature UNet-style noise predictor with one cross-attention block.

Layout (channels-first internally)::

    conv_in -> res(32x32) -> avgpool -> cross-attn(16x16) -> + global(16x16)
            -> res(16x16) -> upsample -> + skip -> res(32x32) -> conv_out

Text enters through the cross-attention block, whose softmax probabilities
are returned as :class:`AttentionRecord` objects, and through the token-mean
of the text embeddings added to the timestep embedding.
``global`` adds a linear map of the spatially pooled features at every
position, so image-wide statistics such as background colour are visible
everywhere despite the small receptive field.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffusion import NoiseSchedule
from .gradcore import Graph

D_MODEL = 32
TIME_DIM = 32
IMAGE_SIZE = 32
ATTN_RES = 16
# assumed pixel std of clean images (model space) for the input skip
DATA_STD = 0.5


class TimestepError(ValueError):
    pass


@dataclass
class AttentionRecord:
    """Softmax probabilities ``(N, queries, L)`` of one cross-attention layer."""

    probs: np.ndarray
    layer: int
    node: int | None = None

    @property
    def resolution(self) -> int:
        return int(round(np.sqrt(self.probs.shape[-2])))


RES_BLOCKS = ("down", "mid", "up")


def init_params(rng: np.random.Generator, d_model: int = D_MODEL, d_text: int = 32,
                channels: int = 3) -> dict[str, np.ndarray]:
    def conv(o, i):
        return rng.normal(0.0, np.sqrt(2.0 / (9 * i)), (o, i, 3, 3))

    def lin(i, o):
        return rng.normal(0.0, 1.0 / np.sqrt(i), (i, o))

    p = {
        "unet.in.w": conv(d_model, channels),
        "unet.in.b": np.zeros(d_model),
        "unet.time.w": lin(TIME_DIM, d_model),
        "unet.time.b": np.zeros(d_model),
        "unet.ptext.w": np.zeros((d_text, d_model)),
    }
    for name in RES_BLOCKS:
        k = f"unet.{name}"
        p[f"{k}.gn1.g"] = np.ones(d_model)
        p[f"{k}.gn1.b"] = np.zeros(d_model)
        p[f"{k}.conv1.w"] = conv(d_model, d_model)
        p[f"{k}.conv1.b"] = np.zeros(d_model)
        p[f"{k}.temb.w"] = lin(d_model, d_model)
        p[f"{k}.temb.b"] = np.zeros(d_model)
        p[f"{k}.gn2.g"] = np.ones(d_model)
        p[f"{k}.gn2.b"] = np.zeros(d_model)
        p[f"{k}.conv2.w"] = 0.1 * conv(d_model, d_model)
        p[f"{k}.conv2.b"] = np.zeros(d_model)
    p.update({
        "unet.attn.gn.g": np.ones(d_model),
        "unet.attn.gn.b": np.zeros(d_model),
        "unet.attn.q": lin(d_model, d_model),
        "unet.attn.k": lin(d_text, d_model),
        "unet.attn.v": lin(d_text, d_model),
        "unet.attn.o": 0.1 * lin(d_model, d_model),
        "unet.attn.ob": np.zeros(d_model),
        "unet.glob.w": np.zeros((d_model, d_model)),
        "unet.glob.b": np.zeros(d_model),
        "unet.out.gn.g": np.ones(d_model),
        "unet.out.gn.b": np.zeros(d_model),
        "unet.out.w": 0.1 * conv(channels, d_model),
        "unet.out.b": np.zeros(channels),
    })
    return p


CROSS_ATTN_KEYS = ("unet.attn.q", "unet.attn.k", "unet.attn.v", "unet.attn.o", "unet.attn.ob")


def timestep_embedding(t, dim: int = TIME_DIM) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _bias4(g, b):
    return g.reshape(b, (1, -1, 1, 1))


def _conv(g, x, nodes, key):
    return g.badd(g.apply("conv2d", x, nodes[f"{key}.w"]), _bias4(g, nodes[f"{key}.b"]))


def _norm_act(g, x, nodes, key):
    return g.silu(g.apply("group_norm", x, nodes[f"{key}.g"], nodes[f"{key}.b"]))


def _res_block(g, x, temb, nodes, key, n, d):
    h = g.apply("conv2d", _norm_act(g, x, nodes, f"{key}.gn1"), nodes[f"{key}.conv1.w"])
    h = g.badd(h, _bias4(g, nodes[f"{key}.conv1.b"]))
    t = g.badd(g.matmul(temb, nodes[f"{key}.temb.w"]), nodes[f"{key}.temb.b"])
    h = g.badd(h, g.reshape(t, (n, d, 1, 1)))
    h = g.apply("conv2d", _norm_act(g, h, nodes, f"{key}.gn2"), nodes[f"{key}.conv2.w"])
    h = g.badd(h, _bias4(g, nodes[f"{key}.conv2.b"]))
    return g.add(x, h)


def _cross_attention(g, x, text, nodes, n, d, res):
    hn = g.apply("group_norm", x, nodes["unet.attn.gn.g"], nodes["unet.attn.gn.b"])
    q_in = g.transpose(g.reshape(hn, (n, d, res * res)), (0, 2, 1))
    q = g.matmul(q_in, nodes["unet.attn.q"])
    k = g.matmul(text, nodes["unet.attn.k"])
    v = g.matmul(text, nodes["unet.attn.v"])
    scores = g.scale(g.matmul(q, g.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(d))
    probs = g.apply("softmax", scores, axis=-1)
    out = g.badd(g.matmul(g.matmul(probs, v), nodes["unet.attn.o"]), nodes["unet.attn.ob"])
    out = g.reshape(g.transpose(out, (0, 2, 1)), (n, d, res, res))
    return g.add(x, out), AttentionRecord(g.value(probs), 0, probs)


def input_skip(alpha_bar) -> np.ndarray:
    """Best linear noise estimate coefficient if clean pixels were N(0, DATA_STD^2)."""
    ab = np.asarray(alpha_bar, dtype=np.float64)
    return np.sqrt(1.0 - ab) / (ab * DATA_STD ** 2 + 1.0 - ab)


def forward(g: Graph, nodes: dict[str, int], x: int, t, text: int, schedule):
    """Noise prediction for a batch.

    ``x`` is an ``(N, C, H, W)`` node, ``text`` an ``(N, L, d_text)`` node and
    ``t`` an int or length-N integer array.  ``schedule`` is a
    :class:`NoiseSchedule` or a step count (default betas).  The network
    output is added to ``input_skip(abar_t) * x``, which carries the
    image-wide mean that group normalisation would otherwise remove.
    Returns ``(eps_node, records)``.
    """
    if not isinstance(schedule, NoiseSchedule):
        schedule = NoiseSchedule(T=int(schedule))
    n_steps = schedule.T
    t = np.atleast_1d(np.asarray(t))
    if np.any(t < 0) or np.any(t >= n_steps):
        raise TimestepError(f"timestep {t.tolist()} outside [0, {n_steps})")
    n, _, h, w = g.value(x).shape
    d = g.value(nodes["unet.in.w"]).shape[0]
    t = np.broadcast_to(t, (n,))
    temb = g.const(timestep_embedding(t))
    temb = g.badd(g.matmul(temb, nodes["unet.time.w"]), nodes["unet.time.b"])
    ptext = g.mean(text, axis=1)
    ptext = g.reshape(ptext, (n, g.value(ptext).shape[-1]))
    temb = g.silu(g.add(temb, g.matmul(ptext, nodes["unet.ptext.w"])))

    hid = _conv(g, x, nodes, "unet.in")
    hid = _res_block(g, hid, temb, nodes, "unet.down", n, d)
    skip = hid
    hid = g.apply("avgpool2", hid)
    hid, rec = _cross_attention(g, hid, text, nodes, n, d, h // 2)
    pooled = g.reshape(g.mean(hid, axis=(2, 3)), (n, d))
    glob = g.badd(g.matmul(pooled, nodes["unet.glob.w"]), nodes["unet.glob.b"])
    hid = g.badd(hid, g.reshape(glob, (n, d, 1, 1)))
    hid = _res_block(g, hid, temb, nodes, "unet.mid", n, d)
    hid = g.add(g.apply("upsample2", hid), skip)
    hid = _res_block(g, hid, temb, nodes, "unet.up", n, d)
    out = g.apply("conv2d", _norm_act(g, hid, nodes, "unet.out.gn"), nodes["unet.out.w"])
    out = g.badd(out, _bias4(g, nodes["unet.out.b"]))
    skip_c = input_skip(schedule.alpha_bar[t]).reshape(n, 1, 1, 1)
    out = g.add(out, g.mul(x, g.const(np.broadcast_to(skip_c, g.value(x).shape).copy())))
    return out, [rec]


def bind(g: Graph, params: dict[str, np.ndarray], trainable=None) -> dict[str, int]:
    """Put every array into the graph; names in ``trainable`` become parameters."""
    nodes = {}
    for name, arr in params.items():
        if trainable is None or name in trainable:
            nodes[name] = g.param(arr, name)
        else:
            nodes[name] = g.const(arr)
    return nodes


def predict_noise(params: dict[str, np.ndarray], z_t: np.ndarray, t: int,
                  token_embs: np.ndarray, n_steps=1000):
    """Single-image convenience wrapper: ``(H, W, 3)`` in, ``(H, W, 3)`` out."""
    g = Graph()
    nodes = bind(g, params, trainable=())
    x = g.const(np.asarray(z_t).transpose(2, 0, 1)[None])
    text = g.const(np.asarray(token_embs)[None])
    eps, records = forward(g, nodes, x, t, text, n_steps)
    return g.value(eps)[0].transpose(1, 2, 0), records


class AttentionMapError(ValueError):
    pass


def attention_map(records: list[AttentionRecord], handle_position: int,
                  handle_positions=None, batch_index: int = 0) -> np.ndarray:
    """Layer-averaged, min-max normalised attention onto one token.

    ``handle_positions`` (if given) lists positions that hold handle tokens;
    asking for any other position is an error.  Constant maps become zeros.
    """
    if not records:
        raise AttentionMapError("no attention records")
    length = records[0].probs.shape[-1]
    if not 0 <= handle_position < length:
        raise AttentionMapError(f"position {handle_position} outside sequence of {length}")
    if handle_positions is not None and handle_position not in set(handle_positions):
        raise AttentionMapError(f"position {handle_position} is not a handle token")
    col = np.mean([r.probs[batch_index, :, handle_position] for r in records], axis=0)
    res = int(round(np.sqrt(col.size)))
    col = col.reshape(res, res)
    lo, hi = col.min(), col.max()
    if hi - lo <= 1e-12:
        return np.zeros_like(col)
    return (col - lo) / (hi - lo)


def attention_maps_node(g: Graph, records: list[AttentionRecord], selector: np.ndarray) -> int:
    """Differentiable counterpart of :func:`attention_map` for a whole batch.

    ``selector`` is ``(N, L, K)`` with a single one per used column; the result
    is an ``(N, queries, K)`` node of normalised maps (unused columns are zero).
    """
    sel = g.const(selector)
    cols = [g.matmul(r.node, sel) for r in records]
    acc = cols[0]
    for c in cols[1:]:
        acc = g.add(acc, c)
    if len(cols) > 1:
        acc = g.scale(acc, 1.0 / len(cols))
    return g.apply("minmax_norm", acc, axis=1)
