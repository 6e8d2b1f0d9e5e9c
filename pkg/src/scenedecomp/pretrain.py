"""Pretraining of the miniature text-to-image backbone on the synthetic corpus.

Concept extraction needs a model that already knows the words of its world
(colours, shapes, template contexts), just as extraction on real photographs
relies on a large pretrained model.  Cross-attention of colour and shape
words is lightly supervised with the object masks so that, as in large
backbones, attention follows the layout.  The saved weights are an
exponential moving average of the iterates.

Run ``python -m scenedecomp.pretrain --out src/scenedecomp/data/backbone.npz``
to regenerate the shipped weights (30k steps, roughly two hours on one core).
"""
from __future__ import annotations

import argparse
import logging
import time

import numpy as np

from . import diffusion, synthetic
from .gradcore import backward
from .model import Model, load_backbone, save_backbone
from .trainer import Adam, Example, loss_graph

log = logging.getLogger(__name__)


def corpus_example(model: Model, rng: np.random.Generator) -> Example:
    img, caption, masks = synthetic.corpus_sample(rng, model.image_size)
    res = model.image_size // 2
    words = caption.split()
    targets = {}
    obj = 0
    for pos, w in enumerate(words):
        if w in synthetic.SHAPES:
            # "<colour> <shape>": both words attend to the object
            m = diffusion.downsample_mask(masks[obj], res)
            targets[pos - 1] = m
            targets[pos] = m
            obj += 1
    return Example(img, caption, np.ones(img.shape[:2]), targets)


def pretrain(model: Model, steps: int, batch: int = 8, lr: float = 1e-3, seed: int = 0,
             attn_weight: float = 0.05, log_every: int = 100, start: int = 0,
             optimizer: Adam | None = None, ema: dict | None = None, ema_decay: float = 0.999):
    """Train ``model`` in place; ``ema`` (name -> array) is updated in place too."""
    rng = np.random.default_rng([seed, start])
    names = list(model.parameters())
    # the word table stays a fixed random codebook
    names.remove("handles")
    names.remove("text.table")
    opt = optimizer or Adam(names, lr, 0.9, 0.999, 0.0)
    hist = []
    t0 = time.time()
    for step in range(start, start + steps):
        examples = [corpus_example(model, rng) for _ in range(batch)]
        t = rng.integers(0, model.schedule.T, size=batch)
        eps = rng.standard_normal((batch, 3, model.image_size, model.image_size))
        g, nodes, rec, attn, total = loss_graph(model, examples, t, eps, names, attn_weight)
        grads = backward(g, total)
        opt.step(model, {n: grads[nodes[n]] for n in names})
        if ema is not None:
            params = model.parameters()
            for n in names:
                ema[n] = ema_decay * ema[n] + (1.0 - ema_decay) * params[n]
        hist.append((float(g.value(rec)), float(g.value(attn))))
        if (step + 1) % log_every == 0:
            r = np.mean(hist[-log_every:], axis=0)
            log.info("step %d rec %.4f attn %.4f (%.1fs)", step + 1, r[0], r[1], time.time() - t0)
    return opt, hist


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--steps", type=int, default=30000)
    ap.add_argument("--batch", type=int, default=8)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--resume", default=None)
    ap.add_argument("--save-every", type=int, default=1000)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    model = load_backbone(args.resume) if args.resume else Model.init(args.seed)
    # sampling uses an exponential moving average of the weights; the raw
    # weights are kept next to it for resuming
    ema = {k: v.copy() for k, v in model.parameters().items() if k != "handles"}
    raw_path = str(args.out).replace(".npz", "") + "-raw.npz"
    done = 0
    opt = None
    while done < args.steps:
        chunk = min(args.save_every, args.steps - done)
        opt, _ = pretrain(model, chunk, args.batch, args.lr, args.seed, start=done,
                          optimizer=opt, ema=ema)
        done += chunk
        save_backbone(model, raw_path)
        averaged = model.copy()
        averaged.set_parameters(ema)
        save_backbone(averaged, args.out)
        log.info("saved %s after %d steps", args.out, done)


if __name__ == "__main__":
    main()
