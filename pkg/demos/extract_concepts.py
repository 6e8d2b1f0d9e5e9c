"""
Extracting two concepts from one image
======================================

Runs the two-phase handle training on the reference scene with the shipped
backbone, then looks at where each handle attends and what it generates.
Writes ``attention.png`` (one map per handle) and ``samples.png``.
Takes a few minutes on one core.
"""
import logging

import numpy as np
from PIL import Image

from scenedecomp import diffusion, experiment, synthetic
from scenedecomp.model import Model
from scenedecomp.trainer import TrainConfig, train

logging.basicConfig(level=logging.INFO, format="%(message)s")


def save(arr, path, scale=8):
    img = Image.fromarray((np.clip(arr, 0, 1) * 255).round().astype(np.uint8))
    img.resize((img.width * scale, img.height * scale), Image.NEAREST).save(path)


model = Model.pretrained()
scene = synthetic.reference_scene(model.image_size)
ckpt = train(model, scene, TrainConfig(seed=0))
names = ckpt.handle_names

# attention of each handle, averaged over a few timesteps and noise draws
maps = experiment.mean_attention_maps(ckpt.model, scene, names)
save(np.concatenate([maps[h] for h in names], axis=1), "attention.png", scale=16)
print("attention IoU", experiment.attention_iou(ckpt.model, scene, names))

# one row per prompt
prompts = ["a photo of [v1]", "a photo of [v2]", "a photo of [v1] and [v2]"]
rows = [np.concatenate(list(diffusion.sample(ckpt.model, p, steps=50, seed=1, count=4)), axis=1)
        for p in prompts]
save(np.concatenate(rows, axis=0), "samples.png", scale=4)
