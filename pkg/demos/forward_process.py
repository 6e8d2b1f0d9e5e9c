"""
The forward noising process on the reference scene
==================================================

Noises the two-concept reference scene at a few timesteps and writes the
strip to ``forward_process.png``.  Also prints sqrt(abar_t), the fraction of
signal kept.
"""
import numpy as np
from PIL import Image

from scenedecomp import diffusion, synthetic

sched = diffusion.NoiseSchedule()
scene = synthetic.reference_scene()
z0 = diffusion.to_model(scene.image)

rng = np.random.default_rng(0)
eps = rng.standard_normal(z0.shape)
ts = [0, 50, 150, 300, 500, 999]
tiles = []
for t in ts:
    zt = diffusion.add_noise(z0, t, eps, sched)
    print("t=%4d  signal %.3f" % (t, np.sqrt(sched.alpha_bar[t])))
    tiles.append(diffusion.from_model(zt))

strip = np.concatenate(tiles, axis=1)
Image.fromarray((strip * 255).round().astype(np.uint8)).resize(
    (strip.shape[1] * 4, strip.shape[0] * 4), Image.NEAREST).save("forward_process.png")
