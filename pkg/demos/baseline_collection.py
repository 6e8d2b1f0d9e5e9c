"""
Solid-background collections for the single-image baselines
============================================================

The masked baselines train on copies of the scene where a random concept
subset is pasted onto a random solid colour.  Writes a 4x4 grid to
``baselines.png`` and prints the captions.
"""
import numpy as np
from PIL import Image

from scenedecomp import synthetic
from scenedecomp.concepts import synthesize_baseline_collection

scene = synthetic.reference_scene()
samples = synthesize_baseline_collection(scene, 16, np.random.default_rng(0))

rows = [np.concatenate([s.image for s in samples[r * 4:(r + 1) * 4]], axis=1) for r in range(4)]
grid = np.concatenate(rows, axis=0)
Image.fromarray((grid * 255).round().astype(np.uint8)).resize((512, 512), Image.NEAREST).save("baselines.png")

for s in samples[:6]:
    print(s.prompt)
