"""Shared fixtures-as-functions for the test suite."""
import numpy as np

from scenedecomp import concepts, diffusion, trainer
from scenedecomp.model import Model
from scenedecomp.textenc import TABLE_STD


def tiny_scene(size=8, seed=0):
    rng = np.random.default_rng(seed)
    img = rng.uniform(size=(size, size, 3))
    a = np.zeros((size, size))
    a[: size // 2, : size // 2] = 1
    b = np.zeros((size, size))
    b[size // 2:, size // 2 - 1:] = 1
    return concepts.Scene(img, [a, b], ["red square", "blue disc"])


def shrunken_loss_graph(seed=0, spread=0.3):
    """L_total graph of an 8x8 / d_model=8 model at a generic parameter point.

    Parameters are jittered away from initialisation so that no group sits on
    the near-zero gradients produced by the small output-layer init.
    """
    rng = np.random.default_rng(seed)
    scene = tiny_scene(8, seed)
    state = trainer.setup(Model.init(seed, d_model=8, image_size=8), scene, trainer.TrainConfig())
    model = state.model
    # word-scale arrays get word-scale jitter
    small = {"text.table": TABLE_STD, "handles": TABLE_STD}
    model.set_parameters({k: v + rng.normal(0.0, spread * small.get(k, 1.0), v.shape)
                          for k, v in model.parameters().items()})
    masks = [diffusion.downsample_mask(m, 4) for m in scene.masks]
    examples = [
        trainer.Example(scene.image, "a photo of [v1] and [v2]",
                        concepts.mask_union(scene.masks, [0, 1]),
                        {"[v1]": masks[0], "[v2]": masks[1]}),
        trainer.Example(scene.image, "a photo of [v2]", scene.masks[1], {"[v2]": masks[1]}),
    ]
    t = np.array([10, 500])
    eps = rng.standard_normal((2, 3, 8, 8))
    names = list(model.parameters())
    g, nodes, rec, attn, total = trainer.loss_graph(model, examples, t, eps, names, 0.01)
    return g, nodes, total


def fd_step(g, node, rel=1e-4):
    """Finite-difference step proportional to the parameter's RMS magnitude."""
    return rel * float(np.sqrt(np.mean(g.value(node) ** 2)))
