"""The text-to-image model: vocabulary, text encoder, handles, denoiser, schedule."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from . import denoiser, textenc
from .diffusion import NoiseSchedule
from .gradcore import Graph

BACKBONE_FILE = "backbone.npz"


@dataclass
class Model:
    vocab: textenc.Vocabulary
    text: textenc.TextEncoderParams
    unet: dict[str, np.ndarray]
    handles: textenc.HandleTable = field(default_factory=textenc.HandleTable)
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)
    image_size: int = denoiser.IMAGE_SIZE

    @classmethod
    def init(cls, seed: int = 0, d_model: int = denoiser.D_MODEL, d_text: int = textenc.D_TEXT,
             image_size: int = denoiser.IMAGE_SIZE, vocab: textenc.Vocabulary | None = None,
             schedule: NoiseSchedule | None = None) -> "Model":
        rng = np.random.default_rng(seed)
        vocab = vocab or textenc.Vocabulary()
        text = textenc.TextEncoderParams.init(vocab, rng, d_text)
        unet = denoiser.init_params(rng, d_model, d_text)
        return cls(vocab, text, unet, textenc.HandleTable(embeddings=np.zeros((0, d_text))),
                   schedule or NoiseSchedule(), image_size)

    @classmethod
    def pretrained(cls) -> "Model":
        """The shipped miniature backbone (see :mod:`scenedecomp.pretrain`)."""
        ref = resources.files("scenedecomp") / "data" / BACKBONE_FILE
        with resources.as_file(ref) as path:
            return load_backbone(path)

    # -- parameters ------------------------------------------------------
    def parameters(self) -> dict[str, np.ndarray]:
        """All arrays by name; ``handles`` is the handle embedding matrix."""
        p = dict(self.text.arrays())
        p.update(self.unet)
        p["handles"] = self.handles.embeddings
        return p

    def set_parameters(self, values: dict[str, np.ndarray]):
        for name, arr in values.items():
            arr = np.asarray(arr, dtype=np.float64)
            if name == "handles":
                self.handles.embeddings = arr
            elif name.startswith("text."):
                setattr(self.text, name[5:], arr)
            elif name in self.unet:
                self.unet[name] = arr
            else:
                raise KeyError(name)

    def copy(self) -> "Model":
        return Model(self.vocab, textenc.TextEncoderParams(**{k: v.copy() for k, v in vars(self.text).items()}),
                     {k: v.copy() for k, v in self.unet.items()}, self.handles.copy(),
                     self.schedule, self.image_size)

    # -- graph construction ---------------------------------------------
    def bind(self, g: Graph, trainable=()) -> dict[str, int]:
        params = self.parameters()
        if not len(self.handles):
            params.pop("handles")
        return denoiser.bind(g, params, set(trainable))

    def encode_graph(self, g: Graph, nodes, token_ids) -> int:
        return textenc.encode(g, token_ids, nodes, len(self.vocab), self.handles)

    # -- inference helpers ---------------------------------------------------
    def tokenize(self, prompt: str) -> textenc.Tokens:
        return textenc.tokenize(prompt, self.vocab, self.handles)

    def encode_tokens(self, token_ids) -> np.ndarray:
        g = Graph()
        nodes = self.bind(g)
        return g.value(self.encode_graph(g, nodes, np.atleast_2d(token_ids)))

    def predict(self, x: np.ndarray, t, text: np.ndarray):
        """``x`` is ``(N, 3, H, W)`` in model space, ``text`` ``(N, L, d)``."""
        g = Graph()
        nodes = denoiser.bind(g, self.unet, ())
        eps, records = denoiser.forward(g, nodes, g.const(x), t, g.const(text), self.schedule)
        return g.value(eps), records


def save_backbone(model: Model, path):
    arrays = {k: np.ascontiguousarray(v, dtype="<f8") for k, v in model.parameters().items()
              if k != "handles"}
    meta = {
        "words": list(model.vocab.words),
        "schedule": [model.schedule.T, model.schedule.beta_start, model.schedule.beta_end],
        "image_size": model.image_size,
    }
    np.savez(path, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_backbone(path) -> Model:
    with np.load(path) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        arrays = {k: z[k].astype(np.float64) for k in z.files if k != "__meta__"}
    vocab = textenc.Vocabulary(meta["words"])
    text = textenc.TextEncoderParams(**{k[5:]: arrays.pop(k) for k in list(arrays) if k.startswith("text.")})
    T, b0, b1 = meta["schedule"]
    return Model(vocab, text, arrays, textenc.HandleTable(embeddings=np.zeros((0, text.table.shape[1]))),
                 NoiseSchedule(int(T), b0, b1), int(meta["image_size"]))
