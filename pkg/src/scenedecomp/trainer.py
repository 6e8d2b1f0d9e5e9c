"""Two-phase handle extraction, Adam, method variants and checkpoints."""
from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import concepts, denoiser, diffusion, textenc
from .diffusion import LossBreakdown
from .gradcore import Graph, backward
from .model import Model

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
METHODS = ("ours", "TI-m", "DB-m", "CD-m")

VARIANTS = {
    "ours": {},
    "no-phases": {"use_two_phases": False},
    "no-mask-loss": {"use_masked_loss": False},
    "no-attn-loss": {"use_attn_loss": False},
    "no-union": {"use_union_sampling": False},
    "ti-m": {"method": "TI-m"},
    "db-m": {"method": "DB-m"},
    "cd-m": {"method": "CD-m"},
}


class ConfigError(ValueError):
    pass


@dataclass
class PhaseConfig:
    lr: float
    steps: int


@dataclass
class TrainConfig:
    phase1: PhaseConfig = field(default_factory=lambda: PhaseConfig(5e-4, 400))
    phase2: PhaseConfig = field(default_factory=lambda: PhaseConfig(2e-6, 400))
    beta1: float = 0.9
    beta2: float = 0.99
    weight_decay: float = 1e-8
    adam_eps: float = 1e-8
    lambda_attn: float = diffusion.LAMBDA_ATTN
    batch_size: int = 4
    use_two_phases: bool = True
    use_masked_loss: bool = True
    use_attn_loss: bool = True
    use_union_sampling: bool = True
    method: str = "ours"
    seed: int = 0
    initializer_word: str = "object"
    background_handle: bool = False
    rec_normalize: str = "all"
    baseline_collection_size: int = 64

    def __post_init__(self):
        if isinstance(self.phase1, dict):
            self.phase1 = PhaseConfig(**self.phase1)
        if isinstance(self.phase2, dict):
            self.phase2 = PhaseConfig(**self.phase2)
        for ph in (self.phase1, self.phase2):
            if ph.lr <= 0 or ph.steps < 0:
                raise ConfigError("learning rates must be > 0 and step counts >= 0")
        if self.lambda_attn < 0:
            raise ConfigError("lambda_attn must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")

    @classmethod
    def variant(cls, name: str, **overrides) -> "TrainConfig":
        if name not in VARIANTS:
            raise ConfigError(f"unknown variant {name!r}; choose from {', '.join(VARIANTS)}")
        return cls(**{**VARIANTS[name], **overrides})

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# -- trainable groups --------------------------------------------------------
def text_param_names() -> list[str]:
    return ["text.table", "text.w1", "text.b1", "text.w2", "text.b2"]


def trainable_names(model: Model, config: TrainConfig, phase: int) -> list[str]:
    unet = list(model.unet)
    everything = ["handles"] + text_param_names() + unet
    if config.method == "TI-m":
        names = ["handles"]
    elif config.method == "DB-m":
        names = everything
    elif config.method == "CD-m":
        names = ["handles"] + [k for k in unet if k in denoiser.CROSS_ATTN_KEYS]
    else:
        names = ["handles"] if phase == 1 else everything
    if not len(model.handles):
        names = [n for n in names if n != "handles"]
    if not names:
        raise ConfigError("configuration leaves no trainable parameters")
    return names


# -- Adam --------------------------------------------------------------------
def adam_update(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, lr: float,
                beta1: float, beta2: float, weight_decay: float, step: int, eps: float = 1e-8):
    """One bias-corrected Adam step with decoupled weight decay.

    Returns ``(param, m, v)`` as new arrays.
    """
    if param.shape != grad.shape or m.shape != param.shape or v.shape != param.shape:
        raise ValueError(f"adam_update: shape mismatch {param.shape} vs {grad.shape}")
    if step < 1:
        raise ValueError("step counts from 1")
    param = param - lr * weight_decay * param
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1 ** step)
    vhat = v / (1.0 - beta2 ** step)
    return param - lr * mhat / (np.sqrt(vhat) + eps), m, v


class Adam:
    def __init__(self, names, lr, beta1=0.9, beta2=0.99, weight_decay=1e-8, eps=1e-8):
        self.names = list(names)
        self.lr, self.beta1, self.beta2 = lr, beta1, beta2
        self.weight_decay, self.eps = weight_decay, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def step(self, model: Model, grads: dict[str, np.ndarray]):
        self.step_count += 1
        params = model.parameters()
        new = {}
        for name in self.names:
            p = params[name]
            m = self.m.get(name, np.zeros_like(p))
            v = self.v.get(name, np.zeros_like(p))
            new[name], self.m[name], self.v[name] = adam_update(
                p, grads[name], m, v, self.lr, self.beta1, self.beta2,
                self.weight_decay, self.step_count, self.eps)
        model.set_parameters(new)


# -- batches -----------------------------------------------------------------
@dataclass
class Example:
    """One batch element: clean image, prompt, loss mask and attention targets."""

    image: np.ndarray            # (H, W, 3) in [0, 1]
    prompt: str
    loss_mask: np.ndarray        # (H, W)
    # handle name (or raw token position) -> (res, res) target map
    attn_targets: dict = field(default_factory=dict)


@dataclass
class State:
    model: Model
    scene: concepts.Scene
    config: TrainConfig
    handle_names: list[str]
    masks: list[np.ndarray]      # one per handle, incl. background
    optimizer: Adam | None = None
    phase: int = 1
    step: int = 0
    collection: list | None = None
    cycle: int = 0


def setup(model: Model, scene: concepts.Scene, config: TrainConfig) -> State:
    """Copy ``model`` and add one handle per concept (plus the background handle)."""
    model = model.copy()
    model.vocab = textenc.Vocabulary(model.vocab.words)
    model.handles = textenc.HandleTable(embeddings=np.zeros((0, model.text.table.shape[1])))
    names, masks = [], []
    for i, m in enumerate(scene.masks):
        name = f"[v{i + 1}]"
        textenc.add_handle(model.handles, name, config.initializer_word, model.vocab, model.text)
        names.append(name)
        masks.append(np.asarray(m, dtype=np.float64))
    if config.background_handle:
        textenc.add_handle(model.handles, "[vbg]", "background", model.vocab, model.text,
                           background=True)
        names.append("[vbg]")
        masks.append(concepts.background_mask(scene))
    state = State(model, scene, config, names, masks)
    if config.method != "ours":
        rng = np.random.default_rng([config.seed, 7])
        bg_scene = concepts.Scene(scene.image, masks, names)
        state.collection = concepts.synthesize_baseline_collection(
            bg_scene, config.baseline_collection_size, rng, handle_names=names)
    return state


def draw_example(state: State, rng: np.random.Generator) -> Example:
    cfg = state.config
    n = len(state.handle_names)
    res = state.model.image_size // 2
    if state.collection is not None:
        img, prompt, subset = state.collection[int(rng.integers(len(state.collection)))]
        union = concepts.mask_union(state.masks, subset)
        # baselines see a background-free image, so the whole frame is supervised
        return Example(img, prompt, np.ones_like(union))
    if cfg.use_union_sampling:
        subset = concepts.union_sample(rng, n)
    else:
        subset = [state.cycle % n]
        state.cycle += 1
    prompt = concepts.build_prompt(subset, state.handle_names)
    union = concepts.mask_union(state.masks, subset)
    loss_mask = union if cfg.use_masked_loss else np.ones_like(union)
    targets = {state.handle_names[i]: diffusion.downsample_mask(state.masks[i], res) for i in subset}
    return Example(state.scene.image, prompt, loss_mask, targets)


def loss_graph(model: Model, examples: list[Example], t: np.ndarray, eps: np.ndarray,
               trainable, lambda_attn: float, use_attn_loss: bool = True,
               rec_normalize: str = "all"):
    """Build the batch loss.  Returns ``(graph, nodes, rec, attn, total)`` node ids."""
    g = Graph()
    nodes = model.bind(g, trainable)
    toks = [model.tokenize(ex.prompt) for ex in examples]
    ids = np.stack([tk.ids for tk in toks])
    text = model.encode_graph(g, nodes, ids)
    z0 = np.stack([diffusion.to_model(ex.image).transpose(2, 0, 1) for ex in examples])
    zt = diffusion.add_noise(z0, t, eps, model.schedule)
    eps_hat, records = denoiser.forward(g, nodes, g.const(zt), t, text, model.schedule)
    mask = np.stack([ex.loss_mask for ex in examples])[:, None]
    rec = diffusion.rec_loss_node(g, g.const(eps), eps_hat, g.const(mask), rec_normalize)

    k_max = max((len(ex.attn_targets) for ex in examples), default=0)
    if k_max:
        n, length = ids.shape
        q = records[0].probs.shape[1]
        sel = np.zeros((n, length, k_max))
        tgt = np.zeros((n, q, k_max))
        valid = np.zeros((n, k_max))
        for b, (ex, tk) in enumerate(zip(examples, toks)):
            for j, (key, target) in enumerate(ex.attn_targets.items()):
                pos = tk.handle_positions[key] if isinstance(key, str) else key
                sel[b, pos, j] = 1.0
                tgt[b, :, j] = target.ravel()
                valid[b, j] = 1.0
        maps = denoiser.attention_maps_node(g, records, sel)
        attn = diffusion.attn_loss_node(g, maps, tgt, valid)
    else:
        attn = g.const(0.0)
    lam = lambda_attn if use_attn_loss else 0.0
    total = g.add(rec, g.scale(attn, lam))
    return g, nodes, rec, attn, total


def training_step(state: State, rng: np.random.Generator) -> LossBreakdown:
    """Draw a batch, evaluate the total loss and apply one Adam update."""
    cfg = state.config
    model = state.model
    examples = [draw_example(state, rng) for _ in range(cfg.batch_size)]
    t = rng.integers(0, model.schedule.T, size=cfg.batch_size)
    size = model.image_size
    eps = rng.standard_normal((cfg.batch_size, 3, size, size))
    names = state.optimizer.names
    g, nodes, rec, attn, total = loss_graph(
        model, examples, t, eps, names, cfg.lambda_attn,
        cfg.use_attn_loss and state.collection is None, cfg.rec_normalize)
    grads = backward(g, total)
    state.optimizer.step(model, {name: grads[nodes[name]] for name in names})
    state.step += 1
    return LossBreakdown(float(g.value(rec)), float(g.value(attn)), float(g.value(total)))


def start_phase(state: State, phase: int):
    cfg = state.config
    ph = cfg.phase1 if phase == 1 else cfg.phase2
    state.phase = phase
    # a fresh optimiser per phase: moments are not carried across
    state.optimizer = Adam(trainable_names(state.model, cfg, phase), ph.lr, cfg.beta1,
                           cfg.beta2, cfg.weight_decay, cfg.adam_eps)


def phase_plan(config: TrainConfig) -> list[tuple[int, int]]:
    """``(phase, steps)`` pairs actually run."""
    if config.use_two_phases:
        return [(1, config.phase1.steps), (2, config.phase2.steps)]
    return [(2, config.phase1.steps + config.phase2.steps)]


@dataclass
class Checkpoint:
    model: Model
    config: TrainConfig
    handle_names: list[str]
    steps: dict[str, int]
    version: int = CHECKPOINT_VERSION


def train(model: Model, scene: concepts.Scene, config: TrainConfig, callback=None) -> Checkpoint:
    """Run the configured phases.  ``callback(step, phase, LossBreakdown)`` sees every step."""
    state = setup(model, scene, config)
    rng = np.random.default_rng(config.seed)
    steps = {"phase1": 0, "phase2": 0}
    for phase, n_steps in phase_plan(config):
        start_phase(state, phase)
        for _ in range(n_steps):
            losses = training_step(state, rng)
            steps[f"phase{phase}"] += 1
            if callback is not None:
                callback(state.step, phase, losses)
            if state.step % 100 == 0:
                log.info("step %d phase %d rec %.5f attn %.5f", state.step, phase,
                         losses.rec, losses.attn)
    return Checkpoint(state.model, config, state.handle_names, steps)


# -- checkpoint I/O ---------------------------------------------------------
def _meta(ckpt: Checkpoint) -> dict:
    m = ckpt.model
    return {
        "version": ckpt.version,
        "words": list(m.vocab.words),
        "handles": [{"name": h.name, "token_id": h.token_id, "background": h.background}
                    for h in m.handles.handles],
        "schedule": {"T": m.schedule.T, "beta_start": m.schedule.beta_start,
                     "beta_end": m.schedule.beta_end},
        "image_size": m.image_size,
        "config": ckpt.config.to_dict(),
        "handle_names": ckpt.handle_names,
        "steps": ckpt.steps,
    }


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    arrays = {k: np.ascontiguousarray(v, dtype="<f8")
              for k, v in sorted(ckpt.model.parameters().items())}
    meta = json.dumps(_meta(ckpt), sort_keys=True).encode()
    buf = io.BytesIO()
    np.savez(buf, __meta__=np.frombuffer(meta, dtype=np.uint8), **arrays)
    return buf.getvalue()


def save_checkpoint(ckpt: Checkpoint, path):
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    with np.load(path) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        arrays = {k: z[k].astype(np.float64) for k in z.files if k != "__meta__"}
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
    vocab = textenc.Vocabulary(meta["words"])
    vocab.next_free_id = max([len(vocab)] + [h["token_id"] + 1 for h in meta["handles"]])
    text = textenc.TextEncoderParams(**{k[5:]: arrays.pop(k) for k in text_param_names()})
    handles = textenc.HandleTable(
        [textenc.Handle(h["name"], h["token_id"], h["background"]) for h in meta["handles"]],
        arrays.pop("handles").reshape(len(meta["handles"]), text.table.shape[1]))
    sched = diffusion.NoiseSchedule(**meta["schedule"])
    model = Model(vocab, text, arrays, handles, sched, meta["image_size"])
    return Checkpoint(model, TrainConfig(**meta["config"]), meta["handle_names"], meta["steps"],
                      meta["version"])


def digest(ckpt: Checkpoint) -> str:
    return hashlib.sha256(checkpoint_bytes(ckpt)).hexdigest()


def group_bytes(model: Model, names) -> bytes:
    """Serialized bytes of the named parameter groups (used by freeze checks)."""
    params = model.parameters()
    return b"".join(np.ascontiguousarray(params[n], dtype="<f8").tobytes() for n in sorted(names))
