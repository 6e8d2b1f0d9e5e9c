"""Command-line entry point: ``scenedecomp <command> [flags]``.

Every command reads an optional YAML ``--config`` whose top-level keys are
command names; flags override the file.  Outputs land in ``--out`` together
with the merged configuration (``config.yaml``).  Exit codes: 0 success,
2 validation error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import logging
import sys
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

from . import concepts, diffusion, eval as ev, textenc, trainer
from .concepts import SceneError
from .denoiser import attention_map
from .model import Model, load_backbone

log = logging.getLogger("scenedecomp")

COMMANDS = {
    "extract": {"scene": None, "out": None, "seed": 0, "variant": "ours", "train": {},
                "backbone": None, "attn_t": 250},
    "generate": {"checkpoint": None, "prompt": None, "count": 1, "seed": 0, "steps": 50,
                 "out": None},
    "visualize-attn": {"checkpoint": None, "prompt": None, "t": 500, "seed": 0, "steps": 50,
                       "out": None},
    "evaluate": {"checkpoints": [], "scenes": [], "templates": None, "steps": 50, "seed": 0,
                 "out": None, "limit": None},
    "harvest": {"annotations": None, "images": None, "segments": None, "size": 32, "out": None},
    "synth-baseline": {"scene": None, "count": 20, "seed": 0, "out": None},
}

REQUIRED = {
    "extract": ("scene", "out"),
    "generate": ("checkpoint", "prompt", "out"),
    "visualize-attn": ("checkpoint", "prompt", "out"),
    "evaluate": ("out",),
    "harvest": ("annotations", "images", "out"),
    "synth-baseline": ("scene", "out"),
}


class ValidationError(Exception):
    pass


def load_config(command: str, path, overrides: dict) -> dict:
    cfg = dict(COMMANDS[command])
    if path:
        p = Path(path)
        if not p.is_file():
            raise ValidationError(f"config file not found: {p}")
        data = yaml.safe_load(p.read_text()) or {}
        if not isinstance(data, dict):
            raise ValidationError(f"{p}: top level must be a mapping of command sections")
        unknown = set(data) - set(COMMANDS)
        if unknown:
            raise ValidationError(f"{p}: unknown sections {sorted(unknown)}")
        section = data.get(command) or {}
        bad = set(section) - set(cfg)
        if bad:
            raise ValidationError(f"{p}: unknown keys for {command}: {sorted(bad)}")
        cfg.update(section)
    for k, v in overrides.items():
        if v is not None:
            cfg[k] = v
    missing = [k for k in REQUIRED[command] if cfg.get(k) in (None, "")]
    if missing:
        raise ValidationError(f"{command}: missing required setting(s) {missing}")
    return cfg


def echo_config(out: Path, command: str, cfg: dict):
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(yaml.safe_dump({command: cfg}, sort_keys=True))


def _backbone(source, seed: int) -> Model:
    if source in (None, "pretrained"):
        return Model.pretrained()
    if source == "random":
        return Model.init(seed)
    return load_backbone(source)


def _checkpoint(path) -> trainer.Checkpoint:
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"checkpoint not found: {p}")
    return trainer.load_checkpoint(p)


def _train_config(cfg: dict) -> trainer.TrainConfig:
    overrides = dict(cfg.get("train") or {})
    overrides.setdefault("seed", cfg["seed"])
    try:
        return trainer.TrainConfig.variant(cfg["variant"], **overrides)
    except TypeError as e:
        raise ValidationError(f"bad train settings: {e}") from None


def save_map(path, amap: np.ndarray, size: int = 256):
    a = np.round(np.clip(amap, 0.0, 1.0) * 255).astype(np.uint8)
    Image.fromarray(a, mode="L").resize((size, size), Image.NEAREST).save(path)


def scene_attention_maps(model: Model, scene: concepts.Scene, handle_names, t: int, seed: int):
    """Maps of every handle for the scene image noised to ``t``."""
    prompt = concepts.build_prompt(range(len(handle_names)), handle_names)
    tokens = model.tokenize(prompt)
    rng = np.random.default_rng(seed)
    z0 = diffusion.to_model(scene.image).transpose(2, 0, 1)[None]
    zt = diffusion.add_noise(z0, t, rng.standard_normal(z0.shape), model.schedule)
    _, records = model.predict(zt, t, model.encode_tokens(tokens.ids))
    pos = tokens.handle_positions
    return {h: attention_map(records, pos[h], pos.values()) for h in handle_names}


def cmd_extract(cfg: dict) -> dict:
    out = Path(cfg["out"])
    scene = concepts.load_scene(cfg["scene"])
    tc = _train_config(cfg)
    model = _backbone(cfg["backbone"], tc.seed)
    echo_config(out, "extract", cfg)
    rows = []
    ckpt = trainer.train(model, scene, tc,
                         callback=lambda s, ph, l: rows.append((s, ph, l.rec, l.attn, l.total)))
    with (out / "loss_log.csv").open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "phase", "rec", "attn", "total"])
        for s, ph, rec, attn, total in rows:
            w.writerow([s, ph, repr(rec), repr(attn), repr(total)])
    trainer.save_checkpoint(ckpt, out / "checkpoint.npz")
    maps = scene_attention_maps(ckpt.model, scene, ckpt.handle_names, int(cfg["attn_t"]),
                                tc.seed)
    for name, m in maps.items():
        save_map(out / f"attn_{name.strip('[]')}.png", m)
    return {"checkpoint": str(out / "checkpoint.npz"), "steps": len(rows)}


def _prompt_for(ckpt: trainer.Checkpoint, prompt: str) -> textenc.Tokens:
    try:
        return ckpt.model.tokenize(prompt)
    except textenc.HandleError as e:
        raise ValidationError(str(e)) from None


def prompt_hash(prompt: str) -> str:
    return hashlib.sha256(prompt.encode()).hexdigest()[:10]


def cmd_generate(cfg: dict) -> dict:
    ckpt = _checkpoint(cfg["checkpoint"])
    _prompt_for(ckpt, cfg["prompt"])
    out = Path(cfg["out"])
    echo_config(out, "generate", cfg)
    count, seed = int(cfg["count"]), int(cfg["seed"])
    imgs = diffusion.sample(ckpt.model, cfg["prompt"], int(cfg["steps"]), seed, count)
    files = []
    for k, img in enumerate(imgs):
        p = out / f"gen_s{seed}_{prompt_hash(cfg['prompt'])}_{k:03d}.png"
        concepts.write_image(p, img)
        files.append(str(p))
    return {"files": files}


def sample_with_attention(model: Model, prompt: str, t: int, steps: int, seed: int):
    """Run the sampler and keep the cross-attention of the step nearest ``t``."""
    model.schedule.check(t)
    tokens = model.tokenize(prompt)
    text = model.encode_tokens(tokens.ids)
    ts, *_ = diffusion.respaced(model.schedule, steps)
    target = int(ts[np.argmin(np.abs(ts - t))])
    kept = {}

    def eps_fn(x, step_t):
        eps, records = model.predict(x, step_t, text)
        if step_t == target:
            kept["records"] = records
        return eps

    x = diffusion.ancestral_sample(eps_fn, (1, 3, model.image_size, model.image_size),
                                   model.schedule, steps, np.random.default_rng(seed))
    pos = tokens.handle_positions
    maps = {h: attention_map(kept["records"], p, pos.values()) for h, p in pos.items()}
    return diffusion.from_model(x)[0].transpose(1, 2, 0), maps, target


def cmd_visualize_attn(cfg: dict) -> dict:
    ckpt = _checkpoint(cfg["checkpoint"])
    _prompt_for(ckpt, cfg["prompt"])
    t = int(cfg["t"])
    if not 0 <= t < ckpt.model.schedule.T:
        raise ValidationError(f"t={t} outside [0, {ckpt.model.schedule.T})")
    out = Path(cfg["out"])
    echo_config(out, "visualize-attn", cfg)
    img, maps, used = sample_with_attention(ckpt.model, cfg["prompt"], t, int(cfg["steps"]),
                                            int(cfg["seed"]))
    concepts.write_image(out / "sample.png", img)
    files = []
    for name, m in maps.items():
        p = out / f"attn_{name.strip('[]')}_t{used}.png"
        save_map(p, m)
        files.append(str(p))
    return {"files": files, "t": used}


def cmd_evaluate(cfg: dict) -> dict:
    out = Path(cfg["out"])
    scenes = [concepts.load_scene(s) for s in cfg["scenes"]]
    ckpts = {i: _checkpoint(c) for i, c in enumerate(cfg["checkpoints"])}
    if len(ckpts) not in (len(scenes), 1) and scenes:
        raise ValidationError("give one checkpoint per scene (or one for all)")
    if len(ckpts) == 1 and len(scenes) > 1:
        ckpts = {i: ckpts[0] for i in range(len(scenes))}
    templates = tuple(cfg["templates"]) if cfg["templates"] else ev.TEMPLATES
    suite = ev.build_eval_suite(scenes, templates)
    if cfg["limit"] is not None:
        suite = suite[: int(cfg["limit"])]
    echo_config(out, "evaluate", cfg)
    report = ev.evaluate_run(ckpts, suite, scenes, ev.ToyEmbedder(), ev.ColorSegmenter(),
                             int(cfg["steps"]), int(cfg["seed"]))
    report.write(out)
    return report.summary()


def cmd_harvest(cfg: dict) -> dict:
    out = Path(cfg["out"])
    ann = Path(cfg["annotations"])
    if not ann.is_file():
        raise ValidationError(f"annotation file not found: {ann}")
    scenes = ev.harvest_scenes(ann, cfg["images"], cfg["size"], cfg["segments"])
    echo_config(out, "harvest", cfg)
    paths = [str(concepts.save_scene(s, out / f"scene_{i:03d}")) for i, s in enumerate(scenes)]
    (out / "scenes.txt").write_text("".join(p + "\n" for p in paths))
    return {"scenes": len(scenes)}


def cmd_synth_baseline(cfg: dict) -> dict:
    out = Path(cfg["out"])
    scene = concepts.load_scene(cfg["scene"])
    echo_config(out, "synth-baseline", cfg)
    coll = concepts.synthesize_baseline_collection(scene, int(cfg["count"]),
                                                   np.random.default_rng(int(cfg["seed"])))
    lines = []
    for k, s in enumerate(coll):
        fn = f"baseline_{k:04d}.png"
        concepts.write_image(out / fn, s.image)
        lines.append(f"{fn}\t{s.prompt}\n")
    (out / "captions.tsv").write_text("".join(lines))
    return {"images": len(coll)}


HANDLERS = {
    "extract": cmd_extract,
    "generate": cmd_generate,
    "visualize-attn": cmd_visualize_attn,
    "evaluate": cmd_evaluate,
    "harvest": cmd_harvest,
    "synth-baseline": cmd_synth_baseline,
}

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="scenedecomp", description="Textual scene decomposition")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config")
        p.add_argument("--out")
        p.add_argument("--seed", type=int)
        keys = COMMANDS[name]
        if "scene" in keys:
            p.add_argument("--scene")
        if "variant" in keys:
            p.add_argument("--variant", choices=list(trainer.VARIANTS))
        if "prompt" in keys:
            p.add_argument("--prompt")
        if "count" in keys:
            p.add_argument("--count", type=int)
        if "steps" in keys:
            p.add_argument("--steps", type=int)
        if "checkpoint" in keys:
            p.add_argument("--checkpoint")
        if "checkpoints" in keys:
            p.add_argument("--checkpoint", dest="checkpoints", action="append")
            p.add_argument("--scene", dest="scenes", action="append")
        if "t" in keys:
            p.add_argument("--t", type=int)
        if name == "harvest":
            p.add_argument("--annotations")
            p.add_argument("--images")
            p.add_argument("--segments")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    overrides = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    try:
        cfg = load_config(args.command, args.config, overrides)
        result = HANDLERS[args.command](cfg)
    except (ValidationError, SceneError, FileNotFoundError, trainer.ConfigError,
            textenc.TokenizeError, textenc.HandleError, ev.HarvestError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001
        log.exception("command failed")
        print(f"failure: {e}", file=sys.stderr)
        return 3
    print(yaml.safe_dump(result, sort_keys=True).strip())
    return 0


if __name__ == "__main__":
    sys.exit(main())
