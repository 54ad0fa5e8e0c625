"""Command-line entry point: ``spacap <subcommand> [flags]``.

Every subcommand that writes an artifact also writes a ``RunManifest`` JSON
next to it. Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import CheckpointError, no_grad
from .geom3d import relation_maps
from .inference import eval_rng, evaluate_model, predict
from .model import DECODER_KINDS, POS_ENC_KINDS, ModelConfig
from .model.config import ABLATION_PRESETS
from .scenegen import DatasetError, Record, Scene, SceneConfig, Vocabulary, make_record, read_dataset, write_dataset
from .train import TrainConfig, fit, load_model, model_config_for, prepare_batch

THREADS_ENV = "SPACAP_THREADS"


class UsageError(Exception):
    """Bad flag values detected after parsing; reported with exit code 2."""


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config: dict
    seed: int
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    version: str = __version__
    duration_s: float = 0.0

    def write(self, path) -> None:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        Path(path).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def manifest_path(out: Path) -> Path:
    return out / "manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")


def load_config_file(path: str | None) -> dict:
    """Flat JSON whose keys are SceneConfig, ModelConfig or TrainConfig field names."""
    if path is None:
        return {}
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(d, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    known = set()
    for cls in (SceneConfig, ModelConfig, TrainConfig):
        known |= {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    return d


def _subset(cls, d: dict) -> dict:
    names = {f.name for f in fields(cls)}
    return {k: v for k, v in d.items() if k in names}


def resolve_configs(args) -> tuple[SceneConfig, ModelConfig, TrainConfig]:
    """Defaults, then the config file, then the ablation preset, then explicit flags."""
    raw = load_config_file(getattr(args, "config", None))
    try:
        scene = SceneConfig.from_json(_subset(SceneConfig, raw))
        model = ModelConfig(**_subset(ModelConfig, raw)).with_preset(getattr(args, "ablation", None))
        train = TrainConfig(**_subset(TrainConfig, raw))
        over = {}
        if getattr(args, "pos_enc", None):
            over["pos_enc_kind"] = args.pos_enc
        if getattr(args, "decoder", None):
            over["decoder_kind"] = f"{args.decoder}_guide"
        if getattr(args, "m", None) is not None:
            over["m_proposals"] = args.m
        model = replace(model, **over)
        t_over = {}
        if getattr(args, "seed", None) is not None:
            t_over["seed"] = args.seed
        if getattr(args, "noise_sigma", None) is not None:
            t_over["noise_sigma"] = args.noise_sigma
        for name in ("epochs", "eval_interval", "batch_size"):
            if getattr(args, name, None) is not None:
                t_over[name] = getattr(args, name)
        train = replace(train, **t_over)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    return scene, model, train


def worker_count() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise UsageError(f"{THREADS_ENV} must be an integer, got {raw!r}") from exc
    return max(1, min(n, os.cpu_count() or 1))


def _make_one(job):
    seed, idx, scene_cfg = job
    return make_record([seed, idx], scene_cfg, scene_id=f"scene{idx:05d}")


def generate_records(seed: int, n: int, scene_cfg: SceneConfig, workers: int = 1) -> list[Record]:
    """Scene k depends only on (seed, k), so the worker count never changes the output."""
    jobs = [(seed, k, scene_cfg) for k in range(n)]
    if workers <= 1 or n < 2:
        return [_make_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_make_one, jobs, chunksize=max(1, n // (4 * workers))))


def _read_scene(path: str) -> Scene:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"cannot read scene {path}: {exc}") from exc
    if "scene" in d:
        d = d["scene"]
    try:
        return Scene.from_json(d)
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"{path}: malformed scene ({exc})") from exc


def _dump(obj, out: str | None) -> None:
    text = json.dumps(obj, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)


# subcommands -------------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    if args.scenes <= 0:
        raise UsageError("--scenes must be positive")
    scene_cfg, _, _ = resolve_configs(args)
    seed = 0 if args.seed is None else args.seed
    t0 = time.perf_counter()
    records = generate_records(seed, args.scenes, scene_cfg, worker_count())
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(out, records)
    RunManifest("gen-data", args.argv, {"scene": scene_cfg.to_json(), "scenes": args.scenes}, seed,
                outputs={"dataset": str(out)}, duration_s=time.perf_counter() - t0).write(manifest_path(out))
    return 0


def cmd_train(args) -> int:
    scene_cfg, model_cfg, train_cfg = resolve_configs(args)
    train = read_dataset(args.data)
    val = read_dataset(args.val) if args.val else train
    vocab = Vocabulary.build(scene_cfg.classes, scene_cfg.colors)
    model_cfg = model_config_for(model_cfg, vocab, scene_cfg)
    t0 = time.perf_counter()
    ckpt, history = fit(train, val, train_cfg, model_cfg, args.out, scene_cfg, vocab)
    out = Path(args.out)
    config = {"scene": scene_cfg.to_json(), "model": model_cfg.to_json(), "train": train_cfg.to_json()}
    RunManifest("train", args.argv, config, train_cfg.seed,
                inputs={"data": args.data, "val": args.val},
                outputs={"checkpoint": str(ckpt), "metrics": str(out / "metrics.jsonl")},
                duration_s=time.perf_counter() - t0).write(out / "manifest.json")
    return 0


def _eval_settings(args, meta: dict):
    tc = TrainConfig.from_json(meta.get("train_config", {}))
    sigma = tc.noise_sigma if args.noise_sigma is None else args.noise_sigma
    seed = tc.eval_seed if args.seed is None else args.seed
    return tc, sigma, seed


def cmd_eval(args) -> int:
    net, meta = load_model(args.checkpoint)
    records = read_dataset(args.data)
    tc, sigma, seed = _eval_settings(args, meta)
    scene_cfg = SceneConfig.from_json(meta.get("scene_config", {}))
    t0 = time.perf_counter()
    report, _ = evaluate_model(net, records, sigma, seed, Vocabulary.build(scene_cfg.classes, scene_cfg.colors), scene_cfg,
                               nms_iou=tc.nms_iou)
    _dump(report.to_json(), args.out)
    if args.out:
        RunManifest("eval", args.argv, {"noise_sigma": sigma, "nms_iou": tc.nms_iou,
                                        "model": net.cfg.to_json()}, seed,
                    inputs={"checkpoint": args.checkpoint, "data": args.data},
                    outputs={"report": args.out},
                    duration_s=time.perf_counter() - t0).write(manifest_path(Path(args.out)))
    return 0


def _predict_scene(args, want_attention: bool):
    net, meta = load_model(args.checkpoint)
    scene = _read_scene(args.scene)
    tc, sigma, seed = _eval_settings(args, meta)
    scene_cfg = SceneConfig.from_json(meta.get("scene_config", {}))
    vocab = Vocabulary.build(scene_cfg.classes, scene_cfg.colors)
    preds, batches = predict(net, [Record(scene, [])], sigma, seed, vocab, scene_cfg, tc.nms_iou,
                             return_attention=want_attention)
    return net, scene, vocab, preds[0], batches[0]


def cmd_caption(args) -> int:
    _, _, _, pred, _ = _predict_scene(args, False)
    out = [{"box": {"center": list(b.center), "size": list(b.size)}, "score": s, "class": c,
            "caption": " ".join(words), "slot": int(k)}
           for b, s, c, words, k in zip(pred.boxes, pred.scores, pred.classes, pred.captions, pred.slots)]
    _dump({"scene_id": _read_scene(args.scene).scene_id, "objects": out}, args.out)
    return 0


def cmd_relations(args) -> int:
    scene = _read_scene(args.scene)
    _dump(relation_maps(scene.objects).to_json(), args.out)
    return 0


def cmd_attn_dump(args) -> int:
    net, meta = load_model(args.checkpoint)
    if not net.cfg.use_encoder:
        raise ValueError("checkpoint has no encoder; nothing to dump")
    m = net.cfg.m_proposals
    if not 0 <= args.target < m:
        raise ValueError(f"target index {args.target} out of range for M={m}")
    scene = _read_scene(args.scene)
    tc, sigma, seed = _eval_settings(args, meta)
    scene_cfg = SceneConfig.from_json(meta.get("scene_config", {}))
    vocab = Vocabulary.build(scene_cfg.classes, scene_cfg.colors)
    doc = attention_dump(net, scene, args.target, sigma, seed, vocab, scene_cfg)
    _dump(doc, args.out)
    return 0


def attention_dump(net, scene: Scene, target: int, noise_sigma: float, seed: int,
                   vocab: Vocabulary, scene_cfg: SceneConfig | None = None) -> dict:
    """Last-block encoder attention over all proposals plus the target's word-to-target attention."""
    with no_grad():
        net.eval()
        batch = prepare_batch([Record(scene, [])], [eval_rng(seed, scene.scene_id)], net.cfg.m_proposals,
                              noise_sigma, vocab, False, scene_cfg)
        _, enc = net.forward_scene(batch.raw, batch.centers, batch.boxes)
        ids, attn = net.caption(enc, np.array([target]), vocab.sos_id, vocab.eos_id, return_attention=True)
    props = batch.proposals[0]
    return {
        "target_index": target,
        "caption": vocab.decode(ids[0], strip=False),
        "encoder_attn": enc.last_attention.data[0].tolist(),
        "decoder_attn": attn[0],
        "proposals": [{"center": list(b.center), "size": list(b.size), "gt": int(g)}
                      for b, g in zip(props.boxes, props.gt_assignment)],
    }


# parser -------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spacap", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"spacap {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def common(p, seed=True, config=False, out_required=False):
        if seed:
            p.add_argument("--seed", type=int, default=None)
        if config:
            p.add_argument("--config", default=None, help="JSON file of config field overrides")
        p.add_argument("--out", required=out_required, default=None)

    p = sub.add_parser("gen-data", help="generate a synthetic captioned dataset (JSONL)")
    common(p, config=True, out_required=True)
    p.add_argument("--scenes", type=int, default=100)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model; writes best.ckpt and metrics.jsonl to --out")
    common(p, config=True, out_required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--val", default=None, help="validation JSONL (defaults to --data)")
    p.add_argument("--ablation", choices=sorted(ABLATION_PRESETS), default=None)
    p.add_argument("--pos-enc", choices=POS_ENC_KINDS, default=None)
    p.add_argument("--decoder", choices=[k.split("_")[0] for k in DECODER_KINDS], default=None)
    p.add_argument("--m", type=int, default=None, help="proposals per scene")
    p.add_argument("--noise-sigma", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--eval-interval", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--noise-sigma", type=float, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("caption", help="detect and describe a single scene")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--noise-sigma", type=float, default=None)
    p.set_defaults(func=cmd_caption)

    p = sub.add_parser("relations", help="print the relation map of a scene")
    common(p, seed=False)
    p.add_argument("--scene", required=True)
    p.set_defaults(func=cmd_relations)

    p = sub.add_parser("attn-dump", help="export last-block attention for one target proposal")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--target", type=int, required=True)
    p.add_argument("--noise-sigma", type=float, default=None)
    p.set_defaults(func=cmd_attn_dump)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    args.argv = argv
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"spacap: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, DatasetError, CheckpointError, KeyError) as exc:
        print(f"spacap: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
