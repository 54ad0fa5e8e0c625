"""Loss assembly, batch preparation and the training loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import Adam, Tensor, cross_entropy_logits, load_checkpoint, save_checkpoint, smooth_l1
from .geom3d import DEFAULT_PARAMS, RelationParams, pairwise_iou, relation_maps
from .model import CaptionNet, ModelConfig
from .model.network import Detections
from .scenegen import (ProposalBatch, Record, Scene, SceneConfig, Vocabulary, augment,
                       raw_feature_dim, render_captions, simulate_proposals)

log = logging.getLogger(__name__)

OBJECTNESS_IOU = 0.25


@dataclass(frozen=True)
class LossWeights:
    delta: float = 10.0
    zeta: float = 0.1


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    epochs: int = 50
    eval_interval: int = 2000
    lr: float = 1e-3
    weight_decay: float = 1e-5
    seed: int = 0
    noise_sigma: float = 0.05
    augment: bool = True
    delta: float = 10.0
    zeta: float = 0.1
    eval_seed: int = 0
    nms_iou: float = 0.5

    def __post_init__(self):
        for name in ("batch_size", "epochs", "eval_interval"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0 or self.weight_decay < 0 or self.noise_sigma < 0:
            raise ValueError("lr must be positive; weight_decay and noise_sigma non-negative")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.delta, self.zeta)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# losses --------------------------------------------------------------------------

def relation_loss(relation_logits: Tensor, labels: np.ndarray, supervise_mask: np.ndarray) -> Tensor:
    """Sum over x/y/z of the 3-way cross-entropy on supervised ordered pairs.

    ``labels`` hold -1/0/+1 per axis in the last dimension; they map to class
    indices 0/1/2.
    """
    labels = np.asarray(labels)
    keep = np.asarray(supervise_mask, bool).reshape(-1)
    if not keep.any():
        raise ValueError("relation_loss: no supervised pairs")
    n = keep.size
    total = None
    for k in range(3):
        lg = relation_logits[..., 3 * k:3 * k + 3].reshape(n, 3)
        ce = cross_entropy_logits(lg, labels[..., k].reshape(-1) + 1, ~keep)
        total = ce if total is None else total + ce
    return total


def description_loss(logits: Tensor, targets: np.ndarray, pad_mask: np.ndarray) -> Tensor:
    """Mean next-word cross-entropy over non-pad positions."""
    v = logits.shape[-1]
    return cross_entropy_logits(logits.reshape(-1, v), np.asarray(targets).reshape(-1),
                                np.asarray(pad_mask).reshape(-1))


@dataclass
class DetectionTargets:
    objectness: np.ndarray   # (..., M) 0/1
    classes: np.ndarray      # (..., M)
    residuals: np.ndarray    # (..., M, 6)
    positive: np.ndarray     # (..., M) bool


def detection_targets(props: ProposalBatch, scene: Scene) -> DetectionTargets:
    gt = [scene.objects[a] for a in props.gt_assignment]
    ious = pairwise_iou(props.boxes, scene.objects)[np.arange(props.m), props.gt_assignment]
    positive = ious > OBJECTNESS_IOU
    target_boxes = np.array([list(g.center) + list(g.size) for g in gt])
    return DetectionTargets(positive.astype(np.int64), np.array([g.class_id for g in gt]),
                            target_boxes - props.box_array(), positive)


def detection_loss(det: Detections, targets: DetectionTargets) -> Tensor:
    """Objectness CE + smooth-L1 box residuals + class CE, equally weighted.

    Box and class terms use positive proposals only.
    """
    obj = det.objectness.reshape(-1, 2)
    loss = cross_entropy_logits(obj, targets.objectness.reshape(-1))
    pos = targets.positive.reshape(-1)
    if pos.any():
        k = det.class_logits.shape[-1]
        idx = np.nonzero(pos)[0]
        res = det.box_residuals.reshape(-1, 6)[idx]
        loss = loss + smooth_l1(res, targets.residuals.reshape(-1, 6)[idx]).mean()
        loss = loss + cross_entropy_logits(det.class_logits.reshape(-1, k)[idx],
                                           targets.classes.reshape(-1)[idx])
    return loss


def total_loss(det: Tensor, des: Tensor, rel: Tensor | None, w: LossWeights = LossWeights(),
               use_t2t: bool = True) -> Tensor:
    for name, t in (("detection", det), ("description", des), ("relation", rel)):
        if t is not None and not np.isfinite(t.data).all():
            raise ValueError(f"{name} loss is not finite")
    out = det * w.delta + des
    if use_t2t:
        if rel is None:
            raise ValueError("relation loss missing while relation supervision is on")
        out = out + rel * w.zeta
    return out


# batches ----------------------------------------------------------------------------

@dataclass
class Batch:
    records: list[Record]
    scenes: list[Scene]
    captions: list            # per scene, list[CaptionRecord]
    proposals: list[ProposalBatch]
    raw: np.ndarray
    centers: np.ndarray
    boxes: np.ndarray
    rel_labels: np.ndarray    # (B, M, M, 3)
    rel_mask: np.ndarray      # (B, M, M)
    det_targets: DetectionTargets
    cap_index: np.ndarray     # (T,) flat proposal index
    cap_in: np.ndarray        # (T, L)
    cap_out: np.ndarray       # (T, L)
    cap_pad: np.ndarray       # (T, L) True where padded


def token_relation_labels(props: ProposalBatch, scene: Scene, p: RelationParams = DEFAULT_PARAMS) -> np.ndarray:
    """Token-pair labels from the relations of each token's nearest GT object."""
    obj = relation_maps(scene.objects, p).labels
    a = props.gt_assignment
    return obj[a[:, None], a[None, :]]


def prepare_batch(records: Sequence[Record], rngs: Sequence[np.random.Generator], m: int,
                  noise_sigma: float, vocab: Vocabulary, do_augment: bool,
                  scene_cfg: SceneConfig | None = None, p: RelationParams = DEFAULT_PARAMS) -> Batch:
    scenes, caps, props = [], [], []
    for rec, rng in zip(records, rngs):
        if do_augment:
            scene = augment(rec.scene, rng)
            captions = render_captions(scene, p, vocab, scene_cfg)
        else:
            scene = rec.scene
            captions = rec.captions
        scenes.append(scene)
        caps.append(captions)
        props.append(simulate_proposals(scene, noise_sigma, m, rng, scene_cfg))
    b = len(scenes)
    rel = np.stack([token_relation_labels(pr, sc, p) for pr, sc in zip(props, scenes)])
    tg = [detection_targets(pr, sc) for pr, sc in zip(props, scenes)]
    det_targets = DetectionTargets(np.stack([t.objectness for t in tg]), np.stack([t.classes for t in tg]),
                                   np.stack([t.residuals for t in tg]), np.stack([t.positive for t in tg]))
    # every token is matched to its nearest GT object, so all ordered pairs but i == j are supervised
    rel_mask = np.broadcast_to(~np.eye(m, dtype=bool), (b, m, m)).copy()
    cap_index, seqs = [], []
    for s, (pr, captions, t) in enumerate(zip(props, caps, tg)):
        by_obj = {c.object_index: c.tokens for c in captions}
        for slot in range(m):
            obj = int(pr.gt_assignment[slot])
            if t.positive[slot] and obj in by_obj:
                cap_index.append(s * m + slot)
                seqs.append(by_obj[obj])
    length = max((len(q) for q in seqs), default=2) - 1
    t_n = len(seqs)
    cap_in = np.full((t_n, length), vocab.pad_id, dtype=np.int64)
    cap_out = np.full((t_n, length), vocab.pad_id, dtype=np.int64)
    for r, q in enumerate(seqs):
        cap_in[r, :len(q) - 1] = q[:-1]
        cap_out[r, :len(q) - 1] = q[1:]
    return Batch(list(records), scenes, caps, props,
                 np.stack([pr.raw for pr in props]),
                 np.stack([pr.centers for pr in props]),
                 np.stack([pr.box_array() for pr in props]),
                 rel, rel_mask, det_targets, np.array(cap_index, dtype=np.int64),
                 cap_in, cap_out, cap_out == vocab.pad_id)


def compute_losses(net: CaptionNet, batch: Batch, w: LossWeights) -> dict:
    det, enc = net.forward_scene(batch.raw, batch.centers, batch.boxes)
    out = {"det": detection_loss(det, batch.det_targets)}
    out["rel"] = None
    if net.cfg.use_t2t:
        out["rel"] = relation_loss(enc.relation_logits, batch.rel_labels, batch.rel_mask)
    if len(batch.cap_index):
        logits, _ = net.caption_logits(enc, batch.cap_index, batch.cap_in)
        out["des"] = description_loss(logits, batch.cap_out, batch.cap_pad)
        out["logits"] = logits
    else:
        out["des"] = Tensor(0.0)
    out["enc"] = enc
    out["total"] = total_loss(out["det"], out["des"], out["rel"], w, net.cfg.use_t2t)
    return out


# checkpoints ------------------------------------------------------------------------

def save_model(path, net: CaptionNet, meta: dict, optimizer: Adam | None = None) -> None:
    names = [n for n, _ in net.named_parameters()]
    save_checkpoint(path, net.state_dict(), {"model_config": net.cfg.to_json(), **meta},
                    optimizer.state if optimizer else None, names if optimizer else None)


def load_model(path) -> tuple[CaptionNet, dict]:
    tensors, meta, _ = load_checkpoint(path)
    net = CaptionNet(ModelConfig.from_json(meta["model_config"]))
    net.load_state_dict(tensors)
    net.eval()
    return net, meta


# training loop ------------------------------------------------------------------------

def model_config_for(base: ModelConfig, vocab: Vocabulary, scene_cfg: SceneConfig | None = None) -> ModelConfig:
    sc = scene_cfg or SceneConfig()
    return replace(base, vocab_size=len(vocab), raw_dim=raw_feature_dim(sc), n_classes=len(sc.classes))


def fit(train: Sequence[Record], val: Sequence[Record], cfg: TrainConfig, model_cfg: ModelConfig,
        out_dir, scene_cfg: SceneConfig | None = None, vocab: Vocabulary | None = None,
        on_eval=None):
    """Train, evaluating every ``eval_interval`` iterations (and at the end).

    Keeps the checkpoint with the best validation CIDEr@0.5IoU. Returns the
    checkpoint path and the metric history.
    """
    from .inference import evaluate_model

    if not train or not val:
        raise ValueError("training and validation splits must be non-empty")
    vocab = vocab or Vocabulary.build()
    model_cfg = model_config_for(model_cfg, vocab, scene_cfg)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ipe = math.ceil(len(train) / cfg.batch_size)
    total_iters = ipe * cfg.epochs
    if cfg.eval_interval > total_iters:
        raise ValueError(f"eval_interval={cfg.eval_interval} exceeds the {total_iters} training iterations")
    rng = np.random.default_rng(cfg.seed)
    net = CaptionNet(model_cfg)
    params = net.parameters()
    opt = Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    ckpt = out_dir / "best.ckpt"
    log_path = out_dir / "metrics.jsonl"
    history = []
    best = -math.inf
    it = 0
    with open(log_path, "w", encoding="utf-8") as log_fh:
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(train))
            for start in range(0, len(train), cfg.batch_size):
                recs = [train[k] for k in order[start:start + cfg.batch_size]]
                net.train()
                batch = prepare_batch(recs, [rng] * len(recs), model_cfg.m_proposals,
                                      cfg.noise_sigma, vocab, cfg.augment, scene_cfg)
                losses = compute_losses(net, batch, cfg.weights)
                opt.zero_grad()
                losses["total"].backward()
                opt.step()
                it += 1
                if it % cfg.eval_interval == 0 or it == total_iters:
                    report, _ = evaluate_model(net, val, cfg.noise_sigma, cfg.eval_seed, vocab,
                                               scene_cfg, nms_iou=cfg.nms_iou)
                    entry = {"iter": it, "epoch": epoch, "loss": float(losses["total"].data),
                             "val_cider_0.5": report.cider_0_5,
                             "val_relation_word_acc": report.relation_word_acc,
                             "val_map_0.5": report.map_0_5}
                    history.append(entry)
                    log_fh.write(json.dumps(entry, sort_keys=True) + "\n")
                    log_fh.flush()
                    log.info("iter %d loss %.4f val C@0.5 %.4f", it, entry["loss"], report.cider_0_5)
                    if report.cider_0_5 > best:
                        best = report.cider_0_5
                        save_model(ckpt, net, {"train_config": cfg.to_json(), "iter": it,
                                               "scene_config": (scene_cfg or SceneConfig()).to_json(),
                                               "val": report.to_json()}, opt)
                    if on_eval is not None:
                        on_eval(it, net, report)
    return ckpt, history
