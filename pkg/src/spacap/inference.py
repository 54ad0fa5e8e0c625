"""Detect-and-describe inference and model evaluation."""

from __future__ import annotations

import zlib
from typing import Sequence

import numpy as np

from .autodiff import no_grad
from .evalmetrics import (EvalReport, SceneGroundTruth, ScenePrediction, m_at_iou, map_at_iou,
                          match_predictions, relation_word_accuracy)
from .geom3d import Aabb, nms
from .model import CaptionNet
from .model.network import refine_boxes
from .scenegen import Record, SceneConfig, Vocabulary
from .train import prepare_batch

EVAL_CHUNK = 32


def eval_rng(seed: int, scene_id: str) -> np.random.Generator:
    """Per-scene proposal stream, independent of evaluation order."""
    return np.random.default_rng([seed, zlib.crc32(scene_id.encode())])


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def predict(net: CaptionNet, records: Sequence[Record], noise_sigma: float, seed: int,
            vocab: Vocabulary, scene_cfg: SceneConfig | None = None, nms_iou: float = 0.5,
            return_attention: bool = False):
    """Post-NMS boxes, scores, classes and greedy captions for every scene.

    Returns ``(predictions, batches)``; with ``return_attention`` each
    prediction also carries encoder/decoder attention in ``extra``.
    """
    net.eval()
    preds, batches = [], []
    m = net.cfg.m_proposals
    with no_grad():
        for start in range(0, len(records), EVAL_CHUNK):
            recs = list(records[start:start + EVAL_CHUNK])
            batch = prepare_batch(recs, [eval_rng(seed, r.scene.scene_id) for r in recs], m,
                                  noise_sigma, vocab, False, scene_cfg)
            det, enc = net.forward_scene(batch.raw, batch.centers, batch.boxes)
            scores = _softmax(det.objectness.data)[..., 1]
            classes = det.class_logits.data.argmax(-1)
            refined = refine_boxes(batch.boxes, det.box_residuals.data)
            kept_all, flat = [], []
            for s in range(len(recs)):
                boxes = [Aabb(tuple(b[:3]), tuple(b[3:])) for b in refined[s]]
                kept = nms(boxes, scores[s], nms_iou)
                kept_all.append((boxes, kept))
                flat.extend(s * m + k for k in kept)
            ids, attn = net.caption(enc, np.array(flat, dtype=np.int64), vocab.sos_id, vocab.eos_id,
                                    return_attention=True)
            pos = 0
            for s, (boxes, kept) in enumerate(kept_all):
                n = len(kept)
                pred = ScenePrediction([boxes[k] for k in kept], [float(scores[s, k]) for k in kept],
                                       [int(classes[s, k]) for k in kept],
                                       [vocab.decode(q) for q in ids[pos:pos + n]])
                pred.slots = list(kept)
                if return_attention:
                    pred.extra["decoder_attention"] = attn[pos:pos + n]
                    if enc.last_attention is not None:
                        pred.extra["encoder_attention"] = enc.last_attention.data[s]
                pos += n
                preds.append(pred)
            batches.append(batch)
    return preds, batches


def ground_truth(records: Sequence[Record], vocab: Vocabulary) -> list[SceneGroundTruth]:
    out = []
    for r in records:
        refs: list[list[list[str]]] = [[] for _ in r.scene.objects]
        for c in r.captions:
            refs[c.object_index].append(vocab.decode(c.tokens))
        out.append(SceneGroundTruth(list(r.scene.objects), refs))
    return out


def evaluate_model(net: CaptionNet, records: Sequence[Record], noise_sigma: float, seed: int,
                   vocab: Vocabulary, scene_cfg: SceneConfig | None = None, nms_iou: float = 0.5,
                   iou_thresh: float = 0.5):
    preds, batches = predict(net, records, noise_sigma, seed, vocab, scene_cfg, nms_iou)
    gts = ground_truth(records, vocab)
    items, exact, matched = [], 0, 0
    for r, p, g in zip(records, preds, gts):
        for gi, pi in match_predictions(p.boxes, g.boxes, iou_thresh).items():
            matched += 1
            items.append((r.scene, gi, p.captions[pi]))
            exact += p.captions[pi] in g.captions[gi]
    total = sum(len(g.boxes) for g in gts)
    tok_acc, rel_acc = teacher_forced_accuracy(net, batches)
    report = EvalReport(
        cider_0_5=m_at_iou(preds, gts, "cider", iou_thresh),
        bleu4_0_5=m_at_iou(preds, gts, "bleu4", iou_thresh),
        rouge_0_5=m_at_iou(preds, gts, "rouge", iou_thresh),
        map_0_5=map_at_iou(preds, gts, iou_thresh),
        relation_word_acc=relation_word_accuracy(items, config=scene_cfg),
        matched_count=matched, total_gt=total,
        extra={"caption_exact_match": exact / total if total else 0.0,
               "token_accuracy": tok_acc, "relation_label_accuracy": rel_acc},
    )
    return report, preds


def teacher_forced_accuracy(net: CaptionNet, batches) -> tuple[float, float | None]:
    """Next-token accuracy on non-pad positions and per-axis relation label accuracy."""
    hit = cnt = rhit = rcnt = 0
    net.eval()
    with no_grad():
        for b in batches:
            det, enc = net.forward_scene(b.raw, b.centers, b.boxes)
            if len(b.cap_index):
                logits, _ = net.caption_logits(enc, b.cap_index, b.cap_in)
                keep = ~b.cap_pad
                hit += int(((logits.data.argmax(-1) == b.cap_out) & keep).sum())
                cnt += int(keep.sum())
            if enc.relation_logits is not None:
                lg = enc.relation_logits.data
                for k in range(3):
                    pred = lg[..., 3 * k:3 * k + 3].argmax(-1) - 1
                    rhit += int(((pred == b.rel_labels[..., k]) & b.rel_mask).sum())
                    rcnt += int(b.rel_mask.sum())
    return (hit / cnt if cnt else 0.0), (rhit / rcnt if rcnt else None)
