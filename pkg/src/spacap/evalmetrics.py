"""Captioning and detection metrics, IoU-gated captioning evaluation."""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .geom3d import DEFAULT_PARAMS, Aabb, RelationParams, classify_relation, pairwise_iou
from .scenegen import Scene, SceneConfig, parse_caption, relation_phrase

Tokens = Sequence[str]

BLEU_FLOOR = 1e-9
CIDER_SIGMA = 6.0
ROUGE_BETA = 1.2


def _ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu4(candidate: Tokens, references: Sequence[Tokens]) -> float:
    """Sentence BLEU-4 with closest-reference brevity penalty."""
    if not candidate or not references:
        return 0.0
    log_sum = 0.0
    for n in range(1, 5):
        cand = _ngrams(candidate, n)
        max_ref: Counter = Counter()
        for ref in references:
            for g, c in _ngrams(ref, n).items():
                max_ref[g] = max(max_ref[g], c)
        clipped = sum(min(c, max_ref[g]) for g, c in cand.items())
        total = max(len(candidate) - n + 1, 0)
        log_sum += math.log(max(clipped, BLEU_FLOOR) / max(total, 1))
    c_len = len(candidate)
    r_len = min((abs(len(r) - c_len), len(r)) for r in references)[1]
    bp = 1.0 if c_len >= r_len else math.exp(1.0 - r_len / c_len)
    return bp * math.exp(log_sum / 4)


def _lcs(a: Tokens, b: Tokens) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Tokens, references: Sequence[Tokens], beta: float = ROUGE_BETA) -> float:
    """LCS F-measure from the best precision and best recall over the references."""
    if not candidate or not references:
        return 0.0
    prec = rec = 0.0
    for ref in references:
        lcs = _lcs(candidate, ref)
        prec = max(prec, lcs / len(candidate))
        rec = max(rec, lcs / len(ref)) if ref else rec
    if prec == 0.0 or rec == 0.0:
        return 0.0
    return (1 + beta ** 2) * prec * rec / (rec + beta ** 2 * prec)


def _cider_vec(tokens: Tokens, df: dict, log_n: float):
    vecs, sq = [], []
    for n in range(1, 5):
        v = {}
        s = 0.0
        for g, tf in _ngrams(tokens, n).items():
            w = tf * (log_n - math.log(max(1.0, df.get(g, 0.0))))
            v[g] = w
            s += w * w
        vecs.append(v)
        sq.append(s)
    return vecs, sq


def cider_d(candidates: Sequence[Tokens], references: Sequence[Sequence[Tokens]],
            corpus: Sequence[Sequence[Tokens]] | None = None, sigma: float = CIDER_SIGMA):
    """CIDEr-D. Returns ``(mean score, per-candidate scores)``.

    Document frequencies come from ``corpus`` (a list of reference sets),
    defaulting to ``references``.
    """
    corpus = references if corpus is None else corpus
    if len(corpus) == 0:
        raise ValueError("CIDEr-D needs a non-empty reference corpus")
    if len(candidates) != len(references):
        raise ValueError("one reference set per candidate is required")
    df: dict = defaultdict(float)
    for refs in corpus:
        seen = set()
        for ref in refs:
            for n in range(1, 5):
                seen.update(_ngrams(ref, n))
        for g in seen:
            df[g] += 1.0
    log_n = math.log(float(len(corpus)))
    scores = np.zeros(len(candidates))
    for k, (cand, refs) in enumerate(zip(candidates, references)):
        hv, hs = _cider_vec(cand, df, log_n)
        total = 0.0
        for ref in refs:
            rv, rs = _cider_vec(ref, df, log_n)
            delta = len(cand) - len(ref)
            penalty = math.exp(-(delta ** 2) / (2 * sigma ** 2))
            acc = 0.0
            for n in range(4):
                val = 0.0
                for g, w in hv[n].items():
                    if g in rv[n]:
                        val += min(w, rv[n][g]) * rv[n][g]
                if hs[n] != 0 and rs[n] != 0:
                    val /= math.sqrt(hs[n] * rs[n])
                acc += val * penalty
            total += acc / 4
        scores[k] = total / max(len(refs), 1) * 10.0
    return float(scores.mean()) if len(scores) else 0.0, scores


METRICS: dict[str, Callable] = {"bleu4": bleu4, "rouge": rouge_l}


@dataclass
class ScenePrediction:
    boxes: list[Aabb]
    scores: list[float]
    classes: list[int]
    captions: list[list[str]] = field(default_factory=list)
    slots: list[int] = field(default_factory=list)
    extra: dict = field(default_factory=dict)


@dataclass
class SceneGroundTruth:
    boxes: list[Aabb]
    captions: list[list[list[str]]]  # reference sets, one per GT box


def match_predictions(pred_boxes: Sequence[Aabb], gt_boxes: Sequence[Aabb],
                      iou_thresh: float = 0.5) -> dict[int, int]:
    """Greedy one-to-one matching by descending IoU; returns {gt index: pred index}."""
    if not pred_boxes or not gt_boxes:
        return {}
    ious = pairwise_iou(gt_boxes, pred_boxes)
    order = np.argsort(-ious, axis=None, kind="stable")
    matched: dict[int, int] = {}
    used = set()
    for flat in order:
        g, p = divmod(int(flat), ious.shape[1])
        if ious[g, p] <= iou_thresh:
            break
        if g in matched or p in used:
            continue
        matched[g] = p
        used.add(p)
    return matched


def m_at_iou(preds: Sequence[ScenePrediction], gts: Sequence[SceneGroundTruth],
             metric: str | Callable = "cider", iou_thresh: float = 0.5) -> float:
    """Caption metric credited only to GT boxes matched above the IoU threshold.

    Unmatched GT boxes score 0; the result is averaged over all GT boxes.
    """
    total = sum(len(g.boxes) for g in gts)
    if total == 0:
        return 0.0
    cands, refs = [], []
    for p, g in zip(preds, gts):
        for gi, pi in match_predictions(p.boxes, g.boxes, iou_thresh).items():
            cands.append(p.captions[pi])
            refs.append(g.captions[gi])
    if not cands:
        return 0.0
    if metric == "cider":
        corpus = [c for g in gts for c in g.captions]
        _, scores = cider_d(cands, refs, corpus)
        return float(scores.sum() / total)
    fn = METRICS[metric] if isinstance(metric, str) else metric
    return float(sum(fn(c, r) for c, r in zip(cands, refs)) / total)


def average_precision(tp: np.ndarray, n_gt: int) -> float:
    """All-point interpolated AP given a score-sorted TP/FP indicator."""
    if n_gt == 0:
        return 0.0
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1 - tp)
    recall = ctp / n_gt
    precision = ctp / np.maximum(ctp + cfp, 1e-12)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def map_at_iou(preds: Sequence[ScenePrediction], gts: Sequence[SceneGroundTruth],
               iou_thresh: float = 0.5) -> float:
    """Mean (over classes present in GT) of per-class average precision."""
    classes = sorted({b.class_id for g in gts for b in g.boxes})
    if not classes:
        return 0.0
    aps = []
    for c in classes:
        dets = []
        n_gt = 0
        for s, (p, g) in enumerate(zip(preds, gts)):
            n_gt += sum(b.class_id == c for b in g.boxes)
            for k, (box, score, cls) in enumerate(zip(p.boxes, p.scores, p.classes)):
                if cls == c:
                    dets.append((-float(score), s, k))
        dets.sort()
        taken = defaultdict(set)
        tp = np.zeros(len(dets))
        for r, (_, s, k) in enumerate(dets):
            g = gts[s]
            cand = [i for i, b in enumerate(g.boxes) if b.class_id == c]
            if not cand:
                continue
            ious = pairwise_iou([preds[s].boxes[k]], [g.boxes[i] for i in cand])[0]
            best = int(np.argmax(ious))
            if ious[best] > iou_thresh and cand[best] not in taken[s]:
                taken[s].add(cand[best])
                tp[r] = 1.0
        aps.append(average_precision(tp, n_gt))
    return float(np.mean(aps))


def relation_word_accuracy(items: Sequence[tuple[Scene, int, Tokens]], p: RelationParams = DEFAULT_PARAMS,
                           config: SceneConfig | None = None) -> float:
    """Share of captions whose relation phrase matches the geometry of the named referent.

    ``items`` are ``(scene, gt object index, caption words)`` for matched predictions.
    """
    cfg = config or SceneConfig()
    if not items:
        return 0.0
    correct = 0
    for scene, gi, words in items:
        parsed = parse_caption(words)
        if parsed is None:
            continue
        ref = [k for k, o in enumerate(scene.objects)
               if k != gi and cfg.colors[o.color_id] == parsed.ref_color
               and cfg.classes[o.class_id] == parsed.ref_cls]
        if len(ref) != 1:
            continue
        truth = relation_phrase(classify_relation(scene.objects[gi], scene.objects[ref[0]], p))
        correct += truth == parsed.phrase
    return correct / len(items)


@dataclass
class EvalReport:
    cider_0_5: float = 0.0
    bleu4_0_5: float = 0.0
    rouge_0_5: float = 0.0
    map_0_5: float = 0.0
    relation_word_acc: float = 0.0
    matched_count: int = 0
    total_gt: int = 0
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)
