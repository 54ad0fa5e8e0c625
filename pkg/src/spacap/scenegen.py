"""Synthetic indoor scenes, template captions and a detector surrogate."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geom3d import (DEFAULT_PARAMS, Aabb, RelationParams, assign_nearest_gt, classify_relation,
                     iou_aabb, pairwise_iou)

# class name -> nominal (sx, sy, sz) in meters
CLASSES: dict[str, tuple[float, float, float]] = {
    "chair": (0.5, 0.5, 0.9),
    "table": (1.2, 0.8, 0.75),
    "sofa": (1.8, 0.8, 0.8),
    "bed": (2.0, 1.5, 0.5),
    "cabinet": (0.6, 0.5, 1.2),
    "lamp": (0.3, 0.3, 0.5),
    "box": (0.4, 0.4, 0.4),
    "shelf": (0.9, 0.35, 1.8),
}
COLORS = ("red", "blue", "green", "brown", "white", "black")
# only these may be placed on top of another object
STACKABLE = {"lamp", "box"}

PAD, SOS, EOS, UNK = "<pad>", "<sos>", "<eos>", "<unk>"
SPECIALS = (PAD, SOS, EOS, UNK)
TEMPLATE_WORDS = ("this", "is", "a", ".", "it", "the", "and", "left", "right", "of", "behind",
                  "in", "front", "above", "below", "next", "to")
MAX_CAPTION_LEN = 30

AXIS_PHRASES = (
    {1: "right of", -1: "left of"},
    {1: "behind", -1: "in front of"},
    {1: "above", -1: "below"},
)
FALLBACK_PHRASE = "next to"


class DatasetError(Exception):
    pass


@dataclass
class Vocabulary:
    words: list[str]

    def __post_init__(self):
        if tuple(self.words[:4]) != SPECIALS:
            raise ValueError("vocabulary must start with the special tokens")
        if len(set(self.words)) != len(self.words):
            raise ValueError("duplicate vocabulary entries")
        self.index = {w: i for i, w in enumerate(self.words)}

    @classmethod
    def build(cls, classes: Iterable[str] = CLASSES, colors: Iterable[str] = COLORS) -> "Vocabulary":
        extra = [w for w in list(colors) + list(classes) if w not in TEMPLATE_WORDS]
        return cls(list(SPECIALS) + list(TEMPLATE_WORDS) + extra)

    pad_id = 0
    sos_id = 1
    eos_id = 2
    unk_id = 3

    def __len__(self) -> int:
        return len(self.words)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.index.get(t, self.unk_id) for t in tokens]

    def decode(self, ids: Sequence[int], strip: bool = True) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if strip and i in (self.pad_id, self.sos_id):
                continue
            if strip and i == self.eos_id:
                break
            out.append(self.words[i] if 0 <= i < len(self.words) else UNK)
        return out


@dataclass
class SceneConfig:
    min_objects: int = 3
    max_objects: int = 6
    classes: tuple[str, ...] = tuple(CLASSES)
    colors: tuple[str, ...] = COLORS
    floor: tuple[float, float] = (6.0, 6.0)
    stack_prob: float = 0.25
    size_jitter: float = 0.2
    max_iou: float = 0.3
    max_retries: int = 500

    def to_json(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self.__dict__.items()}

    @classmethod
    def from_json(cls, d: dict) -> "SceneConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items() if k in names})


@dataclass
class Scene:
    scene_id: str
    objects: list[Aabb]
    floor: tuple[float, float, float, float]  # xmin, ymin, xmax, ymax

    def to_json(self) -> dict:
        return {"scene_id": self.scene_id, "floor": list(self.floor),
                "objects": [o.to_json() for o in self.objects]}

    @classmethod
    def from_json(cls, d: dict) -> "Scene":
        return cls(str(d["scene_id"]), [Aabb.from_json(o) for o in d["objects"]],
                   tuple(float(v) for v in d["floor"]))


@dataclass
class CaptionRecord:
    scene_id: str
    object_index: int
    tokens: list[int]
    text: str

    def to_json(self) -> dict:
        return {"scene_id": self.scene_id, "object_index": self.object_index,
                "tokens": list(self.tokens), "text": self.text}

    @classmethod
    def from_json(cls, d: dict) -> "CaptionRecord":
        return cls(str(d["scene_id"]), int(d["object_index"]), [int(t) for t in d["tokens"]],
                   str(d["text"]))


def scene_rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def generate_scene(seed, config: SceneConfig | None = None, scene_id: str | None = None) -> Scene:
    """Rejection-sample a scene of non-overlapping boxes (pairwise IoU <= max_iou)."""
    cfg = config or SceneConfig()
    if not cfg.classes or not cfg.colors:
        raise ValueError("class and color palettes must be non-empty")
    if not 2 <= cfg.min_objects <= cfg.max_objects:
        raise ValueError("need 2 <= min_objects <= max_objects")
    if cfg.max_objects > len(cfg.classes) * len(cfg.colors):
        raise ValueError("not enough distinct (class, color) combinations for max_objects")
    rng = scene_rng(seed)
    if scene_id is None:
        scene_id = "scene_" + "_".join(str(s) for s in np.atleast_1d(seed))
    fx, fy = cfg.floor[0] / 2, cfg.floor[1] / 2
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    objects: list[Aabb] = []
    used: set[tuple[int, int]] = set()
    for _ in range(n):
        for _attempt in range(cfg.max_retries):
            ci = int(rng.integers(len(cfg.classes)))
            co = int(rng.integers(len(cfg.colors)))
            if (ci, co) in used:
                continue
            name = cfg.classes[ci]
            nominal = np.asarray(CLASSES.get(name, (0.6, 0.6, 0.6)))
            size = nominal * rng.uniform(1 - cfg.size_jitter, 1 + cfg.size_jitter, 3)
            if size[0] > 2 * fx or size[1] > 2 * fy:
                continue
            supports = [o for o in objects if cfg.classes[o.class_id] not in STACKABLE]
            if name in STACKABLE and supports and rng.random() < cfg.stack_prob:
                sup = supports[int(rng.integers(len(supports)))]
                lo, hi = sup.min_corner, sup.max_corner
                cx = rng.uniform(lo[0], hi[0])
                cy = rng.uniform(lo[1], hi[1])
                cz = hi[2] + size[2] / 2
            else:
                cx = rng.uniform(-fx + size[0] / 2, fx - size[0] / 2)
                cy = rng.uniform(-fy + size[1] / 2, fy - size[1] / 2)
                cz = size[2] / 2
            box = Aabb((cx, cy, cz), tuple(size), ci, co)
            if abs(cx) + size[0] / 2 > fx or abs(cy) + size[1] / 2 > fy:
                continue
            if all(iou_aabb(box, o) <= cfg.max_iou for o in objects):
                objects.append(box)
                used.add((ci, co))
                break
        else:
            raise ValueError(f"could not place object {len(objects)} after {cfg.max_retries} "
                             "tries; use a larger floor or fewer objects")
    return Scene(scene_id, objects, (-fx, -fy, fx, fy))


def nearest_other(scene: Scene, index: int) -> int:
    c = np.array([o.center for o in scene.objects])
    d = ((c - c[index]) ** 2).sum(-1)
    d[index] = np.inf
    return int(np.argmin(d))


def relation_phrase(triplet: Sequence[int]) -> str:
    parts = [AXIS_PHRASES[k][v] for k, v in enumerate(triplet) if v != 0]
    return " and ".join(parts) if parts else FALLBACK_PHRASE


def caption_words(scene: Scene, index: int, p: RelationParams = DEFAULT_PARAMS,
                  config: SceneConfig | None = None) -> list[str]:
    cfg = config or SceneConfig()
    me = scene.objects[index]
    j = nearest_other(scene, index)
    other = scene.objects[j]
    phrase = relation_phrase(classify_relation(me, other, p))
    text = (f"this is a {cfg.colors[me.color_id]} {cfg.classes[me.class_id]} . it is {phrase} "
            f"the {cfg.colors[other.color_id]} {cfg.classes[other.class_id]} .")
    return text.split()


def render_caption(scene: Scene, object_index: int, p: RelationParams = DEFAULT_PARAMS,
                   vocab: Vocabulary | None = None, config: SceneConfig | None = None) -> CaptionRecord:
    if len(scene.objects) < 2:
        raise ValueError("captions need a scene with at least two objects")
    vocab = vocab or Vocabulary.build()
    words = caption_words(scene, object_index, p, config)
    ids = [vocab.sos_id] + vocab.encode(words) + [vocab.eos_id]
    if len(ids) > MAX_CAPTION_LEN:
        raise ValueError(f"caption of {len(ids)} tokens exceeds {MAX_CAPTION_LEN}")
    return CaptionRecord(scene.scene_id, object_index, ids, " ".join(words))


def render_captions(scene: Scene, p: RelationParams = DEFAULT_PARAMS, vocab: Vocabulary | None = None,
                    config: SceneConfig | None = None) -> list[CaptionRecord]:
    return [render_caption(scene, i, p, vocab, config) for i in range(len(scene.objects))]


@dataclass
class ParsedCaption:
    color: str
    cls: str
    phrase: str
    ref_color: str
    ref_cls: str


def parse_caption(words: Sequence[str]) -> ParsedCaption | None:
    """Inverse of the caption template; ``None`` when the words do not fit it."""
    w = list(words)
    if len(w) < 11 or w[:3] != ["this", "is", "a"] or w[5:8] != [".", "it", "is"] or w[-1] != ".":
        return None
    try:
        the = len(w) - 1 - w[::-1].index("the")
    except ValueError:
        return None
    if the != len(w) - 4 or the <= 8:
        return None
    return ParsedCaption(w[3], w[4], " ".join(w[8:the]), w[the + 1], w[the + 2])


# proposals -----------------------------------------------------------------

FEATURE_NOISE_DIMS = 4
FEATURE_NOISE_SIGMA = 0.1


def raw_feature_dim(config: SceneConfig | None = None) -> int:
    cfg = config or SceneConfig()
    return 6 + len(cfg.classes) + len(cfg.colors) + FEATURE_NOISE_DIMS


@dataclass
class ProposalBatch:
    """Simulated detector output for one scene.

    ``raw`` holds the per-proposal input the learned detector embedding maps to
    features; the logits fields are filled in by the network's detection head.
    """

    raw: np.ndarray              # (M, D)
    centers: np.ndarray          # (M, 3) proposal ("vote") centers
    boxes: list[Aabb]            # jittered proposal boxes
    source: np.ndarray           # (M,) generating object
    gt_assignment: np.ndarray    # (M,) nearest-center GT index
    features: object = None
    objectness_logits: object = None
    class_logits: object = None
    box_residuals: object = None

    @property
    def m(self) -> int:
        return len(self.boxes)

    def box_array(self) -> np.ndarray:
        return np.array([list(b.center) + list(b.size) for b in self.boxes])


def simulate_proposals(scene: Scene, noise_sigma: float, m: int, rng: np.random.Generator,
                       config: SceneConfig | None = None) -> ProposalBatch:
    """Jittered copies of the GT boxes standing in for a trained detector."""
    cfg = config or SceneConfig()
    n = len(scene.objects)
    if m < n:
        raise ValueError(f"need at least one proposal per object: m={m} < {n} objects")
    source = np.concatenate([np.arange(n), rng.integers(0, n, size=m - n)])
    source = source[rng.permutation(m)]
    k, nc = len(cfg.classes), len(cfg.colors)
    raw = np.zeros((m, raw_feature_dim(cfg)))
    boxes = []
    for s, obj in enumerate(source):
        o = scene.objects[obj]
        c = np.asarray(o.center) + rng.normal(0.0, noise_sigma, 3)
        sz = np.asarray(o.size)
        sz = np.maximum(sz + rng.normal(0.0, noise_sigma, 3), 0.1 * sz)
        boxes.append(Aabb(tuple(c), tuple(sz), o.class_id, o.color_id))
        raw[s, :3] = c
        raw[s, 3:6] = sz
        raw[s, 6 + o.class_id] = 1.0
        raw[s, 6 + k + o.color_id] = 1.0
        raw[s, 6 + k + nc:] = rng.normal(0.0, FEATURE_NOISE_SIGMA, FEATURE_NOISE_DIMS)
    centers = np.array([b.center for b in boxes])
    return ProposalBatch(raw, centers, boxes, source.astype(np.int64),
                         assign_nearest_gt(centers, scene.objects))


def proposal_iou_with_gt(props: ProposalBatch, scene: Scene) -> np.ndarray:
    ious = pairwise_iou(props.boxes, scene.objects)
    return ious[np.arange(props.m), props.gt_assignment]


# augmentation ----------------------------------------------------------------

def _rotation(ax: float, ay: float, az: float) -> np.ndarray:
    cx, sx = math.cos(ax), math.sin(ax)
    cy, sy = math.cos(ay), math.sin(ay)
    cz, sz = math.cos(az), math.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def _corners(box: Aabb) -> np.ndarray:
    lo, hi = box.min_corner, box.max_corner
    return np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])


@dataclass
class AugmentDraw:
    flip_yz: bool = False
    flip_xz: bool = False
    angles: tuple[float, float, float] = (0.0, 0.0, 0.0)  # radians about x, y, z
    shift: tuple[float, float, float] = (0.0, 0.0, 0.0)

    @classmethod
    def sample(cls, rng: np.random.Generator, max_deg: float = 5.0, max_shift: float = 0.5,
               flips: bool = True) -> "AugmentDraw":
        fyz = bool(rng.random() < 0.5) if flips else False
        fxz = bool(rng.random() < 0.5) if flips else False
        ang = tuple(float(a) for a in np.deg2rad(rng.uniform(-max_deg, max_deg, 3)))
        shift = tuple(float(s) for s in rng.uniform(-max_shift, max_shift, 3))
        return cls(fyz, fxz, ang, shift)


def apply_augment(scene: Scene, draw: AugmentDraw) -> Scene:
    sign = np.array([-1.0 if draw.flip_yz else 1.0, -1.0 if draw.flip_xz else 1.0, 1.0])
    identity_rot = not any(draw.angles)
    rot = _rotation(*draw.angles)
    shift = np.asarray(draw.shift)
    objects = []
    for o in scene.objects:
        if identity_rot:
            c = np.asarray(o.center) * sign + shift
            objects.append(Aabb(tuple(c), o.size, o.class_id, o.color_id))
            continue
        pts = (_corners(o) * sign) @ rot.T + shift
        objects.append(Aabb.from_corners(pts.min(0), pts.max(0), o.class_id, o.color_id))
    x0, y0, x1, y1 = scene.floor
    fl = np.array([[x, y, 0.0] for x in (x0, x1) for y in (y0, y1)]) * sign
    if not identity_rot:
        fl = fl @ rot.T
    fl = fl + shift
    floor = (float(fl[:, 0].min()), float(fl[:, 1].min()), float(fl[:, 0].max()), float(fl[:, 1].max()))
    return Scene(scene.scene_id, objects, floor)


def augment(scene: Scene, rng: np.random.Generator, max_deg: float = 5.0, max_shift: float = 0.5,
            flips: bool = True) -> Scene:
    """Random flips, small rotations (AABB envelope refit) and a global shift."""
    return apply_augment(scene, AugmentDraw.sample(rng, max_deg, max_shift, flips))


# dataset I/O -------------------------------------------------------------------

@dataclass
class Record:
    scene: Scene
    captions: list[CaptionRecord] = field(default_factory=list)


def write_dataset(path, records: Sequence[Record]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps({"scene": r.scene.to_json(),
                                 "captions": [c.to_json() for c in r.captions]}, sort_keys=True))
            fh.write("\n")


def read_dataset(path) -> list[Record]:
    path = Path(path)
    out = []
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise DatasetError(f"cannot open dataset {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                out.append(Record(Scene.from_json(d["scene"]),
                                  [CaptionRecord.from_json(c) for c in d["captions"]]))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DatasetError(f"{path}:{lineno}: malformed record ({exc})") from exc
    return out


def make_record(seed, config: SceneConfig | None = None, p: RelationParams = DEFAULT_PARAMS,
                scene_id: str | None = None) -> Record:
    scene = generate_scene(seed, config, scene_id)
    return Record(scene, render_captions(scene, p, config=config))
