"""Synthetic scenes and a stand-in for the frozen encoder + visual refiner.

A scene is a handful of tagged, coloured boxes. From it we derive

* a template caption and rule-based QA pairs,
* noisy detections (true objects near confidence 1, distractors below the
  filtering threshold),
* a FeatureBundle: a 4x4-patch "image encoder" sequence and a local
  sequence holding one detection row then one segmentation row per
  surviving box.

Real-scale shapes for reference: the image encoder emits 257x1024 and the
detector 260x900; queries live in 768 dimensions. The desk defaults below
shrink these so training runs in CPU minutes.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_TAGS = ("man", "woman", "dog", "cat", "car", "tree", "ball", "cup", "chair", "bird", "horse", "bus")
PLURALS = {"man": "men", "woman": "women", "bus": "buses", "horse": "horses"}
DEFAULT_COLORS = ("red", "blue", "green", "yellow", "black", "white", "pink", "brown")
COUNT_WORDS = ("zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine")


def plural(tag: str) -> str:
    return PLURALS.get(tag, tag + "s")


@dataclass(frozen=True)
class SceneConfig:
    tags: tuple = DEFAULT_TAGS
    tag_weights: Optional[tuple] = None  # None -> uniform
    colors: tuple = DEFAULT_COLORS
    min_objects: int = 1
    max_objects: int = 3
    min_size: float = 0.15
    max_size: float = 0.5
    distractor_rate: float = 0.5  # expected distractors per scene (Poisson)
    miss_rate: float = 0.002  # chance a true object is detected below threshold
    jitter: float = 0.02
    threshold: float = 0.25
    grid: int = 4  # global sequence is grid x grid patches
    d_enc: int = 48  # real scale: 1024
    d_q: int = 32  # real scale: 768
    feature_noise: float = 0.05
    feature_seed: int = 1234

    def __post_init__(self):
        if not self.tags:
            raise ValueError("tag vocabulary is empty")
        if self.tag_weights is not None and len(self.tag_weights) != len(self.tags):
            raise ValueError("tag_weights must align with tags")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("need 1 <= min_objects <= max_objects")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must lie in [0, 1]")

    @property
    def n_global(self) -> int:
        return self.grid * self.grid

    def weights(self) -> np.ndarray:
        w = np.ones(len(self.tags)) if self.tag_weights is None else np.asarray(self.tag_weights, float)
        return w / w.sum()


@dataclass(frozen=True)
class VisualObject:
    tag: str
    box: tuple  # (x1, y1, x2, y2), normalised
    confidence: float = 1.0
    color: Optional[str] = None

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if not (0.0 <= x1 < x2 <= 1.0 and 0.0 <= y1 < y2 <= 1.0):
            raise ValueError(f"invalid box {self.box}")

    @property
    def center(self) -> tuple:
        x1, y1, x2, y2 = self.box
        return (x1 + x2) / 2, (y1 + y2) / 2


@dataclass(frozen=True)
class QAPair:
    question: str
    answer: str
    box: Optional[tuple] = None


@dataclass(frozen=True)
class Scene:
    id: str
    objects: tuple
    distractors: tuple
    caption: str
    qa: tuple

    def unique_objects(self) -> list:
        """Objects whose tag occurs exactly once (unambiguous referents)."""
        counts = {}
        for o in self.objects:
            counts[o.tag] = counts.get(o.tag, 0) + 1
        return [o for o in self.objects if counts[o.tag] == 1]


@dataclass
class FeatureBundle:
    global_: np.ndarray  # (S_g, d_enc)
    local: np.ndarray  # (2 * n_det, d_q)
    provenance: list = field(default_factory=list)  # per local row: ("detection" | "segmentation", det index)

    @property
    def n_detections(self) -> int:
        return sum(1 for stage, _ in self.provenance if stage == "detection")


def _seed_rng(seed) -> np.random.Generator:
    return np.random.default_rng(list(seed) if isinstance(seed, (tuple, list)) else seed)


def _random_box(rng, cfg: SceneConfig) -> tuple:
    w, h = rng.uniform(cfg.min_size, cfg.max_size, size=2)
    x1 = rng.uniform(0.0, 1.0 - w)
    y1 = rng.uniform(0.0, 1.0 - h)
    return tuple(round(float(v), 6) for v in (x1, y1, x1 + w, y1 + h))


def _side(obj: VisualObject) -> str:
    cx = obj.center[0]
    return "left" if cx < 0.4 else "right" if cx > 0.6 else "middle"


def _relation(a: VisualObject, b: VisualObject) -> str:
    (ax, ay), (bx, by) = a.center, b.center
    if abs(ax - bx) >= abs(ay - by):
        return "left of" if ax < bx else "right of"
    return "above" if ay < by else "below"


def _groups(objects: Sequence[VisualObject]) -> list:
    order, members = [], {}
    for o in objects:
        if o.tag not in members:
            order.append(o.tag)
            members[o.tag] = []
        members[o.tag].append(o)
    return [(t, members[t]) for t in order]


def make_caption(objects: Sequence[VisualObject]) -> str:
    """Closed template grammar: noun phrases, then one spatial relation clause."""
    phrases = []
    groups = _groups(objects)
    for tag, members in groups:
        if len(members) == 1:
            phrases.append(f"a {members[0].color} {tag}")
        else:
            phrases.append(f"{COUNT_WORDS[len(members)]} {plural(tag)}")
    if len(phrases) == 1:
        listing = phrases[0]
    else:
        listing = ", ".join(phrases[:-1]) + " and " + phrases[-1]
    caption = f"a photo of {listing}."
    if len(groups) >= 2:
        a, b = groups[0][1][0], groups[1][1][0]
        caption += f" the {a.tag} is {_relation(a, b)} the {b.tag}."
    return caption


def make_qa(objects: Sequence[VisualObject]) -> tuple:
    qa = []
    for tag, members in _groups(objects):
        qa.append(QAPair(f"how many {plural(tag)} are there?", COUNT_WORDS[len(members)]))
        if len(members) == 1:
            obj = members[0]
            qa.append(QAPair(f"what color is the {tag}?", obj.color, obj.box))
            qa.append(QAPair(f"where is the {tag}?", _side(obj), obj.box))
    return tuple(qa)


def generate_scene(seed, config: SceneConfig = SceneConfig()) -> Scene:
    """Deterministic scene from ``seed`` (an int or a tuple of ints)."""
    rng = _seed_rng(seed)
    n = int(rng.integers(config.min_objects, config.max_objects + 1))
    tag_idx = rng.choice(len(config.tags), size=n, p=config.weights())
    objects = []
    for t in tag_idx:
        color = config.colors[int(rng.integers(len(config.colors)))]
        objects.append(VisualObject(config.tags[int(t)], _random_box(rng, config), 1.0, color))
    distractors = []
    for _ in range(int(rng.poisson(config.distractor_rate))):
        tag = config.tags[int(rng.integers(len(config.tags)))]
        conf = round(float(rng.uniform(0.0, config.threshold)), 6)
        distractors.append(VisualObject(tag, _random_box(rng, config), conf))
    sid = "-".join(str(s) for s in seed) if isinstance(seed, (tuple, list)) else str(seed)
    return Scene(
        id=f"scene-{sid}",
        objects=tuple(objects),
        distractors=tuple(distractors),
        caption=make_caption(objects),
        qa=make_qa(objects),
    )


def generate_dataset(n: int, seed: int, config: SceneConfig = SceneConfig()) -> list:
    return [generate_scene((seed, i), config) for i in range(n)]


def _jitter_box(rng, box, sigma) -> tuple:
    if sigma == 0:
        return tuple(box)
    b = np.clip(np.asarray(box) + rng.normal(0.0, sigma, size=4), 0.0, 1.0)
    x1, x2 = sorted((b[0], b[2]))
    y1, y2 = sorted((b[1], b[3]))
    # keep a minimum extent so the box stays valid after clipping
    if x2 - x1 < 0.01:
        x1, x2 = max(0.0, x2 - 0.01), max(0.01, x2)
    if y2 - y1 < 0.01:
        y1, y2 = max(0.0, y2 - 0.01), max(0.01, y2)
    return tuple(round(float(v), 6) for v in (x1, y1, x2, y2))


def simulate_detections(scene: Scene, noise_seed, config: SceneConfig = SceneConfig()) -> list:
    """Detector output: every true object (jittered) plus the scene's distractors.

    True objects score near 1 except for a rare miss (``miss_rate``), which
    scores below the threshold. Repeated tags yield several boxes per tag.
    Each box carries exactly one tag.
    """
    rng = _seed_rng(noise_seed)
    dets = []
    for obj in scene.objects:
        box = _jitter_box(rng, obj.box, config.jitter)
        if rng.random() < config.miss_rate:
            conf = rng.uniform(0.0, config.threshold)
        else:
            conf = 1.0 - abs(rng.normal(0.0, 0.05))
            conf = max(conf, 0.5 * (1.0 + config.threshold))
        dets.append(VisualObject(obj.tag, box, round(float(conf), 6), obj.color))
    dets.extend(scene.distractors)
    return dets


def filter_detections(dets: Iterable[VisualObject], threshold: float) -> list:
    """Keep detections with confidence strictly above ``threshold``, in order."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    return [d for d in dets if d.confidence > threshold]


# ---------------------------------------------------------------------------
# feature rendering


class _Encoders:
    """Fixed random projections shared by every scene under one config."""

    _cache: dict = {}

    def __init__(self, config: SceneConfig):
        rng = np.random.default_rng(config.feature_seed)
        n_tags, n_col = len(config.tags), len(config.colors)
        self.tag_emb = rng.normal(size=(n_tags, 16))
        self.color_emb = rng.normal(size=(n_col, 8))
        g = config.grid
        self.patch_pos = rng.normal(scale=0.5, size=(g * g, 8))
        self.global_proj = rng.normal(size=(16 + 8 + 8, config.d_enc)) / np.sqrt(32)
        det_in = n_tags + _box_code_dim()
        self.det_proj = rng.normal(size=(det_in, config.d_q)) / np.sqrt(det_in)
        seg_in = _shape_code_dim()
        self.seg_proj = rng.normal(size=(seg_in, config.d_q)) / np.sqrt(seg_in)

    @classmethod
    def get(cls, config: SceneConfig) -> "_Encoders":
        if config not in cls._cache:
            cls._cache[config] = cls(config)
        return cls._cache[config]


def _box_code_dim() -> int:
    return 4 + 4 * 4


def _box_code(box) -> np.ndarray:
    b = np.asarray(box, dtype=float)
    freqs = np.array([np.pi, 2 * np.pi])
    ang = (b[:, None] * freqs[None, :]).reshape(-1)
    return np.concatenate([2 * b - 1, np.sin(ang), np.cos(ang)])


def _shape_code_dim() -> int:
    return 8


def _shape_code(box) -> np.ndarray:
    x1, y1, x2, y2 = box
    w, h = x2 - x1, y2 - y1
    cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
    return np.array([w * h, cx, cy, w, h, np.log(w / h), np.sin(np.pi * cx), np.sin(np.pi * cy)])


def _cell_overlap(box, grid: int) -> np.ndarray:
    x1, y1, x2, y2 = box
    edges = np.linspace(0.0, 1.0, grid + 1)
    ox = np.clip(np.minimum(x2, edges[1:]) - np.maximum(x1, edges[:-1]), 0.0, None) * grid
    oy = np.clip(np.minimum(y2, edges[1:]) - np.maximum(y1, edges[:-1]), 0.0, None) * grid
    return np.outer(oy, ox).reshape(-1)  # row-major over (row=y, col=x)


def render_features(scene: Scene, detections: Sequence[VisualObject], config: SceneConfig = SceneConfig(), seed=0) -> FeatureBundle:
    """Encode ``scene`` into global patch rows and per-detection local rows.

    ``detections`` must already be filtered. Global rows see the ground-truth
    objects only through coarse patch overlap; precise geometry lives in the
    local rows.
    """
    enc = _Encoders.get(config)
    rng = _seed_rng(seed)
    tag_ix = {t: i for i, t in enumerate(config.tags)}
    col_ix = {c: i for i, c in enumerate(config.colors)}
    cells = config.n_global
    content = np.zeros((cells, 24))
    for obj in scene.objects:
        w = _cell_overlap(obj.box, config.grid)
        vec = np.concatenate([enc.tag_emb[tag_ix[obj.tag]], enc.color_emb[col_ix.get(obj.color, 0)]])
        content += w[:, None] * vec[None, :]
    glob = np.concatenate([content, enc.patch_pos], axis=1) @ enc.global_proj
    glob = glob + rng.normal(scale=config.feature_noise, size=glob.shape)

    det_rows, seg_rows = [], []
    for d in detections:
        onehot = np.zeros(len(config.tags))
        onehot[tag_ix[d.tag]] = 1.0
        det_rows.append(np.concatenate([onehot, _box_code(d.box)]) @ enc.det_proj)
        seg_rows.append(_shape_code(d.box) @ enc.seg_proj)
    n = len(detections)
    if n:
        local = np.concatenate([np.stack(det_rows), np.stack(seg_rows)], axis=0)
        local = local + rng.normal(scale=config.feature_noise, size=local.shape)
    else:
        local = np.zeros((0, config.d_q))
    provenance = [("detection", i) for i in range(n)] + [("segmentation", i) for i in range(n)]
    return FeatureBundle(glob, local, provenance)


@dataclass(frozen=True)
class Ablation:
    no_vit: bool = False
    no_odm: bool = False
    no_ssm: bool = False
    no_vr: bool = False

    def normalized(self) -> "Ablation":
        if self.no_vr:
            return replace(self, no_odm=True, no_ssm=True)
        if self.no_odm and self.no_ssm:
            return replace(self, no_vr=True)
        return self

    @classmethod
    def parse(cls, spec: str) -> "Ablation":
        flags = {}
        for item in filter(None, (s.strip() for s in (spec or "").split(","))):
            key = item.replace("-", "_")
            if key not in ("no_vit", "no_odm", "no_ssm", "no_vr"):
                raise ValueError(f"unknown ablation {item!r}")
            flags[key] = True
        return cls(**flags).normalized()

    @property
    def any(self) -> bool:
        return self.no_vit or self.no_odm or self.no_ssm


def blank_features(bundle: FeatureBundle, ablation: Ablation) -> FeatureBundle:
    """Zero the rows a removed module would have produced (blank-image input)."""
    ab = ablation.normalized()
    glob = np.zeros_like(bundle.global_) if ab.no_vit else bundle.global_.copy()
    local = bundle.local.copy()
    for row, (stage, _) in enumerate(bundle.provenance):
        if (stage == "detection" and ab.no_odm) or (stage == "segmentation" and ab.no_ssm):
            local[row] = 0.0
    return FeatureBundle(glob, local, list(bundle.provenance))


def scene_features(scene: Scene, config: SceneConfig = SceneConfig(), ablation: Ablation = Ablation()) -> tuple:
    """Full refiner pipeline for one scene: detect, filter, render, ablate.

    Returns (surviving detections, FeatureBundle).
    """
    dets = filter_detections(simulate_detections(scene, (config.feature_seed, _scene_key(scene)), config), config.threshold)
    bundle = render_features(scene, dets, config, seed=(config.feature_seed + 1, _scene_key(scene)))
    if ablation.any:
        bundle = blank_features(bundle, ablation)
    return dets, bundle


def _scene_key(scene: Scene) -> int:
    return int.from_bytes(hashlib.blake2b(scene.id.encode("utf-8"), digest_size=8).digest(), "little")


# ---------------------------------------------------------------------------
# dataset export


def _render(value) -> str:
    if isinstance(value, float):
        return f"{value:.6f}"
    if isinstance(value, dict):
        return "{" + ", ".join(f"{json.dumps(k)}: {_render(v)}" for k, v in value.items()) + "}"
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_render(v) for v in value) + "]"
    return json.dumps(value, ensure_ascii=False)


def dumps_record(record: dict) -> str:
    """One JSON object per line; floats always carry six decimals."""
    return _render(record)


def scene_to_record(scene: Scene) -> dict:
    def obj(o: VisualObject) -> dict:
        d = {"tag": o.tag, "box": [float(v) for v in o.box], "confidence": float(o.confidence)}
        if o.color is not None:
            d["color"] = o.color
        return d

    qa = []
    for p in scene.qa:
        item = {"q": p.question, "a": p.answer}
        if p.box is not None:
            item["box"] = [float(v) for v in p.box]
        qa.append(item)
    return {
        "id": scene.id,
        "caption": scene.caption,
        "objects": [obj(o) for o in scene.objects],
        "distractors": [obj(o) for o in scene.distractors],
        "qa": qa,
    }


def scene_from_record(rec: dict) -> Scene:
    def obj(d: dict) -> VisualObject:
        return VisualObject(d["tag"], tuple(d["box"]), d["confidence"], d.get("color"))

    return Scene(
        id=rec["id"],
        objects=tuple(obj(d) for d in rec["objects"]),
        distractors=tuple(obj(d) for d in rec.get("distractors", [])),
        caption=rec["caption"],
        qa=tuple(QAPair(q["q"], q["a"], tuple(q["box"]) if "box" in q else None) for q in rec["qa"]),
    )


def write_scenes(path, scenes: Iterable[Scene]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in scenes:
            fh.write(dumps_record(scene_to_record(s)) + "\n")


def read_scenes(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [scene_from_record(json.loads(line)) for line in fh if line.strip()]
