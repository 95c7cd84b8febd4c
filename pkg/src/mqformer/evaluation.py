"""Scoring: IoU-based referring-expression accuracy and exact-match answers."""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .codec import parse_spatial
from .scene import dumps_record

logger = logging.getLogger(__name__)

IOU_THRESHOLD = 0.5


def iou(a, b) -> float:
    ax1, ay1, ax2, ay2 = (float(v) for v in a)
    bx1, by1, bx2, by2 = (float(v) for v in b)
    area_a = (ax2 - ax1) * (ay2 - ay1)
    area_b = (bx2 - bx1) * (by2 - by1)
    if area_a <= 0 or area_b <= 0:
        logger.warning("iou: degenerate box %s / %s, scored 0", a, b)
        return 0.0
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    return inter / (area_a + area_b - inter)


_WS = re.compile(r"\s+")
_TRAILING = re.compile(r"[.,!?;:]+$")


def normalize_answer(text: str) -> str:
    text = _WS.sub(" ", text.casefold().strip())
    return _TRAILING.sub("", text).strip()


def exact_match(prediction: str, answer: str) -> int:
    return int(normalize_answer(prediction) == normalize_answer(answer))


@dataclass
class EvalReport:
    task: str
    n_examples: int
    accuracy: float
    records: list = field(default_factory=list)  # dicts: scene_id, prediction, target, score
    fingerprints: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def recomputed_accuracy(self) -> float:
        if not self.records:
            return 0.0
        return float(np.mean([r["score"] for r in self.records]))

    def summary(self) -> str:
        lines = [
            f"task\t{self.task}",
            f"n_examples\t{self.n_examples}",
            f"accuracy\t{self.accuracy:.6f}",
        ]
        lines += [f"{k}\t{v}" for k, v in sorted(self.extra.items())]
        lines += [f"fingerprint.{k}\t{v}" for k, v in sorted(self.fingerprints.items())]
        return "\n".join(lines) + "\n"

    def write(self, summary_path, records_path) -> None:
        Path(summary_path).write_text(self.summary(), encoding="utf-8")
        with open(records_path, "w", encoding="utf-8", newline="\n") as fh:
            for r in self.records:
                fh.write(dumps_record(r) + "\n")


def _report(task, records, fingerprints, extra=None) -> EvalReport:
    acc = float(np.mean([r["score"] for r in records])) if records else 0.0
    return EvalReport(task, len(records), acc, records, dict(fingerprints or {}), dict(extra or {}))


def rec_accuracy(generations: Sequence[str], targets: Sequence, scene_ids: Optional[Sequence[str]] = None, fingerprints=None) -> EvalReport:
    """First parsed block of each generation scored 1 iff IoU with the target is strictly above 0.5."""
    if len(generations) != len(targets):
        raise ValueError("generations and targets differ in length")
    scene_ids = scene_ids or [str(i) for i in range(len(targets))]
    records, parsed = [], 0
    for sid, gen, tgt in zip(scene_ids, generations, targets):
        objs = parse_spatial(gen).objects
        score = 0
        if objs:
            parsed += 1
            score = int(iou(objs[0].box, tgt) > IOU_THRESHOLD)
        records.append({"scene_id": sid, "prediction": gen, "target": [float(v) for v in tgt], "score": score})
    parse_rate = parsed / len(records) if records else 0.0
    return _report("rec", records, fingerprints, {"parse_rate": f"{parse_rate:.6f}"})


def answer_accuracy(task: str, predictions: Sequence[str], answers: Sequence[str], scene_ids=None, fingerprints=None) -> EvalReport:
    scene_ids = scene_ids or [str(i) for i in range(len(answers))]
    records = [
        {"scene_id": s, "prediction": p, "target": a, "score": exact_match(p, a)}
        for s, p, a in zip(scene_ids, predictions, answers)
    ]
    return _report(task, records, fingerprints)


def random_box_baseline(targets: Sequence, trials: int, seed: int) -> float:
    """REC accuracy of uniformly random valid boxes against randomly drawn targets."""
    if trials < 1000:
        raise ValueError("random_box_baseline needs at least 1000 trials")
    if not targets:
        raise ValueError("no targets")
    rng = np.random.default_rng(seed)
    hits = 0
    for _ in range(trials):
        t = targets[int(rng.integers(len(targets)))]
        xs = np.sort(rng.random(2))
        ys = np.sort(rng.random(2))
        hits += iou((xs[0], ys[0], xs[1], ys[1]), t) > IOU_THRESHOLD
    return hits / trials


def fingerprint(obj) -> str:
    if isinstance(obj, (bytes, bytearray)):
        data = bytes(obj)
    else:
        data = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(data).hexdigest()[:16]
