"""Turn scenes into model-ready examples (features plus token ids)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .codec import TokenSequence, Vocabulary, serialize_spatial, tokenize
from .model import FeatureBatch, TextBatch
from .scene import Ablation, FeatureBundle, Scene, SceneConfig, scene_features


@dataclass
class Example:
    scene: Scene
    detections: list
    features: FeatureBundle
    spatial: TokenSequence  # serialized surviving detections, no anchor token
    caption: TokenSequence  # caption tokens, no anchor token


def build_example(scene: Scene, scene_cfg: SceneConfig, vocab: Vocabulary, ablation: Ablation = Ablation()) -> Example:
    dets, bundle = scene_features(scene, scene_cfg, ablation)
    return Example(
        scene,
        dets,
        bundle,
        tokenize(serialize_spatial(dets), "spatial", vocab),
        tokenize(scene.caption, "caption", vocab),
    )


def build_examples(scenes: Sequence[Scene], scene_cfg: SceneConfig, vocab: Vocabulary, ablation: Ablation = Ablation()) -> list:
    return [build_example(s, scene_cfg, vocab, ablation) for s in scenes]


def feature_batch(examples: Sequence[Example]) -> FeatureBatch:
    return FeatureBatch.stack([e.features for e in examples])


def text_batch(
    spatial: Sequence[Sequence[int]],
    caption: Sequence[Sequence[int]],
    vocab: Vocabulary,
    sp_anchor: str = "[BOS]",
    ca_anchor: str = "[CLS]",
    pad_to=(0, 0),
) -> TextBatch:
    sp = [[vocab[sp_anchor]] + list(s) for s in spatial]
    ca = [[vocab[ca_anchor]] + list(c) for c in caption]
    return TextBatch.from_lists(sp, ca, vocab.pad, pad_to)


def derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random permutation with no fixed points (n >= 2)."""
    if n < 2:
        raise ValueError("a derangement needs at least two items")
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm
