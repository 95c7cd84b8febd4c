import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mqformer import scene as sc
from mqformer.scene import (
    Ablation,
    SceneConfig,
    VisualObject,
    blank_features,
    filter_detections,
    generate_scene,
    render_features,
    simulate_detections,
)

CFG = SceneConfig()


def test_generate_scene_deterministic():
    a, b = generate_scene(0, CFG), generate_scene(0, CFG)
    assert a == b
    assert sc.dumps_record(sc.scene_to_record(a)) == sc.dumps_record(sc.scene_to_record(b))


def test_single_object_caption_mentions_tag():
    cfg = SceneConfig(max_objects=1)
    for seed in range(50):
        s = generate_scene(seed, cfg)
        assert len(s.objects) == 1
        mentioned = [t for t in cfg.tags if f" {t}." in s.caption or f" {t} " in s.caption]
        assert mentioned == [s.objects[0].tag]


def test_empty_tag_vocabulary_rejected():
    with pytest.raises(ValueError):
        SceneConfig(tags=())


def test_scene_invariants():
    for seed in range(200):
        s = generate_scene(seed, CFG)
        assert 1 <= len(s.objects) <= CFG.max_objects
        assert all(o.tag in CFG.tags for o in s.objects)
        assert all(d.confidence < CFG.threshold or d.confidence == CFG.threshold for d in s.distractors)


def test_tag_frequency_matches_weights():
    weights = tuple(float(i + 1) for i in range(len(CFG.tags)))
    cfg = SceneConfig(tag_weights=weights)
    counts = Counter()
    for seed in range(10_000):
        counts.update(o.tag for o in generate_scene(seed, cfg).objects)
    n = sum(counts.values())
    p = np.asarray(weights) / sum(weights)
    for tag, pi in zip(cfg.tags, p):
        sigma = np.sqrt(n * pi * (1 - pi))
        assert abs(counts[tag] - n * pi) <= 3 * sigma, tag


def _qa_oracle(objects):
    """Rule-based answers recomputed from ground truth alone."""
    answers = {}
    words = ["zero", "one", "two", "three", "four", "five"]
    tags = [o.tag for o in objects]
    for tag in set(tags):
        answers[f"how many {sc.plural(tag)} are there?"] = words[tags.count(tag)]
    for o in objects:
        if tags.count(o.tag) == 1:
            answers[f"what color is the {o.tag}?"] = o.color
            cx = (o.box[0] + o.box[2]) / 2
            answers[f"where is the {o.tag}?"] = "left" if cx < 0.4 else ("right" if cx > 0.6 else "middle")
    return answers


def test_qa_answers_derivable_from_ground_truth():
    for seed in range(500):
        s = generate_scene(seed, CFG)
        oracle = _qa_oracle(s.objects)
        assert {p.question: p.answer for p in s.qa} == oracle


# -- detections --------------------------------------------------------------


def test_zero_jitter_recovers_boxes():
    cfg = SceneConfig(jitter=0.0)
    s = generate_scene(3, cfg)
    dets = simulate_detections(s, 7, cfg)
    assert [d.box for d in dets[: len(s.objects)]] == [o.box for o in s.objects]


def test_threshold_one_filters_everything():
    s = generate_scene(4, CFG)
    assert filter_detections(simulate_detections(s, 0, CFG), 1.0) == []


def test_filter_boundary_is_strict():
    dets = [VisualObject("cat", (0, 0, 1, 1), c) for c in (0.3, 0.25, 0.9)]
    assert filter_detections(dets, 0.25) == [dets[0], dets[2]]
    assert filter_detections(dets, 0.0) == dets


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1), max_size=12), st.floats(0, 1), st.floats(0, 1))
def test_filter_matches_comprehension_and_is_monotone(confs, t1, t2):
    dets = [VisualObject("dog", (0.1, 0.1, 0.5, 0.5), c) for c in confs]
    assert filter_detections(dets, t1) == [d for d in dets if d.confidence > t1]
    lo, hi = sorted((t1, t2))
    strict, loose = filter_detections(dets, hi), filter_detections(dets, lo)
    assert all(d in dets for d in loose)
    assert all(any(d is e for e in loose) for d in strict)


def test_filtered_detections_recover_tag_multiset():
    hits = 0
    for seed in range(1000):
        s = generate_scene(seed, CFG)
        kept = filter_detections(simulate_detections(s, seed + 17, CFG), CFG.threshold)
        hits += Counter(d.tag for d in kept) == Counter(o.tag for o in s.objects)
    assert hits / 1000 >= 0.99


# -- features ----------------------------------------------------------------


def test_local_rows_and_provenance():
    s = generate_scene(5, CFG)
    dets = filter_detections(simulate_detections(s, 1, CFG), CFG.threshold)
    fb = render_features(s, dets, CFG, seed=2)
    assert fb.global_.shape == (16, 48)
    assert fb.local.shape == (2 * len(dets), 32)
    assert [p[0] for p in fb.provenance] == ["detection"] * len(dets) + ["segmentation"] * len(dets)


def test_no_detections_gives_empty_local():
    s = generate_scene(6, CFG)
    fb = render_features(s, [], CFG, seed=0)
    assert fb.local.shape == (0, 32) and fb.provenance == []


def test_render_deterministic():
    s = generate_scene(8, CFG)
    dets = simulate_detections(s, 1, CFG)
    a, b = render_features(s, dets, CFG, 3), render_features(s, dets, CFG, 3)
    assert a.global_.tobytes() == b.global_.tobytes() and a.local.tobytes() == b.local.tobytes()


def test_one_tag_change_separates_global_features():
    dists = []
    for seed in range(100):
        s = generate_scene(seed, CFG)
        o = s.objects[0]
        other = CFG.tags[(CFG.tags.index(o.tag) + 1) % len(CFG.tags)]
        changed = sc.Scene(s.id, (VisualObject(other, o.box, 1.0, o.color),) + s.objects[1:], (), s.caption, s.qa)
        a = render_features(s, [], CFG, seed).global_.reshape(-1)
        b = render_features(changed, [], CFG, seed).global_.reshape(-1)
        dists.append(1 - a @ b / np.linalg.norm(a) / np.linalg.norm(b))
    assert np.mean(dists) > 0


def test_ablation_blanking():
    s = generate_scene(9, CFG)
    dets = filter_detections(simulate_detections(s, 1, CFG), CFG.threshold)
    fb = render_features(s, dets, CFG, 0)
    no_vr = blank_features(fb, Ablation(no_vr=True))
    assert np.all(no_vr.local == 0) and np.array_equal(no_vr.global_, fb.global_)
    assert np.all(blank_features(fb, Ablation(no_vit=True)).global_ == 0)
    no_odm = blank_features(fb, Ablation(no_odm=True))
    for row, (stage, _) in enumerate(fb.provenance):
        if stage == "detection":
            assert np.all(no_odm.local[row] == 0)
        else:
            assert np.array_equal(no_odm.local[row], fb.local[row])


def test_ablation_flags_compose():
    assert Ablation(no_odm=True, no_ssm=True).normalized().no_vr
    assert Ablation.parse("no-vr") == Ablation(no_odm=True, no_ssm=True, no_vr=True)
    with pytest.raises(ValueError):
        Ablation.parse("no-xyz")


def test_export_format(tmp_path):
    scenes = sc.generate_dataset(20, 1, CFG)
    path = tmp_path / "scenes.jsonl"
    sc.write_scenes(path, scenes)
    lines = path.read_text(encoding="utf-8").splitlines()
    assert len(lines) == 20
    rec = json.loads(lines[0])
    assert set(rec) >= {"id", "caption", "objects", "qa"}
    # six decimals on every coordinate
    import re
    for line in lines:
        for box in re.findall(r'"box": \[([^\]]*)\]', line):
            assert all(re.fullmatch(r"\d\.\d{6}", v.strip()) for v in box.split(","))
    assert sc.read_scenes(path) == scenes
