import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mqformer import codec
from mqformer.codec import (
    Vocabulary,
    dequantize_coord,
    detokenize,
    mask_whole_object,
    parse_spatial,
    quantize_box,
    quantize_coord,
    serialize_spatial,
    tokenize,
)
from mqformer.scene import SceneConfig, VisualObject, generate_dataset

VOCAB = Vocabulary.build(SceneConfig())
MAN = VisualObject("man", (0.34, 0.33, 0.64, 0.73))
MAN_TEXT = "⟨br⟩⟨T⟩ man ⟨/T⟩⟨Bbox⟩(0.34, 0.33),(0.64, 0.73)⟨/Box⟩⟨/br⟩"


def random_objects(rng, n):
    out = []
    for _ in range(n):
        x = np.sort(rng.random(2))
        y = np.sort(rng.random(2))
        box = (x[0], y[0], x[1], y[1])
        # boxes thinner than one quantization bin can collapse; keep them out of the property
        if x[0] < x[1] and y[0] < y[1] and _valid_after_quant(box):
            out.append(VisualObject(str(rng.choice(SceneConfig().tags)), box))
    return out


def test_serialize_matches_reference_rendering():
    assert serialize_spatial([MAN]) == MAN_TEXT
    assert serialize_spatial([]) == ""


def test_parse_reference_rendering():
    objs, diags = parse_spatial(MAN_TEXT)
    assert diags == [] and len(objs) == 1
    assert objs[0].tag == "man" and objs[0].box == (0.34, 0.33, 0.64, 0.73)


def test_parse_plain_text_and_truncated():
    assert tuple(parse_spatial("no boxes here")) == ([], [])
    objs, diags = parse_spatial("⟨br⟩⟨T⟩ cat ⟨/T⟩⟨Bbox⟩(0.1, 0.2)")
    assert objs == [] and len(diags) == 1
    assert (diags[0].start, diags[0].end) == (0, len("⟨br⟩⟨T⟩ cat ⟨/T⟩⟨Bbox⟩(0.1, 0.2)".encode()))


def test_parse_is_liberal():
    text = "junk ⟨br⟩ ⟨T⟩dog⟨/T⟩ ⟨Bbox⟩ ( 0.1 ,0.2 ) , (0.5, 0.6) ⟨/Bbox⟩ ⟨/br⟩ tail"
    objs, diags = parse_spatial(text)
    assert [o.tag for o in objs] == ["dog"] and diags == []


def test_parse_reports_invalid_box():
    objs, diags = parse_spatial("⟨br⟩⟨T⟩ cat ⟨/T⟩⟨Bbox⟩(0.5, 0.2),(0.1, 0.6)⟨/Box⟩⟨/br⟩")
    assert objs == [] and len(diags) == 1


def test_roundtrip_random_object_lists():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        objs = random_objects(rng, int(rng.integers(0, 5)))
        parsed, diags = parse_spatial(serialize_spatial(objs))
        assert diags == []
        assert [(o.tag, o.box) for o in parsed] == [(o.tag, quantize_box(o.box)) for o in objs]


def _valid_after_quant(box):
    x1, y1, x2, y2 = quantize_box(box)
    return x1 < x2 and y1 < y2


def test_parse_fuzz_never_raises():
    rng = np.random.default_rng(1)
    alphabet = list("⟨⟩<>()[],.0123456789 brTBboxman/\n") + ["⟨br⟩", "⟨/br⟩", "⟨T⟩", "⟨Bbox⟩", "⟨/Box⟩", "0.5"]
    for _ in range(100_000):
        n = int(rng.integers(0, 24))
        s = "".join(alphabet[i] for i in rng.integers(0, len(alphabet), n))
        parse_spatial(s)


@settings(max_examples=300, deadline=None)
@given(st.text())
def test_parse_arbitrary_unicode(s):
    parse_spatial(s)


@settings(max_examples=100, deadline=None)
@given(st.binary())
def test_parse_arbitrary_bytes(b):
    parse_spatial(b)


def test_quantize_rules():
    assert quantize_coord(0.344) == "0.34"
    assert quantize_coord(0.345) == "0.35"
    assert quantize_coord(1.0) == "1.00"
    assert dequantize_coord("0.35") == 0.35
    with pytest.warns(UserWarning):
        assert quantize_coord(1.2) == "1.00"


def test_quantize_error_bound():
    xs = np.random.default_rng(2).random(10_000)
    err = [abs(dequantize_coord(quantize_coord(x)) - x) for x in xs]
    assert max(err) <= 0.005 + 1e-12


def test_tokenize_coordinates():
    seq = tokenize("(0.34, 0.33)", "spatial", VOCAB)
    assert [VOCAB.tokens[i] for i in seq.ids] == ["(", "0.34", ",", "0.33", ")"]
    assert tokenize("", "caption", VOCAB).ids == []


def test_tokenize_unknown_word():
    seq = tokenize("a zebra", "caption", VOCAB)
    assert seq.ids[1] == VOCAB["[UNK]"] and seq.unknown == [(1, "zebra")]


def test_caption_roundtrip_over_corpus():
    for s in generate_dataset(1000, 3):
        seq = tokenize(s.caption, "caption", VOCAB)
        assert seq.unknown == []
        assert detokenize(seq.ids, VOCAB) == s.caption
        for qa in s.qa:
            q = tokenize(qa.question, "instruction", VOCAB)
            assert q.unknown == [] and detokenize(q.ids, VOCAB) == qa.question
        sp = serialize_spatial(s.objects)
        assert detokenize(tokenize(sp, "spatial", VOCAB).ids, VOCAB) == sp


def test_object_spans():
    seq = tokenize(serialize_spatial([MAN, MAN]), "spatial", VOCAB)
    assert len(seq.object_spans) == 2
    for start, end, _ in seq.object_spans:
        assert VOCAB.tokens[seq.ids[start]] == "⟨br⟩" and VOCAB.tokens[seq.ids[end - 1]] == "⟨/br⟩"


def test_mask_man_example():
    seq = tokenize(MAN_TEXT, "spatial", VOCAB)
    masked, targets = mask_whole_object(seq, 1.0, np.random.default_rng(0), VOCAB)
    toks = [VOCAB.tokens[i] for i in masked.ids]
    assert toks == ["⟨br⟩", "⟨T⟩", "[MASK]", "⟨/T⟩", "⟨Bbox⟩", "(", "[MASK]", ",", "[MASK]", ")",
                    ",", "(", "[MASK]", ",", "[MASK]", ")", "⟨/Box⟩", "⟨/br⟩"]
    assert [VOCAB.tokens[targets[p]] for p in sorted(targets)] == ["man", "0.34", "0.33", "0.64", "0.73"]


def test_mask_prob_zero_without_force_is_identity():
    seq = tokenize(MAN_TEXT * 3, "spatial", VOCAB)
    masked, targets = mask_whole_object(seq, 0.0, np.random.default_rng(0), VOCAB, force=False)
    assert masked.ids == seq.ids and targets == {}
    forced, t2 = mask_whole_object(seq, 0.0, np.random.default_rng(0), VOCAB)
    assert len(t2) == 5


def test_mask_preserves_structure():
    rng = np.random.default_rng(4)
    for _ in range(200):
        objs = random_objects(rng, 3)
        seq = tokenize(serialize_spatial(objs), "spatial", VOCAB)
        masked, targets = mask_whole_object(seq, 0.5, rng, VOCAB)
        assert masked.segments == seq.segments and masked.object_spans == seq.object_spans
        diff = {i for i, (a, b) in enumerate(zip(seq.ids, masked.ids)) if a != b}
        assert diff == set(targets)
        assert len(targets) % 5 == 0


def test_mask_selection_rate():
    rng = np.random.default_rng(5)
    seq = tokenize(MAN_TEXT * 100, "spatial", VOCAB)
    selected = 0
    for _ in range(100):
        _, targets = mask_whole_object(seq, 0.15, rng, VOCAB, force=False)
        selected += len(targets) // 5
    assert 0.14 <= selected / 10_000 <= 0.16


def test_vocab_file_roundtrip(tmp_path):
    p = tmp_path / "vocab.txt"
    VOCAB.save(p)
    again = Vocabulary.load(p)
    assert again.tokens == VOCAB.tokens
    p2 = tmp_path / "vocab2.txt"
    again.save(p2)
    assert p.read_bytes() == p2.read_bytes()


def test_vocab_layout():
    assert VOCAB.tokens[:8] == list(codec.SPECIALS)
    assert len(codec.COORDS) == 101 and codec.COORDS[0] == "0.00" and codec.COORDS[-1] == "1.00"
    assert all(c in VOCAB for c in codec.COORDS)
