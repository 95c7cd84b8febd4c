"""Text side of the visual refiner.

Spatial representation grammar (one block per object)::

    ⟨br⟩⟨T⟩ man ⟨/T⟩⟨Bbox⟩(0.34, 0.33),(0.64, 0.73)⟨/Box⟩⟨/br⟩

Coordinates are single tokens from a 101-entry table ``0.00`` .. ``1.00``.
Text is tokenized by a small scanner (angle tags, bracketed specials,
coordinates, words, punctuation); ``detokenize`` applies fixed spacing
rules so that generator output round-trips exactly.
"""

from __future__ import annotations

import re
import warnings
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Iterable, Optional, Sequence

import numpy as np

from .scene import COUNT_WORDS, DEFAULT_COLORS, SceneConfig, VisualObject, make_caption, plural
from .templates import RESPONSE_WORDS, TEMPLATES

SPECIALS = ("[PAD]", "[BOS]", "[CLS]", "[DEC]", "[MLM]", "[MASK]", "[EOS]", "[UNK]")
STRUCTURAL = ("⟨br⟩", "⟨/br⟩", "⟨T⟩", "⟨/T⟩", "⟨Bbox⟩", "⟨/Box⟩", "(", ")", ",")
COORDS = tuple(f"{i / 100:.2f}" for i in range(101))
PUNCT = (".", "?", ":", "!", ";", "&")

SEGMENTS = ("spatial", "caption", "instruction", "response")

_TOKEN_RE = re.compile(
    r"⟨/?[A-Za-z]+⟩"  # structural angle tags
    r"|\[[A-Z]+\]"  # specials
    r"|\d\.\d\d(?!\d)"  # coordinates
    r"|[A-Za-z]+(?:'[a-z]+)?"  # words
    r"|[(),.?:!;&]"  # punctuation
    r"|\S"  # anything else -> unknown
)

_NO_SPACE_BEFORE = {",", ")", ".", "?", ":", "!", ";"}


def _is_angle(tok: str) -> bool:
    return tok.startswith("⟨")


def _needs_space(prev: Optional[str], cur: str) -> bool:
    if prev is None or cur in _NO_SPACE_BEFORE or prev == "(":
        return False
    if _is_angle(prev) and (_is_angle(cur) or cur == "("):
        return False
    if prev == ")" and _is_angle(cur):
        return False
    if prev == "," and cur == "(":
        return False
    return True


def join_tokens(tokens: Sequence[str]) -> str:
    out, prev = [], None
    for tok in tokens:
        if _needs_space(prev, tok):
            out.append(" ")
        out.append(tok)
        prev = tok
    return "".join(out)


# ---------------------------------------------------------------------------
# coordinates


def quantize_coord(x: float) -> str:
    """Round half up to the nearest 0.01 and return the coordinate token."""
    x = float(x)
    if not 0.0 <= x <= 1.0:
        warnings.warn(f"coordinate {x} outside [0, 1]; clamped", stacklevel=2)
        x = min(max(x, 0.0), 1.0)
    q = Decimal(repr(x)).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP)
    return f"{q:.2f}"


def dequantize_coord(token: str) -> float:
    if token not in _COORD_SET:
        raise ValueError(f"not a coordinate token: {token!r}")
    return int(token[0]) + int(token[2:]) / 100


_COORD_SET = frozenset(COORDS)


def quantize_box(box) -> tuple:
    return tuple(dequantize_coord(quantize_coord(v)) for v in box)


# ---------------------------------------------------------------------------
# spatial grammar


def bbox_fragment(box) -> str:
    x1, y1, x2, y2 = (quantize_coord(v) for v in box)
    return f"⟨Bbox⟩({x1}, {y1}),({x2}, {y2})⟨/Box⟩"


def serialize_spatial(objects: Iterable[VisualObject]) -> str:
    return "".join(f"⟨br⟩⟨T⟩ {o.tag} ⟨/T⟩{bbox_fragment(o.box)}⟨/br⟩" for o in objects)


_NUM = r"\s*(\d+(?:\.\d+)?)\s*"
_BLOCK_RE = re.compile(
    r"[⟨<]br[⟩>]\s*[⟨<]T[⟩>]\s*(?P<tag>[^⟨<⟩>]*?)\s*[⟨<]/T[⟩>]\s*"
    r"[⟨<]Bbox[⟩>]\s*\(" + _NUM + "," + _NUM + r"\)\s*,\s*\(" + _NUM + "," + _NUM + r"\)\s*"
    r"[⟨<]/B(?:b)?ox[⟩>]\s*[⟨<]/br[⟩>]"
)
_OPEN_RE = re.compile(r"[⟨<]br[⟩>]")


@dataclass
class ParseDiagnostic:
    start: int  # byte offsets into the UTF-8 encoding of the input
    end: int
    reason: str


@dataclass
class ParseResult:
    objects: list
    diagnostics: list

    def __iter__(self):
        return iter((self.objects, self.diagnostics))


def _byte_offset(text: str, char_index: int) -> int:
    return len(text[:char_index].encode("utf-8", errors="surrogatepass"))


def parse_spatial(text: str) -> ParseResult:
    """Recover every well-formed object block from untrusted text.

    Never raises on string input. Malformed blocks (anything opened with
    ``⟨br⟩`` that does not complete the grammar or carries an invalid box)
    are skipped and reported with their byte range.
    """
    if not isinstance(text, str):
        text = bytes(text).decode("utf-8", errors="replace")
    objects, diags = [], []
    pos = 0
    while True:
        opener = _OPEN_RE.search(text, pos)
        if opener is None:
            break
        m = _BLOCK_RE.match(text, opener.start())
        if m is None:
            nxt = _OPEN_RE.search(text, opener.end())
            end = nxt.start() if nxt else len(text)
            diags.append(ParseDiagnostic(_byte_offset(text, opener.start()), _byte_offset(text, end), "incomplete block"))
            pos = opener.end()
            continue
        tag = m.group("tag").strip()
        try:
            box = tuple(float(m.group(i)) for i in (2, 3, 4, 5))
            obj = VisualObject(tag, box, 1.0)
            if not tag:
                raise ValueError("empty tag")
        except ValueError as exc:
            diags.append(ParseDiagnostic(_byte_offset(text, m.start()), _byte_offset(text, m.end()), str(exc)))
        else:
            objects.append(obj)
        pos = m.end()
    return ParseResult(objects, diags)


def first_box(text: str) -> Optional[tuple]:
    objs = parse_spatial(text).objects
    return objs[0].box if objs else None


# ---------------------------------------------------------------------------
# vocabulary


class Vocabulary:
    """Dense token table: specials, structural, coordinates, tags, words."""

    def __init__(self, tokens: Sequence[str]):
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        for s in SPECIALS:
            if s not in self.index:
                raise ValueError(f"vocabulary lacks special token {s}")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, tok: str) -> bool:
        return tok in self.index

    def id(self, tok: str) -> int:
        return self.index.get(tok, self.index["[UNK]"])

    def __getitem__(self, tok: str) -> int:
        return self.index[tok]

    @property
    def pad(self) -> int:
        return self.index["[PAD]"]

    @property
    def mask(self) -> int:
        return self.index["[MASK]"]

    @property
    def eos(self) -> int:
        return self.index["[EOS]"]

    def coord_ids(self) -> frozenset:
        return frozenset(self.index[c] for c in COORDS)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("".join(t + "\n" for t in self.tokens))

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8", newline="\n") as fh:
            data = fh.read()
        if not data.endswith("\n"):
            raise ValueError("vocabulary file must end with a newline")
        return cls(data[:-1].split("\n"))

    @classmethod
    def build(cls, config: SceneConfig = SceneConfig()) -> "Vocabulary":
        words = set(RESPONSE_WORDS)
        words.update(config.colors)
        words.update(DEFAULT_COLORS)
        words.update(COUNT_WORDS)
        words.update(plural(t) for t in config.tags)
        words.update(["left", "right", "middle", "above", "below"])
        # every word the caption/QA grammar can emit
        probe = [VisualObject(t, (0.1, 0.1, 0.2, 0.2), 1.0, config.colors[0]) for t in config.tags[:2]]
        words.update(_scan(make_caption(probe)))
        words.update(_scan("how many are there? what color is the where is the"))
        for texts in TEMPLATES.values():
            for t in texts:
                words.update(_scan(re.sub(r"\{[A-Za-z]+\}", " ", t)))
        fixed = set(SPECIALS) | set(STRUCTURAL) | set(COORDS) | set(config.tags)
        words = sorted(w for w in words if w not in fixed)
        return cls(list(SPECIALS) + list(STRUCTURAL) + list(COORDS) + list(config.tags) + words)


def _scan(text: str) -> list:
    return _TOKEN_RE.findall(text)


# ---------------------------------------------------------------------------
# token sequences


@dataclass
class TokenSequence:
    ids: list
    segments: list
    object_spans: list = field(default_factory=list)  # (start, end_exclusive, object_index)
    unknown: list = field(default_factory=list)  # (position, surface form)

    def __len__(self) -> int:
        return len(self.ids)

    def __add__(self, other: "TokenSequence") -> "TokenSequence":
        n = len(self.ids)
        k = len(self.object_spans)
        return TokenSequence(
            self.ids + other.ids,
            self.segments + other.segments,
            self.object_spans + [(s + n, e + n, i + k) for s, e, i in other.object_spans],
            self.unknown + [(p + n, w) for p, w in other.unknown],
        )


def _object_spans(tokens: Sequence[str]) -> list:
    spans, start = [], None
    for i, tok in enumerate(tokens):
        if tok == "⟨br⟩":
            start = i
        elif tok == "⟨/br⟩" and start is not None:
            spans.append((start, i + 1, len(spans)))
            start = None
    return spans


def tokenize(text: str, segment: str, vocab: Vocabulary) -> TokenSequence:
    if segment not in SEGMENTS:
        raise ValueError(f"unknown segment {segment!r}")
    toks = _scan(text)
    ids, unknown = [], []
    for i, t in enumerate(toks):
        if t in vocab.index:
            ids.append(vocab.index[t])
        else:
            ids.append(vocab.index["[UNK]"])
            unknown.append((i, t))
    return TokenSequence(ids, [segment] * len(ids), _object_spans(toks), unknown)


def detokenize(ids: Iterable[int], vocab: Vocabulary, skip_special: bool = False) -> str:
    toks = [vocab.tokens[int(i)] for i in ids]
    if skip_special:
        toks = [t for t in toks if t not in SPECIALS or t in ("[MASK]", "[UNK]")]
    return join_tokens(toks)


def mask_whole_object(seq: TokenSequence, prob: float, rng: np.random.Generator, vocab: Vocabulary, force: bool = True):
    """Replace the tag and the four coordinates of randomly chosen objects by [MASK].

    Each object span is picked independently with ``prob``. If none is picked
    and ``force`` is set, one span is chosen uniformly so the sequence always
    carries a prediction target. Returns (masked sequence, {position: original id}).
    """
    spans = seq.object_spans
    chosen = [s for s in spans if rng.random() < prob]
    if not chosen and force and spans:
        chosen = [spans[int(rng.integers(len(spans)))]]
    coords = vocab.coord_ids()
    t_open, t_close = vocab["⟨T⟩"], vocab["⟨/T⟩"]
    ids = list(seq.ids)
    targets = {}
    for start, end, _ in chosen:
        in_tag = False
        for p in range(start, end):
            tok = seq.ids[p]
            if tok == t_open:
                in_tag = True
            elif tok == t_close:
                in_tag = False
            elif in_tag or tok in coords:
                targets[p] = tok
                ids[p] = vocab.mask
    masked = TokenSequence(ids, list(seq.segments), list(seq.object_spans), list(seq.unknown))
    return masked, targets
