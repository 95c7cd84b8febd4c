"""Generative stage: soft visual tokens into a small frozen causal LM adapted with LoRA.

Query outputs of the querying transformer are projected to the LM width
and prepended to the embedded instruction. The LM base is trained first
as a plain text model on the synthetic corpus, then frozen; fine-tuning
updates the querying transformer, the projection and low-rank adapters on
the attention query/value matrices.

Weights are stored input-major (``y = x @ W``). A LoRA pair ``A: r x d_in``
and ``B: d_out x r`` therefore contributes ``(alpha / r) * (B @ A).T``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .codec import Vocabulary, bbox_fragment, detokenize, quantize_box, serialize_spatial, tokenize
from .model import FeatureBatch, MQFormerConfig, forward
from .scene import COUNT_WORDS, FeatureBundle, Scene, dumps_record
from .templates import TASKS, TEMPLATES

logger = logging.getLogger(__name__)

LM_PREFIX = "tlm."
LORA_PREFIX = "lora/"
IGNORE = -100


@dataclass(frozen=True)
class TinyLMConfig:
    n_layers: int = 4
    d_lm: int = 128
    n_heads: int = 4
    vocab_size: int = 0
    max_seq: int = 128  # text positions; soft tokens carry no position
    ffn_mult: int = 4

    def __post_init__(self):
        if self.d_lm % self.n_heads:
            raise ValueError("d_lm must be divisible by n_heads")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class LoRAConfig:
    rank: int = 8
    alpha: float = 16.0

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# parameters


def _xavier(rng, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_lm(config: TinyLMConfig, seed: int) -> dict:
    if config.vocab_size < 1:
        raise ValueError("config.vocab_size must be set")
    rng = np.random.default_rng(seed)
    d, h = config.d_lm, config.ffn_mult * config.d_lm
    p = {
        "tlm.embed": rng.normal(0.0, 0.02, size=(config.vocab_size, d)),
        "tlm.pos": rng.normal(0.0, 0.02, size=(config.max_seq, d)),
    }
    for l in range(config.n_layers):
        pre = f"tlm.layers.{l}"
        p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"] = np.ones(d), np.zeros(d)
        for m in ("wq", "wk", "wv", "wo"):
            p[f"{pre}.attn.{m}"] = _xavier(rng, d, d)
            p[f"{pre}.attn.b{m[1]}"] = np.zeros(d)
        p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"] = np.ones(d), np.zeros(d)
        p[f"{pre}.ffn.w1"], p[f"{pre}.ffn.b1"] = _xavier(rng, d, h), np.zeros(h)
        p[f"{pre}.ffn.w2"], p[f"{pre}.ffn.b2"] = _xavier(rng, h, d), np.zeros(d)
    p["tlm.final_ln.g"], p["tlm.final_ln.b"] = np.ones(d), np.zeros(d)
    p["tlm.head.bias"] = np.zeros(config.vocab_size)
    return p


def lora_targets(config: TinyLMConfig) -> list:
    return [f"tlm.layers.{l}.attn.{m}" for l in range(config.n_layers) for m in ("wq", "wv")]


def check_rank(rank: int, d_in: int, d_out: int) -> None:
    if rank < 1 or rank >= min(d_in, d_out):
        raise ValueError(f"LoRA rank {rank} must satisfy 1 <= r < min(d_in, d_out) = {min(d_in, d_out)}")


def init_lora(config: TinyLMConfig, lora: LoRAConfig, seed: int) -> dict:
    """A ~ U(+-1/sqrt(d_in)), B = 0 so the adapted model starts equal to the base."""
    rng = np.random.default_rng(seed)
    d = config.d_lm
    check_rank(lora.rank, d, d)
    p = {}
    for target in lora_targets(config):
        p[f"{LORA_PREFIX}{target}.A"] = rng.uniform(-1, 1, size=(lora.rank, d)) / np.sqrt(d)
        p[f"{LORA_PREFIX}{target}.B"] = np.zeros((d, lora.rank))
    return p


def lora_param_count(config: TinyLMConfig, lora: LoRAConfig) -> int:
    d = config.d_lm
    return len(lora_targets(config)) * (lora.rank * d + d * lora.rank)


def init_projection(d_model: int, d_lm: int, seed: int) -> dict:
    rng = np.random.default_rng(seed)
    return {"proj.w": _xavier(rng, d_model, d_lm), "proj.b": np.zeros(d_lm)}


def lora_forward(x: Tensor, W: Tensor, A: Tensor, B: Tensor, scaling: float) -> Tensor:
    """x @ (W + scaling * (B A)^T) without forming the merged matrix."""
    base = ad.matmul(x, W)
    low = ad.matmul(ad.matmul(x, ad.transpose(A)), ad.transpose(B))
    return ad.add(base, ad.scale(low, scaling))


def lora_merge(W: np.ndarray, A: np.ndarray, B: np.ndarray, scaling: float) -> np.ndarray:
    check_rank(A.shape[0], A.shape[1], B.shape[0])
    return W + scaling * (B @ A).T


def merge_all(params: dict, config: TinyLMConfig, lora: LoRAConfig) -> dict:
    """Copy of ``params`` with every adapter folded into its base matrix and removed."""
    out = {k: v for k, v in params.items() if not k.startswith(LORA_PREFIX)}
    for t in lora_targets(config):
        a, b = params.get(f"{LORA_PREFIX}{t}.A"), params.get(f"{LORA_PREFIX}{t}.B")
        if a is not None:
            out[t] = lora_merge(params[t], a, b, lora.scaling)
    return out


# ---------------------------------------------------------------------------
# forward


def project_queries(params: dict, query_states: Tensor) -> Tensor:
    """(B, n_q, d_model) -> (B, n_q, d_lm) soft visual tokens."""
    return ad.add_bias(ad.matmul(query_states, params["proj.w"]), params["proj.b"])


def soft_tokens(params: dict, mq_config: MQFormerConfig, features: FeatureBatch) -> Tensor:
    out = forward(params, mq_config, features, None, None)
    return project_queries(params, out.query_states)


def _proj(params, pre, name, x, scaling):
    w = params[f"{pre}.attn.{name}"]
    a = params.get(f"{LORA_PREFIX}{pre}.attn.{name}.A")
    if a is not None:
        y = lora_forward(x, w, a, params[f"{LORA_PREFIX}{pre}.attn.{name}.B"], scaling)
    else:
        y = ad.matmul(x, w)
    return ad.add_bias(y, params[f"{pre}.attn.b{name[1]}"])


def lm_logits(
    params: dict,
    config: TinyLMConfig,
    ids: np.ndarray,
    lengths: Sequence[int],
    soft: Optional[Tensor] = None,
    lora: LoRAConfig = LoRAConfig(),
) -> Tensor:
    """Causal LM over ``[soft tokens | ids]``; returns (B, n_soft + L, V) logits.

    Text positions are numbered from 0 after the soft prefix, so the LM sees
    instructions at the same positions with or without visual input.
    """
    ids = np.asarray(ids, dtype=np.int64)
    B, L = ids.shape
    if L > config.max_seq:
        raise ad.ShapeError(f"sequence of {L} tokens exceeds max_seq={config.max_seq}")
    x = ad.add(
        ad.embedding_lookup(params["tlm.embed"], ids),
        ad.embedding_lookup(params["tlm.pos"], np.broadcast_to(np.arange(L), (B, L))),
    )
    n_soft = 0
    if soft is not None:
        n_soft = soft.shape[1]
        x = ad.concat([soft, x], axis=1)
    S = n_soft + L
    valid = np.concatenate([np.ones((B, n_soft), bool), np.arange(L)[None, :] < np.asarray(lengths)[:, None]], axis=1)
    mask = np.tril(np.ones((S, S), dtype=bool))[None] & valid[:, None, :]
    for l in range(config.n_layers):
        pre = f"tlm.layers.{l}"
        h = ad.layer_norm(x, params[f"{pre}.ln1.g"], params[f"{pre}.ln1.b"])
        q = _proj(params, pre, "wq", h, lora.scaling)
        k = _proj(params, pre, "wk", h, lora.scaling)
        v = _proj(params, pre, "wv", h, lora.scaling)
        att = ad.masked_attention(q, k, v, mask, config.n_heads)
        x = ad.add(x, ad.add_bias(ad.matmul(att, params[f"{pre}.attn.wo"]), params[f"{pre}.attn.bo"]))
        h = ad.layer_norm(x, params[f"{pre}.ln2.g"], params[f"{pre}.ln2.b"])
        h = ad.relu(ad.add_bias(ad.matmul(h, params[f"{pre}.ffn.w1"]), params[f"{pre}.ffn.b1"]))
        x = ad.add(x, ad.add_bias(ad.matmul(h, params[f"{pre}.ffn.w2"]), params[f"{pre}.ffn.b2"]))
    x = ad.layer_norm(x, params["tlm.final_ln.g"], params["tlm.final_ln.b"])
    return ad.add_bias(ad.matmul(x, ad.transpose(params["tlm.embed"])), params["tlm.head.bias"])


def pad_ids(seqs: Sequence[Sequence[int]], pad_id: int) -> tuple:
    L = max((len(s) for s in seqs), default=0)
    out = np.full((len(seqs), max(L, 1)), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out, np.array([len(s) for s in seqs], dtype=np.int64)


# ---------------------------------------------------------------------------
# LM pre-training


@dataclass
class ScalarLoss:
    total: Tensor
    name: str = "loss"

    def values(self) -> dict:
        return {self.name: self.total.item()}


def lm_loss(params: dict, config: TinyLMConfig, seqs: Sequence[Sequence[int]], pad_id: int) -> Tensor:
    """Mean next-token cross-entropy over every position of every sequence."""
    ids, lens = pad_ids(seqs, pad_id)
    logits = lm_logits(params, config, ids, lens)
    tgt = np.full(ids.shape, IGNORE, dtype=np.int64)
    for b, n in enumerate(lens):
        tgt[b, : n - 1] = ids[b, 1:n]
    return ad.cross_entropy_logits(logits, tgt)


def pretrain_lm(config: TinyLMConfig, corpus: Sequence[Sequence[int]], train_config, pad_id: int, seed: int = 0, trace_path=None):
    """Plain causal-LM training of the base model; returns (params, trace lines)."""
    from .trainer import train

    params = init_lm(config, seed)

    def loss_fn(p, batch, rng):
        return ScalarLoss(lm_loss(p, config, batch, pad_id), "lm")

    _, trace = train(train_config, list(corpus), params, loss_fn, trace_path=trace_path)
    return params, trace


def perplexity(params: dict, config: TinyLMConfig, seqs: Sequence[Sequence[int]], pad_id: int, batch: int = 64) -> float:
    total, count = 0.0, 0
    params = {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in params.items()}
    with ad.no_grad():
        for i in range(0, len(seqs), batch):
            chunk = seqs[i : i + batch]
            n = sum(len(s) - 1 for s in chunk)
            total += lm_loss(params, config, chunk, pad_id).item() * n
            count += n
    return math.exp(total / count)


# ---------------------------------------------------------------------------
# instruction data


@dataclass(frozen=True)
class InstructionRecord:
    template_id: str
    instruction: str
    response: str
    scene_id: str

    def to_record(self) -> dict:
        return {"template_id": self.template_id, "instruction": self.instruction, "response": self.response, "scene_id": self.scene_id}


def render_options(options: Sequence[str]) -> str:
    return " ".join(f"({chr(ord('a') + i)}) {o}" for i, o in enumerate(options))


def _largest(objects):
    return max(objects, key=lambda o: (o.box[2] - o.box[0]) * (o.box[3] - o.box[1]))


def _describe(obj) -> str:
    return f"a {obj.color} {obj.tag}" if obj.color else f"a {obj.tag}"


def _random_box(rng) -> tuple:
    while True:
        xs, ys = np.sort(rng.random(2)), np.sort(rng.random(2))
        box = quantize_box((xs[0], ys[0], xs[1], ys[1]))
        if box[0] < box[2] and box[1] < box[3]:
            return box


def _option_pool(qa) -> list:
    q = qa.question
    if q.startswith("what color"):
        from .scene import DEFAULT_COLORS

        return list(DEFAULT_COLORS)
    if q.startswith("where"):
        return ["left", "middle", "right"]
    return list(COUNT_WORDS[1:5])


def expand_template(task: str, scene: Scene, rng: np.random.Generator, index: Optional[int] = None) -> InstructionRecord:
    """Fill one template of ``task`` (uniformly chosen unless ``index``) from ``scene``."""
    if task not in TEMPLATES:
        raise KeyError(f"unknown task {task!r}")
    templates = TEMPLATES[task]
    i = int(rng.integers(len(templates))) if index is None else index
    template = templates[i]
    fill = {}
    unique = scene.unique_objects()

    if task == "caption":
        response = scene.caption
    elif task in ("vqa", "textvqa"):
        if not scene.qa:
            raise ValueError(f"scene {scene.id} has no QA pairs")
        qa = scene.qa[int(rng.integers(len(scene.qa)))]
        fill["Question"], response = qa.question, qa.answer
    elif task == "grounded_caption":
        obj = _largest(scene.objects)
        response = f"{_describe(obj)} {serialize_spatial([obj])}"
    elif task == "rec":
        if not unique:
            raise ValueError(f"scene {scene.id} has no unambiguous object to refer to")
        obj = unique[int(rng.integers(len(unique)))]
        fill["Tag"] = obj.tag
        if "{Bbox}" in template:
            box = quantize_box(obj.box) if rng.random() < 0.5 else _random_box(rng)
            fill["Bbox"] = bbox_fragment(box)
            from .evaluation import iou

            response = "yes" if iou(box, obj.box) > 0.5 else "no"
        else:
            response = serialize_spatial([obj])
    elif task == "ref_dialogue":
        if not unique:
            raise ValueError(f"scene {scene.id} has no unambiguous object to refer to")
        obj = unique[int(rng.integers(len(unique)))]
        fill["TagBbox"] = f"{obj.tag} {bbox_fragment(obj.box)}"
        if "{Question}" in template:
            qs = [q for q in scene.qa if q.box == obj.box]
            qa = qs[int(rng.integers(len(qs)))]
            fill["Question"], response = qa.question, qa.answer
        else:
            response = _describe(obj)
    elif task == "mc_vqa":
        if not scene.qa:
            raise ValueError(f"scene {scene.id} has no QA pairs")
        qa = scene.qa[int(rng.integers(len(scene.qa)))]
        pool = [o for o in _option_pool(qa) if o != qa.answer]
        k = min(3, len(pool))
        options = [qa.answer] + [pool[j] for j in rng.choice(len(pool), k, replace=False)]
        options = [options[j] for j in rng.permutation(len(options))]
        fill["Question"], fill["Option"], response = qa.question, render_options(options), qa.answer
    else:  # pragma: no cover - guarded above
        raise KeyError(task)

    instruction = template
    for key, value in fill.items():
        instruction = instruction.replace("{" + key + "}", value)
    if "{" in instruction:
        raise ValueError(f"unresolved placeholder in {task}/{i}: {instruction!r}")
    return InstructionRecord(f"{task}/{i}", instruction, response, scene.id)


def build_instructions(scenes: Sequence[Scene], tasks: Sequence[str], seed: int, index: Optional[dict] = None) -> list:
    """One record per (scene, task) where the scene supports the task.

    ``index`` optionally pins the template per task (e.g. {"rec": 0}).
    """
    index = index or {}
    out = []
    for i, scene in enumerate(scenes):
        for t in tasks:
            rng = np.random.default_rng([seed, i, TASKS.index(t)])
            try:
                out.append(expand_template(t, scene, rng, index.get(t)))
            except ValueError as exc:
                logger.debug("skip %s for %s: %s", t, scene.id, exc)
    return out


def write_instructions(path, records: Sequence[InstructionRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(dumps_record(r.to_record()) + "\n")


def read_instructions(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [InstructionRecord(**json.loads(line)) for line in fh if line.strip()]


def encode_prompt(instruction: str, vocab: Vocabulary) -> list:
    return [vocab["[BOS]"]] + tokenize(instruction, "instruction", vocab).ids


def encode_response(response: str, vocab: Vocabulary) -> list:
    return tokenize(response, "response", vocab).ids + [vocab.eos]


def lm_corpus(scenes: Sequence[Scene], vocab: Vocabulary, seed: int, tasks: Sequence[str] = TASKS) -> list:
    """Text-only sequences for the base LM: captions, QA, spatial strings, instruction/response pairs."""
    bos, eos = vocab["[BOS]"], vocab.eos
    out = []
    for s in scenes:
        out.append([bos] + tokenize(s.caption, "caption", vocab).ids + [eos])
        for qa in s.qa:
            out.append([bos] + tokenize(f"{qa.question} {qa.answer}", "instruction", vocab).ids + [eos])
        out.append([bos] + tokenize(serialize_spatial(s.objects), "spatial", vocab).ids + [eos])
    for r in build_instructions(scenes, tasks, seed):
        out.append(encode_prompt(r.instruction, vocab) + encode_response(r.response, vocab))
    return out


# ---------------------------------------------------------------------------
# fine-tuning and generation


@dataclass
class Stage2Item:
    features: FeatureBundle
    prompt: list
    response: list
    record: InstructionRecord


def make_items(records: Sequence[InstructionRecord], features_by_scene: dict, vocab: Vocabulary) -> list:
    items = []
    for r in records:
        if not r.response:
            raise ValueError(f"empty response for {r.template_id} on {r.scene_id}")
        items.append(Stage2Item(features_by_scene[r.scene_id], encode_prompt(r.instruction, vocab), encode_response(r.response, vocab), r))
    return items


def stage2_trainable(params: dict) -> list:
    """Querying-transformer weights on the query path, the projection and the adapters."""
    frozen_mq = ("embed.", "lm.bias", "itm.", "itc.", ".ffn_text.", ".ln_ffn_text.")
    names = []
    for n in params:
        if n.startswith(LM_PREFIX):
            continue
        if not n.startswith(LORA_PREFIX) and not n.startswith("proj.") and any(f in n or n.startswith(f) for f in frozen_mq):
            continue
        names.append(n)
    return names


def response_loss(params: dict, mq_config: MQFormerConfig, lm_config: TinyLMConfig, items: Sequence[Stage2Item], pad_id: int, lora: LoRAConfig = LoRAConfig()) -> Tensor:
    """Next-token cross-entropy on response tokens only."""
    feats = FeatureBatch.stack([it.features for it in items])
    soft = soft_tokens(params, mq_config, feats)
    n_soft = soft.shape[1]
    seqs = [it.prompt + it.response for it in items]
    ids, lens = pad_ids(seqs, pad_id)
    logits = lm_logits(params, lm_config, ids, lens, soft, lora)
    tgt = np.full((len(items), n_soft + ids.shape[1]), IGNORE, dtype=np.int64)
    for b, it in enumerate(items):
        start = len(it.prompt)
        for t in range(start - 1, lens[b] - 1):
            tgt[b, n_soft + t] = ids[b, t + 1]
    return ad.cross_entropy_logits(logits, tgt)


def finetune_step(params: dict, mq_config, lm_config, items, pad_id, lora: LoRAConfig = LoRAConfig()) -> ScalarLoss:
    return ScalarLoss(response_loss(params, mq_config, lm_config, items, pad_id, lora), "response")


def greedy_generate(
    params: dict,
    mq_config: Optional[MQFormerConfig],
    lm_config: TinyLMConfig,
    features: Optional[FeatureBatch],
    prompts: Sequence[Sequence[int]],
    max_new: int,
    eos_id: int,
    pad_id: int,
    lora: LoRAConfig = LoRAConfig(),
    soft: Optional[Tensor] = None,
) -> list:
    """Argmax decoding for a batch of prompts; returns generated ids (without [EOS])."""
    with ad.no_grad():
        tp = {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in params.items()}
        if soft is None and features is not None:
            soft = soft_tokens(tp, mq_config, features)
        n_soft = 0 if soft is None else soft.shape[1]
        seqs = [list(p) for p in prompts]
        out = [[] for _ in prompts]
        active = list(range(len(prompts)))
        for _ in range(max_new):
            if not active:
                break
            room = lm_config.max_seq - max(len(seqs[i]) for i in active)
            if room <= 0:
                break
            ids, lens = pad_ids([seqs[i] for i in active], pad_id)
            s = None if soft is None else Tensor(soft.data[active])
            logits = lm_logits(tp, lm_config, ids, lens, s, lora).data
            nxt = logits[np.arange(len(active)), n_soft + lens - 1].argmax(axis=1)
            still = []
            for row, i in enumerate(active):
                tok = int(nxt[row])
                if tok == eos_id:
                    continue
                out[i].append(tok)
                seqs[i].append(tok)
                still.append(i)
            active = still
    return out


def generate_text(params, mq_config, lm_config, features, instructions: Sequence[str], vocab: Vocabulary, max_new: int = 24, lora: LoRAConfig = LoRAConfig(), batch: int = 64) -> list:
    texts = []
    for i in range(0, len(instructions), batch):
        chunk = instructions[i : i + batch]
        f = None if features is None else features.take(np.arange(i, i + len(chunk)))
        ids = greedy_generate(params, mq_config, lm_config, f, [encode_prompt(t, vocab) for t in chunk], max_new, vocab.eos, vocab.pad, lora)
        texts.extend(detokenize(g, vocab) for g in ids)
    return texts
