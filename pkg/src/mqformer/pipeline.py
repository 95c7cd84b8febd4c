"""End-to-end runs shared by the command line and the acceptance suite.

A RunConfig is a flat mapping of dotted keys (``train.peak_lr``,
``model.d_model`` ...) with typed defaults. It can be read from a
``key = value`` text file; later sources override earlier ones.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import genstage as G
from .codec import Vocabulary
from .data import build_examples
from .evaluation import EvalReport, answer_accuracy, fingerprint, rec_accuracy
from .model import FeatureBatch, MQFormerConfig, init_params
from .objectives import total_loss
from .scene import Ablation, Scene, SceneConfig, scene_features
from .templates import TASKS, TEMPLATES
from .trainer import Checkpoint, TrainConfig, train

logger = logging.getLogger(__name__)

DEFAULTS = {
    "seed": 0,
    "threads": 0,
    "ablate": "",
    # stage-1 optimisation
    "train.peak_lr": 1e-4,
    "train.warmup_ratio": 0.15,
    "train.total_steps": 500,
    "train.batch_size": 16,
    "train.weight_decay": 0.05,
    "train.beta1": 0.9,
    "train.beta2": 0.98,
    "train.eps": 1e-8,
    "train.grad_clip": 1.0,
    "train.checkpoint_every": 0,
    # querying transformer
    "model.n_visual_queries": 32,
    "model.n_grounding_queries": 32,
    "model.d_model": 64,
    "model.n_layers": 4,
    "model.n_heads": 4,
    "model.max_text_len": 96,
    "model.ffn_mult": 4,
    # base language model and its pre-training
    "lm.n_layers": 4,
    "lm.d_lm": 128,
    "lm.n_heads": 4,
    "lm.max_seq": 128,
    "lm.steps": 2000,
    "lm.batch_size": 16,
    "lm.peak_lr": 1e-3,
    # adapters and stage-2 optimisation
    "lora.rank": 8,
    "lora.alpha": 16.0,
    "finetune.steps": 300,
    "finetune.batch_size": 16,
    "finetune.peak_lr": 1e-4,
    "finetune.tasks": "rec,vqa,caption",
    # scenes
    "scene.distractor_rate": 0.5,
    "scene.miss_rate": 0.002,
    "scene.threshold": 0.25,
    "eval.max_new": 24,
}

# Desk-scale reference run used by the acceptance suite.
REFERENCE = {
    "train.peak_lr": 1e-3,
    "model.n_visual_queries": 16,
    "model.n_grounding_queries": 16,
    "model.d_model": 48,
    "model.n_layers": 2,
    "model.max_text_len": 64,
    "lm.n_layers": 2,
    "lm.d_lm": 64,
    "lm.max_seq": 64,
    "lm.steps": 1000,
    "finetune.steps": 300,
    "finetune.peak_lr": 1e-3,
    "finetune.tasks": "rec",
}

PRESETS = {"default": {}, "reference": REFERENCE}


class ConfigError(ValueError):
    """Invalid configuration; raised before any compute or file output."""


def _coerce(key: str, raw):
    default = DEFAULTS[key]
    if isinstance(raw, type(default)) and not (isinstance(default, bool) != isinstance(raw, bool)):
        return raw
    try:
        if isinstance(default, bool):
            return str(raw).lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(str(raw))
        if isinstance(default, float):
            return float(str(raw))
        return str(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from exc


def parse_config_text(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


@dataclass(frozen=True)
class RunConfig:
    values: tuple  # sorted (key, value) pairs

    @classmethod
    def resolve(cls, *layers: dict) -> "RunConfig":
        merged = dict(DEFAULTS)
        for layer in layers:
            for k, v in (layer or {}).items():
                if k not in DEFAULTS:
                    raise ConfigError(f"unknown key {k!r}")
                merged[k] = _coerce(k, v)
        cfg = cls(tuple(sorted(merged.items())))
        cfg.validate()
        return cfg

    def __getitem__(self, key):
        return dict(self.values)[key]

    def to_dict(self) -> dict:
        return dict(self.values)

    def to_text(self) -> str:
        return "".join(f"{k} = {v!r}\n" if isinstance(v, str) else f"{k} = {v}\n" for k, v in self.values)

    def validate(self) -> None:
        try:
            self.train_config()
            self.model_config(1)
            self.lm_config(1)
            self.lora_config()
            self.scene_config()
            self.ablation()
            self.tasks()
        except ConfigError:
            raise
        except (ValueError, KeyError) as exc:
            raise ConfigError(str(exc)) from exc

    def _section(self, prefix: str) -> dict:
        return {k[len(prefix) + 1 :]: v for k, v in self.values if k.startswith(prefix + ".")}

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self["seed"], **self._section("train"))

    def stage_config(self, section: str) -> TrainConfig:
        s = self._section(section)
        return TrainConfig(
            total_steps=s["steps"], batch_size=s["batch_size"], peak_lr=s["peak_lr"], seed=self["seed"],
            warmup_ratio=self["train.warmup_ratio"], weight_decay=self["train.weight_decay"],
            beta1=self["train.beta1"], beta2=self["train.beta2"], eps=self["train.eps"], grad_clip=self["train.grad_clip"],
        )

    def scene_config(self) -> SceneConfig:
        return SceneConfig(**self._section("scene"))

    def model_config(self, vocab_size: int) -> MQFormerConfig:
        sc = self.scene_config()
        return MQFormerConfig(d_enc=sc.d_enc, d_q=sc.d_q, vocab_size=vocab_size, **self._section("model"))

    def lm_config(self, vocab_size: int) -> G.TinyLMConfig:
        s = self._section("lm")
        return G.TinyLMConfig(n_layers=s["n_layers"], d_lm=s["d_lm"], n_heads=s["n_heads"], max_seq=s["max_seq"], vocab_size=vocab_size)

    def lora_config(self) -> G.LoRAConfig:
        cfg = G.LoRAConfig(rank=self["lora.rank"], alpha=self["lora.alpha"])
        G.check_rank(cfg.rank, self["lm.d_lm"], self["lm.d_lm"])
        return cfg

    def ablation(self) -> Ablation:
        return Ablation.parse(self["ablate"])

    def tasks(self) -> list:
        tasks = [t.strip() for t in self["finetune.tasks"].split(",") if t.strip()]
        bad = [t for t in tasks if t not in TASKS]
        if bad or not tasks:
            raise ConfigError(f"unknown or empty task list {self['finetune.tasks']!r}; choose from {', '.join(TASKS)}")
        return tasks


def log_run_config(run: RunConfig, command: str) -> None:
    logger.info("resolved run config for %s: %s", command, json.dumps(run.to_dict(), sort_keys=True))


# ---------------------------------------------------------------------------
# stage 1


def vocabulary(run: RunConfig) -> Vocabulary:
    return Vocabulary.build(run.scene_config())


def pretrain(run: RunConfig, scenes: Sequence[Scene], trace_path=None, checkpoint_dir=None, on_step=None, stop_step=None) -> tuple:
    """Stage-1 training over the four objectives; returns (Checkpoint, trace lines)."""
    vocab = vocabulary(run)
    cfg = run.model_config(len(vocab))
    examples = build_examples(scenes, run.scene_config(), vocab, run.ablation())
    params = init_params(cfg, run["seed"])

    def loss_fn(p, batch, rng):
        return total_loss(p, cfg, batch, vocab, rng)

    ck, trace = train(
        run.train_config(), examples, params, loss_fn,
        trace_path=trace_path, checkpoint_dir=checkpoint_dir, on_step=on_step, stop_step=stop_step,
        run_config={"stage": 1, "run": run.to_dict(), "vocab": vocab.tokens},
    )
    return ck, trace


# ---------------------------------------------------------------------------
# stage 2


def features_by_scene(run: RunConfig, scenes: Sequence[Scene]) -> dict:
    sc, ab = run.scene_config(), run.ablation()
    return {s.id: scene_features(s, sc, ab)[1] for s in scenes}


def pretrain_base_lm(run: RunConfig, scenes: Sequence[Scene], trace_path=None) -> tuple:
    vocab = vocabulary(run)
    corpus = G.lm_corpus(scenes, vocab, run["seed"])
    return G.pretrain_lm(run.lm_config(len(vocab)), corpus, run.stage_config("lm"), vocab.pad, run["seed"], trace_path)


def stage2_init(run: RunConfig, stage1: Checkpoint, lm_params: dict) -> dict:
    vocab = vocabulary(run)
    lm_cfg = run.lm_config(len(vocab))
    params = {k: v.copy() for k, v in stage1.params.items()}
    params.update({k: v.copy() for k, v in lm_params.items()})
    params.update(G.init_projection(run["model.d_model"], lm_cfg.d_lm, run["seed"] + 101))
    params.update(G.init_lora(lm_cfg, run.lora_config(), run["seed"] + 202))
    return params


def instruction_items(run: RunConfig, scenes: Sequence[Scene], tasks: Sequence[str]) -> tuple:
    vocab = vocabulary(run)
    records = G.build_instructions(scenes, tasks, run["seed"])
    return records, G.make_items(records, features_by_scene(run, scenes), vocab)


def finetune(run: RunConfig, params: dict, items: Sequence, trace_path=None, on_step=None) -> tuple:
    """Stage-2 training in place on ``params``; returns (Checkpoint, trace lines)."""
    vocab = vocabulary(run)
    cfg, lm_cfg, lora = run.model_config(len(vocab)), run.lm_config(len(vocab)), run.lora_config()

    def loss_fn(p, batch, rng):
        return G.finetune_step(p, cfg, lm_cfg, batch, vocab.pad, lora)

    return train(
        run.stage_config("finetune"), list(items), params, loss_fn,
        trainable=G.stage2_trainable(params), trace_path=trace_path, on_step=on_step,
        run_config={"stage": 2, "run": run.to_dict(), "vocab": vocab.tokens},
    )


# ---------------------------------------------------------------------------
# evaluation


def rec_prompts(scenes: Sequence[Scene]) -> list:
    """(scene, target object, instruction) for every scene with an unambiguous object."""
    out = []
    for s in scenes:
        unique = s.unique_objects()
        if unique:
            obj = unique[0]
            out.append((s, obj, TEMPLATES["rec"][0].replace("{Tag}", obj.tag)))
    return out


def has_stage2(params: dict) -> bool:
    return "proj.w" in params and any(k.startswith(G.LM_PREFIX) for k in params)


def evaluate(run: RunConfig, params: dict, scenes: Sequence[Scene], task: str, fingerprints: Optional[dict] = None) -> EvalReport:
    if not has_stage2(params):
        raise ConfigError("checkpoint has no generative-stage weights; run finetune first")
    vocab = vocabulary(run)
    cfg, lm_cfg, lora = run.model_config(len(vocab)), run.lm_config(len(vocab)), run.lora_config()
    feats = features_by_scene(run, scenes)
    max_new = run["eval.max_new"]
    if task == "rec":
        items = rec_prompts(scenes)
        fb = FeatureBatch.stack([feats[s.id] for s, _, _ in items]) if items else None
        gens = G.generate_text(params, cfg, lm_cfg, fb, [p for _, _, p in items], vocab, max_new, lora) if items else []
        return rec_accuracy(gens, [o.box for _, o, _ in items], [s.id for s, _, _ in items], fingerprints)
    if task in ("vqa", "textvqa"):
        items = [(s, s.qa[0]) for s in scenes if s.qa]
        fb = FeatureBatch.stack([feats[s.id] for s, _ in items])
        prompts = [TEMPLATES[task][0].replace("{Question}", qa.question) for _, qa in items]
        gens = G.generate_text(params, cfg, lm_cfg, fb, prompts, vocab, max_new, lora)
        return answer_accuracy(task, gens, [qa.answer for _, qa in items], [s.id for s, _ in items], fingerprints)
    raise ConfigError(f"evaluation for task {task!r} is not supported (use rec, vqa or textvqa)")
