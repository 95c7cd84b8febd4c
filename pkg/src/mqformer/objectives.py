"""Pre-training losses: contrastive, matching, caption generation, masked spatial prediction."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .codec import COORDS, Vocabulary, mask_whole_object
from .data import Example, derangement, feature_batch, text_batch
from .model import MQFormerConfig, MQFormerOutput, TextBatch, batch_masks, forward, lm_logits

logger = logging.getLogger(__name__)

TEMP_MIN, TEMP_MAX = 0.001, 1.0
MSP_PROB = 0.15


@dataclass
class LossBreakdown:
    l_itc: Tensor
    l_itm: Tensor
    l_icg: Tensor
    l_msp: Tensor
    total: Tensor
    diagnostics: dict = field(default_factory=dict)

    def values(self) -> dict:
        return {k: getattr(self, k).item() for k in ("l_itc", "l_itm", "l_icg", "l_msp", "total")}


def itc_loss(H_I: Tensor, H_T: Tensor, temperature: Tensor) -> Tensor:
    """Symmetric in-batch contrastive loss on cosine similarities / temperature.

    Row softmax gives image-to-text, column softmax text-to-image; the
    matched pair is the diagonal.
    """
    B = H_I.shape[0]
    if B == 0:
        raise ValueError("itc_loss: empty batch")
    temp = ad.clip(temperature, TEMP_MIN, TEMP_MAX)
    sim = ad.div(ad.matmul(ad.l2_normalize(H_I), ad.transpose(ad.l2_normalize(H_T))), temp)
    labels = np.arange(B)
    i2t = ad.cross_entropy_logits(sim, labels)
    t2i = ad.cross_entropy_logits(ad.transpose(sim), labels)
    return ad.scale(ad.add(i2t, t2i), 0.5)


def itm_classifier(params: dict, pooled: Tensor, text_anchor: Tensor) -> Tensor:
    h = ad.concat([pooled, text_anchor], axis=1)
    h = ad.relu(ad.add_bias(ad.matmul(h, params["itm.w1"]), params["itm.b1"]))
    return ad.add_bias(ad.matmul(h, params["itm.w2"]), params["itm.b2"])


def itm_loss(params: dict, out: MQFormerOutput, labels: Sequence[int]) -> Tensor:
    """Two binary heads: (visual pool, caption anchor) and (grounding pool, spatial anchor)."""
    labels = np.asarray(labels, dtype=np.int64)
    ce_v = ad.cross_entropy_logits(itm_classifier(params, out.H_v, out.H_ic), labels)
    ce_g = ad.cross_entropy_logits(itm_classifier(params, out.H_g, out.H_sp), labels)
    return ad.scale(ad.add(ce_v, ce_g), 0.5)


def icg_targets(text: TextBatch, eos_id: int, ignore: int = -100) -> np.ndarray:
    """Next-token targets over caption positions: anchor -> first word, ..., last word -> [EOS]."""
    B, L = text.ca_ids.shape
    tgt = np.full((B, L), ignore, dtype=np.int64)
    for b in range(B):
        n = int(text.ca_len[b])
        if n == 0:
            continue
        tgt[b, : n - 1] = text.ca_ids[b, 1:n]
        tgt[b, n - 1] = eos_id
    return tgt


def icg_loss(params: dict, out: MQFormerOutput, text: TextBatch, eos_id: int) -> Tensor:
    Lsp = text.sp_ids.shape[1]
    Lca = text.ca_ids.shape[1]
    states = ad.slice_axis(out.text_states, 1, Lsp, Lsp + Lca)
    tgt = icg_targets(text, eos_id)
    if np.all(tgt == -100):
        logger.warning("icg_loss: empty captions, loss defined as 0")
    return ad.cross_entropy_logits(lm_logits(params, states), tgt)


def msp_loss(params: dict, out: MQFormerOutput, text: TextBatch, targets: Sequence[dict]) -> Tensor:
    """Cross-entropy at masked spatial positions; ``targets[b]`` maps spatial index (after the anchor) to id."""
    Lsp = text.sp_ids.shape[1]
    tgt = np.full((len(targets), Lsp), -100, dtype=np.int64)
    for b, t in enumerate(targets):
        for pos, tok in t.items():
            tgt[b, pos + 1] = tok
    states = ad.slice_axis(out.text_states, 1, 0, Lsp)
    return ad.cross_entropy_logits(lm_logits(params, states), tgt)


def corrupt_spatial(ids: Sequence[int], vocab: Vocabulary, rng: np.random.Generator) -> list:
    """Negative for single-example batches: every coordinate token resampled."""
    coord_ids = [vocab[c] for c in COORDS]
    coords = vocab.coord_ids()
    return [int(coord_ids[rng.integers(len(coord_ids))]) if t in coords else t for t in ids]


def total_loss(
    params: dict,
    config: MQFormerConfig,
    examples: Sequence[Example],
    vocab: Vocabulary,
    rng: np.random.Generator,
    pad_to=(0, 0),
) -> LossBreakdown:
    """All four objectives, one masked forward pass each, summed with unit weights."""
    B = len(examples)
    feats = feature_batch(examples)
    sp = [e.spatial.ids for e in examples]
    ca = [e.caption.ids for e in examples]

    # contrastive: uni-modal masks
    text = text_batch(sp, ca, vocab, pad_to=pad_to)
    out = forward(params, config, feats, text, batch_masks("ITC", config, text))
    l_itc = itc_loss(out.H_I, out.H_T, params["itc.temp"])

    # matching: positives then one in-batch negative each
    if B >= 2:
        perm = derangement(B, rng)
        neg_sp, neg_ca = [sp[i] for i in perm], [ca[i] for i in perm]
    else:
        neg_sp, neg_ca = [corrupt_spatial(sp[0], vocab, rng)], ca
    itm_text = text_batch(sp + neg_sp, ca + neg_ca, vocab, pad_to=pad_to)
    itm_feats = feats.take(np.concatenate([np.arange(B), np.arange(B)]))
    out = forward(params, config, itm_feats, itm_text, batch_masks("ITM", config, itm_text))
    l_itm = itm_loss(params, out, [1] * B + [0] * B)

    # caption generation: prefix-LM over [DEC] + caption
    icg_text = text_batch(sp, ca, vocab, ca_anchor="[DEC]", pad_to=pad_to)
    out = forward(params, config, feats, icg_text, batch_masks("ICG", config, icg_text))
    l_icg = icg_loss(params, out, icg_text, vocab.eos)

    # masked spatial prediction: whole objects replaced by [MASK]
    masked_sp, targets = [], []
    for e in examples:
        m, t = mask_whole_object(e.spatial, MSP_PROB, rng, vocab)
        masked_sp.append(m.ids)
        targets.append(t)
    msp_text = text_batch(masked_sp, ca, vocab, sp_anchor="[MLM]", pad_to=pad_to)
    out = forward(params, config, feats, msp_text, batch_masks("MSP", config, msp_text))
    l_msp = msp_loss(params, out, msp_text, targets)

    total = ad.add(ad.add(ad.add(l_itc, l_itm), l_icg), l_msp)
    diagnostics = {
        "pairs": B,
        "masked_tokens": int(sum(len(t) for t in targets)),
        "caption_tokens": int(sum(len(c) + 1 for c in ca)),
    }
    return LossBreakdown(l_itc, l_itm, l_icg, l_msp, total, diagnostics)
