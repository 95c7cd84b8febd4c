"""Multi-scale querying transformer.

Sequence layout for every objective::

    [visual queries | grounding queries | spatial text | caption text]

The first spatial position holds [BOS] (or [MLM] for masked spatial
prediction) and the first caption position holds [CLS] (or [DEC] for
caption generation). Text segments may be right-padded; padding is
invisible to every position and excluded from pooling.

Each layer runs, pre-norm with residuals:
  1. self-attention over the whole sequence under the objective's mask,
  2. visual queries cross-attend to the global features and grounding
     queries to the local features (two independent weight sets),
  3. one feed-forward network shared by both query groups and a separate
     one for text positions.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

logger = logging.getLogger(__name__)

OBJECTIVES = ("ITC", "ITM", "ICG", "MSP")
VQ, GQ, SP, CA, PAD = 0, 1, 2, 3, -1

# group-to-group visibility, indexed [row group, column group]
_VISIBILITY = {
    "ITC": np.array(
        [[1, 1, 0, 0],
         [1, 1, 0, 0],
         [0, 0, 1, 1],
         [0, 0, 1, 1]], dtype=bool),
    "ITM": np.array(
        [[1, 0, 0, 1],
         [0, 1, 1, 0],
         [0, 1, 1, 0],
         [1, 0, 0, 1]], dtype=bool),
    # caption-to-caption is further restricted to the causal triangle
    "ICG": np.array(
        [[1, 1, 0, 0],
         [1, 1, 0, 0],
         [0, 0, 0, 0],
         [1, 1, 0, 1]], dtype=bool),
    "MSP": np.array(
        [[1, 1, 1, 0],
         [1, 1, 1, 0],
         [1, 1, 1, 0],
         [0, 0, 0, 0]], dtype=bool),
}


@dataclass(frozen=True)
class MQFormerConfig:
    n_visual_queries: int = 32
    n_grounding_queries: int = 32
    d_model: int = 64  # real scale: 768
    n_layers: int = 4
    n_heads: int = 4
    d_enc: int = 48
    d_q: int = 32
    max_text_len: int = 96
    vocab_size: int = 0
    ffn_mult: int = 4

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.n_visual_queries < 1 or self.n_grounding_queries < 1:
            raise ValueError("query counts must be at least 1")

    @property
    def n_queries(self) -> int:
        return self.n_visual_queries + self.n_grounding_queries

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MaskMatrix:
    layout: tuple  # (n_vq, n_gq, len_spatial, len_caption), padded lengths
    bits: np.ndarray  # (S, S) bool, True = row may attend to column
    objective: str


def group_ids(layout, n_sp_valid: Optional[int] = None, n_ca_valid: Optional[int] = None) -> np.ndarray:
    n_vq, n_gq, n_sp, n_ca = layout
    n_sp_valid = n_sp if n_sp_valid is None else n_sp_valid
    n_ca_valid = n_ca if n_ca_valid is None else n_ca_valid
    sp = np.where(np.arange(n_sp) < n_sp_valid, SP, PAD)
    ca = np.where(np.arange(n_ca) < n_ca_valid, CA, PAD)
    return np.concatenate([np.full(n_vq, VQ), np.full(n_gq, GQ), sp, ca]).astype(np.int64)


def build_mask(objective: str, layout, n_sp_valid: Optional[int] = None, n_ca_valid: Optional[int] = None) -> MaskMatrix:
    """Self-attention visibility for one objective over a (possibly padded) layout."""
    if objective not in _VISIBILITY:
        raise ValueError(f"unknown objective {objective!r}; expected one of {OBJECTIVES}")
    if any(n < 0 for n in layout):
        raise ValueError(f"layout lengths must be non-negative: {layout}")
    groups = group_ids(layout, n_sp_valid, n_ca_valid)
    valid = groups != PAD
    g = np.where(valid, groups, 0)
    bits = _VISIBILITY[objective][g[:, None], g[None, :]] & valid[:, None] & valid[None, :]
    if objective == "ICG":
        idx = np.arange(len(groups))
        both_ca = (groups[:, None] == CA) & (groups[None, :] == CA)
        bits &= ~both_ca | (idx[None, :] <= idx[:, None])
    return MaskMatrix(tuple(layout), bits, objective)


def render_mask(mask: MaskMatrix) -> str:
    """Character grid of a mask with separators between groups."""
    bounds = np.cumsum(mask.layout)[:-1]
    lines = []
    for i, row in enumerate(mask.bits):
        if i in bounds and i > 0:
            lines.append(_separator(mask.layout))
        cells = []
        for j, bit in enumerate(row):
            if j in bounds and j > 0:
                cells.append("|")
            cells.append("#" if bit else ".")
        lines.append("".join(cells))
    return "\n".join(lines)


def _separator(layout) -> str:
    return "+".join("-" * n for n in layout)


# ---------------------------------------------------------------------------
# parameters


def _xavier(rng, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def _attn_params(prefix, rng, d_in_q, d_in_kv, d):
    return {
        f"{prefix}.wq": _xavier(rng, d_in_q, d),
        f"{prefix}.bq": np.zeros(d),
        f"{prefix}.wk": _xavier(rng, d_in_kv, d),
        f"{prefix}.bk": np.zeros(d),
        f"{prefix}.wv": _xavier(rng, d_in_kv, d),
        f"{prefix}.bv": np.zeros(d),
        f"{prefix}.wo": _xavier(rng, d, d),
        f"{prefix}.bo": np.zeros(d),
    }


def _ln_params(prefix, d):
    return {f"{prefix}.g": np.ones(d), f"{prefix}.b": np.zeros(d)}


def _ffn_params(prefix, rng, d, hidden):
    return {
        f"{prefix}.w1": _xavier(rng, d, hidden),
        f"{prefix}.b1": np.zeros(hidden),
        f"{prefix}.w2": _xavier(rng, hidden, d),
        f"{prefix}.b2": np.zeros(d),
    }


def init_params(config: MQFormerConfig, seed: int) -> dict:
    """Xavier-uniform matrices, zero biases, unit LN gains, N(0, 0.02) queries."""
    if config.vocab_size < 1:
        raise ValueError("config.vocab_size must be set")
    rng = np.random.default_rng(seed)
    d = config.d_model
    p = {
        "query.visual": rng.normal(0.0, 0.02, size=(config.n_visual_queries, d)),
        "query.grounding": rng.normal(0.0, 0.02, size=(config.n_grounding_queries, d)),
        "embed.tokens": _xavier(rng, config.vocab_size, d),
        "embed.pos_spatial": _xavier(rng, config.max_text_len, d),
        "embed.pos_caption": _xavier(rng, config.max_text_len, d),
    }
    for l in range(config.n_layers):
        pre = f"layers.{l}"
        p.update(_ln_params(f"{pre}.ln_self", d))
        p.update(_attn_params(f"{pre}.self", rng, d, d, d))
        p.update(_ln_params(f"{pre}.ln_cross_visual", d))
        p.update(_attn_params(f"{pre}.cross_visual", rng, d, config.d_enc, d))
        p.update(_ln_params(f"{pre}.ln_cross_grounding", d))
        p.update(_attn_params(f"{pre}.cross_grounding", rng, d, config.d_q, d))
        p.update(_ln_params(f"{pre}.ln_ffn_query", d))
        p.update(_ffn_params(f"{pre}.ffn_query", rng, d, config.ffn_mult * d))
        p.update(_ln_params(f"{pre}.ln_ffn_text", d))
        p.update(_ffn_params(f"{pre}.ffn_text", rng, d, config.ffn_mult * d))
    p.update(_ln_params("final_ln", d))
    p["lm.bias"] = np.zeros(config.vocab_size)
    p["itm.w1"] = _xavier(rng, 2 * d, d)
    p["itm.b1"] = np.zeros(d)
    p["itm.w2"] = _xavier(rng, d, 2)
    p["itm.b2"] = np.zeros(2)
    p["itc.temp"] = np.array(0.07)
    return p


# ---------------------------------------------------------------------------
# batches


@dataclass
class FeatureBatch:
    global_: np.ndarray  # (B, S_g, d_enc)
    local: np.ndarray  # (B, L, d_q), zero-padded
    local_len: np.ndarray  # (B,)

    @classmethod
    def stack(cls, bundles: Sequence) -> "FeatureBatch":
        L = max((b.local.shape[0] for b in bundles), default=0)
        d_q = bundles[0].local.shape[1]
        local = np.zeros((len(bundles), L, d_q))
        for i, b in enumerate(bundles):
            local[i, : b.local.shape[0]] = b.local
        return cls(
            np.stack([b.global_ for b in bundles]),
            local,
            np.array([b.local.shape[0] for b in bundles], dtype=np.int64),
        )

    def __len__(self) -> int:
        return self.global_.shape[0]

    def take(self, index) -> "FeatureBatch":
        index = np.asarray(index)
        return FeatureBatch(self.global_[index], self.local[index], self.local_len[index])


@dataclass
class TextBatch:
    sp_ids: np.ndarray  # (B, Lsp) with anchor at column 0
    sp_len: np.ndarray  # (B,)
    ca_ids: np.ndarray  # (B, Lca) with anchor at column 0
    ca_len: np.ndarray
    pad_id: int = 0

    @classmethod
    def from_lists(cls, sp: Sequence[Sequence[int]], ca: Sequence[Sequence[int]], pad_id: int, pad_to=(0, 0)) -> "TextBatch":
        def pad(rows, minimum):
            n = max([len(r) for r in rows] + [minimum])
            out = np.full((len(rows), n), pad_id, dtype=np.int64)
            for i, r in enumerate(rows):
                out[i, : len(r)] = r
            return out, np.array([len(r) for r in rows], dtype=np.int64)

        sp_ids, sp_len = pad(sp, pad_to[0])
        ca_ids, ca_len = pad(ca, pad_to[1])
        return cls(sp_ids, sp_len, ca_ids, ca_len, pad_id)

    def __len__(self) -> int:
        return self.sp_ids.shape[0]


def batch_masks(objective: str, config: MQFormerConfig, text: TextBatch) -> np.ndarray:
    layout = (config.n_visual_queries, config.n_grounding_queries, text.sp_ids.shape[1], text.ca_ids.shape[1])
    return np.stack(
        [build_mask(objective, layout, int(s), int(c)).bits for s, c in zip(text.sp_len, text.ca_len)]
    )


@dataclass
class MQFormerOutput:
    query_states: Tensor  # (B, n_q, d)
    text_states: Optional[Tensor]  # (B, Lsp + Lca, d)
    H_v: Tensor
    H_g: Tensor
    H_I: Tensor
    H_sp: Optional[Tensor] = None
    H_ic: Optional[Tensor] = None
    H_T: Optional[Tensor] = None


# ---------------------------------------------------------------------------
# forward


def linear(x: Tensor, params: dict, w: str, b: str) -> Tensor:
    return ad.add_bias(ad.matmul(x, params[w]), params[b])


def _ln(x, params, prefix):
    return ad.layer_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"])


def attention_block(params, prefix, x_q, x_kv, mask, heads):
    q = linear(x_q, params, f"{prefix}.wq", f"{prefix}.bq")
    k = linear(x_kv, params, f"{prefix}.wk", f"{prefix}.bk")
    v = linear(x_kv, params, f"{prefix}.wv", f"{prefix}.bv")
    return linear(ad.masked_attention(q, k, v, mask, heads), params, f"{prefix}.wo", f"{prefix}.bo")


def ffn(params, prefix, x):
    h = ad.relu(linear(x, params, f"{prefix}.w1", f"{prefix}.b1"))
    return linear(h, params, f"{prefix}.w2", f"{prefix}.b2")


def embed_text(params: dict, text: TextBatch) -> Tensor:
    tok = params["embed.tokens"]
    Lsp, Lca = text.sp_ids.shape[1], text.ca_ids.shape[1]
    sp = ad.add(ad.embedding_lookup(tok, text.sp_ids), ad.embedding_lookup(params["embed.pos_spatial"], np.broadcast_to(np.arange(Lsp), text.sp_ids.shape)))
    ca = ad.add(ad.embedding_lookup(tok, text.ca_ids), ad.embedding_lookup(params["embed.pos_caption"], np.broadcast_to(np.arange(Lca), text.ca_ids.shape)))
    return ad.concat([sp, ca], axis=1)


def forward(
    params: dict,
    config: MQFormerConfig,
    features: FeatureBatch,
    text: Optional[TextBatch],
    masks: Optional[np.ndarray],
) -> MQFormerOutput:
    """Run the querying transformer.

    ``masks`` is (B, S, S) boolean over the full layout. With ``text=None``
    only the queries are processed (all mutually visible); this is the
    path used to produce soft visual tokens.
    """
    B = len(features)
    nv, ng, nq = config.n_visual_queries, config.n_grounding_queries, config.n_queries
    d, heads = config.d_model, config.n_heads
    queries = ad.concat([params["query.visual"], params["query.grounding"]], axis=0)
    x = ad.embedding_lookup(queries, np.broadcast_to(np.arange(nq), (B, nq)))
    if text is not None:
        if max(text.sp_ids.shape[1], text.ca_ids.shape[1]) > config.max_text_len:
            raise ad.ShapeError(f"text segment longer than max_text_len={config.max_text_len}")
        x = ad.concat([x, embed_text(params, text)], axis=1)
    else:
        masks = np.ones((B, nq, nq), dtype=bool)
    S = x.shape[1]
    if masks.shape != (B, S, S):
        raise ad.ShapeError(f"mask batch {masks.shape} does not match sequence ({B}, {S}, {S})")

    g_feats = Tensor(features.global_)
    l_feats = Tensor(features.local)
    L = features.local.shape[1]
    local_mask = np.broadcast_to((np.arange(L)[None, :] < features.local_len[:, None])[:, None, :], (B, ng, L))
    global_mask = np.ones((B, nv, features.global_.shape[1]), dtype=bool)

    for l in range(config.n_layers):
        pre = f"layers.{l}"
        h = _ln(x, params, f"{pre}.ln_self")
        x = ad.add(x, attention_block(params, f"{pre}.self", h, h, masks, heads))
        vis = ad.slice_axis(x, 1, 0, nv)
        gro = ad.slice_axis(x, 1, nv, nq)
        vis = ad.add(vis, attention_block(params, f"{pre}.cross_visual", _ln(vis, params, f"{pre}.ln_cross_visual"), g_feats, global_mask, heads))
        gro = ad.add(gro, attention_block(params, f"{pre}.cross_grounding", _ln(gro, params, f"{pre}.ln_cross_grounding"), l_feats, local_mask, heads))
        q = ad.concat([vis, gro], axis=1)
        q = ad.add(q, ffn(params, f"{pre}.ffn_query", _ln(q, params, f"{pre}.ln_ffn_query")))
        if S > nq:
            t = ad.slice_axis(x, 1, nq, S)
            t = ad.add(t, ffn(params, f"{pre}.ffn_text", _ln(t, params, f"{pre}.ln_ffn_text")))
            x = ad.concat([q, t], axis=1)
        else:
            x = q

    x = _ln(x, params, "final_ln")
    query_states = ad.slice_axis(x, 1, 0, nq)
    H_v = ad.mean_pool(ad.slice_axis(query_states, 1, 0, nv), axis=1)
    H_g = ad.mean_pool(ad.slice_axis(query_states, 1, nv, nq), axis=1)
    out = MQFormerOutput(query_states, None, H_v, H_g, ad.concat([H_v, H_g], axis=1))
    if text is not None:
        text_states = ad.slice_axis(x, 1, nq, S)
        Lsp = text.sp_ids.shape[1]
        out.text_states = text_states
        out.H_sp = ad.gather_rows(text_states, np.zeros(B, dtype=np.int64))
        out.H_ic = ad.gather_rows(text_states, np.full(B, Lsp, dtype=np.int64))
        out.H_T = ad.concat([out.H_sp, out.H_ic], axis=1)
    return out


def lm_logits(params: dict, states: Tensor) -> Tensor:
    """Vocabulary logits with the output projection tied to the token embedding."""
    return ad.add_bias(ad.matmul(states, ad.transpose(params["embed.tokens"])), params["lm.bias"])


def pooled_similarity(H_I: np.ndarray, H_T: np.ndarray, temperature: float) -> float:
    """cos(H_I, H_T) / temperature; a zero vector gives similarity 0."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    a, b = np.asarray(H_I, float), np.asarray(H_T, float)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        logger.warning("pooled_similarity: zero vector, similarity defined as 0")
        return 0.0
    return float(a @ b / (na * nb) / temperature)
