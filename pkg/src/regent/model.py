"""The REGENT scoring network.

Each cross-attention layer runs two pathways over the current query states:

* token pathway: multi-head attention of query tokens over document tokens
  whose projected keys and values are shifted by ``alpha * r`` (the BM25
  relevance of each subword position, repeated across the hidden dimension);
* entity pathway: query entities attend over document entities, and the
  result is then attended over by the query tokens with a separate set of
  projections.

The two outputs are fused (learned sigmoid gate by default), passed through a
residual feed-forward block, mean-pooled over query positions and scored.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .embeddings import (
    DTYPE,
    Encoder,
    EncoderConfig,
    LayerNorm,
    Linear,
    attention_weights,
    init_uniform_,
    merge_heads,
    split_heads,
)

FUSION_KINDS = (
    "learned_sigmoid",
    "gated_gelu",
    "additive",
    "equal_weighting",
    "learned_tanh",
    "hard_switch",
    "attention_based",
)
GATED_KINDS = ("learned_sigmoid", "gated_gelu", "equal_weighting", "learned_tanh", "hard_switch")


@dataclass(frozen=True)
class AblationFlags:
    disable_entities: bool = False
    disable_token_bm25: bool = False
    document_level_bm25: bool = False

    def __post_init__(self):
        if self.document_level_bm25 and not self.disable_token_bm25:
            raise ValueError("document_level_bm25 requires disable_token_bm25")

    @classmethod
    def variant(cls, name: str) -> "AblationFlags":
        try:
            return {
                "full": cls(),
                "no_entities": cls(disable_entities=True),
                "no_bm25": cls(disable_token_bm25=True),
                "document_level_bm25": cls(disable_token_bm25=True, document_level_bm25=True),
            }[name]
        except KeyError:
            raise ValueError(f"unknown ablation variant {name!r}") from None


@dataclass(frozen=True)
class RegentConfig:
    vocab_size: int
    entity_dim: int
    hidden_dim: int = 64
    num_heads: int = 4
    encoder_layers: int = 2
    cross_layers: int = 2
    max_len: int = 512
    query_max_len: int = 64
    d_ff: int | None = None
    dropout: float = 0.1
    encoder_mode: str = "trainable_transformer"
    head_blocks: int = 2
    alpha_init: float = 0.1
    fusion: str = "learned_sigmoid"
    flags: AblationFlags = field(default_factory=AblationFlags)

    def __post_init__(self):
        if self.fusion not in FUSION_KINDS:
            raise ValueError(f"unknown fusion kind {self.fusion!r}; choose from {FUSION_KINDS}")
        if self.hidden_dim % self.num_heads:
            raise ValueError("hidden_dim must be divisible by num_heads")
        if isinstance(self.flags, dict):
            object.__setattr__(self, "flags", AblationFlags(**self.flags))

    @property
    def ff_dim(self) -> int:
        return self.d_ff or 4 * self.hidden_dim

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            vocab_size=self.vocab_size,
            hidden_dim=self.hidden_dim,
            num_layers=self.encoder_layers,
            num_heads=self.num_heads,
            max_len=max(self.max_len, self.query_max_len),
            mode=self.encoder_mode,
            d_ff=self.d_ff,
            dropout=self.dropout,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "RegentConfig":
        d = dict(d)
        d["flags"] = AblationFlags(**d.get("flags", {}))
        return cls(**d)


@dataclass
class PathwayOutput:
    token_pathway: torch.Tensor
    entity_pathway: torch.Tensor
    gate: torch.Tensor | None
    fused: torch.Tensor


# ---------------------------------------------------------------------------
# functional pieces


def _batched(*xs):
    squeeze = xs[0].dim() == 2
    if squeeze:
        xs = tuple(None if x is None else x.unsqueeze(0) for x in xs)
    return squeeze, xs


def enhance_kv(K, V, r, alpha):
    """``K + alpha*R``, ``V + alpha*R`` with ``R`` = ``r`` repeated over the hidden dim."""
    K, V, r = (torch.as_tensor(x, dtype=DTYPE) for x in (K, V, r))
    if r.shape != K.shape[:-1] or K.shape != V.shape:
        raise ValueError(f"relevance vector shape {tuple(r.shape)} does not match keys {tuple(K.shape)}")
    R = r.unsqueeze(-1)
    return K + alpha * R, V + alpha * R


def multi_head_attention(q, k, v, num_heads, key_mask=None):
    """Scaled dot-product attention over already-projected inputs.

    Accepts ``[n, d]`` or ``[B, n, d]``; returns the concatenated head
    outputs and the weights ``[B, h, n_q, n_k]``.
    """
    squeeze, (q, k, v) = _batched(q, k, v)
    if key_mask is not None and key_mask.dim() == 1:
        key_mask = key_mask.unsqueeze(0)
    w = attention_weights(split_heads(q, num_heads), split_heads(k, num_heads), key_mask)
    out = merge_heads(w @ split_heads(v, num_heads))
    if squeeze:
        return out[0], w[0]
    return out, w


def token_attention(Q, K_enh, V_enh, num_heads, mask=None, out_proj: Linear | None = None):
    """Token pathway over BM25-enhanced keys/values."""
    if mask is not None:
        m = mask if mask.dim() == 2 else mask.unsqueeze(0)
        if not bool(m.any(dim=-1).all()):
            raise ValueError("document has no unmasked positions")
    out, w = multi_head_attention(Q, K_enh, V_enh, num_heads, mask)
    if out_proj is not None:
        out = out_proj(out)
    return out, w


def entity_entity_attention(E_q, E_d, Wq, Wk, Wv, num_heads, doc_mask=None, query_mask=None):
    """Query entities over document entities, each through its own projection.

    Empty sets (no rows, or all rows masked) give an all-zero result.
    """
    if E_q.shape[-2] == 0 or E_d.shape[-2] == 0:
        shape = (*E_q.shape[:-1], Wv.shape[1])
        n_h = (*E_q.shape[:-2], num_heads, E_q.shape[-2], E_d.shape[-2])
        return E_q.new_zeros(shape), E_q.new_zeros(n_h)
    out, w = multi_head_attention(E_q @ Wq, E_d @ Wk, E_d @ Wv, num_heads, doc_mask)
    if query_mask is not None:
        out = out * query_mask.unsqueeze(-1).to(out.dtype)
    return out, w


def entity_token_attention(Q, A_e, Wq, Wk, Wv, num_heads, entity_mask=None):
    """Query tokens over the entity-matching output; empty ``A_e`` gives zeros."""
    if A_e.shape[-2] == 0:
        shape = (*Q.shape[:-1], Wv.shape[1])
        n_h = (*Q.shape[:-2], num_heads, Q.shape[-2], 0)
        return Q.new_zeros(shape), Q.new_zeros(n_h)
    return multi_head_attention(Q @ Wq, A_e @ Wk, A_e @ Wv, num_heads, entity_mask)


class Fusion(nn.Module):
    """All fusion variants; ``kind`` picks which parameters exist."""

    def __init__(self, kind: str, d: int, dropout: float):
        super().__init__()
        if kind not in FUSION_KINDS:
            raise ValueError(f"unknown fusion kind {kind!r}")
        self.kind = kind
        if kind in ("learned_sigmoid", "learned_tanh"):
            self.W_f = Linear(2 * d, d, bias=False)
            self.norm = LayerNorm(d)
        elif kind == "gated_gelu":
            self.gate1 = Linear(2 * d, d)
            self.gate2 = Linear(d, d)
            self.drop = nn.Dropout(dropout)
        elif kind == "additive":
            self.norm = LayerNorm(d)
        elif kind == "attention_based":
            self.heads = 2 if d % 2 == 0 else 1
            self.q = Linear(d, d, bias=False)
            self.k = Linear(d, d, bias=False)
            self.v = Linear(d, d, bias=False)
            self.o = Linear(d, d)

    def forward(self, A_t, A_et, has_entities=None) -> PathwayOutput:
        if A_t.shape != A_et.shape:
            raise ValueError("pathway outputs must have equal shapes")
        kind = self.kind
        gate = None
        if kind == "learned_sigmoid":
            gate = torch.sigmoid(self.norm(self.W_f(torch.cat([A_t, A_et], dim=-1))))
        elif kind == "learned_tanh":
            gate = 0.5 * (1.0 + torch.tanh(self.norm(self.W_f(torch.cat([A_t, A_et], dim=-1)))))
        elif kind == "gated_gelu":
            hidden = self.drop(F.gelu(self.gate1(torch.cat([A_t, A_et], dim=-1))))
            gate = torch.sigmoid(self.gate2(hidden))
        elif kind == "equal_weighting":
            gate = torch.full_like(A_t, 0.5)
        elif kind == "hard_switch":
            if has_entities is None:
                has_entities = torch.ones(A_t.shape[:-2] or (1,), dtype=torch.bool)
            # gate = 1 selects the token pathway
            sel = (~has_entities).to(A_t.dtype).reshape(*A_t.shape[:-2], 1, 1)
            gate = sel.expand_as(A_t)
        elif kind == "additive":
            return PathwayOutput(A_t, A_et, None, self.norm(A_t + A_et))
        else:
            fused = self._slot_attention(A_t, A_et)
            return PathwayOutput(A_t, A_et, None, fused)
        return PathwayOutput(A_t, A_et, gate, gate * A_t + (1.0 - gate) * A_et)

    def _slot_attention(self, A_t, A_et):
        h = self.heads
        *lead, d = A_t.shape
        dk = d // h
        slots = torch.stack([A_t, A_et], dim=-2)  # [..., 2, d]
        q = self.q(A_t).reshape(*lead, h, dk)
        k = self.k(slots).reshape(*lead, 2, h, dk)
        v = self.v(slots).reshape(*lead, 2, h, dk)
        logits = torch.einsum("...hk,...shk->...hs", q, k) / math.sqrt(dk)
        w = torch.softmax(logits, dim=-1)
        out = torch.einsum("...hs,...shk->...hk", w, v).reshape(*lead, d)
        return self.o(out)


def fuse(kind: str, A_t, A_et, params: Fusion | None = None, has_entities=None) -> PathwayOutput:
    module = params if params is not None else Fusion(kind, A_t.shape[-1], 0.0)
    if module.kind != kind:
        raise ValueError(f"fusion parameters are for {module.kind!r}, not {kind!r}")
    return module(A_t, A_et, has_entities)


# ---------------------------------------------------------------------------
# modules


class CrossAttentionLayer(nn.Module):
    def __init__(self, config: RegentConfig):
        super().__init__()
        d, self.heads = config.hidden_dim, config.num_heads
        self.flags = config.flags
        self.tok_q = Linear(d, d, bias=False)
        self.tok_k = Linear(d, d, bias=False)
        self.tok_v = Linear(d, d, bias=False)
        self.tok_o = Linear(d, d)
        # entity-entity (W^e) and entity-token (W^t) projections are separate tensors
        self.ent_q = Linear(d, d, bias=False)
        self.ent_k = Linear(d, d, bias=False)
        self.ent_v = Linear(d, d, bias=False)
        self.et_q = Linear(d, d, bias=False)
        self.et_k = Linear(d, d, bias=False)
        self.et_v = Linear(d, d, bias=False)
        self.fusion = Fusion(config.fusion, d, config.dropout)
        self.norm1 = LayerNorm(d)
        self.ff1 = Linear(d, config.ff_dim)
        self.ff2 = Linear(config.ff_dim, d)
        self.norm2 = LayerNorm(d)
        self.drop = nn.Dropout(config.dropout)

    def forward(self, x, doc, doc_mask, r, alpha, eq, eq_mask, ed, ed_mask, has_entities, record=None):
        K, V = self.tok_k(doc), self.tok_v(doc)
        if not self.flags.disable_token_bm25:
            K, V = enhance_kv(K, V, r, alpha)
        A_t, w_t = token_attention(self.tok_q(x), K, V, self.heads, doc_mask, self.tok_o)

        if self.flags.disable_entities:
            A_et = torch.zeros_like(A_t)
            w_e = w_et = None
        else:
            A_e, w_e = entity_entity_attention(
                eq, ed, self.ent_q.weight, self.ent_k.weight, self.ent_v.weight,
                self.heads, ed_mask, eq_mask,
            )
            A_et, w_et = entity_token_attention(
                x, A_e, self.et_q.weight, self.et_k.weight, self.et_v.weight, self.heads, eq_mask
            )
            A_et = A_et * has_entities.to(A_et.dtype)[:, None, None]

        if self.flags.disable_entities:
            has_entities = torch.zeros_like(has_entities)
        out = self.fusion(self.drop(A_t), self.drop(A_et), has_entities)
        if record is not None:
            record.append({"token": w_t, "entity_entity": w_e, "entity_token": w_et, "pathways": out})
        x = self.norm1(x + out.fused)
        h = self.ff2(self.drop(F.gelu(self.ff1(x))))
        return self.norm2(x + self.drop(h))


class ScoringHead(nn.Module):
    def __init__(self, d: int, blocks: int):
        super().__init__()
        self.linears = nn.ModuleList(Linear(d, d) for _ in range(blocks))
        self.norms = nn.ModuleList(LayerNorm(d) for _ in range(blocks))
        self.out = Linear(d, 1)

    def forward(self, h):
        for lin, norm in zip(self.linears, self.norms):
            h = norm(h + F.gelu(lin(h)))
        return self.out(h).squeeze(-1)


class RegentModel(nn.Module):
    def __init__(self, config: RegentConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.encoder = Encoder(config.encoder_config())
        self.entity_projection = nn.Parameter(torch.empty(config.entity_dim, config.hidden_dim, dtype=DTYPE))
        self.bm25_scale = nn.Parameter(torch.tensor(config.alpha_init, dtype=DTYPE))
        self.layers = nn.ModuleList(CrossAttentionLayer(config) for _ in range(config.cross_layers))
        self.head = ScoringHead(config.hidden_dim, config.head_blocks)
        if config.flags.document_level_bm25:
            self.doc_bm25_weight = nn.Parameter(torch.empty(2, dtype=DTYPE))
        else:
            self.doc_bm25_weight = None
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        g = torch.Generator().manual_seed(seed)
        self.encoder.reset_parameters(g)
        init_uniform_(self.entity_projection, max(self.config.entity_dim, 1), g)
        for m in self.modules():
            if isinstance(m, Linear) and not any(m is x for x in self.encoder.modules()):
                m.reset_parameters(g)
            elif isinstance(m, LayerNorm):
                with torch.no_grad():
                    m.weight.fill_(1.0)
                    m.bias.zero_()
        if self.doc_bm25_weight is not None:
            init_uniform_(self.doc_bm25_weight, 2, g)
        with torch.no_grad():
            self.bm25_scale.fill_(self.config.alpha_init)

    def check_inputs(self, batch: Mapping[str, torch.Tensor]) -> None:
        c = self.config
        qt, dt = batch["query_tokens"], batch["doc_tokens"]
        B = qt.shape[0]
        problems = []
        if dt.shape[0] != B:
            problems.append("query/doc batch sizes differ")
        if qt.shape[1] > c.query_max_len:
            problems.append(f"query length {qt.shape[1]} > query_max_len {c.query_max_len}")
        if dt.shape[1] > c.max_len:
            problems.append(f"document length {dt.shape[1]} > max_len {c.max_len}")
        for name in ("query_tokens", "doc_tokens"):
            t = batch[name]
            if t.numel() and (int(t.max()) >= c.vocab_size or int(t.min()) < 0):
                problems.append(f"{name} contains ids outside the vocabulary")
        if tuple(batch["relevance"].shape) != tuple(dt.shape):
            problems.append("relevance vector length differs from document length")
        for name in ("query_entities", "doc_entities"):
            if batch[name].shape[-1] != c.entity_dim:
                problems.append(f"{name} have dimension {batch[name].shape[-1]}, expected {c.entity_dim}")
        if problems:
            raise ValueError("; ".join(problems))
        if not bool((dt != 0).any(dim=1).all()):
            raise ValueError("a document has no unmasked positions")

    def forward(self, batch: Mapping[str, torch.Tensor], record: list | None = None) -> torch.Tensor:
        qt, dt = batch["query_tokens"], batch["doc_tokens"]
        # real-valued inputs are promoted so a float32 caller cannot downcast the score
        real = {k: batch[k].to(DTYPE) for k in ("relevance", "query_entities", "doc_entities", "doc_bm25") if k in batch}
        q_mask, d_mask = qt != 0, dt != 0
        query = self.encoder(qt)
        doc = self.encoder(dt)
        eq = real["query_entities"] @ self.entity_projection
        ed = real["doc_entities"] @ self.entity_projection
        eq_mask, ed_mask = batch["query_entity_mask"], batch["doc_entity_mask"]
        has_entities = ed_mask.any(dim=1) & eq_mask.any(dim=1)
        x = query
        for layer in self.layers:
            x = layer(x, doc, d_mask, real["relevance"], self.bm25_scale,
                      eq, eq_mask, ed, ed_mask, has_entities, record)
        qm = q_mask.to(x.dtype).unsqueeze(-1)
        pooled = (x * qm).sum(dim=1) / qm.sum(dim=1)
        score = self.head(pooled)
        if self.doc_bm25_weight is not None:
            score = self.doc_bm25_weight[0] * score + self.doc_bm25_weight[1] * real["doc_bm25"]
        return score

    def score(self, batch: Mapping[str, torch.Tensor]) -> torch.Tensor:
        self.check_inputs(batch)
        return self(batch)

    # -- persistence ------------------------------------------------------
    def save(self, path: str | Path, extra: Mapping | None = None) -> None:
        arrays = {k: v.detach().cpu().numpy() for k, v in self.state_dict().items()}
        meta = {"config": self.config.to_dict(), "extra": dict(extra or {})}
        arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path: str | Path) -> tuple["RegentModel", dict]:
        with np.load(path) as data:
            meta = json.loads(bytes(data["__meta__"]).decode())
            model = cls(RegentConfig.from_dict(meta["config"]))
            state = {k: torch.from_numpy(data[k].copy()) for k in data.files if k != "__meta__"}
        model.load_state_dict(state)
        if model.config.encoder_mode == "frozen_lookup":
            model.encoder.token_embedding.requires_grad_(False)
        return model, meta["extra"]


def backward(model: RegentModel, batch: Mapping[str, torch.Tensor], upstream=1.0) -> dict[str, torch.Tensor]:
    """Reverse-mode gradients of ``sum(upstream * score)`` for every trainable tensor."""
    model.zero_grad(set_to_none=True)
    scores = model.score(batch)
    upstream = torch.as_tensor(upstream, dtype=scores.dtype)
    (scores * upstream).sum().backward()
    return {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in model.named_parameters()
        if p.requires_grad
    }
