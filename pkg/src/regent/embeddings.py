"""Token encoders and entity embedding tables."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

DTYPE = torch.float64


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    hidden_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    max_len: int = 512
    mode: str = "trainable_transformer"
    d_ff: int | None = None
    dropout: float = 0.1

    def __post_init__(self):
        if self.hidden_dim % self.num_heads:
            raise ValueError(
                f"hidden_dim {self.hidden_dim} is not divisible by num_heads {self.num_heads}"
            )
        if self.mode not in ("frozen_lookup", "trainable_transformer"):
            raise ValueError(f"unknown encoder mode {self.mode!r}")

    @property
    def ff_dim(self) -> int:
        return self.d_ff or 4 * self.hidden_dim

    def to_dict(self) -> dict:
        return asdict(self)


def init_uniform_(tensor: torch.Tensor, fan_in: int, generator: torch.Generator) -> None:
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        tensor.copy_(torch.rand(tensor.shape, generator=generator, dtype=tensor.dtype) * 2 * bound - bound)


class Linear(nn.Module):
    """``x @ weight + bias`` with weight stored ``[in, out]``."""

    def __init__(self, d_in: int, d_out: int, bias: bool = True):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(d_in, d_out, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(d_out, dtype=DTYPE)) if bias else None

    def reset_parameters(self, generator: torch.Generator) -> None:
        fan_in = self.weight.shape[0]
        init_uniform_(self.weight, fan_in, generator)
        if self.bias is not None:
            init_uniform_(self.bias, fan_in, generator)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = x @ self.weight
        return y if self.bias is None else y + self.bias


class LayerNorm(nn.Module):
    def __init__(self, d: int, eps: float = 1e-5):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(d, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(d, dtype=DTYPE))
        self.eps = eps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.layer_norm(x, x.shape[-1:], self.weight, self.bias, self.eps)


def split_heads(x: torch.Tensor, num_heads: int) -> torch.Tensor:
    """``[B, n, d] -> [B, h, n, d/h]``."""
    b, n, d = x.shape
    return x.reshape(b, n, num_heads, d // num_heads).transpose(1, 2)


def merge_heads(x: torch.Tensor) -> torch.Tensor:
    b, h, n, dk = x.shape
    return x.transpose(1, 2).reshape(b, n, h * dk)


def attention_weights(
    q: torch.Tensor, k: torch.Tensor, key_mask: torch.Tensor | None
) -> torch.Tensor:
    """Softmax over keys of ``q k^T / sqrt(d_k)``; masked keys get zero weight.

    ``q``: ``[B, h, n_q, d_k]``, ``k``: ``[B, h, n_k, d_k]``, ``key_mask``:
    ``[B, n_k]`` bool (True = attendable). Rows with no attendable key come
    back as all zeros.
    """
    logits = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    if key_mask is None:
        return torch.softmax(logits, dim=-1)
    m = key_mask[:, None, None, :]
    # finite fill keeps fully-masked rows NaN-free under autograd
    logits = logits.masked_fill(~m, -1e30)
    w = torch.softmax(logits, dim=-1)
    return w * m.to(w.dtype)


class SelfAttentionBlock(nn.Module):
    """Post-norm transformer encoder layer."""

    def __init__(self, d: int, heads: int, d_ff: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.q = Linear(d, d)
        self.k = Linear(d, d)
        self.v = Linear(d, d)
        self.o = Linear(d, d)
        self.ln1 = LayerNorm(d)
        self.ff1 = Linear(d, d_ff)
        self.ff2 = Linear(d_ff, d)
        self.ln2 = LayerNorm(d)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        q, k, v = (split_heads(f(x), self.heads) for f in (self.q, self.k, self.v))
        w = attention_weights(q, k, mask)
        a = self.o(merge_heads(w @ v))
        x = self.ln1(x + self.drop(a))
        h = self.ff2(self.drop(F.gelu(self.ff1(x))))
        return self.ln2(x + self.drop(h))


class Encoder(nn.Module):
    """Desk-scale stand-in for a pretrained BERT encoder.

    ``frozen_lookup`` is a plain (non-trainable) embedding table;
    ``trainable_transformer`` adds learned positions and ``num_layers``
    self-attention blocks. Padding rows always come back as the padding
    embedding.
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        d = config.hidden_dim
        self.token_embedding = nn.Parameter(torch.empty(config.vocab_size, d, dtype=DTYPE))
        if config.mode == "trainable_transformer":
            self.position_embedding = nn.Parameter(torch.empty(config.max_len, d, dtype=DTYPE))
            self.layers = nn.ModuleList(
                SelfAttentionBlock(d, config.num_heads, config.ff_dim, config.dropout)
                for _ in range(config.num_layers)
            )
        else:
            self.position_embedding = None
            self.layers = nn.ModuleList()
        self.drop = nn.Dropout(config.dropout)

    def reset_parameters(self, generator: torch.Generator) -> None:
        d = self.config.hidden_dim
        init_uniform_(self.token_embedding, d, generator)
        if self.position_embedding is not None:
            init_uniform_(self.position_embedding, d, generator)
        for layer in self.layers:
            for m in layer.modules():
                if isinstance(m, Linear):
                    m.reset_parameters(generator)
        if self.config.mode == "frozen_lookup":
            self.token_embedding.requires_grad_(False)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        """``tokens``: ``[B, n]`` ids -> ``[B, n, d]``; id 0 is padding."""
        n = tokens.shape[1]
        if n > self.config.max_len:
            raise ValueError(f"sequence length {n} exceeds encoder max_len {self.config.max_len}")
        mask = tokens != 0
        x = self.token_embedding[tokens]
        if self.position_embedding is None:
            return x
        x = x + self.position_embedding[:n]
        if self.layers:
            x = self.drop(x)
        for layer in self.layers:
            x = layer(x, mask)
        pad_row = self.token_embedding[0].expand_as(x)
        return torch.where(mask[..., None], x, pad_row)


def encode(config: EncoderConfig, params: Mapping[str, torch.Tensor], tokens: Sequence[int]) -> np.ndarray:
    """Encode one token sequence with the given weights, dropout off."""
    enc = Encoder(config)
    expected = {k: tuple(v.shape) for k, v in enc.state_dict().items()}
    got = {k: tuple(torch.as_tensor(v).shape) for k, v in params.items()}
    if expected != got:
        raise ValueError(f"encoder weights do not match config: expected {expected}, got {got}")
    enc.load_state_dict({k: torch.as_tensor(v, dtype=DTYPE) for k, v in params.items()})
    enc.eval()
    with torch.no_grad():
        out = enc(torch.as_tensor([list(tokens)], dtype=torch.long))
    return out[0].numpy()


class EntityEmbeddingTable:
    def __init__(self, entries: Mapping[str, np.ndarray]):
        self.entries = {k: np.asarray(v, dtype=np.float64) for k, v in entries.items()}
        dims = {v.shape for v in self.entries.values()}
        if len(dims) > 1:
            raise ValueError(f"entity vectors have mixed shapes {sorted(dims)}")
        if any(not k for k in self.entries):
            raise ValueError("entity ids must be non-empty")
        self.dim = next(iter(dims))[0] if dims else 0

    def __contains__(self, entity_id: str) -> bool:
        return entity_id in self.entries

    def __getitem__(self, entity_id: str) -> np.ndarray:
        return self.entries[entity_id]

    def __len__(self) -> int:
        return len(self.entries)

    def matrix(self, ids: Sequence[str]) -> np.ndarray:
        missing = [i for i in ids if i not in self.entries]
        if missing:
            raise KeyError(f"no embedding for entities: {missing}")
        if not ids:
            return np.zeros((0, self.dim))
        return np.stack([self.entries[i] for i in ids])

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"{len(self.entries)} {self.dim}\n")
            for k, v in self.entries.items():
                fh.write(k + " " + " ".join(repr(float(x)) for x in v) + "\n")


def load_embeddings(path: str | Path) -> EntityEmbeddingTable:
    """Read word2vec text format: ``count dim`` header then ``id v1 .. vdim``."""
    entries = {}
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise ValueError(f"{path}:1: header must be 'count dim'")
        try:
            count, dim = int(header[0]), int(header[1])
        except ValueError:
            raise ValueError(f"{path}:1: header must be 'count dim'") from None
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split(" ")
            if len(parts) != dim + 1:
                raise ValueError(
                    f"{path}:{lineno}: expected {dim} values, found {len(parts) - 1}"
                )
            try:
                entries[parts[0]] = np.array([float(x) for x in parts[1:]])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    if len(entries) != count:
        raise ValueError(f"{path}: header announces {count} vectors, found {len(entries)}")
    table = EntityEmbeddingTable(entries)
    table.dim = dim
    return table


def project_entities(table: EntityEmbeddingTable, ids: Sequence[str], W_p: np.ndarray) -> np.ndarray:
    W_p = np.asarray(W_p, dtype=np.float64)
    if table.dim != W_p.shape[0]:
        raise ValueError(f"projection expects d_e={W_p.shape[0]}, table has {table.dim}")
    return table.matrix(list(ids)) @ W_p
