"""Independent reference implementations used only by the tests.

``forward_oracle`` recomputes a model score with plain numpy loops over
examples and heads, reading weights by name; nothing from ``regent.model`` is
reused. ``finite_difference`` perturbs each parameter element and re-runs the
forward pass only, so it does not depend on autograd.
"""
import math

import numpy as np
import torch
from torch.func import functional_call, vmap

_erf = np.vectorize(math.erf)


def gelu(x):
    return 0.5 * x * (1.0 + _erf(x / math.sqrt(2.0)))


def layer_norm(x, w, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * w + b


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def softmax(z):
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def mha(q, k, v, heads):
    """Per-head loops over already-projected rows; every key is attendable."""
    n_q, d = q.shape
    dk = d // heads
    out = np.zeros((n_q, d))
    for h in range(heads):
        sl = slice(h * dk, (h + 1) * dk)
        for i in range(n_q):
            logits = np.array([q[i, sl] @ k[j, sl] for j in range(k.shape[0])]) / math.sqrt(dk)
            w = softmax(logits)
            out[i, sl] = sum(w[j] * v[j, sl] for j in range(k.shape[0]))
    return out


class Weights:
    def __init__(self, model=None, state=None):
        state = model.state_dict() if model is not None else state
        self.w = {k: np.asarray(v.detach() if hasattr(v, "detach") else v).copy() for k, v in state.items()}

    def __getitem__(self, key):
        return self.w[key]

    def lin(self, prefix, x, bias=True):
        y = x @ self.w[prefix + ".weight"]
        if bias and prefix + ".bias" in self.w:
            y = y + self.w[prefix + ".bias"]
        return y

    def ln(self, prefix, x):
        return layer_norm(x, self.w[prefix + ".weight"], self.w[prefix + ".bias"])


def encode(W, cfg, tokens):
    tokens = np.asarray(tokens)
    keep = tokens != 0
    x = W["encoder.token_embedding"][tokens]
    if cfg.encoder_mode == "frozen_lookup":
        return x
    x = x + W["encoder.position_embedding"][: len(tokens)]
    for l in range(cfg.encoder_layers):
        p = f"encoder.layers.{l}"
        q, k, v = (W.lin(f"{p}.{n}", x) for n in "qkv")
        att = W.lin(f"{p}.o", mha(q, k[keep], v[keep], cfg.num_heads))
        x = W.ln(f"{p}.ln1", x + att)
        h = W.lin(f"{p}.ff2", gelu(W.lin(f"{p}.ff1", x)))
        x = W.ln(f"{p}.ln2", x + h)
    x[~keep] = W["encoder.token_embedding"][0]
    return x


def fuse_oracle(W, prefix, kind, a_t, a_et, has_entities, heads_fallback=2):
    p = prefix + ".fusion"
    cat = np.concatenate([a_t, a_et], axis=-1)
    if kind == "learned_sigmoid":
        g = sigmoid(W.ln(p + ".norm", cat @ W[p + ".W_f.weight"]))
    elif kind == "learned_tanh":
        g = (1.0 + np.tanh(W.ln(p + ".norm", cat @ W[p + ".W_f.weight"]))) / 2.0
    elif kind == "gated_gelu":
        g = sigmoid(W.lin(p + ".gate2", gelu(W.lin(p + ".gate1", cat))))
    elif kind == "equal_weighting":
        g = np.full_like(a_t, 0.5)
    elif kind == "hard_switch":
        g = np.zeros_like(a_t) if has_entities else np.ones_like(a_t)
    elif kind == "additive":
        return W.ln(p + ".norm", a_t + a_et)
    elif kind == "attention_based":
        d = a_t.shape[-1]
        heads = 2 if d % 2 == 0 else 1
        out = np.zeros_like(a_t)
        for i in range(a_t.shape[0]):
            slots = np.stack([a_t[i], a_et[i]])
            q = a_t[i : i + 1] @ W[p + ".q.weight"]
            k = slots @ W[p + ".k.weight"]
            v = slots @ W[p + ".v.weight"]
            out[i] = mha(q, k, v, heads)[0]
        return W.lin(p + ".o", out)
    else:
        raise ValueError(kind)
    return g * a_t + (1.0 - g) * a_et


def forward_oracle(model, batch):
    cfg = model.config
    W = Weights(model)
    flags = cfg.flags
    heads = cfg.num_heads
    scores = []
    for b in range(batch["query_tokens"].shape[0]):
        qt = batch["query_tokens"][b].numpy()
        dt = batch["doc_tokens"][b].numpy()
        r = batch["relevance"][b].numpy()
        qkeep, dkeep = qt != 0, dt != 0
        eq = batch["query_entities"][b].numpy()[batch["query_entity_mask"][b].numpy()]
        ed = batch["doc_entities"][b].numpy()[batch["doc_entity_mask"][b].numpy()]
        eq = eq @ W["entity_projection"]
        ed = ed @ W["entity_projection"]
        has_entities = len(eq) > 0 and len(ed) > 0 and not flags.disable_entities
        x = encode(W, cfg, qt)
        doc = encode(W, cfg, dt)
        for l in range(cfg.cross_layers):
            p = f"layers.{l}"
            K = doc @ W[p + ".tok_k.weight"]
            V = doc @ W[p + ".tok_v.weight"]
            if not flags.disable_token_bm25:
                alpha = float(W["bm25_scale"])
                K = K + alpha * r[:, None]
                V = V + alpha * r[:, None]
            Q = x @ W[p + ".tok_q.weight"]
            a_t = W.lin(p + ".tok_o", mha(Q, K[dkeep], V[dkeep], heads))
            if has_entities:
                a_e = mha(eq @ W[p + ".ent_q.weight"], ed @ W[p + ".ent_k.weight"], ed @ W[p + ".ent_v.weight"], heads)
                a_et = mha(x @ W[p + ".et_q.weight"], a_e @ W[p + ".et_k.weight"], a_e @ W[p + ".et_v.weight"], heads)
            else:
                a_et = np.zeros_like(a_t)
            fused = fuse_oracle(W, p, cfg.fusion, a_t, a_et, has_entities)
            x = W.ln(p + ".norm1", x + fused)
            h = W.lin(p + ".ff2", gelu(W.lin(p + ".ff1", x)))
            x = W.ln(p + ".norm2", x + h)
        h = x[qkeep].mean(axis=0)
        for j in range(cfg.head_blocks):
            h = W.ln(f"head.norms.{j}", h + gelu(W.lin(f"head.linears.{j}", h)))
        s = float(W.lin("head.out", h)[0])
        if flags.document_level_bm25:
            w = W["doc_bm25_weight"]
            s = w[0] * s + w[1] * float(batch["doc_bm25"][b])
        scores.append(s)
    return np.array(scores)


def finite_difference(model, batch, upstream, h=1e-4, chunk_size=512):
    """Central differences of ``sum(upstream * score)`` for every trainable tensor."""
    model.eval()
    params = {n: p.detach().clone() for n, p in model.named_parameters()}
    buffers = {n: b for n, b in model.named_buffers()}
    upstream = torch.as_tensor(upstream, dtype=torch.float64)
    out = {}
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        n = p.numel()
        basis = torch.eye(n, dtype=p.dtype).reshape(n, *p.shape) * h

        def objective(delta, name=name):
            ps = dict(params)
            ps[name] = params[name] + delta
            return (functional_call(model, {**ps, **buffers}, (batch,)) * upstream).sum()

        f = vmap(objective, chunk_size=chunk_size)
        with torch.no_grad():
            out[name] = ((f(basis) - f(-basis)) / (2 * h)).reshape(p.shape)
    return out


def relative_error(g, fd, floor=1e-10):
    ng, nf = float(torch.linalg.norm(g)), float(torch.linalg.norm(fd))
    if max(ng, nf) <= floor:
        return 0.0
    return float(torch.linalg.norm(g - fd)) / max(ng, nf)
