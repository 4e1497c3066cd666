"""Shared network building blocks: linear init, MLP, attention variants.

Parameters are flat dicts of named Tensors so they can be checkpointed,
hashed, and aggregated uniformly. Blocks come in two flavors used across
the models: a multi-head self-attention over a 2-d sequence (dialogue
level) and single-head residual attention with layer norm over batched
token sequences of shape (n, s, p).
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


def linear_init(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out))


def init_mlp(rng, sizes: list[int], prefix: str) -> dict[str, Tensor]:
    """Fully connected stack with relu between layers; biases start at 0."""
    params = {}
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        params[f"{prefix}.W{i}"] = Tensor(linear_init(rng, a, b))
        params[f"{prefix}.b{i}"] = Tensor(np.zeros(b))
    return params


def mlp_forward(params: dict, x: Tensor, prefix: str) -> Tensor:
    i = 0
    while f"{prefix}.W{i}" in params:
        x = T.add(T.matmul(x, params[f"{prefix}.W{i}"]), params[f"{prefix}.b{i}"])
        if f"{prefix}.W{i + 1}" in params:
            x = T.relu(x)
        i += 1
    return x


def init_self_attention(rng, width: int, heads: int, prefix: str) -> dict[str, Tensor]:
    """Multi-head self-attention params over sequences of ``width`` features."""
    dk = max(1, width // heads)
    params = {}
    for h in range(heads):
        for mat in ("Wq", "Wk", "Wv"):
            params[f"{prefix}.{mat}.h{h}"] = Tensor(linear_init(rng, width, dk))
    params[f"{prefix}.Wo"] = Tensor(linear_init(rng, heads * dk, width))
    params[f"{prefix}.bo"] = Tensor(np.zeros(width))
    return params


def self_attention_forward(params: dict, x: Tensor, prefix: str) -> Tensor:
    """Residual multi-head self-attention: x + MHA(x) over a (n, width) sequence."""
    heads = []
    h = 0
    while f"{prefix}.Wq.h{h}" in params:
        q = T.matmul(x, params[f"{prefix}.Wq.h{h}"])
        k = T.matmul(x, params[f"{prefix}.Wk.h{h}"])
        v = T.matmul(x, params[f"{prefix}.Wv.h{h}"])
        dk = q.shape[-1]
        logits = T.scale(T.matmul(q, T.transpose_last(k)), 1.0 / math.sqrt(dk))
        heads.append(T.matmul(T.softmax_rows(logits), v))
        h += 1
    mixed = T.add(T.matmul(T.concat_last(heads), params[f"{prefix}.Wo"]), params[f"{prefix}.bo"])
    return T.add(x, mixed)


def init_token_attention(rng, p: int, prefix: str) -> dict[str, Tensor]:
    """Single-head attention block with residual + layer norm on p-wide tokens."""
    params = {
        f"{prefix}.Wq": Tensor(linear_init(rng, p, p)),
        f"{prefix}.Wk": Tensor(linear_init(rng, p, p)),
        f"{prefix}.Wv": Tensor(linear_init(rng, p, p)),
        f"{prefix}.ln.g": Tensor(np.ones(p)),
        f"{prefix}.ln.b": Tensor(np.zeros(p)),
    }
    return params


def token_attention_forward(params: dict, q_seq: Tensor, kv_seq: Tensor, prefix: str) -> Tensor:
    """Norm(q + Attn(q, kv)) with scaled dot-product attention over tokens.

    Both operands are (n, s, p) batches (or plain (s, p) sequences); the
    scale is 1/sqrt(p). Used for cross attention between modality token
    sequences and, with ``kv_seq is q_seq``, for self attention.
    """
    p = q_seq.shape[-1]
    if kv_seq.shape[-1] != p:
        raise ValueError(f"token width mismatch: {q_seq.shape} vs {kv_seq.shape}")
    q = T.matmul(q_seq, params[f"{prefix}.Wq"])
    k = T.matmul(kv_seq, params[f"{prefix}.Wk"])
    v = T.matmul(kv_seq, params[f"{prefix}.Wv"])
    logits = T.scale(T.matmul(q, T.transpose_last(k)), 1.0 / math.sqrt(p))
    attended = T.matmul(T.softmax_rows(logits), v)
    return T.layer_norm(T.add(q_seq, attended), params[f"{prefix}.ln.g"], params[f"{prefix}.ln.b"])
