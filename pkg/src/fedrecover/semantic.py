"""Token-level semantic conditioning network and joint pretraining.

Each utterance's d-wide latent is reshaped into a sequence of s tokens
of width p (s * p = d). For every available modality the token sequence
cross-attends, one learned block per ordered pair, against each other
modality available for the same sample; with several partners the fused
results are averaged, with none the sequence passes through unchanged.
A per-modality self-attention block then refines the fusion and the
first token becomes that modality's summary head. Heads are zeroed for
unavailable slots and concatenated with the 3-bit availability flags
into the compact summary used for conditioning; a small classifier on
top supplies the auxiliary training signal.

``pretrain_joint`` trains the graph stage and this network together on
one client's conversations by plain SGD on the sum of both
cross-entropy losses, one conversation per step.
"""

from __future__ import annotations

import numpy as np

from . import attention as A
from . import graphnet as G
from . import tensor as T
from .corpus import MODALITIES, N_MODALITIES
from .tensor import Tensor


def check_token_geometry(d: int, s_tok: int, p_tok: int) -> None:
    if s_tok < 1 or p_tok < 1 or s_tok * p_tok != d:
        raise ValueError(f"token geometry {s_tok}x{p_tok} does not factor d={d}")


def init_scn_params(
    rng: np.random.Generator,
    d: int,
    s_tok: int,
    p_tok: int,
    n_classes: int,
    hidden: int = 64,
) -> dict[str, Tensor]:
    check_token_geometry(d, s_tok, p_tok)
    params: dict[str, Tensor] = {}
    for m in MODALITIES:
        for other in MODALITIES:
            if other != m:
                params.update(A.init_token_attention(rng, p_tok, f"cross.{m}.{other}"))
        params.update(A.init_token_attention(rng, p_tok, f"self.{m}"))
    width = N_MODALITIES * p_tok + N_MODALITIES
    params.update(A.init_mlp(rng, [width, hidden, n_classes], "head"))
    return params


def cross_attention(params: dict, q_seq: Tensor, kv_seq: Tensor, prefix: str) -> Tensor:
    """Scaled dot-product attention with residual add and layer norm."""
    return A.token_attention_forward(params, q_seq, kv_seq, prefix)


def scn_forward(
    latents: dict[str, np.ndarray],
    mask_rows: np.ndarray,
    params: dict,
    s_tok: int,
    p_tok: int,
    allow_empty_rows: bool = False,
) -> tuple[Tensor, Tensor, dict[str, Tensor]]:
    """Summaries for one conversation batch.

    Returns the fixed-width summary (n, 3p + 3), the classifier logits,
    and the per-modality head tokens before slot zeroing. Rows with no
    modality at all are rejected unless ``allow_empty_rows`` is set by a
    caller that masked out a target modality on purpose; such rows come
    back as all-zero summaries.
    """
    mask_rows = np.asarray(mask_rows, dtype=bool)
    n = mask_rows.shape[0]
    if not allow_empty_rows and (mask_rows.sum(axis=1) == 0).any():
        raise ValueError("a sample with zero available modalities cannot be processed")
    tokens = {}
    for k, m in enumerate(MODALITIES):
        col = mask_rows[:, k : k + 1].astype(np.float64)
        check_token_geometry(latents[m].shape[1], s_tok, p_tok)
        tokens[m] = T.reshape(Tensor(latents[m] * col), (n, s_tok, p_tok))

    heads = {}
    slot_parts = []
    for k, m in enumerate(MODALITIES):
        partners = [o for o in MODALITIES if o != m]
        n_partners = mask_rows[:, [MODALITIES.index(o) for o in partners]].sum(axis=1)
        # per-sample mean over available partners; identity when none
        fused = None
        for o in partners:
            w = np.where(
                n_partners > 0,
                mask_rows[:, MODALITIES.index(o)] / np.maximum(n_partners, 1),
                0.0,
            ).reshape(n, 1, 1)
            pair = cross_attention(params, tokens[m], tokens[o], f"cross.{m}.{o}")
            term = T.mul(pair, T.broadcast_to(Tensor(w), pair.shape))
            fused = term if fused is None else T.add(fused, term)
        alone = (n_partners == 0).astype(np.float64).reshape(n, 1, 1)
        identity = T.mul(tokens[m], T.broadcast_to(Tensor(alone), (n, s_tok, p_tok)))
        fused = T.add(fused, identity)
        refined = A.token_attention_forward(params, fused, fused, f"self.{m}")
        head = T.take_token0(refined)
        heads[m] = head
        col = mask_rows[:, k : k + 1].astype(np.float64)
        slot_parts.append(T.mul(head, T.broadcast_to(Tensor(col), head.shape)))
    slot_parts.append(Tensor(mask_rows.astype(np.float64)))
    z = T.concat_last(slot_parts)
    logits = A.mlp_forward(params, z, "head")
    return z, logits, heads


def scn_loss(logits: Tensor, labels) -> Tensor:
    return T.cross_entropy(logits, labels)


def pretrain_joint(
    conversations,
    mask,
    encoder: G.FrozenEncoder,
    dgn_params: dict,
    scn_params: dict,
    *,
    window: int,
    s_tok: int,
    p_tok: int,
    epochs: int = 30,
    lr: float = 1e-2,
    seed: int = 0,
) -> list[dict]:
    """Joint SGD on graph-stage plus summary-stage losses, in place.

    One conversation is one batch. Returns per-epoch mean losses;
    raises if the loss stops being finite.
    """
    from .optim import sgd_step

    graphs = {c.conv_id: G.build_dialogue_graph(c.speakers, window) for c in conversations}
    latents = {c.conv_id: encoder.encode(c) for c in conversations}
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2,)))
    history = []
    for epoch in range(epochs):
        order = list(conversations)
        rng.shuffle(order)
        d_losses, s_losses = [], []
        for conv in order:
            rows = mask.rows(conv.conv_id)
            labels = conv.labels
            _, d_logits = G.dgn_forward(latents[conv.conv_id], rows, graphs[conv.conv_id], dgn_params)
            loss_d = G.dgn_loss(d_logits, labels)
            _, s_logits, _ = scn_forward(latents[conv.conv_id], rows, scn_params, s_tok, p_tok)
            loss_s = scn_loss(s_logits, labels)
            total = T.add(loss_d, loss_s)
            if not np.isfinite(total.data):
                raise RuntimeError(
                    f"pretraining diverged at epoch {epoch}, conversation {conv.conv_id}: "
                    f"graph loss {float(loss_d.data)}, summary loss {float(loss_s.data)}"
                )
            T.backward(total)
            sgd_step(dgn_params, lr)
            sgd_step(scn_params, lr)
            d_losses.append(float(loss_d.data))
            s_losses.append(float(loss_s.data))
        history.append(
            {
                "epoch": epoch,
                "dgn_loss": float(np.mean(d_losses)),
                "scn_loss": float(np.mean(s_losses)),
                "total": float(np.mean(d_losses) + np.mean(s_losses)),
            }
        )
    return history
