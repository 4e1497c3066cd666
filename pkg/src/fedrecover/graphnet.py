"""Dialogue graphs and the relation-typed graph convolution network.

A conversation of n utterances becomes a window graph: node i connects
to every j with |i - j| <= w (self edge included). Each edge carries two
relation labels, one from the speaker view (same speaker, cross-speaker
forward, cross-speaker backward) and one from the context view (past,
present, future). The convolution applies one weight matrix per
relation to the mean of that relation's neighbors, sums across
relations, and passes the sum through relu; a relation with no
neighbors contributes nothing. There is no separate self-loop term: the
self edge rides on its relations like any other edge.

Raw modality features enter through a frozen seeded random projection
standing in for a pretrained extractor. Modality availability is
enforced twice: masked samples are zeroed before the graph (so their
features cannot leak through neighbors) and their fused outputs are
zeroed again before the fixed-width concatenation, which appends the
3-bit availability flags.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import attention as A
from . import tensor as T
from .corpus import MODALITIES, N_MODALITIES, Conversation
from .tensor import Tensor

SPEAKER_RELATIONS = ("same", "cross_fwd", "cross_bwd")
CONTEXT_RELATIONS = ("past", "present", "future")


class FrozenEncoder:
    """Per-modality random linear maps into the shared width d, never trained."""

    def __init__(self, modality_dims: dict[str, int], d: int, seed: int):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,)))
        self.d = d
        self.modality_dims = dict(modality_dims)
        self.proj = {
            m: rng.normal(0.0, 1.0 / np.sqrt(modality_dims[m]), size=(modality_dims[m], d))
            for m in MODALITIES
        }

    def encode(self, conv: Conversation) -> dict[str, np.ndarray]:
        """Project every utterance of a conversation; (n, d) per modality."""
        out = {}
        for m in MODALITIES:
            raw = np.stack([u.features[m] for u in conv.utterances])
            out[m] = raw @ self.proj[m]
        return out


@dataclass
class DialogueGraph:
    n: int
    window: int
    speakers: tuple[int, ...]
    # edges as (i, j, speaker_rel, context_rel), 0-based node ids
    edges: list[tuple[int, int, str, str]]
    _agg: dict = field(default_factory=dict, repr=False)

    def aggregation_matrix(self, kind: str, rel: str) -> np.ndarray:
        """Row i averages the rel-neighbors of i; all zeros when there are none."""
        key = (kind, rel)
        if key not in self._agg:
            mat = np.zeros((self.n, self.n))
            for i, j, srel, crel in self.edges:
                if (srel if kind == "speaker" else crel) == rel:
                    mat[i, j] = 1.0
            counts = mat.sum(axis=1, keepdims=True)
            np.divide(mat, counts, out=mat, where=counts > 0)
            self._agg[key] = mat
        return self._agg[key]

    def out_degree(self, i: int) -> int:
        return sum(1 for a, _, _, _ in self.edges if a == i)


def build_dialogue_graph(speakers, window: int) -> DialogueGraph:
    """Window graph with speaker and context relation labels on every edge."""
    speakers = tuple(int(s) for s in speakers)
    n = len(speakers)
    if n == 0:
        raise ValueError("empty conversation")
    if window < 1:
        raise ValueError("window must be >= 1")
    edges = []
    for i in range(n):
        for j in range(max(i - window, 0), min(i + window, n - 1) + 1):
            if speakers[i] == speakers[j]:
                srel = "same"
            elif j > i:
                srel = "cross_fwd"
            else:
                srel = "cross_bwd"
            crel = "present" if j == i else ("future" if j > i else "past")
            edges.append((i, j, srel, crel))
    return DialogueGraph(n=n, window=window, speakers=speakers, edges=edges)


def rgcn_layer(graph: DialogueGraph, h: Tensor, params: dict, prefix: str, kind: str) -> Tensor:
    """relu of the sum over relations of (neighbor mean) @ W_rel."""
    rels = SPEAKER_RELATIONS if kind == "speaker" else CONTEXT_RELATIONS
    total = None
    for rel in rels:
        agg = Tensor(graph.aggregation_matrix(kind, rel))
        term = T.matmul(T.matmul(agg, h), params[f"{prefix}.{rel}"])
        total = term if total is None else T.add(total, term)
    return T.relu(total)


def init_dgn_params(
    rng: np.random.Generator, d: int, n_classes: int, heads: int = 2, hidden: int = 64
) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    for m in MODALITIES:
        for rel in SPEAKER_RELATIONS:
            params[f"rel.{m}.speaker.{rel}"] = Tensor(A.linear_init(rng, d, d))
        for rel in CONTEXT_RELATIONS:
            params[f"rel.{m}.context.{rel}"] = Tensor(A.linear_init(rng, d, d))
    width = N_MODALITIES * d + N_MODALITIES
    params.update(A.init_self_attention(rng, width, heads, "head.attn"))
    params.update(A.init_mlp(rng, [width, hidden, n_classes], "head.mlp"))
    return params


def dgn_forward(
    latents: dict[str, np.ndarray],
    mask_rows: np.ndarray,
    graph: DialogueGraph,
    params: dict,
    allow_empty_rows: bool = False,
) -> tuple[Tensor, Tensor]:
    """Run one conversation through the graph stage and the utterance head.

    ``latents`` holds encoder outputs (n, d) per modality; ``mask_rows``
    is the (n, 3) availability. Returns the fixed-width context features
    (n, 3d + 3) used for conditioning, and the (n, classes) logits.

    Real data always has at least one modality per sample; callers that
    mask out a target modality on purpose set ``allow_empty_rows`` and
    get all-zero features for the rows nothing is left of.
    """
    mask_rows = np.asarray(mask_rows, dtype=bool)
    n = graph.n
    if mask_rows.shape != (n, N_MODALITIES):
        raise ValueError(f"mask shape {mask_rows.shape} does not match {n} utterances")
    if not allow_empty_rows and (mask_rows.sum(axis=1) == 0).any():
        raise ValueError("a sample with zero available modalities cannot be processed")
    parts = []
    for k, m in enumerate(MODALITIES):
        col = mask_rows[:, k : k + 1].astype(np.float64)
        x = Tensor(latents[m] * col)  # masked rows enter as zeros
        spk = rgcn_layer(graph, x, params, f"rel.{m}.speaker", "speaker")
        ctx = rgcn_layer(graph, x, params, f"rel.{m}.context", "context")
        fused = T.add(spk, ctx)
        parts.append(T.mul(fused, T.broadcast_to(Tensor(col), fused.shape)))
    parts.append(Tensor(mask_rows.astype(np.float64)))
    z = T.concat_last(parts)
    attended = A.self_attention_forward(params, z, "head.attn")
    logits = A.mlp_forward(params, attended, "head.mlp")
    return z, logits


def dgn_loss(logits: Tensor, labels) -> Tensor:
    return T.cross_entropy(logits, labels)
