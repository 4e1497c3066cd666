"""Graph construction and relational convolution against brute-force oracles."""

import numpy as np
import pytest

from fedrecover import graphnet as G
from fedrecover import tensor as T
from fedrecover.corpus import MODALITIES
from fedrecover.tensor import Tensor, check_gradients


def oracle_edges(speakers, w):
    """Edge set straight from the window predicate, labels by definition."""
    n = len(speakers)
    out = set()
    for i in range(n):
        for j in range(n):
            if max(i - w, 0) <= j <= min(i + w, n - 1) and abs(i - j) <= w:
                srel = (
                    "same"
                    if speakers[i] == speakers[j]
                    else ("cross_fwd" if j > i else "cross_bwd")
                )
                crel = "present" if i == j else ("future" if j > i else "past")
                out.add((i, j, srel, crel))
    return out


def test_window_graph_matches_oracle_on_random_conversations():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 11))
        n_spk = int(rng.integers(2, 5))
        speakers = rng.integers(0, n_spk, size=n).tolist()
        w = int(rng.integers(1, 4))
        graph = G.build_dialogue_graph(speakers, w)
        assert set(graph.edges) == oracle_edges(speakers, w)


def test_three_node_window_one_neighborhood():
    # with w=1 and 3 nodes, the middle node sees all three
    graph = G.build_dialogue_graph([0, 1, 0], 1)
    mids = sorted(j for i, j, _, _ in graph.edges if i == 1)
    assert mids == [0, 1, 2]
    assert graph.out_degree(1) == 3


def test_out_degree_formula():
    rng = np.random.default_rng(1)
    for _ in range(50):
        n = int(rng.integers(1, 11))
        w = int(rng.integers(1, 4))
        graph = G.build_dialogue_graph(rng.integers(0, 2, size=n), w)
        for i in range(n):
            assert graph.out_degree(i) == min(i + w, n - 1) - max(i - w, 0) + 1


def test_reversing_conversation_swaps_direction_labels():
    rng = np.random.default_rng(2)
    for _ in range(50):
        n = int(rng.integers(2, 9))
        speakers = rng.integers(0, 3, size=n).tolist()
        w = int(rng.integers(1, 4))
        fwd = G.build_dialogue_graph(speakers, w)
        rev = G.build_dialogue_graph(speakers[::-1], w)
        swap_s = {"same": "same", "cross_fwd": "cross_bwd", "cross_bwd": "cross_fwd"}
        swap_c = {"present": "present", "future": "past", "past": "future"}
        mapped = {
            (n - 1 - i, n - 1 - j, swap_s[s], swap_c[c]) for i, j, s, c in fwd.edges
        }
        assert mapped == set(rev.edges)


def oracle_rgcn(graph, h, weights_by_rel, kind):
    """Literal per-node double sum over relations and neighbors."""
    n, d = h.shape
    out = np.zeros((n, d))
    for i in range(n):
        acc = np.zeros(d)
        for rel, w_mat in weights_by_rel.items():
            neigh = [
                j
                for a, j, srel, crel in graph.edges
                if a == i and (srel if kind == "speaker" else crel) == rel
            ]
            if not neigh:
                continue  # empty relation contributes zero
            for j in neigh:
                acc += (h[j] @ w_mat) / len(neigh)
        out[i] = np.maximum(acc, 0.0)
    return out


@pytest.mark.parametrize("kind,rels", [("speaker", G.SPEAKER_RELATIONS), ("context", G.CONTEXT_RELATIONS)])
def test_rgcn_matches_double_sum_oracle(kind, rels):
    rng = np.random.default_rng(3)
    for _ in range(30):
        n = int(rng.integers(1, 8))
        d = int(rng.integers(2, 6))
        speakers = rng.integers(0, 3, size=n)
        graph = G.build_dialogue_graph(speakers, int(rng.integers(1, 4)))
        h = rng.normal(size=(n, d))
        params = {f"p.{r}": Tensor(rng.normal(size=(d, d))) for r in rels}
        got = G.rgcn_layer(graph, Tensor(h), params, "p", kind).data
        want = oracle_rgcn(graph, h, {r: params[f"p.{r}"].data for r in rels}, kind)
        assert np.abs(got - want).max() <= 1e-12


def test_single_speaker_leaves_cross_relations_empty():
    graph = G.build_dialogue_graph([0, 0, 0, 0], 2)
    assert not any(s in ("cross_fwd", "cross_bwd") for _, _, s, _ in graph.edges)
    rng = np.random.default_rng(4)
    params = {f"p.{r}": Tensor(rng.normal(size=(3, 3))) for r in G.SPEAKER_RELATIONS}
    out = G.rgcn_layer(graph, Tensor(rng.normal(size=(4, 3))), params, "p", "speaker")
    assert np.isfinite(out.data).all()


def _tiny_setup(seed=5, n=3, d=4, classes=3):
    rng = np.random.default_rng(seed)
    speakers = [0, 1, 0]
    graph = G.build_dialogue_graph(speakers, 1)
    latents = {m: rng.normal(size=(n, d)) for m in MODALITIES}
    mask = np.ones((n, 3), dtype=bool)
    mask[0, 1] = False  # one missing slot
    params = G.init_dgn_params(rng, d, classes, heads=2, hidden=6)
    labels = rng.integers(0, classes, size=n)
    return graph, latents, mask, params, labels


def test_forward_shapes_and_flags():
    graph, latents, mask, params, _ = _tiny_setup()
    z, logits = G.dgn_forward(latents, mask, graph, params)
    assert z.shape == (3, 3 * 4 + 3)
    assert logits.shape == (3, 3)
    assert np.array_equal(z.data[:, -3:], mask.astype(float))
    # the masked slot's block is zeroed in the concatenation
    assert np.all(z.data[0, 4:8] == 0.0)


def test_masked_modality_features_are_ignored():
    graph, latents, mask, params, _ = _tiny_setup()
    z0, logits0 = G.dgn_forward(latents, mask, graph, params)
    perturbed = {m: arr.copy() for m, arr in latents.items()}
    perturbed["v"][0] += 100.0  # only the masked slot changes
    z1, logits1 = G.dgn_forward(perturbed, mask, graph, params)
    assert np.array_equal(z0.data, z1.data)
    assert np.array_equal(logits0.data, logits1.data)


def test_single_modality_client_depends_only_on_it():
    graph, latents, _, params, _ = _tiny_setup()
    mask = np.zeros((3, 3), dtype=bool)
    mask[:, 0] = True  # language only
    z0, _ = G.dgn_forward(latents, mask, graph, params)
    perturbed = {m: arr + 5.0 for m, arr in latents.items()}
    perturbed["l"] = latents["l"]
    z1, _ = G.dgn_forward(perturbed, mask, graph, params)
    assert np.array_equal(z0.data, z1.data)


def test_zero_available_modalities_rejected():
    graph, latents, mask, params, _ = _tiny_setup()
    mask[1] = False
    with pytest.raises(ValueError):
        G.dgn_forward(latents, mask, graph, params)


def test_dgn_gradients():
    graph, latents, mask, params, labels = _tiny_setup()

    def loss():
        _, logits = G.dgn_forward(latents, mask, graph, params)
        return G.dgn_loss(logits, labels)

    rng = np.random.default_rng(6)
    worst = T.check_param_gradients(loss, params, eps=1e-5, coords=6, rng=rng)
    assert worst <= 1e-4


def test_encoder_is_frozen_and_shared_by_seed():
    dims = {"l": 5, "v": 4, "a": 3}
    e1 = G.FrozenEncoder(dims, d=6, seed=42)
    e2 = G.FrozenEncoder(dims, d=6, seed=42)
    for m in MODALITIES:
        assert np.array_equal(e1.proj[m], e2.proj[m])
    e3 = G.FrozenEncoder(dims, d=6, seed=43)
    assert not np.array_equal(e1.proj["l"], e3.proj["l"])
