"""Build the two conditioning networks and pretrain them jointly.

The graph network contextualizes each utterance over window-bounded
speaker and context relations; the summary network exchanges information
across the available modalities. Their concatenated outputs later drive
the conditional recovery model.
"""

import numpy as np

from fedrecover import corpus as C
from fedrecover import graphnet as G
from fedrecover import semantic as S
from fedrecover import tensor as T

D_LATENT, S_TOK, P_TOK, CLASSES = 8, 2, 4, 3

corpus = C.generate_corpus(
    n_conversations=6, utterances_per_conv=6, n_speakers=2, n_classes=CLASSES,
    modality_dims={"l": 10, "v": 9, "a": 8}, class_separation=4.0, seed=3)
conv = corpus.conversations[0]

# the frozen random projections give every modality a shared latent width
encoder = G.FrozenEncoder({"l": 10, "v": 9, "a": 8}, D_LATENT, seed=3)
latents = encoder.encode(conv)
print("encoded widths:", {m: latents[m].shape for m in latents})

# the dialogue graph connects utterances within a window and labels every
# edge with a speaker relation and a temporal relation
graph = G.build_dialogue_graph(conv.speakers, window=2)
print(f"graph over {graph.n} utterances, {len(graph.edges)} edges; first five:")
for edge in graph.edges[:5]:
    print("  ", edge)

rng = np.random.default_rng(4)
mask = C.apply_fixed_missing([conv], ("l", "v"))
rows = mask.rows(conv.conv_id)

dgn = G.init_dgn_params(rng, D_LATENT, n_classes=CLASSES, heads=2, hidden=16)
with T.no_grad():
    ctx, logits = G.dgn_forward(latents, rows, graph, dgn)
print("graph-context features:", ctx.shape, " logits:", logits.shape)

scn = S.init_scn_params(rng, D_LATENT, S_TOK, P_TOK, n_classes=CLASSES, hidden=16)
with T.no_grad():
    summary, slogits, heads = S.scn_forward(latents, rows, scn, S_TOK, P_TOK)
print("cross-modal summary:", summary.shape, " head tokens per modality:",
      {m: h.shape for m, h in heads.items()})

# the last three columns of each output echo the availability bits, so
# the recovery model can tell which slots were real
print("availability flags on the summary:", summary.data[0, -3:].astype(int),
      "(this client never sees the acoustic channel)")

# joint pretraining drives both classification heads on the same corpus
mask_all = C.apply_fixed_missing(corpus.conversations, ("l", "v"))
dgn2 = G.init_dgn_params(rng, D_LATENT, n_classes=CLASSES, heads=2, hidden=16)
scn2 = S.init_scn_params(rng, D_LATENT, S_TOK, P_TOK, n_classes=CLASSES, hidden=16)
history = S.pretrain_joint(corpus.conversations, mask_all, encoder, dgn2, scn2,
                           window=2, s_tok=S_TOK, p_tok=P_TOK,
                           epochs=8, lr=1e-2, seed=5)
print("joint pretraining loss:")
for row in history:
    print(f"  epoch {row['epoch']}: graph {row['dgn_loss']:.3f} "
          f"summary {row['scn_loss']:.3f} total {row['total']:.3f}")
