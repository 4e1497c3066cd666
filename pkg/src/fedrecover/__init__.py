"""Desk-scale simulator of federated missing-modality feature recovery.

Synthetic multimodal dialogue corpora, dialogue-graph and token-level
conditioning networks, conditional diffusion recovery of absent modality
features, an alternating-freeze federated protocol with explicit byte
accounting, evaluation statistics, and convergence-bound checks. Runs on
numpy float64 throughout; every experiment is deterministic given a seed.
"""

__version__ = "0.1.0"
