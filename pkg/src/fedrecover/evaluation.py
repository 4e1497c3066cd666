"""Downstream classifier and evaluation statistics.

The classifier consumes a complete three-modality latent set (real or
recovered), reshapes each modality into tokens, lets every modality
attend to the other two through one shared cross-attention block,
refines the full token sequence with a shared self-attention block, and
flattens into an MLP head.

Alongside it live the scoring tools: accuracy and support-weighted F1,
an exact Wilcoxon signed-rank test over paired differences, the
rank-biserial effect size, a deterministic 2-D PCA export for eyeballing
recovered versus original features, and per-class centroid recovery
error.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from . import attention as A
from . import tensor as T
from .corpus import MODALITIES
from .semantic import check_token_geometry
from .tensor import Tensor


def init_classifier_params(
    rng: np.random.Generator,
    d: int,
    s_tok: int,
    p_tok: int,
    n_classes: int,
    hidden: int = 64,
) -> dict[str, Tensor]:
    check_token_geometry(d, s_tok, p_tok)
    params: dict[str, Tensor] = {}
    params.update(A.init_token_attention(rng, p_tok, "cross"))
    params.update(A.init_token_attention(rng, p_tok, "self"))
    params.update(A.init_mlp(rng, (3 * d, hidden, n_classes), "head"))
    return params


def classify(full_features, params: dict[str, Tensor], s_tok: int, p_tok: int) -> Tensor:
    """Logits for a complete modality set {m: (n, d) latents}."""
    missing = [m for m in MODALITIES if full_features.get(m) is None]
    if missing:
        raise ValueError(f"classifier needs every modality, missing {missing}")
    tokens = {}
    n = None
    for m in MODALITIES:
        x = T.as_tensor(full_features[m])
        if n is None:
            n = x.shape[0]
        if x.ndim != 2 or x.shape != (n, s_tok * p_tok):
            raise ValueError(f"latent block for {m!r} has shape {x.shape}")
        tokens[m] = T.reshape(x, (n, s_tok, p_tok))
    # concat along the token axis = transpose, concat on the last axis,
    # transpose back
    attended = []
    for m in MODALITIES:
        others = T.concat_last(
            [T.transpose_last(tokens[o]) for o in MODALITIES if o != m]
        )
        kv = T.transpose_last(others)  # (n, 2*s_tok, p_tok)
        attended.append(A.token_attention_forward(params, tokens[m], kv, "cross"))
    seq = T.transpose_last(T.concat_last([T.transpose_last(a) for a in attended]))
    refined = A.token_attention_forward(params, seq, seq, "self")
    flat = T.reshape(refined, (n, 3 * s_tok * p_tok))
    return A.mlp_forward(params, flat, "head")


def classifier_loss(full_features, labels, params, s_tok: int, p_tok: int) -> Tensor:
    logits = classify(full_features, params, s_tok, p_tok)
    return T.cross_entropy(logits, np.asarray(labels, dtype=np.int64))


# ---------------------------------------------------------------------------
# classification metrics


@dataclass
class EvalReport:
    accuracy: float
    waf1: float
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    confusion: np.ndarray
    n_samples: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "accuracy": self.accuracy,
                "waf1": self.waf1,
                "precision": self.precision.tolist(),
                "recall": self.recall.tolist(),
                "f1": self.f1.tolist(),
                "support": self.support.tolist(),
                "confusion": self.confusion.tolist(),
                "n_samples": self.n_samples,
            },
            indent=2,
        )


def _check_pair(preds, labels):
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.size == 0 or labels.size == 0:
        raise ValueError("empty prediction or label array")
    if preds.shape != labels.shape:
        raise ValueError("prediction and label lengths differ")
    return preds, labels


def accuracy(preds, labels) -> float:
    preds, labels = _check_pair(preds, labels)
    return float((preds == labels).mean())


def eval_report(preds, labels, n_classes: int | None = None) -> EvalReport:
    preds, labels = _check_pair(preds, labels)
    if n_classes is None:
        n_classes = int(max(preds.max(), labels.max())) + 1
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    for p, t in zip(preds, labels):
        confusion[t, p] += 1
    support = confusion.sum(axis=1)
    predicted = confusion.sum(axis=0)
    tp = np.diag(confusion).astype(np.float64)
    precision = np.divide(tp, predicted, out=np.zeros(n_classes), where=predicted > 0)
    recall = np.divide(tp, support, out=np.zeros(n_classes), where=support > 0)
    pr = precision + recall
    f1 = np.divide(2 * precision * recall, pr, out=np.zeros(n_classes), where=pr > 0)
    total = support.sum()
    return EvalReport(
        accuracy=float(tp.sum() / total),
        waf1=float((support / total * f1).sum()),
        precision=precision,
        recall=recall,
        f1=f1,
        support=support,
        confusion=confusion,
        n_samples=int(total),
    )


def waf1(preds, labels, n_classes: int | None = None) -> float:
    return eval_report(preds, labels, n_classes).waf1


# ---------------------------------------------------------------------------
# paired statistics


def wilcoxon_signed_rank_exact(diffs, alternative: str = "greater") -> tuple[float, float]:
    """Exact one-sample signed-rank test on paired differences.

    Zero differences are dropped before ranking; tied magnitudes share
    average ranks. The p-value enumerates the full null distribution of
    the positive-rank sum over all sign assignments, which is feasible
    for the N <= 20 this tool accepts.
    """
    if alternative not in ("greater", "less", "two-sided"):
        raise ValueError(f"unknown alternative {alternative!r}")
    diffs = np.asarray(diffs, dtype=np.float64)
    diffs = diffs[diffs != 0.0]
    n = diffs.size
    if n == 0:
        raise ValueError("all differences are zero")
    if n > 20:
        raise ValueError("exact enumeration limited to 20 non-zero differences")
    mags = np.abs(diffs)
    order = np.argsort(mags, kind="stable")
    ranks = np.empty(n)
    i = 0
    while i < n:
        j = i
        while j + 1 < n and mags[order[j + 1]] == mags[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    w = float(ranks[diffs > 0].sum())
    # doubled ranks are integers even with .5 average ranks, so the
    # null distribution tabulates exactly
    doubled = np.rint(2 * ranks).astype(np.int64)
    counts = np.zeros(int(doubled.sum()) + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in doubled:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: counts.size - r]
        counts = counts + shifted
    total = 2.0**n
    w2 = int(np.rint(2 * w))
    p_ge = counts[w2:].sum() / total
    p_le = counts[: w2 + 1].sum() / total
    if alternative == "greater":
        p = p_ge
    elif alternative == "less":
        p = p_le
    else:
        p = min(1.0, 2.0 * min(p_ge, p_le))
    return w, float(p)


def rank_biserial(z: float, n: int) -> float:
    if n < 1:
        raise ValueError("need at least one pair")
    return float(z / np.sqrt(n))


# ---------------------------------------------------------------------------
# embedding export and centroid errors


def pca_2d(features: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project rows onto the top-2 principal directions.

    Returns (coords, components, eigenvalues-descending). Components
    follow a fixed sign convention: the largest-magnitude loading of
    each direction is positive, so repeated runs agree bit for bit.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3 or x.shape[1] < 2:
        raise ValueError("need at least 3 samples of dimension >= 2")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (x.shape[0] - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    eigvals = eigvals[::-1]
    eigvecs = eigvecs[:, ::-1]
    if eigvals[0] <= 1e-12:
        raise ValueError("input has no variance")
    comps = np.empty((2, x.shape[1]))
    for k in range(2):
        v = eigvecs[:, k]
        lead = np.argmax(np.abs(v))
        comps[k] = v if v[lead] >= 0 else -v
    return centered @ comps.T, comps, eigvals


def write_projection(path, coords: np.ndarray, labels, tag: str,
                     provenance: str | None = None) -> None:
    """CSV export of a 2-D projection: one (x, y, label, tag) row per sample.

    ``provenance`` becomes a leading ``#`` comment line identifying the
    run that produced the file.
    """
    with open(path, "w", newline="") as fh:
        if provenance:
            fh.write(f"# {provenance}\n")
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "label", "tag"])
        for (x, y), lab in zip(coords, labels):
            writer.writerow([repr(float(x)), repr(float(y)), int(lab), tag])


def centroid_recovery_error(
    recovered: np.ndarray, originals: np.ndarray, labels
) -> tuple[dict[int, float], float]:
    """Distance between recovered and original class centroids.

    Classes absent from ``labels`` simply do not appear in the result.
    Returns the per-class map and the mean over present classes.
    """
    recovered = np.asarray(recovered, dtype=np.float64)
    originals = np.asarray(originals, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if recovered.shape != originals.shape or recovered.shape[0] != labels.size:
        raise ValueError("recovered, originals and labels must align")
    per_class: dict[int, float] = {}
    for c in np.unique(labels):
        sel = labels == c
        per_class[int(c)] = float(
            np.linalg.norm(recovered[sel].mean(axis=0) - originals[sel].mean(axis=0))
        )
    mean = float(np.mean(list(per_class.values())))
    return per_class, mean
