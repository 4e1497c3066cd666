"""Synthetic multimodal dialogue corpora and missing-modality protocols.

Each conversation is a sequence of utterances with a speaker, an emotion
label, and one feature vector per modality (language, vision, audio).
Features are class-conditional Gaussians with unit covariance whose mean
norms grow with ``class_separation``; labels and speakers follow simple
autocorrelated walks so conversational context carries signal.

Missing-ness never deletes stored features: a mask records, per sample
and modality, what a client is allowed to see. Two protocols build the
masks: uniform random removal of a fixed fraction of (sample, modality)
slots with at least one modality kept per sample, and fixed per-client
availability patterns. Conversations are the atomic unit everywhere:
client partitioning and train/val/test splits never cut one apart.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MODALITIES = ("l", "v", "a")
N_MODALITIES = len(MODALITIES)

# fraction of removable slots is capped by keeping one modality per sample
ETA_MAX = (N_MODALITIES - 1) / N_MODALITIES
ETA_GRID = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, ETA_MAX)

# all strict availability subsets, one per fixed-protocol client pattern
FIXED_PATTERNS = (("l",), ("v",), ("a",), ("l", "v"), ("l", "a"), ("v", "a"))

LABEL_REPEAT_PROB = 0.6
SPEAKER_ADVANCE_PROB = 0.8
# class mean norm = MEAN_SCALE * class_separation, per modality
MEAN_SCALE = 0.6


@dataclass
class Utterance:
    index: int  # 1-based position within the conversation
    speaker: int
    label: int
    features: dict[str, np.ndarray]


@dataclass
class Conversation:
    conv_id: int
    utterances: list[Utterance]

    def __len__(self):
        return len(self.utterances)

    @property
    def n_speakers(self) -> int:
        return max(u.speaker for u in self.utterances) + 1

    @property
    def labels(self) -> np.ndarray:
        return np.array([u.label for u in self.utterances], dtype=np.int64)

    @property
    def speakers(self) -> list[int]:
        return [u.speaker for u in self.utterances]


@dataclass
class Corpus:
    conversations: list[Conversation]
    n_classes: int
    n_speakers: int
    modality_dims: dict[str, int]

    def n_samples(self) -> int:
        return sum(len(c) for c in self.conversations)


class MissingMask:
    """Per-sample availability bits, one (len(conv), 3) bool array per conversation."""

    def __init__(self, bits: dict[int, np.ndarray]):
        self.bits = {cid: np.asarray(b, dtype=bool) for cid, b in bits.items()}

    @classmethod
    def full(cls, conversations) -> "MissingMask":
        return cls({c.conv_id: np.ones((len(c), N_MODALITIES), dtype=bool) for c in conversations})

    def rows(self, conv_id: int) -> np.ndarray:
        return self.bits[conv_id]

    def n_samples(self) -> int:
        return sum(b.shape[0] for b in self.bits.values())

    def available_slots(self) -> int:
        return int(sum(b.sum() for b in self.bits.values()))

    def restrict(self, conv_ids) -> "MissingMask":
        return MissingMask({cid: self.bits[cid].copy() for cid in conv_ids})

    def copy(self) -> "MissingMask":
        return self.restrict(self.bits.keys())

    def available_modalities(self) -> set[str]:
        """Modalities with at least one available sample under this mask."""
        out = set()
        for b in self.bits.values():
            for j, m in enumerate(MODALITIES):
                if b[:, j].any():
                    out.add(m)
        return out

    def __eq__(self, other):
        if not isinstance(other, MissingMask):
            return NotImplemented
        return set(self.bits) == set(other.bits) and all(
            np.array_equal(self.bits[k], other.bits[k]) for k in self.bits
        )


def missing_rate(mask: MissingMask) -> float:
    """1 - (available slots) / (samples * modalities)."""
    total = mask.n_samples() * N_MODALITIES
    if total == 0:
        raise ValueError("missing_rate of an empty mask")
    return 1.0 - mask.available_slots() / total


def _conversations(source) -> list[Conversation]:
    if isinstance(source, Corpus):
        return source.conversations
    return list(source)


# ---------------------------------------------------------------------------
# generation


def generate_corpus(
    n_conversations: int,
    utterances_per_conv,
    n_speakers: int,
    n_classes: int,
    modality_dims: dict[str, int],
    class_separation: float,
    seed: int,
) -> Corpus:
    """Sample a corpus of class-conditional Gaussian dialogues.

    ``utterances_per_conv`` is either a fixed length or an inclusive
    (lo, hi) range. Class/modality mean vectors are drawn once with norm
    MEAN_SCALE * class_separation; labels repeat their predecessor with
    probability LABEL_REPEAT_PROB, speakers advance round-robin with
    probability SPEAKER_ADVANCE_PROB (so realized ids stay contiguous
    from 0).
    """
    if n_conversations < 0 or n_speakers < 1 or n_classes < 1:
        raise ValueError("bad corpus size parameters")
    if set(modality_dims) != set(MODALITIES):
        raise ValueError(f"modality_dims must cover exactly {MODALITIES}")
    rng = np.random.default_rng(seed)
    means = {}
    for m in MODALITIES:
        d = modality_dims[m]
        for k in range(n_classes):
            direction = rng.normal(size=d)
            direction /= np.linalg.norm(direction)
            means[k, m] = direction * (MEAN_SCALE * class_separation)

    conversations = []
    for cid in range(n_conversations):
        if isinstance(utterances_per_conv, int):
            length = utterances_per_conv
        else:
            lo, hi = utterances_per_conv
            length = int(rng.integers(lo, hi + 1))
        utts = []
        label = int(rng.integers(n_classes))
        speaker = 0
        for i in range(1, length + 1):
            if i > 1:
                if rng.random() >= LABEL_REPEAT_PROB:
                    label = int(rng.integers(n_classes))
                if rng.random() < SPEAKER_ADVANCE_PROB:
                    speaker = (speaker + 1) % n_speakers
            feats = {
                m: means[label, m] + rng.normal(size=modality_dims[m]) for m in MODALITIES
            }
            utts.append(Utterance(index=i, speaker=speaker, label=label, features=feats))
        conversations.append(Conversation(conv_id=cid, utterances=utts))
    return Corpus(
        conversations=conversations,
        n_classes=n_classes,
        n_speakers=n_speakers,
        modality_dims=dict(modality_dims),
    )


# ---------------------------------------------------------------------------
# missing-modality protocols


def apply_random_missing(source, eta: float, seed: int) -> MissingMask:
    """Remove round(eta * N * M) slots uniformly, keeping >= 1 modality each.

    eta must lie in [0, (M-1)/M]; above that no mask can satisfy the
    at-least-one constraint.
    """
    convs = _conversations(source)
    if not 0.0 <= eta <= ETA_MAX + 1e-12:
        raise ValueError(f"eta={eta} outside [0, {ETA_MAX:.6f}]")
    n = sum(len(c) for c in convs)
    target = int(np.floor(eta * n * N_MODALITIES + 0.5))
    mask = MissingMask.full(convs)
    slots = [(c.conv_id, i, j) for c in convs for i in range(len(c)) for j in range(N_MODALITIES)]
    rng = np.random.default_rng(seed)
    rng.shuffle(slots)
    removed = 0
    for cid, i, j in slots:
        if removed == target:
            break
        row = mask.bits[cid][i]
        if row.sum() > 1:
            row[j] = False
            removed += 1
    if removed != target:
        raise RuntimeError("random-missing protocol could not reach the target count")
    return mask


def apply_fixed_missing(source, available) -> MissingMask:
    """Every sample keeps exactly the ``available`` modalities."""
    convs = _conversations(source)
    avail = tuple(available)
    if not avail or any(m not in MODALITIES for m in avail) or len(set(avail)) != len(avail):
        raise ValueError(f"bad availability pattern {available!r}")
    keep = np.array([m in avail for m in MODALITIES], dtype=bool)
    return MissingMask({c.conv_id: np.tile(keep, (len(c), 1)) for c in convs})


# ---------------------------------------------------------------------------
# client partitioning


@dataclass
class ClientDataset:
    client_id: int
    conversations: list[Conversation]
    mask: MissingMask
    train_ids: tuple[int, ...] = field(default_factory=tuple)
    val_ids: tuple[int, ...] = field(default_factory=tuple)
    test_ids: tuple[int, ...] = field(default_factory=tuple)

    def n_samples(self) -> int:
        return sum(len(c) for c in self.conversations)

    def split(self, name: str) -> list[Conversation]:
        ids = {"train": self.train_ids, "val": self.val_ids, "test": self.test_ids}[name]
        by_id = {c.conv_id: c for c in self.conversations}
        return [by_id[i] for i in ids]


def _split_ids(conv_ids: list[int], rng: np.random.Generator):
    """70/10/20 split by conversation; test keeps at least one conversation."""
    ids = list(conv_ids)
    rng.shuffle(ids)
    n = len(ids)
    n_val = int(np.floor(0.1 * n + 0.5))
    n_test = max(1, int(np.floor(0.2 * n + 0.5))) if n >= 2 else 0
    n_train = n - n_val - n_test
    if n_train < 1 and n >= 1:
        n_train, n_val = 1, max(0, n - 1 - n_test)
    train = ids[:n_train]
    val = ids[n_train : n_train + n_val]
    test = ids[n_train + n_val :]
    return tuple(train), tuple(val), tuple(test)


def partition_clients(corpus: Corpus, n_clients: int, seed: int) -> list[ClientDataset]:
    """Deal whole conversations round-robin after a seeded shuffle.

    Shards are disjoint and jointly exhaustive. Each client gets its own
    70/10/20 train/val/test split by conversation; masks start fully
    available and are replaced by a protocol afterwards.
    """
    if n_clients < 1:
        raise ValueError("need at least one client")
    if len(corpus.conversations) < n_clients:
        raise ValueError("fewer conversations than clients")
    order = list(corpus.conversations)
    root = np.random.SeedSequence(seed)
    rng = np.random.default_rng(root)
    rng.shuffle(order)
    clients = []
    for cid in range(n_clients):
        convs = order[cid::n_clients]
        split_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1, cid)))
        train, val, test = _split_ids([c.conv_id for c in convs], split_rng)
        clients.append(
            ClientDataset(
                client_id=cid,
                conversations=convs,
                mask=MissingMask.full(convs),
                train_ids=train,
                val_ids=val,
                test_ids=test,
            )
        )
    return clients


# ---------------------------------------------------------------------------
# serialization

_HEADER_PREFIX = "#dialogue-corpus v1"
_LINE_KEYS = {"conv", "i", "speaker", "label", "mask", *MODALITIES}


def save_corpus(corpus: Corpus, path: str | Path, mask: MissingMask | None = None) -> None:
    """Write one UTF-8 line per utterance after a metadata header.

    Floats are emitted with ``repr`` (shortest round-trip decimal, at
    most 17 significant digits), so ``load_corpus`` restores them bit
    for bit. The mask travels inline as a 3-character bit string in
    modality order l, v, a.
    """
    if mask is None:
        mask = MissingMask.full(corpus.conversations)
    dims = ",".join(f"{m}:{corpus.modality_dims[m]}" for m in MODALITIES)
    lines = [
        f"{_HEADER_PREFIX} classes={corpus.n_classes} speakers={corpus.n_speakers} dims={dims}"
    ]
    for conv in corpus.conversations:
        bits = mask.rows(conv.conv_id)
        for row, u in enumerate(conv.utterances):
            rec = {
                "conv": conv.conv_id,
                "i": u.index,
                "speaker": u.speaker,
                "label": u.label,
                "mask": "".join("1" if bits[row, j] else "0" for j in range(N_MODALITIES)),
            }
            for m in MODALITIES:
                rec[m] = [float(x) for x in u.features[m]]
            lines.append(json.dumps(rec))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_corpus(path: str | Path) -> tuple[Corpus, MissingMask]:
    """Inverse of ``save_corpus``; malformed input reports its line number."""
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines or not lines[0].startswith(_HEADER_PREFIX):
        raise ValueError("line 1: missing corpus header")
    meta = dict(kv.split("=", 1) for kv in lines[0][len(_HEADER_PREFIX) :].split())
    dims = {}
    for part in meta["dims"].split(","):
        m, d = part.split(":")
        dims[m] = int(d)
    if set(dims) != set(MODALITIES):
        raise ValueError("line 1: header modalities must be exactly l, v, a")

    convs: dict[int, list[Utterance]] = {}
    bits: dict[int, list[np.ndarray]] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"line {lineno}: not valid JSON ({exc.msg})") from exc
        if not isinstance(rec, dict) or set(rec) != _LINE_KEYS:
            unexpected = set(rec) - _LINE_KEYS if isinstance(rec, dict) else set()
            detail = f"unknown keys {sorted(unexpected)}" if unexpected else "wrong record keys"
            raise ValueError(f"line {lineno}: {detail}")
        try:
            cid = int(rec["conv"])
            idx = int(rec["i"])
            feats = {m: np.asarray(rec[m], dtype=np.float64) for m in MODALITIES}
            u = Utterance(
                index=idx, speaker=int(rec["speaker"]), label=int(rec["label"]), features=feats
            )
            mask_s = str(rec["mask"])
            if len(mask_s) != N_MODALITIES or set(mask_s) - {"0", "1"}:
                raise ValueError("bad mask bits")
            row = np.array([c == "1" for c in mask_s], dtype=bool)
        except (TypeError, ValueError) as exc:
            raise ValueError(f"line {lineno}: {exc}") from exc
        for m in MODALITIES:
            if feats[m].shape != (dims[m],):
                raise ValueError(
                    f"line {lineno}: modality {m} has {feats[m].shape[0]} dims, expected {dims[m]}"
                )
        if idx != len(convs.get(cid, [])) + 1:
            raise ValueError(f"line {lineno}: utterance index {idx} out of order")
        convs.setdefault(cid, []).append(u)
        bits.setdefault(cid, []).append(row)

    conversations = [Conversation(conv_id=cid, utterances=us) for cid, us in convs.items()]
    corpus = Corpus(
        conversations=conversations,
        n_classes=int(meta["classes"]),
        n_speakers=int(meta["speakers"]),
        modality_dims=dims,
    )
    mask = MissingMask({cid: np.array(rows) for cid, rows in bits.items()})
    return corpus, mask
