"""Federated orchestration with alternating frozen training stages.

Rounds alternate between training the per-modality recovery models with
the classifier frozen and training the classifier with recovery frozen;
the stage rule is parity of ``t mod E``, so interval 3 gives one
recovery round followed by two classifier rounds. Every cross-boundary
message (client upload, server broadcast) passes through the 32-bit
checkpoint codec, and byte counts in the round log come from those real
serialized payloads rather than parameter-count estimates.

The server is simulated in-process. Clients never share mutable state:
each holds its own copies of the models, and per-client generators are
seeded from (master seed, round, client id, stage), which makes the
outcome independent of execution order and lets local updates run on a
thread pool.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from csv import DictWriter
from dataclasses import dataclass, field, replace

import numpy as np

from . import checkpoint as CK
from . import diffusion as D
from . import evaluation as E
from . import graphnet as G
from . import optim as O
from . import semantic as S
from . import tensor as T
from .corpus import MODALITIES, MissingMask
from .tensor import Tensor

STAGE_RECOVERY = "recovery"
STAGE_CLASSIFIER = "classifier"
STAGE_COTRAINED = "cotrained"
CLASSIFIER_MODULE = "clf"
LOG_COLUMNS = ("round", "stage", "client", "module", "bytes_up", "bytes_down",
               "local_loss", "val_acc", "val_waf1")


@dataclass
class FederationConfig:
    """Round schedule and client-participation settings."""

    n_clients: int = 3
    rounds: int = 9
    alternation_interval: int = 3
    local_epochs: int = 1
    participation: str = "all"
    strict_alternation: bool = False

    def __post_init__(self):
        if self.n_clients < 1:
            raise ValueError("need at least one client")
        if self.rounds < 0:
            raise ValueError("rounds must be nonnegative")
        if self.alternation_interval < 2:
            raise ValueError("alternation interval must be at least 2")
        if self.local_epochs < 1:
            raise ValueError("local epochs must be at least 1")
        if self.subset_size() is not None and not 1 <= self.subset_size() <= self.n_clients:
            raise ValueError("participation subset must be in [1, n_clients]")

    def subset_size(self) -> int | None:
        """Sampled-client count per round; None means full participation."""
        if self.participation == "all":
            return None
        try:
            return int(self.participation)
        except ValueError as exc:
            raise ValueError(
                f"participation must be 'all' or an integer, got {self.participation!r}"
            ) from exc


def afs_stage(t: int, interval: int, strict_alternation: bool = False) -> str:
    """Stage for round t: recovery when t mod interval is odd, else classifier.

    ``strict_alternation`` replaces the rule with plain odd/even rounds,
    which is what interval 2 produces anyway.
    """
    if t < 1:
        raise ValueError("rounds are numbered from 1")
    if interval < 2:
        raise ValueError("alternation interval must be at least 2")
    phase = t % 2 if strict_alternation else t % interval
    return STAGE_RECOVERY if phase % 2 == 1 else STAGE_CLASSIFIER


# ---------------------------------------------------------------------------
# clients


def clone_tensor_dict(params: dict) -> dict[str, Tensor]:
    return {k: Tensor(np.array(v.data if isinstance(v, Tensor) else v)) for k, v in params.items()}


def clone_diffusion_model(model: D.DiffusionModel) -> D.DiffusionModel:
    return replace(model, params=clone_tensor_dict(model.params))


@dataclass
class FederatedClient:
    """One participant: local data, frozen feature stack, trainable copies."""

    cid: int
    conversations: list
    mask: MissingMask
    encoder: G.FrozenEncoder
    dgn_params: dict[str, Tensor]
    scn_params: dict[str, Tensor]
    diffusion: dict[str, D.DiffusionModel]
    classifier: dict[str, Tensor]
    window: int
    size: int = 0
    _recovery_sets: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.size == 0:
            self.size = sum(len(c) for c in self.conversations)

    def available_modalities(self) -> tuple[str, ...]:
        avail = self.mask.available_modalities()
        return tuple(m for m in MODALITIES if m in avail)

    def token_geometry(self) -> tuple[int, int]:
        any_model = next(iter(self.diffusion.values()))
        return any_model.s_tok, any_model.p_tok

    def recovery_training_set(self, m: str) -> tuple[np.ndarray, np.ndarray | None]:
        """Clean latents of modality m plus conditions from the other modalities.

        Conditions are computed with modality m masked out of the
        availability rows, so the model never conditions on the signal
        it is learning to generate. Samples where m is the only modality
        carry no cross-modal context and are skipped; if no sample has
        any, the whole set falls back to unconditional pairs (condition
        ``None``). Cached: the feature stack is frozen.
        """
        if m in self._recovery_sets:
            return self._recovery_sets[m]
        k = MODALITIES.index(m)
        s_tok, p_tok = self.token_geometry()
        z0_rows, cond_rows, lone_rows = [], [], []
        with T.no_grad():
            for conv in self.conversations:
                rows = self.mask.rows(conv.conv_id)
                if not rows[:, k].any():
                    continue
                latents = self.encoder.encode(conv)
                rows_excl = rows.copy()
                rows_excl[:, k] = False
                have = np.flatnonzero(rows[:, k] & (rows_excl.sum(axis=1) > 0))
                lone = np.flatnonzero(rows[:, k] & (rows_excl.sum(axis=1) == 0))
                if lone.size:
                    lone_rows.append(latents[m][lone])
                if have.size == 0:
                    continue
                graph = G.build_dialogue_graph(conv.speakers, self.window)
                z_d, _ = G.dgn_forward(latents, rows_excl, graph, self.dgn_params,
                                       allow_empty_rows=True)
                z_s, _, _ = S.scn_forward(latents, rows_excl, self.scn_params,
                                          s_tok, p_tok, allow_empty_rows=True)
                cond_full = np.concatenate([z_d.data, z_s.data], axis=1)
                z0_rows.append(latents[m][have])
                cond_rows.append(cond_full[have])
        if z0_rows:
            z0 = np.concatenate(z0_rows).reshape(-1, s_tok, p_tok)
            cond = np.concatenate(cond_rows)
        elif lone_rows:
            z0 = np.concatenate(lone_rows).reshape(-1, s_tok, p_tok)
            cond = None
        else:
            raise ValueError(f"client {self.cid} has no samples with modality {m!r}")
        self._recovery_sets[m] = (z0, cond)
        return self._recovery_sets[m]

    def labels(self) -> np.ndarray:
        return np.concatenate([np.asarray(c.labels) for c in self.conversations])


def make_client(
    cid: int,
    conversations,
    mask: MissingMask,
    encoder: G.FrozenEncoder,
    dgn_params: dict,
    scn_params: dict,
    diffusion_models: dict[str, D.DiffusionModel],
    classifier_params: dict,
    window: int,
) -> FederatedClient:
    """Client with private copies of every trainable module."""
    return FederatedClient(
        cid=cid,
        conversations=list(conversations),
        mask=mask,
        encoder=encoder,
        dgn_params=dgn_params,
        scn_params=scn_params,
        diffusion={m: clone_diffusion_model(diffusion_models[m]) for m in diffusion_models},
        classifier=clone_tensor_dict(classifier_params),
        window=window,
    )


# ---------------------------------------------------------------------------
# local updates


def local_update_recovery(
    client: FederatedClient,
    epochs: int,
    *,
    p_drop: float = 0.1,
    train_guidance_w: float = 0.0,
    lr: float = 1e-3,
    rng: np.random.Generator,
) -> tuple[dict[str, dict[str, Tensor]], dict[str, float]]:
    """Train one diffusion model per locally available modality.

    Each epoch is one full-batch noise-matching step with a fresh Adam
    state. The classifier is untouched. Returns the trained parameter
    dicts keyed by modality and the mean loss per modality.
    """
    avail = client.available_modalities()
    if not avail:
        raise ValueError(f"client {client.cid} has no available modalities to train on")
    uploads: dict[str, dict[str, Tensor]] = {}
    losses: dict[str, float] = {}
    for m in avail:
        z0, cond = client.recovery_training_set(m)
        model = client.diffusion[m]
        opt = O.Adam(lr=lr)
        vals = []
        for _ in range(epochs):
            O.zero_grads(model.params)
            vals.append(
                D.diffusion_train_step(
                    model, z0, cond, p_drop=p_drop, rng=rng,
                    train_guidance_w=train_guidance_w,
                )
            )
            opt.step(model.params)
        uploads[m] = model.params
        losses[m] = float(np.mean(vals)) if vals else math.nan
    return uploads, losses


def zero_filled_latents(client: FederatedClient) -> dict[int, dict[str, np.ndarray]]:
    """Encoder latents with missing slots left at zero, the ablation baseline."""
    out = {}
    for conv in client.conversations:
        rows = client.mask.rows(conv.conv_id)
        latents = client.encoder.encode(conv)
        filled = {}
        for k, m in enumerate(MODALITIES):
            arr = latents[m].copy()
            arr[~rows[:, k]] = 0.0
            filled[m] = arr
        out[conv.conv_id] = filled
    return out


def client_features(
    client: FederatedClient,
    *,
    imputation: str = "diffusion",
    sampler: str = "ddim",
    sample_steps: int = 50,
    guidance_w: float = 1.0,
    conditional: bool = True,
    clip_scale: float | None = 1.5,
    rng: np.random.Generator,
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Complete per-modality feature matrices for classifier training.

    ``imputation="diffusion"`` samples the missing slots from the local
    copies of the global recovery models; ``"zero"`` leaves them at
    zero. Available slots are always the true encoder latents.
    """
    if imputation not in ("diffusion", "zero"):
        raise ValueError(f"unknown imputation mode {imputation!r}")
    s_tok, p_tok = client.token_geometry()
    if imputation == "zero":
        completed = zero_filled_latents(client)
    else:
        completed = D.recover_modality(
            client.conversations, client.mask, client.encoder,
            client.dgn_params, client.scn_params, client.diffusion,
            window=client.window, s_tok=s_tok, p_tok=p_tok,
            sampler=sampler, sample_steps=sample_steps, guidance_w=guidance_w,
            rng=rng, conditional=conditional, clip_scale=clip_scale,
        )
    feats = {
        m: np.concatenate([completed[c.conv_id][m] for c in client.conversations])
        for m in MODALITIES
    }
    return feats, client.labels()


def local_update_classifier(
    client: FederatedClient,
    epochs: int,
    *,
    imputation: str = "diffusion",
    sampler: str = "ddim",
    sample_steps: int = 50,
    guidance_w: float = 1.0,
    conditional: bool = True,
    clip_scale: float | None = 1.5,
    lr: float = 1e-3,
    rng: np.random.Generator,
) -> tuple[dict[str, Tensor], float]:
    """Recover missing modalities with frozen models, then train the classifier.

    Requires all three recovery models locally (the broadcast contract).
    Returns the classifier parameters and the mean cross-entropy.
    """
    for m in MODALITIES:
        if m not in client.diffusion:
            raise ValueError(f"client {client.cid} lacks the recovery model for {m!r}")
    s_tok, p_tok = client.token_geometry()
    feats, labels = client_features(
        client, imputation=imputation, sampler=sampler, sample_steps=sample_steps,
        guidance_w=guidance_w, conditional=conditional, clip_scale=clip_scale, rng=rng,
    )
    opt = O.Adam(lr=lr)
    vals = []
    for _ in range(epochs):
        O.zero_grads(client.classifier)
        loss = E.classifier_loss(feats, labels, client.classifier, s_tok, p_tok)
        T.backward(loss)
        opt.step(client.classifier)
        vals.append(float(loss.data))
    return client.classifier, float(np.mean(vals)) if vals else math.nan


# ---------------------------------------------------------------------------
# aggregation and broadcast


def _manifest(params: dict) -> dict[str, tuple[int, ...]]:
    return {k: tuple(np.shape(v.data if isinstance(v, Tensor) else v)) for k, v in params.items()}


def aggregate_weighted(uploads: list[dict], sizes) -> dict[str, np.ndarray]:
    """Dataset-size-weighted mean of parameter dicts, weights renormalized.

    Computed as first + sum of weighted differences from the first, so a
    single contributor and identical uploads both come back bitwise
    equal to the input. Callers must pass uploads in canonical client
    order for run-to-run determinism.
    """
    if not uploads:
        raise ValueError("nothing to aggregate")
    sizes = np.asarray(sizes, dtype=np.float64)
    if sizes.shape != (len(uploads),) or np.any(sizes <= 0):
        raise ValueError("need one positive size per upload")
    ref = _manifest(uploads[0])
    for up in uploads[1:]:
        if _manifest(up) != ref:
            raise ValueError("parameter manifests differ across uploads")
    weights = sizes / sizes.sum()
    out = {}
    for name in uploads[0]:
        base = np.array(uploads[0][name].data if isinstance(uploads[0][name], Tensor)
                        else uploads[0][name], dtype=np.float64)
        acc = base.copy()
        for w, up in zip(weights[1:], uploads[1:]):
            other = up[name].data if isinstance(up[name], Tensor) else np.asarray(up[name])
            acc += w * (other - base)
        out[name] = acc
    return out


def aggregate_modality_models(
    uploads: dict[int, dict[str, dict]],
    sizes: dict[int, float],
    previous: dict[str, dict],
) -> dict[str, dict[str, np.ndarray]]:
    """Per-modality weighted mean over the clients that trained that modality.

    A modality nobody uploaded keeps the previous global parameters.
    """
    out = {}
    for m in MODALITIES:
        contributors = sorted(cid for cid in uploads if m in uploads[cid])
        if not contributors:
            out[m] = {k: np.array(v.data if isinstance(v, Tensor) else v)
                      for k, v in previous[m].items()}
        else:
            out[m] = aggregate_weighted(
                [uploads[cid][m] for cid in contributors],
                [sizes[cid] for cid in contributors],
            )
    return out


def aggregate_classifier(uploads: dict[int, dict], sizes: dict[int, float]) -> dict[str, np.ndarray]:
    contributors = sorted(uploads)
    return aggregate_weighted(
        [uploads[cid] for cid in contributors],
        [sizes[cid] for cid in contributors],
    )


def broadcast_params(global_params: dict, targets: list[dict]) -> int:
    """Send one module through the wire codec into every target dict in place.

    Serializes once, so every receiver gets the identical 32-bit-rounded
    values; returns the byte cost per receiver. Rebroadcasting already-
    rounded values is a no-op because the rounding is idempotent.
    """
    payload, manifest = CK.serialize_params(global_params)
    arrays = CK.deserialize_params(payload, manifest)
    for target in targets:
        for name, arr in arrays.items():
            slot = target.get(name)
            if isinstance(slot, Tensor):
                slot.data = arr.copy()
                slot.grad = None
            else:
                target[name] = arr.copy()
    return len(payload) + len(manifest.encode("utf-8"))


# ---------------------------------------------------------------------------
# orchestration


@dataclass
class FederationState:
    """Server-side global parameters plus the round cursor."""

    diffusion: dict[str, dict[str, np.ndarray]]
    classifier: dict[str, np.ndarray]
    round: int = 0
    stage: str = ""

    def __post_init__(self):
        manifests = {m: _manifest(self.diffusion[m]) for m in self.diffusion}
        if len(set(map(str, manifests.values()))) > 1:
            raise ValueError("global diffusion models must share one shape manifest")


def init_state(diffusion_models: dict[str, D.DiffusionModel], classifier_params: dict) -> FederationState:
    return FederationState(
        diffusion={m: {k: np.array(v.data) for k, v in diffusion_models[m].params.items()}
                   for m in diffusion_models},
        classifier={k: np.array(v.data if isinstance(v, Tensor) else v)
                    for k, v in classifier_params.items()},
    )


@dataclass
class LogRow:
    round: int
    stage: str
    client: int
    module: str
    bytes_up: int
    bytes_down: int
    local_loss: float = math.nan
    val_acc: float = math.nan
    val_waf1: float = math.nan


def write_round_log(path, rows: list[LogRow], provenance: str | None = None) -> None:
    """Round log as CSV; absent measurements become empty fields."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if provenance:
            fh.write(f"# {provenance}\n")
        writer = DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        for row in rows:
            rec = {c: getattr(row, c) for c in LOG_COLUMNS}
            for key in ("local_loss", "val_acc", "val_waf1"):
                rec[key] = "" if math.isnan(rec[key]) else repr(rec[key])
            writer.writerow(rec)


def _client_rng(seed: int, t: int, cid: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, t, cid, tag]))


def _participants(clients, config: FederationConfig, seed: int, t: int):
    subset = config.subset_size()
    ordered = sorted(clients, key=lambda c: c.cid)
    if subset is None or subset >= len(ordered):
        return ordered
    rng = np.random.default_rng(np.random.SeedSequence([seed, t, 0xFED]))
    chosen = rng.choice(len(ordered), size=subset, replace=False)
    return [ordered[i] for i in sorted(chosen)]


def evaluate_global(
    state: FederationState,
    val_client: FederatedClient,
    *,
    imputation: str = "diffusion",
    sampler: str = "ddim",
    sample_steps: int = 50,
    guidance_w: float = 1.0,
    conditional: bool = True,
    clip_scale: float | None = 1.5,
    rng: np.random.Generator,
) -> tuple[float, float]:
    """Accuracy and weighted-average F1 of the global models on held-out data.

    The validation holder receives the globals through the same wire
    codec as training clients.
    """
    for m in MODALITIES:
        broadcast_params(state.diffusion[m], [val_client.diffusion[m].params])
    broadcast_params(state.classifier, [val_client.classifier])
    s_tok, p_tok = val_client.token_geometry()
    feats, labels = client_features(
        val_client, imputation=imputation, sampler=sampler, sample_steps=sample_steps,
        guidance_w=guidance_w, conditional=conditional, clip_scale=clip_scale, rng=rng,
    )
    with T.no_grad():
        logits = E.classify(feats, val_client.classifier, s_tok, p_tok)
    preds = np.argmax(logits.data, axis=1)
    report = E.eval_report(preds, labels)
    return report.accuracy, report.waf1


def run_afs(
    clients: list[FederatedClient],
    state: FederationState,
    config: FederationConfig,
    *,
    seed: int = 0,
    p_drop: float = 0.1,
    train_guidance_w: float = 0.0,
    diffusion_lr: float = 1e-3,
    classifier_lr: float = 1e-3,
    sampler: str = "ddim",
    sample_steps: int = 50,
    guidance_w: float = 1.0,
    conditional: bool = True,
    imputation: str = "diffusion",
    clip_scale: float | None = 1.5,
    val_client: FederatedClient | None = None,
    val_every: int = 0,
    jobs: int = 1,
) -> tuple[FederationState, list[LogRow]]:
    """Run the staged federated loop; returns final state and the full log.

    Each round the stage's modules are trained locally by the round's
    participants, uploaded through the wire codec, aggregated by
    dataset-size weights, and broadcast back to every client. With
    ``val_every`` > 0 and a validation holder, global metrics are
    attached to that round's log rows every so many rounds.
    """
    if len(clients) != config.n_clients:
        raise ValueError("client list does not match the configured count")
    if len({c.cid for c in clients}) != len(clients):
        raise ValueError("duplicate client ids")
    sizes = {c.cid: float(c.size) for c in clients}
    all_sorted = sorted(clients, key=lambda c: c.cid)

    # initial synchronization, not logged: everyone starts from the globals
    for m in MODALITIES:
        broadcast_params(state.diffusion[m], [c.diffusion[m].params for c in all_sorted])
    broadcast_params(state.classifier, [c.classifier for c in all_sorted])

    rows: list[LogRow] = []
    for t in range(1, config.rounds + 1):
        stage = afs_stage(t, config.alternation_interval, config.strict_alternation)
        parts = _participants(clients, config, seed, t)
        round_rows: list[LogRow] = []

        if stage == STAGE_RECOVERY:
            def train_one(client):
                rng = _client_rng(seed, t, client.cid, 1)
                ups, losses = local_update_recovery(
                    client, config.local_epochs, p_drop=p_drop,
                    train_guidance_w=train_guidance_w, lr=diffusion_lr, rng=rng,
                )
                wire = {}
                up_bytes = {}
                for m, params in ups.items():
                    payload, manifest = CK.serialize_params(params)
                    wire[m] = CK.deserialize_params(payload, manifest)
                    up_bytes[m] = len(payload) + len(manifest.encode("utf-8"))
                return client.cid, wire, up_bytes, losses

            if jobs > 1:
                with ThreadPoolExecutor(max_workers=jobs) as pool:
                    results = list(pool.map(train_one, parts))
            else:
                results = [train_one(c) for c in parts]
            uploads = {cid: wire for cid, wire, _, _ in results}
            up_bytes = {cid: ub for cid, _, ub, _ in results}
            losses = {cid: ls for cid, _, _, ls in results}
            state.diffusion = aggregate_modality_models(uploads, sizes, state.diffusion)
            down = {
                m: broadcast_params(state.diffusion[m], [c.diffusion[m].params for c in all_sorted])
                for m in MODALITIES
            }
            for client in all_sorted:
                for m in MODALITIES:
                    round_rows.append(LogRow(
                        round=t, stage=stage, client=client.cid, module=m,
                        bytes_up=up_bytes.get(client.cid, {}).get(m, 0),
                        bytes_down=down[m],
                        local_loss=losses.get(client.cid, {}).get(m, math.nan),
                    ))
        else:
            def train_one(client):
                rng = _client_rng(seed, t, client.cid, 2)
                params, loss = local_update_classifier(
                    client, config.local_epochs, imputation=imputation, sampler=sampler,
                    sample_steps=sample_steps, guidance_w=guidance_w,
                    conditional=conditional, clip_scale=clip_scale,
                    lr=classifier_lr, rng=rng,
                )
                payload, manifest = CK.serialize_params(params)
                wire = CK.deserialize_params(payload, manifest)
                return client.cid, wire, len(payload) + len(manifest.encode("utf-8")), loss

            if jobs > 1:
                with ThreadPoolExecutor(max_workers=jobs) as pool:
                    results = list(pool.map(train_one, parts))
            else:
                results = [train_one(c) for c in parts]
            uploads = {cid: wire for cid, wire, _, _ in results}
            up_bytes = {cid: b for cid, _, b, _ in results}
            losses = {cid: ls for cid, _, _, ls in results}
            state.classifier = aggregate_classifier(uploads, sizes)
            down = broadcast_params(state.classifier, [c.classifier for c in all_sorted])
            for client in all_sorted:
                round_rows.append(LogRow(
                    round=t, stage=stage, client=client.cid, module=CLASSIFIER_MODULE,
                    bytes_up=up_bytes.get(client.cid, 0),
                    bytes_down=down,
                    local_loss=losses.get(client.cid, math.nan),
                ))

        state.round = t
        state.stage = stage
        if val_client is not None and val_every > 0 and (t % val_every == 0 or t == config.rounds):
            acc, score = evaluate_global(
                state, val_client, imputation=imputation, sampler=sampler,
                sample_steps=sample_steps, guidance_w=guidance_w,
                conditional=conditional, clip_scale=clip_scale,
                rng=_client_rng(seed, t, 0xE7A1, 3),
            )
            for row in round_rows:
                row.val_acc = acc
                row.val_waf1 = score
        rows.extend(round_rows)
    return state, rows


def run_cotrained(
    clients: list[FederatedClient],
    state: FederationState,
    config: FederationConfig,
    *,
    seed: int = 0,
    p_drop: float = 0.1,
    train_guidance_w: float = 0.0,
    diffusion_lr: float = 1e-3,
    classifier_lr: float = 1e-3,
    sampler: str = "ddim",
    sample_steps: int = 50,
    guidance_w: float = 1.0,
    conditional: bool = True,
    imputation: str = "diffusion",
    clip_scale: float | None = 1.5,
    jobs: int = 1,
) -> tuple[FederationState, list[LogRow]]:
    """Unstaged baseline: every round trains and ships both module kinds.

    Each client updates its recovery models and then its classifier (on
    features its freshly updated local models recover), and both are
    aggregated and broadcast every round. Seeding matches the staged
    loop, so paired comparisons differ only in the schedule.
    """
    if len(clients) != config.n_clients:
        raise ValueError("client list does not match the configured count")
    sizes = {c.cid: float(c.size) for c in clients}
    all_sorted = sorted(clients, key=lambda c: c.cid)
    for m in MODALITIES:
        broadcast_params(state.diffusion[m], [c.diffusion[m].params for c in all_sorted])
    broadcast_params(state.classifier, [c.classifier for c in all_sorted])

    rows: list[LogRow] = []
    for t in range(1, config.rounds + 1):
        parts = _participants(clients, config, seed, t)

        def train_one(client):
            rng = _client_rng(seed, t, client.cid, 1)
            diff_ups, diff_losses = local_update_recovery(
                client, config.local_epochs, p_drop=p_drop,
                train_guidance_w=train_guidance_w, lr=diffusion_lr, rng=rng,
            )
            rng2 = _client_rng(seed, t, client.cid, 2)
            clf_params, clf_loss = local_update_classifier(
                client, config.local_epochs, imputation=imputation, sampler=sampler,
                sample_steps=sample_steps, guidance_w=guidance_w,
                conditional=conditional, clip_scale=clip_scale,
                lr=classifier_lr, rng=rng2,
            )
            wire, up_bytes = {}, {}
            for m, params in diff_ups.items():
                payload, manifest = CK.serialize_params(params)
                wire[m] = CK.deserialize_params(payload, manifest)
                up_bytes[m] = len(payload) + len(manifest.encode("utf-8"))
            payload, manifest = CK.serialize_params(clf_params)
            clf_wire = CK.deserialize_params(payload, manifest)
            up_bytes[CLASSIFIER_MODULE] = len(payload) + len(manifest.encode("utf-8"))
            losses = dict(diff_losses)
            losses[CLASSIFIER_MODULE] = clf_loss
            return client.cid, wire, clf_wire, up_bytes, losses

        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                results = list(pool.map(train_one, parts))
        else:
            results = [train_one(c) for c in parts]
        diff_uploads = {cid: wire for cid, wire, _, _, _ in results}
        clf_uploads = {cid: cw for cid, _, cw, _, _ in results}
        up_bytes = {cid: ub for cid, _, _, ub, _ in results}
        losses = {cid: ls for cid, _, _, _, ls in results}
        state.diffusion = aggregate_modality_models(diff_uploads, sizes, state.diffusion)
        state.classifier = aggregate_classifier(clf_uploads, sizes)
        down = {
            m: broadcast_params(state.diffusion[m], [c.diffusion[m].params for c in all_sorted])
            for m in MODALITIES
        }
        down[CLASSIFIER_MODULE] = broadcast_params(
            state.classifier, [c.classifier for c in all_sorted]
        )
        for client in all_sorted:
            for module in (*MODALITIES, CLASSIFIER_MODULE):
                rows.append(LogRow(
                    round=t, stage=STAGE_COTRAINED, client=client.cid, module=module,
                    bytes_up=up_bytes.get(client.cid, {}).get(module, 0),
                    bytes_down=down[module],
                    local_loss=losses.get(client.cid, {}).get(module, math.nan),
                ))
        state.round = t
        state.stage = STAGE_COTRAINED
    return state, rows


# ---------------------------------------------------------------------------
# communication accounting


def module_sizes(state: FederationState) -> dict[str, int]:
    """Wire bytes of each module from its serialized checkpoint."""
    sizes = {m: CK.serialized_bytes(state.diffusion[m]) for m in MODALITIES}
    sizes[CLASSIFIER_MODULE] = CK.serialized_bytes(state.classifier)
    return sizes


def comm_summary(rows: list[LogRow], sizes: dict[str, int]) -> dict[str, float]:
    """Average per-client round cost versus the ship-everything baseline.

    The naive baseline uploads and downloads every module every round.
    Also reports what fraction of one full model the recovery modules
    account for, the quantity that makes the staged schedule pay off.
    """
    if not rows:
        raise ValueError("empty round log")
    n_rounds = len({r.round for r in rows})
    n_clients = len({r.client for r in rows})
    total = sum(r.bytes_up + r.bytes_down for r in rows)
    afs = total / (n_rounds * n_clients)
    full = sum(sizes.values())
    naive = 2.0 * full
    diffusion_total = sum(sizes[m] for m in MODALITIES)
    return {
        "afs_bytes_per_round": afs,
        "naive_bytes_per_round": naive,
        "ratio": afs / naive,
        "diffusion_share": diffusion_total / full,
    }
