"""Release gate: one test per shipped guarantee, tolerances pinned inline.

Every test below prints as a single pass/fail line under ``pytest -v``.
Oracles are spelled out by hand in this file (brute-force enumerations,
closed forms, literal double sums) so a library regression cannot hide
behind shared helper code. The end-to-end margins in
``test_end_to_end_recovery_benefit`` were frozen after an eight-seed
pilot; see notes on the fixture.
"""

import itertools
import math

import numpy as np
import pytest

from fedrecover import checkpoint as CK
from fedrecover import cli
from fedrecover import convergence as V
from fedrecover import corpus as C
from fedrecover import diffusion as D
from fedrecover import evaluation as E
from fedrecover import federation as F
from fedrecover import graphnet as G
from fedrecover import semantic as S
from fedrecover import tensor as T
from fedrecover.corpus import MODALITIES
from fedrecover.tensor import Tensor


def _rng(*key):
    return np.random.default_rng(np.random.SeedSequence(list(key)))


def _mask_rows(rng, n):
    """Random availability rows, at least one modality kept per sample."""
    mask = rng.random((n, 3)) < 0.6
    for i in range(n):
        if not mask[i].any():
            mask[i, rng.integers(0, 3)] = True
    return mask


# ---------------------------------------------------------------------------
# 1. finite-difference gradient checks, every differentiable network

GRAD_TOL = 1e-4
GRAD_EPS = 1e-5
GRAD_CASES = 100


def _weighted(out, w):
    return T.sum_all(T.mul(out, Tensor(w)))


def _dgn_case(case):
    rng = _rng(9001, 1, case)
    n, d = int(rng.integers(3, 6)), 4
    graph = G.build_dialogue_graph(rng.integers(0, 2, size=n), int(rng.integers(1, 3)))
    mask = _mask_rows(rng, n)
    latents = {m: rng.normal(size=(n, d)) for m in MODALITIES}
    params = G.init_dgn_params(rng, d, n_classes=3, heads=2, hidden=6)
    wz = rng.normal(size=(n, 3 * d + 3))
    wl = rng.normal(size=(n, 3))

    def loss():
        z, logits = G.dgn_forward(latents, mask, graph, params)
        return T.add(_weighted(z, wz), _weighted(logits, wl))

    return loss, params, rng


def _scn_case(case):
    rng = _rng(9001, 2, case)
    n, s_tok, p_tok = int(rng.integers(3, 6)), 2, 3
    d = s_tok * p_tok
    mask = _mask_rows(rng, n)
    latents = {m: rng.normal(size=(n, d)) for m in MODALITIES}
    params = S.init_scn_params(rng, d, s_tok, p_tok, n_classes=3, hidden=6)
    wz = rng.normal(size=(n, 3 * p_tok + 3))
    wl = rng.normal(size=(n, 3))

    def loss():
        z, logits, _ = S.scn_forward(latents, mask, params, s_tok, p_tok)
        return T.add(_weighted(z, wz), _weighted(logits, wl))

    return loss, params, rng


def _diffusion_case(case):
    rng = _rng(9001, 3, case)
    sched = D.NoiseSchedule.linear(10, 1e-4, 0.02)
    width = D.condition_width(8, 4)
    model = D.init_diffusion_model(rng, 8, 2, 4, width, sched, n_blocks=1, time_dim=4)
    for k in model.params:  # open the condition pathway, zero-init is inert
        if "fuse" in k:
            model.params[k].data = 0.3 * rng.normal(size=model.params[k].shape)
    n = 2
    z_t = rng.normal(size=(n, 2, 4))
    t_steps = rng.integers(1, 11, size=n)
    cond_in = rng.normal(size=(n, width))
    w = rng.normal(size=(n, 2, 4))

    def loss():
        cond = D.build_condition(model, cond_in)
        return _weighted(D.predict_noise(model, z_t, t_steps, cond), w)

    return loss, model.params, rng


def _classifier_case(case):
    rng = _rng(9001, 4, case)
    n, s_tok, p_tok = int(rng.integers(3, 6)), 2, 4
    d = s_tok * p_tok
    feats = {m: rng.normal(size=(n, d)) for m in MODALITIES}
    params = E.init_classifier_params(rng, d, s_tok, p_tok, n_classes=3, hidden=6)
    w = rng.normal(size=(n, 3))

    def loss():
        return _weighted(E.classify(feats, params, s_tok, p_tok), w)

    return loss, params, rng


def test_finite_difference_gradients_all_networks():
    worst = {}
    for name, case_fn in (
        ("context-graph", _dgn_case),
        ("cross-modal-summary", _scn_case),
        ("noise-predictor", _diffusion_case),
        ("classifier", _classifier_case),
    ):
        err = 0.0
        for case in range(GRAD_CASES):
            loss, params, rng = case_fn(case)
            err = max(err, T.check_param_gradients(loss, params, eps=GRAD_EPS, coords=2, rng=rng))
        worst[name] = err
    assert max(worst.values()) <= GRAD_TOL, worst


# ---------------------------------------------------------------------------
# 2. dialogue graph versus brute-force window enumeration


def test_dialogue_graph_matches_window_enumeration():
    rng = _rng(9002)
    for _ in range(1000):
        n = int(rng.integers(1, 11))
        sp = rng.integers(0, int(rng.integers(2, 5)), size=n)
        w = int(rng.integers(1, 4))
        g = G.build_dialogue_graph(sp, w)
        edges = []
        for i in range(n):
            for j in range(n):
                if abs(i - j) > w:
                    continue
                if sp[i] == sp[j]:
                    srel = "same"
                else:
                    srel = "cross_fwd" if j > i else "cross_bwd"
                crel = "present" if j == i else ("future" if j > i else "past")
                edges.append((i, j, srel, crel))
        assert (g.n, g.window, g.speakers) == (n, w, tuple(int(s) for s in sp))
        assert sorted(g.edges) == sorted(edges)


# ---------------------------------------------------------------------------
# 3. relational graph convolution versus the literal double sum


def test_relational_conv_matches_double_sum():
    rng = _rng(9003)
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(2, 7))
        sp = rng.integers(0, int(rng.integers(2, 4)), size=n)
        g = G.build_dialogue_graph(sp, int(rng.integers(1, 3)))
        h = rng.normal(size=(n, 3))
        for kind, rels in (("speaker", G.SPEAKER_RELATIONS), ("context", G.CONTEXT_RELATIONS)):
            params = {f"w.{r}": Tensor(rng.normal(size=(3, 3))) for r in rels}
            with T.no_grad():
                out = G.rgcn_layer(g, Tensor(h), params, "w", kind).data
            ref = np.zeros((n, 3))
            for i in range(n):
                acc = np.zeros(3)
                for r in rels:
                    nbrs = [j for (a, j, srel, crel) in g.edges
                            if a == i and (srel if kind == "speaker" else crel) == r]
                    if nbrs:
                        acc = acc + (sum(h[j] for j in nbrs) / len(nbrs)) @ params[f"w.{r}"].data
                ref[i] = np.maximum(acc, 0.0)
            worst = max(worst, float(np.abs(out - ref).max()))
    assert worst <= 1e-12, worst


# ---------------------------------------------------------------------------
# 4. forward-noising marginals versus the closed form


def test_forward_noising_matches_closed_form_moments():
    rng = _rng(9004)
    sched = D.NoiseSchedule.linear(120, 1e-4, 0.02)
    z0 = rng.normal(size=4)
    n = 100_000
    for t in (1, 60, 120):
        ab = sched.alpha_bar(t)
        draws = D.q_sample(z0, t, rng.standard_normal((n, 4)), sched)
        target_std = math.sqrt(1.0 - ab)
        se_mean = target_std / math.sqrt(n)
        se_std = target_std / math.sqrt(2 * n)
        mean_err = np.abs(draws.mean(axis=0) - math.sqrt(ab) * z0)
        std_err = np.abs(draws.std(axis=0, ddof=1) - target_std)
        assert np.all(mean_err <= 3 * se_mean), (t, mean_err, 3 * se_mean)
        assert np.all(std_err <= 3 * se_std), (t, std_err, 3 * se_std)


# ---------------------------------------------------------------------------
# 5. exact-predictor recovery and the injected-error ceiling


def test_exact_predictor_recovery_and_noise_ceiling():
    sched = D.NoiseSchedule.linear(50, 1e-4, 0.02)
    rep = V.measure_recovery_error_bound(
        sched, shape=(1, 2, 4), sample_steps=50,
        eps_levels=(0.05, 0.1, 0.2), n_trials=50, lip_total=1.0, seed=9005)
    assert rep.noise_floor <= 1e-3, rep
    assert rep.monotone_ok, rep
    assert rep.ceiling_ok, rep


# ---------------------------------------------------------------------------
# 6. guidance identities, exact in floating point


def test_guidance_identities_exact():
    rng = _rng(9006)
    sched = D.NoiseSchedule.linear(10, 1e-4, 0.02)
    width = D.condition_width(8, 4)
    model = D.init_diffusion_model(rng, 8, 2, 4, width, sched, n_blocks=1, time_dim=4)
    z_t = rng.normal(size=(3, 2, 4))
    t_steps = rng.integers(1, 11, size=3)
    cond = D.build_condition(model, rng.normal(size=(3, width)))
    with T.no_grad():
        # fresh fusion weights are zero, so conditioning is inert and the
        # two branches coincide; (1+w)x - wx must then return x exactly,
        # which binary floating point guarantees at w = 1
        cn = D.predict_noise(model, z_t, t_steps, cond).data
        un = D.predict_noise(model, z_t, t_steps, None).data
        assert np.array_equal(cn, un)
        assert np.array_equal(D.guided_noise(model, z_t, t_steps, cond, 1.0).data, cn)

        for k in model.params:  # now make the condition branch nontrivial
            if "fuse" in k:
                model.params[k].data = 0.3 * rng.normal(size=model.params[k].shape)
        cn = D.predict_noise(model, z_t, t_steps, cond).data
        un = D.predict_noise(model, z_t, t_steps, None).data
        assert not np.array_equal(cn, un)
        assert np.array_equal(D.guided_noise(model, z_t, t_steps, cond, 0.0).data, cn)
        for w in (-0.3, 0.7, 1.0, 2.5):
            assert np.array_equal(D.guided_noise(model, z_t, t_steps, None, w).data, un)
            assert np.array_equal(
                D.guided_noise(model, z_t, t_steps, cond, w).data,
                (1.0 + w) * cn - w * un)


# ---------------------------------------------------------------------------
# 7. weighted aggregation versus the flat-vector oracle


def test_weighted_aggregation_matches_flat_oracle():
    rng = _rng(9007)
    shapes = [(3, 2), (4,), (2, 2, 2), ()]
    names = [f"p{j}" for j in range(len(shapes))]
    worst = 0.0
    for _ in range(100):
        k = int(rng.integers(1, 5))
        uploads = [{nm: rng.normal(size=shp) for nm, shp in zip(names, shapes)}
                   for _ in range(k)]
        sizes = rng.integers(1, 50, size=k).astype(float)
        weights = sizes / sizes.sum()
        assert abs(weights.sum() - 1.0) <= 1e-15
        agg = F.aggregate_weighted(uploads, sizes)
        flat = sum(w * np.concatenate([np.ravel(up[nm]) for nm in names])
                   for w, up in zip(weights, uploads))
        got = np.concatenate([np.ravel(agg[nm]) for nm in names])
        worst = max(worst, float(np.abs(got - flat).max()))
    assert worst <= 1e-12, worst
    single = {"a": rng.normal(size=(3, 3)), "b": rng.normal(size=4)}
    out = F.aggregate_weighted([single], [7.0])
    assert all(np.array_equal(out[nm], single[nm]) for nm in single)


# ---------------------------------------------------------------------------
# 8. alternation schedule and freeze integrity over twelve rounds


def _schedule_world():
    """Two-client miniature federation, rebuilt identically on every call."""
    corpus = C.generate_corpus(
        n_conversations=6, utterances_per_conv=5, n_speakers=2, n_classes=3,
        modality_dims={"l": 6, "v": 5, "a": 4}, class_separation=3.0, seed=7)
    shards = C.partition_clients(corpus, 2, 7)
    encoder = G.FrozenEncoder({"l": 6, "v": 5, "a": 4}, 8, seed=7)
    sched = D.NoiseSchedule.linear(10, 1e-3, 0.1)
    width = D.condition_width(8, 4)
    mrng = _rng(9008, 99)
    models = {m: D.init_diffusion_model(mrng, 8, 2, 4, width, sched, n_blocks=1, time_dim=4)
              for m in MODALITIES}
    classifier = E.init_classifier_params(mrng, 8, 2, 4, n_classes=3, hidden=8)
    patterns = (("l", "v"), ("l", "a"))
    clients = []
    for i, shard in enumerate(shards):
        mask = C.apply_fixed_missing(shard.conversations, patterns[i])
        prng = _rng(9008, shard.client_id)
        dgn = G.init_dgn_params(prng, 8, n_classes=3, heads=2, hidden=8)
        scn = S.init_scn_params(prng, 8, 2, 4, n_classes=3, hidden=8)
        clients.append(F.make_client(shard.client_id, shard.conversations, mask,
                                     encoder, dgn, scn, models, classifier, 2))
    return clients, F.init_state(models, classifier)


def _run_prefix(rounds, order=None):
    clients, state = _schedule_world()
    if order is not None:
        clients = [clients[i] for i in order]
    cfg = F.FederationConfig(n_clients=2, rounds=rounds, alternation_interval=3,
                             local_epochs=1)
    return F.run_afs(clients, state, cfg, seed=21, p_drop=0.1, sampler="ddim",
                     sample_steps=2, guidance_w=1.0, imputation="zero")


def _module_hashes(state):
    hashes = {m: CK.params_hash(state.diffusion[m]) for m in MODALITIES}
    hashes["clf"] = CK.params_hash(state.classifier)
    return hashes


def test_alternation_schedule_and_freeze_integrity():
    # recovery when the round index mod 3 is odd, classifier otherwise
    expected = ["recovery" if t % 3 == 1 else "classifier" for t in range(1, 13)]
    _, start_state = _schedule_world()
    hashes = [_module_hashes(start_state)]
    runs = []
    for k in range(1, 13):
        state, rows = _run_prefix(k)
        hashes.append(_module_hashes(state))
        runs.append(rows)

    rows = runs[-1]
    by_round = {}
    for r in rows:
        by_round.setdefault(r.round, set()).add(r.stage)
    assert all(len(s) == 1 for s in by_round.values())
    assert [by_round[t].pop() for t in range(1, 13)] == expected

    # each shorter run must be a byte-for-byte prefix of the next one,
    # which makes the hash-after-round-k comparison below meaningful
    def keyed(log):
        return [(r.round, r.stage, r.client, r.module, r.bytes_up, r.bytes_down)
                for r in log]

    for k in range(1, 12):
        assert keyed([r for r in runs[k] if r.round <= k]) == keyed(runs[k - 1])

    pattern_of = {0: ("l", "v"), 1: ("l", "a")}  # matches _schedule_world
    for t in range(1, 13):
        before, after = hashes[t - 1], hashes[t]
        round_rows = [r for r in rows if r.round == t]
        assert all(r.bytes_down > 0 for r in round_rows)
        if expected[t - 1] == "recovery":
            frozen = ("clf",)
            assert {r.module for r in round_rows} == set(MODALITIES)
            # a client uploads exactly the modalities it can see locally
            for r in round_rows:
                assert (r.bytes_up > 0) == (r.module in pattern_of[r.client]), r
        else:
            frozen = MODALITIES
            assert {r.module for r in round_rows} == {"clf"}
            assert all(r.bytes_up > 0 for r in round_rows)
        for name in frozen:
            assert after[name] == before[name], (t, name)
        assert sum(r.bytes_up + r.bytes_down for r in round_rows
                   if r.module in frozen) == 0


# ---------------------------------------------------------------------------
# 9. alternating descent obeys the per-alternation rate bound


def test_alternating_descent_respects_rate_bound():
    for ratio in (0.1, 0.5):
        for s in range(20):
            pa = V.make_quadratic(20, ratio, 1.0, seed=1900 + 7 * s)
            pb = V.make_quadratic(20, ratio, 1.0, seed=1901 + 7 * s)
            vals = V.run_alternating_freeze(pa, pb, 1.0, 1.0, 50, seed=s)
            ok, worst = V.check_alternating_rate_bound(vals, 0.0, ratio, 1.0)
            assert ok and worst <= 1.0 + 1e-9, (ratio, s, worst)


# ---------------------------------------------------------------------------
# 10. federated-averaging surrogate bound and its noiseless corollary


def test_fedavg_surrogate_bound_and_noiseless_gd():
    prob = V.make_quadratic(8, 1.0, 2.0, seed=2077)
    for local_steps in (1, 3):
        for sampled in (1, 3):
            holds, measured, bound = V.check_fedavg_gap_bound(
                prob, eta=0.5, local_steps=local_steps, clients_sampled=sampled,
                rounds=40, sigma=0.4, delta_agg=0.05, eps_diff=0.1,
                n_clients=6, n_seeds=30, seed=3000 + 10 * local_steps + sampled)
            assert holds, (local_steps, sampled, measured, bound)

    # noiseless corollary: one client, one local step, zero injected noise
    # must follow plain gradient descent bitwise
    rng = _rng(9010)
    theta0 = prob.theta_star + rng.normal(size=8)
    final = V.run_fedavg_quadratic(
        prob, eta=0.25, local_steps=1, clients_sampled=1, n_clients=1,
        rounds=40, sigma=0.0, delta_agg=0.0, theta0=theta0, rng=_rng(9011))
    theta = theta0.copy()
    for _ in range(40):
        theta = theta - 0.25 * prob.grad(theta)
    assert np.array_equal(final, theta)
    holds, measured, bound = V.check_fedavg_gap_bound(
        prob, eta=0.25, local_steps=1, clients_sampled=1, rounds=40,
        sigma=0.0, delta_agg=0.0, eps_diff=0.0, n_clients=1, n_seeds=5, seed=9012)
    assert holds, (measured, bound)


# ---------------------------------------------------------------------------
# 11. signed-rank test: reference values and full-enumeration oracle


def test_signed_rank_reference_and_enumeration_oracle():
    w, p = E.wilcoxon_signed_rank_exact([0.8, 1.9, 0.7, 1.4, 0.9, 2.5])
    assert w == 21.0
    assert p == 0.015625
    rng = _rng(9013)
    for _ in range(30):
        n = int(rng.integers(2, 11))
        mags = rng.permutation(n) + 1  # distinct integers, so rank == magnitude
        signs = rng.choice([-1.0, 1.0], size=n)
        w, p = E.wilcoxon_signed_rank_exact(signs * mags)
        w_ref = float(mags[signs > 0].sum())
        count = sum(
            1 for bits in itertools.product((0, 1), repeat=n)
            if sum(m for m, b in zip(mags, bits) if b) >= w_ref)
        assert w == w_ref
        assert p == count / 2.0 ** n


# ---------------------------------------------------------------------------
# 12. accuracy and weighted F1 versus brute-force per-class counting


def test_metrics_match_brute_force():
    rng = _rng(9014)
    worst = 0.0
    for _ in range(200):
        k = int(rng.integers(2, 7))
        n = int(rng.integers(5, 60))
        labels = rng.integers(0, k, size=n)
        preds = rng.integers(0, k, size=n)
        acc_ref = sum(int(p == t) for p, t in zip(preds, labels)) / n
        f1w = 0.0
        for c in range(k):
            tp = sum(1 for p, t in zip(preds, labels) if p == c and t == c)
            fp = sum(1 for p, t in zip(preds, labels) if p == c and t != c)
            fn = sum(1 for p, t in zip(preds, labels) if p != c and t == c)
            prec = tp / (tp + fp) if tp + fp else 0.0
            rec = tp / (tp + fn) if tp + fn else 0.0
            f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
            f1w += (tp + fn) / n * f1
        worst = max(worst,
                    abs(E.accuracy(preds, labels) - acc_ref),
                    abs(E.waf1(preds, labels, n_classes=k) - f1w))
    assert worst <= 1e-12, worst


# ---------------------------------------------------------------------------
# 13. end-to-end recovery benefit on a three-client fixed-pattern corpus

E2E = dict(
    d=16, s_tok=2, p_tok=8, classes=4, window=2,
    dims={"l": 12, "v": 10, "a": 8}, convs=18, utts=12,
    timesteps=200, betas=(1e-3, 0.1), sample_steps=50, guidance=2.0,
    rounds=33, local_epochs=30, pretrain_epochs=60, seed=0)
E2E_PATTERNS = (("l", "v"), ("l", "a"), ("v", "a"))


def _e2e_build(seed):
    corpus = C.generate_corpus(
        n_conversations=E2E["convs"], utterances_per_conv=E2E["utts"],
        n_speakers=2, n_classes=E2E["classes"], modality_dims=E2E["dims"],
        class_separation=4.0, seed=seed)
    shards = C.partition_clients(corpus, 3, seed)
    encoder = G.FrozenEncoder(E2E["dims"], E2E["d"], seed=seed)
    stacks, holdout = {}, []
    for i, shard in enumerate(shards):
        mask = C.apply_fixed_missing(shard.conversations, E2E_PATTERNS[i])
        prng = _rng(seed, shard.client_id, 11)
        dgn = G.init_dgn_params(prng, E2E["d"], n_classes=E2E["classes"], heads=2, hidden=64)
        scn = S.init_scn_params(prng, E2E["d"], E2E["s_tok"], E2E["p_tok"],
                                n_classes=E2E["classes"], hidden=64)
        train = shard.split("train")
        S.pretrain_joint(train, mask.restrict([c.conv_id for c in train]),
                         encoder, dgn, scn, window=E2E["window"],
                         s_tok=E2E["s_tok"], p_tok=E2E["p_tok"],
                         epochs=E2E["pretrain_epochs"], lr=1e-2,
                         seed=seed + shard.client_id)
        stacks[shard.client_id] = (dgn, scn, shard, mask)
        test = shard.split("test")
        holdout.append((shard.client_id, test,
                        mask.restrict([c.conv_id for c in test]),
                        dgn, scn, E2E_PATTERNS[i]))
    return encoder, stacks, holdout


def _e2e_models(seed, sched):
    width = D.condition_width(E2E["d"], E2E["p_tok"])
    rng = _rng(seed, 7)
    models = {m: D.init_diffusion_model(rng, E2E["d"], E2E["s_tok"], E2E["p_tok"],
                                        width, sched)
              for m in MODALITIES}
    classifier = E.init_classifier_params(rng, E2E["d"], E2E["s_tok"], E2E["p_tok"],
                                          n_classes=E2E["classes"], hidden=64)
    return models, classifier


def _e2e_train(seed, encoder, stacks, imputation):
    sched = D.NoiseSchedule.linear(E2E["timesteps"], *E2E["betas"])
    models, classifier = _e2e_models(seed, sched)
    clients = []
    for cid, (dgn, scn, shard, mask) in sorted(stacks.items()):
        train = shard.split("train")
        clients.append(F.make_client(
            cid, train, mask.restrict([c.conv_id for c in train]),
            encoder, dgn, scn, models, classifier, E2E["window"]))
    state = F.init_state(models, classifier)
    cfg = F.FederationConfig(n_clients=3, rounds=E2E["rounds"],
                             alternation_interval=3, local_epochs=E2E["local_epochs"])
    state, _ = F.run_afs(
        clients, state, cfg, seed=seed, p_drop=0.1,
        train_guidance_w=E2E["guidance"], diffusion_lr=3e-3, classifier_lr=3e-3,
        sampler="ddim", sample_steps=E2E["sample_steps"],
        guidance_w=E2E["guidance"], imputation=imputation, clip_scale=1.5)
    return state, sched


def _e2e_eval(holdout, encoder, state, sched, *, imputation, conditional, seed):
    width = D.condition_width(E2E["d"], E2E["p_tok"])
    preds_all, labels_all, cent_errs = [], [], []
    for cid, test, mask, dgn, scn, pattern in holdout:
        models = {m: D.init_diffusion_model(
            np.random.default_rng(0), E2E["d"], E2E["s_tok"], E2E["p_tok"], width, sched)
            for m in MODALITIES}
        for m in MODALITIES:
            models[m].params = {k: Tensor(v) for k, v in state.diffusion[m].items()}
        classifier = {k: Tensor(v) for k, v in state.classifier.items()}
        client = F.make_client(cid, test, mask, encoder, dgn, scn,
                               models, classifier, E2E["window"])
        rng = _rng(seed, 29, cid)
        feats, labels = F.client_features(
            client, imputation=imputation, sampler="ddim",
            sample_steps=E2E["sample_steps"], guidance_w=E2E["guidance"],
            conditional=conditional, clip_scale=1.5, rng=rng)
        with T.no_grad():
            logits = E.classify(feats, classifier, E2E["s_tok"], E2E["p_tok"])
        preds_all.append(np.argmax(logits.data, axis=1))
        labels_all.append(labels)
        for m in MODALITIES:
            if m not in pattern:
                orig = np.concatenate([encoder.encode(c)[m] for c in test])
                _, err = E.centroid_recovery_error(feats[m], orig, labels)
                cent_errs.append(err)
    return (E.accuracy(np.concatenate(preds_all), np.concatenate(labels_all)),
            float(np.mean(cent_errs)))


@pytest.fixture(scope="module")
def end_to_end():
    """Paired federations on one corpus: diffusion recovery vs zero filling.

    Both arms train end to end under their own imputation mode and are
    scored on held-out conversations. The conditioning margin of 0.5 was
    frozen after an eight-seed pilot of this exact construction (observed
    conditioned-vs-unconditional centroid gaps 1.16 to 4.99); the
    accuracy margin is the five-point floor the gate demands.
    """
    seed = E2E["seed"]
    encoder, stacks, holdout = _e2e_build(seed)
    state_rec, sched = _e2e_train(seed, encoder, stacks, "diffusion")
    state_zero, _ = _e2e_train(seed, encoder, stacks, "zero")
    acc_rec, cent_cond = _e2e_eval(holdout, encoder, state_rec, sched,
                                   imputation="diffusion", conditional=True, seed=seed)
    acc_zero, _ = _e2e_eval(holdout, encoder, state_zero, sched,
                            imputation="zero", conditional=True, seed=seed)
    _, cent_unc = _e2e_eval(holdout, encoder, state_rec, sched,
                            imputation="diffusion", conditional=False, seed=seed)
    return {"acc_recovery": acc_rec, "acc_zero": acc_zero,
            "centroid_conditional": cent_cond, "centroid_unconditional": cent_unc}


def test_end_to_end_recovery_benefit(end_to_end):
    r = end_to_end
    margin = r["acc_recovery"] - r["acc_zero"]
    gap = r["centroid_unconditional"] - r["centroid_conditional"]
    assert margin >= 0.05 and gap >= 0.5, (
        f"accuracy margin {margin:+.3f} (recovery {r['acc_recovery']:.3f} vs "
        f"zero-fill {r['acc_zero']:.3f}, needs >= +0.05); "
        f"conditioning centroid gap {gap:+.3f} (conditional "
        f"{r['centroid_conditional']:.3f} vs unconditional "
        f"{r['centroid_unconditional']:.3f}, needs >= 0.5)")


# ---------------------------------------------------------------------------
# 14. communication accounting from real serialized manifests


def test_communication_accounting():
    rng = _rng(9015)
    sched = D.NoiseSchedule.linear(10, 1e-4, 0.02)
    width = D.condition_width(64, 16)
    models = {m: D.init_diffusion_model(rng, 64, 4, 16, width, sched)
              for m in MODALITIES}
    classifier = E.init_classifier_params(rng, 64, 4, 16, n_classes=6, hidden=64)
    sizes = F.module_sizes(F.init_state(models, classifier))
    total = sum(sizes.values())
    diffusion_share = sum(sizes[m] for m in MODALITIES) / total
    assert diffusion_share >= 0.70, sizes
    # staged schedule over twelve rounds: recovery modules move on rounds
    # 1, 4, 7, 10 and the classifier on the rest; naive ships everything
    per_round = [sum(sizes[m] for m in MODALITIES) if t % 3 == 1 else sizes["clf"]
                 for t in range(1, 13)]
    ratio = (sum(per_round) / 12) / total
    assert ratio < 0.5, (ratio, sizes)


# ---------------------------------------------------------------------------
# 15. determinism across reruns and across client execution order

DET_CFG = """\
[corpus]
conversations = 6
utterances = 5
classes = 3
class_separation = 4.0
dim_l = 10
dim_v = 9
dim_a = 8

[model]
d = 8
s_tok = 2
p_tok = 4
pretrain_epochs = 2
hidden = 16

[sampler]
timesteps = 50
sample_steps = 5
guidance_w = 1.0

[federation]
rounds = 3
local_epochs = 1

[run]
seed = 3
"""


def test_determinism_across_reruns_and_client_order(tmp_path):
    captured = []
    for tag in ("first", "second"):
        out = tmp_path / f"run-{tag}"
        cfg_path = tmp_path / f"{tag}.cfg"
        cfg_path.write_text(DET_CFG + f"out = {out}\n", encoding="utf-8")
        for cmd in (["gen-data"], ["pretrain"], ["train"], ["evaluate", "patterns"]):
            assert cli.main(cmd + ["--config", str(cfg_path)]) == 0
        captured.append(tuple(
            (out / rel).read_bytes()
            for rel in ("evaluate/metrics_patterns.csv", "evaluate/centroids.csv",
                        "train/rounds.csv")))
    assert captured[0] == captured[1]
    # permuting the order clients are handed to the loop must not change
    # the aggregated globals
    base, _ = _run_prefix(6)
    permuted, _ = _run_prefix(6, order=[1, 0])
    assert _module_hashes(base) == _module_hashes(permuted)
