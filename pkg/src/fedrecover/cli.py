"""Config-driven experiment runner.

Subcommands form a pipeline over one output directory: ``gen-data``
writes the corpus, ``pretrain`` fits each client's frozen feature
stack, ``train`` runs the staged federated loop, ``evaluate`` scores
the resulting global models under missing-modality scenarios, and
``ablate`` produces paired comparison runs. ``theory-check`` is
self-contained and validates the convergence and recovery bounds on
constructed instances.

Every artifact embeds the resolved config hash and seed, and repeated
invocations with the same config produce byte-identical outputs.

Exit codes: 0 success, 2 config error, 3 data error (missing or
malformed inputs), 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as CK
from . import convergence as V
from . import corpus as C
from . import diffusion as D
from . import evaluation as E
from . import federation as F
from . import graphnet as G
from . import semantic as S
from . import tensor as T
from .config import ConfigError, RunConfig, config_echo, load_config, provenance
from .tensor import Tensor

FIXED_PATTERNS = (("l",), ("v",), ("a",), ("l", "v"), ("l", "a"), ("v", "a"))


class DataError(Exception):
    """Missing or unusable pipeline inputs (corpus, checkpoints)."""


# ---------------------------------------------------------------------------
# shared plumbing


def _out(cfg: RunConfig) -> Path:
    return Path(cfg.out)


def _prefixed(params: dict, prefix: str) -> dict:
    return {prefix + name: value for name, value in params.items()}


def _load_prefixed(path: Path, prefix: str) -> dict[str, Tensor]:
    if not path.with_suffix(".bin").exists():
        raise DataError(f"checkpoint {path}.bin not found; run the earlier stage first")
    arrays = CK.read_checkpoint(path)
    out = {}
    for name, arr in arrays.items():
        if not name.startswith(prefix):
            raise DataError(f"checkpoint {path} holds foreign parameter {name!r}")
        out[name[len(prefix):]] = Tensor(arr)
    return out


def _load_corpus(cfg: RunConfig):
    path = _out(cfg) / "corpus.jsonl"
    if not path.exists():
        raise DataError(f"corpus not found at {path}; run gen-data first")
    return C.load_corpus(path)


def _encoder(cfg: RunConfig) -> G.FrozenEncoder:
    return G.FrozenEncoder(cfg.modality_dims(), cfg.d, seed=cfg.seed)


def _pretrained(cfg: RunConfig, shards) -> dict[int, tuple[dict, dict]]:
    pdir = _out(cfg) / "pretrain"
    stacks = {}
    for shard in shards:
        cid = shard.client_id
        dgn = _load_prefixed(pdir / f"client{cid}_dgn", "dgn.")
        scn = _load_prefixed(pdir / f"client{cid}_scn", "scn.")
        stacks[cid] = (dgn, scn)
    return stacks


def _init_models(cfg: RunConfig):
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7]))
    schedule = D.NoiseSchedule.linear(cfg.timesteps, cfg.beta_start, cfg.beta_end)
    width = D.condition_width(cfg.d, cfg.p_tok)
    models = {
        m: D.init_diffusion_model(rng, cfg.d, cfg.s_tok, cfg.p_tok, width, schedule)
        for m in C.MODALITIES
    }
    classifier = E.init_classifier_params(
        rng, cfg.d, cfg.s_tok, cfg.p_tok, n_classes=cfg.classes, hidden=cfg.hidden
    )
    return models, classifier


def _trained_globals(cfg: RunConfig):
    """Global models from the train stage, loaded into fresh model shells."""
    tdir = _out(cfg) / "train"
    models, _ = _init_models(cfg)
    for m in C.MODALITIES:
        models[m].params = _load_prefixed(tdir / f"diff_{m}", f"diff.{m}.")
    classifier = _load_prefixed(tdir / "clf", "clf.")
    return models, classifier


def _sample_kwargs(cfg: RunConfig, conditional: bool = True) -> dict:
    return dict(
        imputation=cfg.imputation, sampler=cfg.sampler, sample_steps=cfg.sample_steps,
        guidance_w=cfg.guidance_w, conditional=conditional, clip_scale=cfg.clip_scale,
    )


def _write_csv(path: Path, header: list[str], rows: list[list], cfg: RunConfig) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# {provenance(cfg)}\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _write_json(path: Path, payload: dict, cfg: RunConfig) -> None:
    payload = {"provenance": provenance(cfg), **payload}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(cfg: RunConfig, args) -> None:
    out = _out(cfg)
    out.mkdir(parents=True, exist_ok=True)
    corpus = C.generate_corpus(
        n_conversations=cfg.conversations,
        utterances_per_conv=cfg.utterances,
        n_speakers=cfg.speakers,
        n_classes=cfg.classes,
        modality_dims=cfg.modality_dims(),
        class_separation=cfg.class_separation,
        seed=cfg.seed,
    )
    if cfg.protocol == "random":
        mask = C.apply_random_missing(corpus.conversations, cfg.eta, cfg.seed)
    else:
        patterns = cfg.pattern_list()
        shards = C.partition_clients(corpus, cfg.n_c, cfg.seed)
        bits = {}
        for i, shard in enumerate(shards):
            part = C.apply_fixed_missing(shard.conversations, patterns[i % len(patterns)])
            bits.update(part.bits)
        mask = C.MissingMask(bits)
    path = out / "corpus.jsonl"
    C.save_corpus(corpus, path, mask)
    (out / "corpus.echo.cfg").write_text(config_echo(cfg) + "\n", encoding="utf-8")
    print(f"wrote {path}: {len(corpus.conversations)} conversations, "
          f"{mask.n_samples()} samples, missing rate {C.missing_rate(mask):.3f} "
          f"[{provenance(cfg)}]")


# ---------------------------------------------------------------------------
# pretrain


def cmd_pretrain(cfg: RunConfig, args) -> None:
    corpus, mask = _load_corpus(cfg)
    shards = C.partition_clients(corpus, cfg.n_c, cfg.seed)
    encoder = _encoder(cfg)
    pdir = _out(cfg) / "pretrain"
    pdir.mkdir(parents=True, exist_ok=True)
    for shard in shards:
        cid = shard.client_id
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, cid, 11]))
        dgn = G.init_dgn_params(rng, cfg.d, n_classes=cfg.classes,
                                heads=cfg.heads, hidden=cfg.hidden)
        scn = S.init_scn_params(rng, cfg.d, cfg.s_tok, cfg.p_tok,
                                n_classes=cfg.classes, hidden=cfg.hidden)
        train_convs = shard.split("train")
        cmask = mask.restrict([c.conv_id for c in train_convs])
        history = S.pretrain_joint(
            train_convs, cmask, encoder, dgn, scn,
            window=cfg.window, s_tok=cfg.s_tok, p_tok=cfg.p_tok,
            epochs=cfg.pretrain_epochs, lr=cfg.pretrain_lr, seed=cfg.seed + cid,
        )
        CK.write_checkpoint(_prefixed(dgn, "dgn."), pdir / f"client{cid}_dgn")
        CK.write_checkpoint(_prefixed(scn, "scn."), pdir / f"client{cid}_scn")
        _write_csv(
            pdir / f"client{cid}_losses.csv",
            ["epoch", "L_DGN", "L_SCN", "L"],
            [[h["epoch"], h["dgn_loss"], h["scn_loss"], h["total"]] for h in history],
            cfg,
        )
        tail = history[-1]["total"] if history else float("nan")
        print(f"client {cid}: {len(train_convs)} conversations, "
              f"{cfg.pretrain_epochs} epochs, final loss {tail:.4f}")
    print(f"pretraining checkpoints in {pdir} [{provenance(cfg)}]")


# ---------------------------------------------------------------------------
# train


def _build_clients(cfg, shards, mask, encoder, stacks, models, classifier):
    clients = []
    for shard in shards:
        convs = shard.split("train")
        dgn, scn = stacks[shard.client_id]
        clients.append(F.make_client(
            shard.client_id, convs, mask.restrict([c.conv_id for c in convs]),
            encoder, dgn, scn, models, classifier, cfg.window,
        ))
    return clients


def _val_client(cfg, shards, mask, encoder, stacks, models, classifier):
    """Validation holder over the pooled val split; borrows client 0's stack."""
    convs = [c for shard in shards for c in shard.split("val")]
    if not convs:
        return None
    dgn, scn = stacks[shards[0].client_id]
    cid = max(s.client_id for s in shards) + 1
    return F.make_client(
        cid, convs, mask.restrict([c.conv_id for c in convs]),
        encoder, dgn, scn, models, classifier, cfg.window,
    )


def cmd_train(cfg: RunConfig, args) -> None:
    corpus, mask = _load_corpus(cfg)
    shards = C.partition_clients(corpus, cfg.n_c, cfg.seed)
    encoder = _encoder(cfg)
    stacks = _pretrained(cfg, shards)
    models, classifier = _init_models(cfg)
    clients = _build_clients(cfg, shards, mask, encoder, stacks, models, classifier)
    val_client = _val_client(cfg, shards, mask, encoder, stacks, models, classifier)
    state = F.init_state(models, classifier)
    fedcfg = F.FederationConfig(
        n_clients=cfg.n_c, rounds=cfg.rounds, alternation_interval=cfg.E,
        local_epochs=cfg.local_epochs, participation=cfg.participation,
        strict_alternation=cfg.strict_alternation,
    )
    state, rows = F.run_afs(
        clients, state, fedcfg, seed=cfg.seed, p_drop=cfg.p_drop,
        train_guidance_w=cfg.train_guidance_w, diffusion_lr=cfg.diffusion_lr,
        classifier_lr=cfg.classifier_lr, sampler=cfg.sampler,
        sample_steps=cfg.sample_steps, guidance_w=cfg.guidance_w,
        imputation=cfg.imputation, clip_scale=cfg.clip_scale,
        val_client=val_client, val_every=cfg.val_every, jobs=cfg.jobs,
    )
    tdir = _out(cfg) / "train"
    tdir.mkdir(parents=True, exist_ok=True)
    F.write_round_log(tdir / "rounds.csv", rows, provenance(cfg))
    for m in C.MODALITIES:
        CK.write_checkpoint(_prefixed(state.diffusion[m], f"diff.{m}."), tdir / f"diff_{m}")
    CK.write_checkpoint(_prefixed(state.classifier, "clf."), tdir / "clf")
    sizes = F.module_sizes(state)
    summary = F.comm_summary(rows, sizes) if rows else {}
    _write_json(tdir / "comm.json", {"module_bytes": sizes, "summary": summary}, cfg)
    stages = [F.afs_stage(t, cfg.E, cfg.strict_alternation) for t in range(1, cfg.rounds + 1)]
    print(f"stages: {' '.join(s[0].upper() for s in stages)}")
    if summary:
        print(f"bytes/round/client {summary['afs_bytes_per_round']:.0f} "
              f"vs naive {summary['naive_bytes_per_round']:.0f} "
              f"(ratio {summary['ratio']:.3f})")
    print(f"checkpoints and round log in {tdir} [{provenance(cfg)}]")


# ---------------------------------------------------------------------------
# evaluate


def _pooled_scores(cfg, shards, encoder, stacks, models, classifier, mask_builder,
                   tag: int, conditional: bool = True, collect: dict | None = None):
    """Pool test-split predictions across clients under one missing-data rule.

    ``collect``, when given, receives per-modality original and
    recovered feature matrices plus labels for downstream geometry
    checks (centroids, projections).
    """
    preds_all, labels_all = [], []
    for shard in shards:
        convs = shard.split("test")
        emask = mask_builder(convs)
        dgn, scn = stacks[shard.client_id]
        client = F.make_client(shard.client_id, convs, emask, encoder,
                               dgn, scn, models, classifier, cfg.window)
        rng = np.random.default_rng(np.random.SeedSequence(
            [cfg.seed, 29, shard.client_id, tag]))
        feats, labels = F.client_features(
            client, rng=rng, **_sample_kwargs(cfg, conditional))
        with T.no_grad():
            logits = E.classify(feats, client.classifier, cfg.s_tok, cfg.p_tok)
        preds_all.append(np.argmax(logits.data, axis=1))
        labels_all.append(labels)
        if collect is not None:
            originals = {m: np.concatenate([encoder.encode(c)[m] for c in convs])
                         for m in C.MODALITIES}
            collect.setdefault("recovered", []).append(feats)
            collect.setdefault("original", []).append(originals)
            collect.setdefault("labels", []).append(labels)
    return np.concatenate(preds_all), np.concatenate(labels_all)


def _merge_collected(collect: dict):
    recovered = {m: np.concatenate([f[m] for f in collect["recovered"]])
                 for m in C.MODALITIES}
    original = {m: np.concatenate([f[m] for f in collect["original"]])
                for m in C.MODALITIES}
    labels = np.concatenate(collect["labels"])
    return recovered, original, labels


def cmd_evaluate(cfg: RunConfig, args) -> None:
    scenario = args.scenario
    corpus, _ = _load_corpus(cfg)
    shards = C.partition_clients(corpus, cfg.n_c, cfg.seed)
    encoder = _encoder(cfg)
    stacks = _pretrained(cfg, shards)
    models, classifier = _trained_globals(cfg)
    edir = _out(cfg) / "evaluate"
    edir.mkdir(parents=True, exist_ok=True)
    metric_rows, reports = [], {}

    if scenario == "patterns":
        centroid_rows = []
        for idx, pattern in enumerate(FIXED_PATTERNS):
            label = "+".join(pattern)
            collect: dict = {}
            preds, labels = _pooled_scores(
                cfg, shards, encoder, stacks, models, classifier,
                lambda convs, p=pattern: C.apply_fixed_missing(convs, p),
                tag=idx, collect=collect,
            )
            report = E.eval_report(preds, labels, n_classes=cfg.classes)
            metric_rows.append([label, report.n_samples, report.accuracy, report.waf1])
            reports[label] = json.loads(report.to_json())
            recovered, original, lab = _merge_collected(collect)
            for m in C.MODALITIES:
                if m in pattern:
                    continue
                per_class, mean_err = E.centroid_recovery_error(
                    recovered[m], original[m], lab)
                for cls in sorted(per_class):
                    centroid_rows.append([label, m, cls, per_class[cls]])
                centroid_rows.append([label, m, "mean", mean_err])
            if pattern == ("v", "a"):
                stacked = np.vstack([original["l"], recovered["l"]])
                coords, _, _ = E.pca_2d(stacked)
                half = original["l"].shape[0]
                E.write_projection(edir / "projection_original.csv",
                                   coords[:half], lab, "original", provenance(cfg))
                E.write_projection(edir / "projection_recovered.csv",
                                   coords[half:], lab, "recovered", provenance(cfg))
        _write_csv(edir / "centroids.csv",
                   ["pattern", "modality", "class", "error"], centroid_rows, cfg)
    elif scenario == "eta":
        for idx, eta in enumerate(cfg.eta_grid()):
            label = f"eta={eta:g}"
            preds, labels = _pooled_scores(
                cfg, shards, encoder, stacks, models, classifier,
                lambda convs, e=eta, i=idx: C.apply_random_missing(
                    convs, e, seed=cfg.seed + 1000 * (i + 1)),
                tag=100 + idx,
            )
            report = E.eval_report(preds, labels, n_classes=cfg.classes)
            metric_rows.append([label, report.n_samples, report.accuracy, report.waf1])
            reports[label] = json.loads(report.to_json())
    else:  # full: nothing missing, recovery must reduce to direct classification
        preds, labels = _pooled_scores(
            cfg, shards, encoder, stacks, models, classifier,
            lambda convs: C.MissingMask.full(convs), tag=200,
        )
        direct_preds = []
        for shard in shards:
            convs = shard.split("test")
            feats = {m: np.concatenate([encoder.encode(c)[m] for c in convs])
                     for m in C.MODALITIES}
            with T.no_grad():
                logits = E.classify(feats, classifier, cfg.s_tok, cfg.p_tok)
            direct_preds.append(np.argmax(logits.data, axis=1))
        direct = np.concatenate(direct_preds)
        if not np.array_equal(preds, direct):
            raise RuntimeError("full-modality path diverged from direct classification")
        report = E.eval_report(preds, labels, n_classes=cfg.classes)
        metric_rows.append(["full", report.n_samples, report.accuracy, report.waf1])
        reports["full"] = json.loads(report.to_json())

    _write_csv(edir / f"metrics_{scenario}.csv",
               ["scenario", "n_samples", "accuracy", "waf1"], metric_rows, cfg)
    _write_json(edir / f"report_{scenario}.json",
                {"scenario": scenario, "reports": reports}, cfg)
    for row in metric_rows:
        print(f"{row[0]}: n={row[1]} accuracy={row[2]:.4f} waf1={row[3]:.4f}")
    print(f"evaluation artifacts in {edir} [{provenance(cfg)}]")


# ---------------------------------------------------------------------------
# ablate


def _paired_test(diffs) -> tuple[float, float]:
    """Exact signed-rank test, degrading to (nan, 1.0) on an exact tie."""
    if all(d == 0 for d in diffs):
        return float("nan"), 1.0
    return E.wilcoxon_signed_rank_exact(diffs, alternative="greater")


def _pattern_scores(cfg, shards, encoder, stacks, models, classifier,
                    conditional: bool, tag_base: int):
    scores = {}
    for idx, pattern in enumerate(FIXED_PATTERNS):
        collect: dict = {}
        preds, labels = _pooled_scores(
            cfg, shards, encoder, stacks, models, classifier,
            lambda convs, p=pattern: C.apply_fixed_missing(convs, p),
            tag=tag_base + idx, conditional=conditional, collect=collect,
        )
        recovered, original, lab = _merge_collected(collect)
        errs = []
        for m in C.MODALITIES:
            if m not in pattern:
                _, mean_err = E.centroid_recovery_error(recovered[m], original[m], lab)
                errs.append(mean_err)
        scores["+".join(pattern)] = {
            "waf1": E.waf1(preds, labels, n_classes=cfg.classes),
            "centroid": float(np.mean(errs)),
        }
    return scores


def cmd_ablate(cfg: RunConfig, args) -> None:
    switch = args.switch
    corpus, mask = _load_corpus(cfg)
    shards = C.partition_clients(corpus, cfg.n_c, cfg.seed)
    encoder = _encoder(cfg)
    stacks = _pretrained(cfg, shards)
    adir = _out(cfg) / "ablate"
    adir.mkdir(parents=True, exist_ok=True)

    if switch == "afs":
        arms = {}
        comm = {}
        for arm, runner in (("staged", F.run_afs), ("cotrained", F.run_cotrained)):
            models, classifier = _init_models(cfg)
            clients = _build_clients(cfg, shards, mask, encoder, stacks, models, classifier)
            state = F.init_state(models, classifier)
            fedcfg = F.FederationConfig(
                n_clients=cfg.n_c, rounds=cfg.rounds, alternation_interval=cfg.E,
                local_epochs=cfg.local_epochs, participation=cfg.participation,
                strict_alternation=cfg.strict_alternation,
            )
            kwargs = dict(
                seed=cfg.seed, p_drop=cfg.p_drop, train_guidance_w=cfg.train_guidance_w,
                diffusion_lr=cfg.diffusion_lr, classifier_lr=cfg.classifier_lr,
                sampler=cfg.sampler, sample_steps=cfg.sample_steps,
                guidance_w=cfg.guidance_w, imputation=cfg.imputation,
                clip_scale=cfg.clip_scale, jobs=cfg.jobs,
            )
            state, rows = runner(clients, state, fedcfg, **kwargs)
            comm[arm] = F.comm_summary(rows, F.module_sizes(state)) if rows else {}
            eval_models, eval_classifier = _init_models(cfg)
            for m in C.MODALITIES:
                eval_models[m].params = {k: Tensor(v) for k, v in state.diffusion[m].items()}
            eval_classifier = {k: Tensor(v) for k, v in state.classifier.items()}
            arms[arm] = _pattern_scores(
                cfg, shards, encoder, stacks, eval_models, eval_classifier,
                conditional=True, tag_base=300,
            )
        diffs = [arms["staged"][p]["waf1"] - arms["cotrained"][p]["waf1"]
                 for p in arms["staged"]]
        stat, p_value = _paired_test(diffs)
        rows_out = [[p, arms["staged"][p]["waf1"], arms["cotrained"][p]["waf1"],
                     arms["staged"][p]["waf1"] - arms["cotrained"][p]["waf1"]]
                    for p in arms["staged"]]
        _write_csv(adir / "afs.csv",
                   ["pattern", "staged_waf1", "cotrained_waf1", "delta"], rows_out, cfg)
        _write_json(adir / "afs.json", {
            "switch": "afs",
            "wilcoxon_w": stat, "p_greater": p_value,
            "comm": comm, "scores": arms,
        }, cfg)
        print(f"staged vs cotrained: ratio {comm['staged'].get('ratio', float('nan')):.3f} "
              f"vs {comm['cotrained'].get('ratio', float('nan')):.3f}, "
              f"Wilcoxon W={stat:g} p={p_value:.4f}")
    else:  # conditioning
        models, classifier = _trained_globals(cfg)
        on = _pattern_scores(cfg, shards, encoder, stacks, models, classifier,
                             conditional=True, tag_base=400)
        off = _pattern_scores(cfg, shards, encoder, stacks, models, classifier,
                              conditional=False, tag_base=400)
        diffs = [off[p]["centroid"] - on[p]["centroid"] for p in on]
        stat, p_value = _paired_test(diffs)
        rows_out = [[p, on[p]["waf1"], off[p]["waf1"],
                     on[p]["centroid"], off[p]["centroid"],
                     off[p]["centroid"] - on[p]["centroid"]]
                    for p in on]
        _write_csv(adir / "conditioning.csv",
                   ["pattern", "cond_waf1", "uncond_waf1",
                    "cond_centroid", "uncond_centroid", "centroid_delta"],
                   rows_out, cfg)
        _write_json(adir / "conditioning.json", {
            "switch": "conditioning",
            "wilcoxon_w": stat, "p_greater": p_value,
            "scores": {"conditional": on, "unconditional": off},
        }, cfg)
        mean_delta = float(np.mean(diffs))
        print(f"conditioning on vs off: mean centroid improvement {mean_delta:.4f}, "
              f"Wilcoxon W={stat:g} p={p_value:.4f}")
    print(f"ablation artifacts in {adir} [{provenance(cfg)}]")


# ---------------------------------------------------------------------------
# theory-check


def cmd_theory_check(cfg: RunConfig, args) -> None:
    tdir = _out(cfg) / "theory"
    tdir.mkdir(parents=True, exist_ok=True)

    n_seeds = 20
    worst = 0.0
    all_ok = True
    for s in range(n_seeds):
        pa = V.make_quadratic(8, 0.1, 1.0, seed=cfg.seed + 3 * s)
        pb = V.make_quadratic(6, 0.1, 1.0, seed=cfg.seed + 3 * s + 1)
        values = V.run_alternating_freeze(pa, pb, 1.0, 1.0, 50, seed=cfg.seed + 3 * s + 2)
        ok, ratio = V.check_alternating_rate_bound(values, pa.f_star + pb.f_star, 0.1, 1.0)
        all_ok = all_ok and ok
        worst = max(worst, ratio)
    alternating = {
        "bound": 1.0, "measured": worst, "margin": 1.0 - worst,
        "seeds": n_seeds, "passed": all_ok,
    }

    problem = V.make_quadratic(8, 1.0, 2.0, seed=cfg.seed + 18)
    ok, measured, bound = V.check_fedavg_gap_bound(
        problem, eta=0.5, local_steps=3, clients_sampled=4, rounds=40,
        sigma=0.4, delta_agg=0.05, eps_diff=0.1, n_clients=6,
        n_seeds=30, seed=cfg.seed + 19,
    )
    fedavg = {
        "bound": bound, "measured": measured, "margin": bound - measured,
        "seeds": 30, "passed": ok,
    }

    schedule = D.NoiseSchedule.linear(cfg.timesteps, cfg.beta_start, cfg.beta_end)
    report = V.measure_recovery_error_bound(
        schedule, sample_steps=cfg.sample_steps, n_trials=50, seed=cfg.seed + 27,
    )
    recovery = {
        "levels": report.levels, "medians": report.medians, "bounds": report.bounds,
        "noise_floor": report.noise_floor,
        "margin": min(b - m for lvl, m, b in
                      zip(report.levels, report.medians, report.bounds) if lvl > 0),
        "seeds": 50, "passed": report.passed,
    }

    verdicts = {
        "alternating_descent": alternating,
        "fedavg_gap": fedavg,
        "recovery_error": recovery,
    }
    _write_json(tdir / "verdicts.json", {"verdicts": verdicts}, cfg)
    for name, verdict in verdicts.items():
        status = "PASS" if verdict["passed"] else "FAIL"
        print(f"{name}: {status} (margin {verdict['margin']:.3g})")
    print(f"verdicts in {tdir / 'verdicts.json'} [{provenance(cfg)}]")


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedrecover",
        description="Federated missing-modality recovery experiments on synthetic dialogues.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", metavar="PATH", help="config file (defaults apply if omitted)")
        p.add_argument("--seed", type=int, metavar="U64", help="override the run seed")
        p.add_argument("--out", metavar="DIR", help="override the output directory")
        p.add_argument("--jobs", type=int, metavar="N", help="max concurrent clients")

    common(sub.add_parser("gen-data", help="generate the synthetic corpus"))
    common(sub.add_parser("pretrain", help="fit per-client context and summary stacks"))
    common(sub.add_parser("train", help="run the staged federated loop"))
    p_eval = sub.add_parser("evaluate", help="score the trained global models")
    p_eval.add_argument("scenario", choices=("patterns", "eta", "full"))
    common(p_eval)
    p_abl = sub.add_parser("ablate", help="paired comparison runs")
    p_abl.add_argument("switch", choices=("afs", "conditioning"))
    common(p_abl)
    common(sub.add_parser("theory-check", help="validate the convergence and recovery bounds"))
    return parser


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "theory-check": cmd_theory_check,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(
            args.config, seed_override=args.seed,
            out_override=args.out, jobs_override=args.jobs,
        )
        _COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (RuntimeError, ValueError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
