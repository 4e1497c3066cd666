"""Conditional denoising diffusion over token-shaped modality latents.

The forward process follows the usual variance-preserving discrete
chain with a linear beta schedule. The denoiser is a small stack of
residual token blocks: each applies a token-wise linear map, attends
from the tokens to a linear projection of the condition sequence,
concatenates the attended result back onto the tokens, and fuses with
another linear map. A frozen sinusoidal table with a learned projection
injects the timestep into every token, and a learned null token
sequence stands in for the condition when it is absent or dropped, so
one network serves both the conditional and unconditional branches of
classifier-free guidance.

The condition sequence itself is a single linear map of the
concatenated dialogue-context and semantic-summary features, reshaped
to tokens. Sampling offers the full ancestral chain and the
deterministic skip-step variant; both take the noise prediction as a
plain callable so tests can substitute an analytic predictor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import graphnet as G
from . import semantic as S
from . import tensor as T
from .corpus import MODALITIES, N_MODALITIES
from .tensor import Tensor


@dataclass
class NoiseSchedule:
    """Linear beta schedule with cumulative products, 1-based timesteps."""

    timesteps: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @classmethod
    def linear(cls, timesteps: int, beta_start: float = 1e-4, beta_end: float = 0.02):
        if timesteps < 1:
            raise ValueError("schedule needs at least one step")
        if not 0.0 < beta_start <= beta_end < 1.0:
            raise ValueError("beta range must satisfy 0 < start <= end < 1")
        betas = np.linspace(beta_start, beta_end, timesteps)
        alphas = 1.0 - betas
        return cls(timesteps, betas, alphas, np.cumprod(alphas))

    def beta(self, t: int) -> float:
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        return float(self.alphas[t - 1])

    def alpha_bar(self, t) -> np.ndarray | float:
        """alpha_bar at step t, with the t=0 convention alpha_bar=1."""
        t = np.asarray(t)
        out = np.where(t > 0, self.alpha_bars[np.maximum(t, 1) - 1], 1.0)
        return float(out) if out.ndim == 0 else out

    def beta_tilde(self, t: int) -> float:
        """Posterior variance; zero at t=1 because alpha_bar(0) = 1."""
        return float((1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t)) * self.beta(t))


def q_sample(z0: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Forward diffusion: sqrt(ab_t) z0 + sqrt(1 - ab_t) eps, per-sample t allowed."""
    z0 = np.asarray(z0, dtype=np.float64)
    t_arr = np.asarray(t)
    if np.any(t_arr < 1) or np.any(t_arr > schedule.timesteps):
        raise ValueError("timestep out of range")
    ab = schedule.alpha_bar(t_arr)
    if np.ndim(ab) > 0:
        ab = np.asarray(ab).reshape((-1,) + (1,) * (z0.ndim - 1))
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def sinusoidal_table(timesteps: int, dim: int) -> np.ndarray:
    """Frozen transformer-style time embeddings for t = 0..timesteps."""
    t = np.arange(timesteps + 1)[:, None]
    i = np.arange(dim // 2)[None, :]
    angles = t / np.power(10000.0, 2.0 * i / dim)
    table = np.zeros((timesteps + 1, dim))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return table


def condition_width(d: int, p_tok: int) -> int:
    """Width of the concatenated context and summary features with flags."""
    return (N_MODALITIES * d + N_MODALITIES) + (N_MODALITIES * p_tok + N_MODALITIES)


@dataclass
class DiffusionModel:
    """Noise predictor for one modality plus its training schedule."""

    params: dict[str, Tensor]
    schedule: NoiseSchedule
    d: int
    s_tok: int
    p_tok: int
    cond_width: int
    n_blocks: int
    time_dim: int
    time_table: np.ndarray


def init_diffusion_model(
    rng: np.random.Generator,
    d: int,
    s_tok: int,
    p_tok: int,
    cond_width: int,
    schedule: NoiseSchedule,
    n_blocks: int = 3,
    time_dim: int = 16,
) -> DiffusionModel:
    from . import attention as A

    S.check_token_geometry(d, s_tok, p_tok)
    p = p_tok
    params: dict[str, Tensor] = {
        "cond.W": Tensor(A.linear_init(rng, cond_width, d)),
        "cond.b": Tensor(np.zeros(d)),
        "time.W": Tensor(A.linear_init(rng, time_dim, p)),
        "time.b": Tensor(np.zeros(p)),
        "null": Tensor(rng.normal(0.0, 1.0, size=(s_tok, p))),
        "out.W": Tensor(A.linear_init(rng, p, p)),
        "out.b": Tensor(np.zeros(p)),
    }
    for k in range(n_blocks):
        params[f"blk{k}.lin.W"] = Tensor(A.linear_init(rng, p, p))
        params[f"blk{k}.lin.b"] = Tensor(np.zeros(p))
        params[f"blk{k}.cproj.W"] = Tensor(A.linear_init(rng, p, p))
        params[f"blk{k}.attn.Wq"] = Tensor(A.linear_init(rng, p, p))
        params[f"blk{k}.attn.Wk"] = Tensor(A.linear_init(rng, p, p))
        params[f"blk{k}.attn.Wv"] = Tensor(A.linear_init(rng, p, p))
        # fuse starts at zero so every block opens as the identity;
        # otherwise the sampler amplifies the initial residual junk
        params[f"blk{k}.fuse.W"] = Tensor(np.zeros((2 * p, p)))
        params[f"blk{k}.fuse.b"] = Tensor(np.zeros(p))
    return DiffusionModel(
        params=params,
        schedule=schedule,
        d=d,
        s_tok=s_tok,
        p_tok=p_tok,
        cond_width=cond_width,
        n_blocks=n_blocks,
        time_dim=time_dim,
        time_table=sinusoidal_table(schedule.timesteps, time_dim),
    )


def build_condition(model: DiffusionModel, cond_inputs) -> Tensor:
    """Linear map of the fixed-width conditioning features, reshaped to tokens."""
    x = T.as_tensor(cond_inputs)
    if x.ndim != 2 or x.shape[1] != model.cond_width:
        raise ValueError(
            f"conditioning input width {x.shape} does not match {model.cond_width}"
        )
    n = x.shape[0]
    flat = T.add(T.matmul(x, model.params["cond.W"]), model.params["cond.b"])
    return T.reshape(flat, (n, model.s_tok, model.p_tok))


def _null_tokens(model: DiffusionModel, n: int) -> Tensor:
    null = T.reshape(model.params["null"], (1, model.s_tok, model.p_tok))
    return T.broadcast_to(null, (n, model.s_tok, model.p_tok))


def predict_noise(model: DiffusionModel, z_t, t, cond: Tensor | None) -> Tensor:
    """Denoiser forward pass; ``cond=None`` selects the learned null tokens."""
    x = T.as_tensor(z_t)
    n, s, p = x.shape
    if (s, p) != (model.s_tok, model.p_tok):
        raise ValueError(f"latent tokens {x.shape} do not match model geometry")
    t_arr = np.broadcast_to(np.asarray(t, dtype=np.int64), (n,))
    if t_arr.min() < 1 or t_arr.max() > model.schedule.timesteps:
        raise ValueError("timestep out of range")
    if cond is None:
        cond = _null_tokens(model, n)
    emb = Tensor(model.time_table[t_arr])  # frozen lookup
    temb = T.add(T.matmul(emb, model.params["time.W"]), model.params["time.b"])
    temb = T.broadcast_to(T.reshape(temb, (n, 1, p)), (n, s, p))
    feats = T.add(x, temb)
    scale = 1.0 / math.sqrt(p)
    for k in range(model.n_blocks):
        pre = f"blk{k}"
        g = T.relu(T.add(T.matmul(feats, model.params[f"{pre}.lin.W"]), model.params[f"{pre}.lin.b"]))
        c = T.matmul(cond, model.params[f"{pre}.cproj.W"])
        q = T.matmul(g, model.params[f"{pre}.attn.Wq"])
        key = T.matmul(c, model.params[f"{pre}.attn.Wk"])
        v = T.matmul(c, model.params[f"{pre}.attn.Wv"])
        att = T.matmul(T.softmax_rows(T.scale(T.matmul(q, T.transpose_last(key)), scale)), v)
        fused = T.add(
            T.matmul(T.concat_last([g, att]), model.params[f"{pre}.fuse.W"]),
            model.params[f"{pre}.fuse.b"],
        )
        feats = T.add(feats, fused)
    return T.add(T.matmul(feats, model.params["out.W"]), model.params["out.b"])


def guided_noise(model: DiffusionModel, z_t, t, cond: Tensor | None, w: float) -> Tensor:
    """Classifier-free combination (1 + w) * conditional - w * unconditional.

    With ``cond=None`` both branches are the null branch, so the result
    is the plain unconditional prediction for every w.
    """
    cond_branch = predict_noise(model, z_t, t, cond)
    if w == 0.0 or cond is None:
        return cond_branch
    uncond = predict_noise(model, z_t, t, None)
    return T.sub(T.scale(cond_branch, 1.0 + w), T.scale(uncond, w))


def diffusion_train_step(
    model: DiffusionModel,
    z0: np.ndarray,
    cond_inputs: np.ndarray | None,
    *,
    p_drop: float,
    rng: np.random.Generator,
    train_guidance_w: float = 0.0,
) -> float:
    """One noise-matching step; leaves gradients on the model parameters.

    Draws per-sample timesteps and noise, replaces the condition by the
    null tokens with probability ``p_drop`` per sample, and scores
    ``mean over samples of ||eps - eps_hat||^2``. A non-zero
    ``train_guidance_w`` instead scores the guidance-weighted
    combination, the objective exactly as printed rather than the
    standard dropout surrogate.
    """
    n = z0.shape[0]
    sched = model.schedule
    t = rng.integers(1, sched.timesteps + 1, size=n)
    eps = rng.normal(size=z0.shape)
    z_t = q_sample(z0, t, eps, sched)
    if cond_inputs is None:
        blended = None
    else:
        cond = build_condition(model, cond_inputs)
        keep = (rng.random(n) >= p_drop).astype(np.float64).reshape(n, 1, 1)
        kept = T.mul(cond, T.broadcast_to(Tensor(keep), cond.shape))
        dropped = T.mul(_null_tokens(model, n), T.broadcast_to(Tensor(1.0 - keep), cond.shape))
        blended = T.add(kept, dropped)
    if train_guidance_w == 0.0:
        eps_hat = predict_noise(model, z_t, t, blended)
    else:
        w = train_guidance_w
        eps_hat = T.sub(
            T.scale(predict_noise(model, z_t, t, blended), 1.0 + w),
            T.scale(predict_noise(model, z_t, t, None), w),
        )
    res = T.sub(eps_hat, Tensor(eps))
    loss = T.scale(T.sum_all(T.mul(res, res)), 1.0 / n)
    if not np.isfinite(loss.data):
        raise RuntimeError("diffusion training loss is not finite")
    T.backward(loss)
    return float(loss.data)


# ---------------------------------------------------------------------------
# sampling


def _clip_eps(z_t: np.ndarray, t: int, eps_hat: np.ndarray, schedule: NoiseSchedule, clip_z0):
    """Project eps_hat so the implied clean sample stays inside the clip box.

    An imperfect predictor leaves a small uncancelled multiple of z_t in
    each reverse step; over the whole chain that multiple is amplified
    by 1/sqrt(alpha_bar_T) and can blow up the trajectory. Bounding the
    implied z0 estimate (the usual clip-denoised safeguard) removes the
    runaway and is the identity whenever the estimate already lies in
    the box, so exact-predictor behaviour is unchanged.
    """
    ab = schedule.alpha_bar(t)
    z0_hat = (z_t - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)
    clipped = np.clip(z0_hat, -clip_z0, clip_z0)
    return (z_t - math.sqrt(ab) * clipped) / math.sqrt(1.0 - ab)


def ddpm_step(z_t: np.ndarray, t: int, eps_hat: np.ndarray, schedule: NoiseSchedule, noise,
              clip_z0: float | None = None):
    """One ancestral step; ``noise`` is ignored at t=1 (deterministic)."""
    if clip_z0 is not None:
        eps_hat = _clip_eps(z_t, t, eps_hat, schedule, clip_z0)
    a = schedule.alpha(t)
    ab = schedule.alpha_bar(t)
    mean = (z_t - (1.0 - a) / math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(a)
    if t == 1:
        return mean
    return mean + math.sqrt(schedule.beta_tilde(t)) * noise


def ddim_step(z_t: np.ndarray, t: int, t_prev: int, eps_hat: np.ndarray, schedule: NoiseSchedule,
              clip_z0: float | None = None):
    """Deterministic skip step from t down to t_prev (t_prev=0 returns z0_hat)."""
    if clip_z0 is not None:
        eps_hat = _clip_eps(z_t, t, eps_hat, schedule, clip_z0)
    ab_t = schedule.alpha_bar(t)
    ab_prev = schedule.alpha_bar(t_prev)
    z0_hat = (z_t - math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(ab_t)
    return math.sqrt(ab_prev) * z0_hat + math.sqrt(1.0 - ab_prev) * eps_hat


def ddim_time_pairs(schedule: NoiseSchedule, steps: int) -> list[tuple[int, int]]:
    """Uniformly strided (t, t_prev) pairs covering timesteps down to 0."""
    if not 1 <= steps <= schedule.timesteps:
        raise ValueError("sample steps must lie in [1, timesteps]")
    taus = np.unique(np.linspace(schedule.timesteps, 1, steps).round().astype(int))[::-1]
    return [(int(t), int(taus[i + 1]) if i + 1 < len(taus) else 0) for i, t in enumerate(taus)]


def ddpm_sample(predict_fn, shape, schedule: NoiseSchedule, rng: np.random.Generator,
                clip_z0: float | None = None):
    z = rng.normal(size=shape)
    for t in range(schedule.timesteps, 0, -1):
        noise = rng.normal(size=shape) if t > 1 else None
        z = ddpm_step(z, t, predict_fn(z, t), schedule, noise, clip_z0)
    return z


def ddim_sample(predict_fn, shape, schedule: NoiseSchedule, steps: int, rng: np.random.Generator,
                clip_z0: float | None = None):
    z = rng.normal(size=shape)
    for t, t_prev in ddim_time_pairs(schedule, steps):
        z = ddim_step(z, t, t_prev, predict_fn(z, t), schedule, clip_z0)
    return z


def analytic_predictor(z0_star: np.ndarray, schedule: NoiseSchedule):
    """Exact noise predictor when the data distribution is a single point."""

    def predict(z_t, t):
        ab = schedule.alpha_bar(t)
        return (z_t - math.sqrt(ab) * z0_star) / math.sqrt(1.0 - ab)

    return predict


def cumulative_error_gain(schedule: NoiseSchedule, pairs) -> float:
    """Sum over sampling steps of (1 - a_eff) / (sqrt(a_eff) sqrt(1 - ab_t)).

    ``a_eff`` is the effective per-step alpha ab_t / ab_prev of the
    (possibly strided) reverse trajectory, so the sum upper-bounds the
    accumulated amplification of a predictor error along the chain.
    """
    total = 0.0
    for t, t_prev in pairs:
        ab_t = schedule.alpha_bar(t)
        a_eff = ab_t / schedule.alpha_bar(t_prev)
        total += (1.0 - a_eff) / (math.sqrt(a_eff) * math.sqrt(1.0 - ab_t))
    return total


# ---------------------------------------------------------------------------
# recovery


def recover_modality(
    conversations,
    mask,
    encoder: G.FrozenEncoder,
    dgn_params: dict,
    scn_params: dict,
    models: dict[str, DiffusionModel],
    *,
    window: int,
    s_tok: int,
    p_tok: int,
    sampler: str = "ddim",
    sample_steps: int = 50,
    guidance_w: float = 1.0,
    rng: np.random.Generator,
    conditional: bool = True,
    clip_scale: float | None = 1.5,
) -> dict[int, dict[str, np.ndarray]]:
    """Fill every masked slot with a sampled latent; returns complete latents.

    Available slots pass through as the true encoder latents. The
    condition for a missing modality is built from the sample's
    available modalities through the frozen context and summary
    networks; ``conditional=False`` samples from the null branch
    instead. A conversation with nothing missing is returned untouched.

    ``clip_scale`` bounds the sampler's implied clean estimates at that
    multiple of the largest observed latent coordinate; ``None`` runs
    the unclipped updates.
    """
    if sampler not in ("ddpm", "ddim"):
        raise ValueError(f"unknown sampler {sampler!r}")
    clip = None
    if clip_scale is not None:
        biggest = 0.0
        for conv in conversations:
            rows = mask.rows(conv.conv_id)
            latents = encoder.encode(conv)
            for k, m in enumerate(MODALITIES):
                if rows[:, k].any():
                    biggest = max(biggest, float(np.abs(latents[m][rows[:, k]]).max()))
        clip = clip_scale * biggest if biggest > 0 else None
    out: dict[int, dict[str, np.ndarray]] = {}
    for conv in conversations:
        rows = mask.rows(conv.conv_id)
        latents = encoder.encode(conv)
        complete = {m: latents[m].copy() for m in MODALITIES}
        if rows.all():
            out[conv.conv_id] = complete
            continue
        with T.no_grad():
            graph = G.build_dialogue_graph(conv.speakers, window)
            z_d, _ = G.dgn_forward(latents, rows, graph, dgn_params)
            z_s, _, _ = S.scn_forward(latents, rows, scn_params, s_tok, p_tok)
            cond_full = np.concatenate([z_d.data, z_s.data], axis=1)
        for k, m in enumerate(MODALITIES):
            missing = np.flatnonzero(~rows[:, k])
            if missing.size == 0:
                continue
            model = models[m]
            with T.no_grad():
                cond = build_condition(model, cond_full[missing]) if conditional else None

                def predict(z, t, model=model, cond=cond):
                    return guided_noise(model, z, t, cond, guidance_w).data

                shape = (missing.size, s_tok, p_tok)
                if sampler == "ddpm":
                    z = ddpm_sample(predict, shape, model.schedule, rng, clip)
                else:
                    z = ddim_sample(predict, shape, model.schedule, sample_steps, rng, clip)
            complete[m][missing] = z.reshape(missing.size, model.d)
        out[conv.conv_id] = complete
    return out
