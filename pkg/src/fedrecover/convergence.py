"""Empirical harness for the protocol's convergence and recovery bounds.

The guarantees under test assume smooth, gradient-dominated losses with
bounded gradient noise, bounded aggregation drift, and bounded noise-
predictor error. Those hypotheses are unverifiable for the actual
networks, so this module builds quadratic instances where they hold by
construction, runs the corresponding training loops with the noise
sources injected explicitly, and compares measured optimality gaps
against the printed right-hand sides. Negative controls (oversized
steps, noise beyond the stated variance) must make the checks fail.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffusion as D


@dataclass
class QuadraticProblem:
    """Strongly convex quadratic with eigenvalues spanning [mu, smooth]."""

    dim: int
    hessian: np.ndarray
    theta_star: np.ndarray
    f_star: float
    mu: float
    smooth: float

    def value(self, theta: np.ndarray) -> float:
        u = theta - self.theta_star
        return 0.5 * float(u @ self.hessian @ u) + self.f_star

    def grad(self, theta: np.ndarray) -> np.ndarray:
        return self.hessian @ (theta - self.theta_star)

    def gap(self, theta: np.ndarray) -> float:
        return self.value(theta) - self.f_star


@dataclass
class BoundConstants:
    """Named constants entering the printed bounds, validated nonnegative."""

    eps_diff: float = 0.0
    lip_dgn: float = 0.0
    lip_scn: float = 0.0
    delta_agg: float = 0.0
    sigma_sq: float = 0.0
    c_cum: float = 0.0
    noise_floor: float = 0.0
    lip_total: float = field(init=False)

    def __post_init__(self):
        for name in ("eps_diff", "lip_dgn", "lip_scn", "delta_agg",
                     "sigma_sq", "c_cum", "noise_floor"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        self.lip_total = self.lip_dgn + self.lip_scn


def make_quadratic(dim: int, mu: float, smooth: float, seed: int,
                   f_star: float = 0.0) -> QuadraticProblem:
    """Random quadratic whose spectrum includes both endpoints of [mu, smooth]."""
    if not 0 < mu <= smooth:
        raise ValueError("need 0 < mu <= smooth")
    if dim < 1 or (dim == 1 and mu != smooth):
        raise ValueError("dim 1 cannot carry two distinct eigenvalues")
    rng = np.random.default_rng(seed)
    if dim == 1:
        eigs = np.array([mu])
    else:
        eigs = np.concatenate([[mu, smooth], rng.uniform(mu, smooth, size=dim - 2)])
    q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    hessian = q @ np.diag(eigs) @ q.T
    hessian = 0.5 * (hessian + hessian.T)  # exact symmetry
    return QuadraticProblem(
        dim=dim,
        hessian=hessian,
        theta_star=rng.normal(size=dim),
        f_star=f_star,
        mu=mu,
        smooth=smooth,
    )


# ---------------------------------------------------------------------------
# alternating freeze


def run_alternating_freeze(
    prob_a: QuadraticProblem,
    prob_b: QuadraticProblem | None,
    eta_a: float,
    eta_b: float,
    alternations: int,
    *,
    theta0: np.ndarray | None = None,
    phi0: np.ndarray | None = None,
    seed: int = 0,
    check_step: bool = True,
) -> np.ndarray:
    """Joint objective values after each freeze-one-train-other alternation.

    Each alternation first descends the A-block with the B-block frozen,
    then the B-block with the A-block frozen. ``prob_b=None`` drops the
    second block entirely, reducing to plain gradient descent on A.
    Returns the length ``alternations + 1`` array of joint values
    (element 0 is the start). ``check_step=False`` lets tests bypass the
    step-size precondition to demonstrate divergence.
    """
    if check_step:
        if eta_a > 1.0 / prob_a.smooth + 1e-12:
            raise ValueError("eta_a exceeds 1/smoothness")
        if prob_b is not None and eta_b > 1.0 / prob_b.smooth + 1e-12:
            raise ValueError("eta_b exceeds 1/smoothness")
    rng = np.random.default_rng(seed)
    theta = rng.normal(size=prob_a.dim) if theta0 is None else np.asarray(theta0, dtype=np.float64).copy()
    phi = None
    if prob_b is not None:
        phi = rng.normal(size=prob_b.dim) if phi0 is None else np.asarray(phi0, dtype=np.float64).copy()

    def joint():
        total = prob_a.value(theta)
        return total + (prob_b.value(phi) if prob_b is not None else 0.0)

    values = [joint()]
    for _ in range(alternations):
        theta = theta - eta_a * prob_a.grad(theta)
        if prob_b is not None:
            phi = phi - eta_b * prob_b.grad(phi)
        values.append(joint())
    return np.array(values)


def check_alternating_rate_bound(
    values: np.ndarray, q_star: float, mu: float, smooth: float
) -> tuple[bool, float]:
    """Gap at alternation R must be <= (1 - mu/smooth)^R times the start gap.

    Returns (all indices pass, worst measured/bound ratio). A zero bound
    (mu = smooth) demands a gap below 1e-12.
    """
    gaps = np.asarray(values, dtype=np.float64) - q_star
    rate = 1.0 - mu / smooth
    worst = 0.0
    ok = True
    for r in range(1, gaps.size):
        bound = rate**r * gaps[0]
        if bound <= 0.0:
            if gaps[r] > 1e-12:
                ok = False
                worst = math.inf
            continue
        ratio = gaps[r] / bound
        worst = max(worst, ratio)
        if gaps[r] > bound * (1 + 1e-9):
            ok = False
    return ok, worst


# ---------------------------------------------------------------------------
# federated averaging surrogate


def run_fedavg_quadratic(
    problem: QuadraticProblem,
    *,
    eta: float,
    local_steps: int,
    clients_sampled: int,
    n_clients: int,
    rounds: int,
    sigma: float,
    delta_agg: float,
    theta0: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    """One trajectory of noisy federated averaging on a shared quadratic.

    Every client holds the same problem; heterogeneity enters only as
    the post-aggregation perturbation of norm ``delta_agg``. Per-step
    gradient noise is Gaussian with total variance ``sigma**2``.
    """
    theta = theta0.copy()
    dim = problem.dim
    scale = sigma / math.sqrt(dim)
    for _ in range(rounds):
        chosen = rng.choice(n_clients, size=clients_sampled, replace=False)
        locals_ = []
        for _client in chosen:
            local = theta.copy()
            for _ in range(local_steps):
                noise = rng.normal(0.0, scale, size=dim) if sigma > 0 else 0.0
                local = local - eta * (problem.grad(local) + noise)
            locals_.append(local)
        theta = np.mean(locals_, axis=0)
        if delta_agg > 0:
            direction = rng.normal(size=dim)
            theta = theta + delta_agg * direction / np.linalg.norm(direction)
    return theta


def check_fedavg_gap_bound(
    problem: QuadraticProblem,
    *,
    eta: float,
    local_steps: int,
    clients_sampled: int,
    rounds: int,
    sigma: float,
    delta_agg: float,
    eps_diff: float,
    n_clients: int | None = None,
    n_seeds: int = 30,
    seed: int = 0,
    init_radius: float = 1.0,
    inject_sigma: float | None = None,
    inject_delta: float | None = None,
) -> tuple[bool, float, float]:
    """Mean final optimality gap versus the printed four-term ceiling.

    The ceiling is smooth * r0^2 / (2 eta T) + eta E sigma^2 / (K mu)
    + smooth * delta_agg^2 + eps_diff^2 / mu, with r0 the start radius,
    T rounds, E local steps and K sampled clients. The irreducible
    recovery residual eps_diff^2 / mu is added to both sides, standing
    in for the error a frozen imperfect recovery model leaves behind.
    ``inject_sigma``/``inject_delta`` let negative controls run with
    more noise than the ceiling assumes. Returns (holds, measured, bound).
    """
    if eta > 1.0 / problem.smooth + 1e-12:
        raise ValueError("eta exceeds 1/smoothness")
    if n_clients is None:
        n_clients = clients_sampled
    run_sigma = sigma if inject_sigma is None else inject_sigma
    run_delta = delta_agg if inject_delta is None else inject_delta
    gaps = []
    master = np.random.SeedSequence(seed)
    for child in master.spawn(n_seeds):
        rng = np.random.default_rng(child)
        direction = rng.normal(size=problem.dim)
        theta0 = problem.theta_star + init_radius * direction / np.linalg.norm(direction)
        final = run_fedavg_quadratic(
            problem,
            eta=eta,
            local_steps=local_steps,
            clients_sampled=clients_sampled,
            n_clients=n_clients,
            rounds=rounds,
            sigma=run_sigma,
            delta_agg=run_delta,
            theta0=theta0,
            rng=rng,
        )
        gaps.append(problem.gap(final))
    residual = eps_diff**2 / problem.mu
    measured = float(np.mean(gaps)) + residual
    bound = (
        problem.smooth * init_radius**2 / (2.0 * eta * rounds)
        + eta * local_steps * sigma**2 / (clients_sampled * problem.mu)
        + problem.smooth * delta_agg**2
        + residual
    )
    return measured <= bound, measured, bound


# ---------------------------------------------------------------------------
# recovery error ceiling


@dataclass
class RecoveryBoundReport:
    levels: list[float]
    medians: list[float]
    bounds: list[float]
    noise_floor: float
    zero_error_ok: bool
    monotone_ok: bool
    ceiling_ok: bool

    @property
    def passed(self) -> bool:
        return self.zero_error_ok and self.monotone_ok and self.ceiling_ok


def measure_recovery_error_bound(
    schedule: D.NoiseSchedule,
    *,
    shape: tuple[int, ...] = (1, 2, 4),
    sample_steps: int = 50,
    eps_levels=(0.05, 0.1, 0.2),
    n_trials: int = 50,
    lip_total: float = 1.0,
    seed: int = 0,
) -> RecoveryBoundReport:
    """Recovery error versus injected predictor error, against the ceiling.

    Each trial fixes a clean target and corrupts the analytic noise
    predictor by a persistent random direction of magnitude eps. Trials
    share seeds across levels, so the median error must rise with eps
    and stay below c_cum * lip_total * eps plus the measured zero-noise
    floor, where c_cum sums the per-step amplification coefficients of
    the strided reverse chain.
    """
    pairs = D.ddim_time_pairs(schedule, sample_steps)
    c_cum = D.cumulative_error_gain(schedule, pairs)
    master = np.random.SeedSequence(seed)
    trial_seeds = master.spawn(n_trials)
    levels = [0.0] + sorted(eps_levels)
    medians = []
    for eps in levels:
        errors = []
        for child in trial_seeds:
            rng = np.random.default_rng(child)
            target = rng.normal(size=shape)
            direction = rng.normal(size=shape)
            direction /= np.linalg.norm(direction)
            exact = D.analytic_predictor(target, schedule)

            def corrupted(z, t):
                return exact(z, t) + eps * direction

            out = D.ddim_sample(corrupted, shape, schedule, sample_steps, rng)
            errors.append(float(np.linalg.norm(out - target)))
        medians.append(float(np.median(errors)))
    noise_floor = medians[0]
    zero_ok = noise_floor <= 1e-3
    monotone_ok = all(a <= b + 1e-12 for a, b in zip(medians, medians[1:]))
    bounds = [c_cum * lip_total * eps + noise_floor for eps in levels]
    ceiling_ok = all(m <= b + 1e-9 for m, b in zip(medians, bounds))
    return RecoveryBoundReport(
        levels=levels,
        medians=medians,
        bounds=bounds,
        noise_floor=noise_floor,
        zero_error_ok=zero_ok,
        monotone_ok=monotone_ok,
        ceiling_ok=ceiling_ok,
    )
