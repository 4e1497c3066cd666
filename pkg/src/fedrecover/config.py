"""Run configuration: sectioned key-value files with strict key checking.

A config file fully determines a run. Unknown sections or keys are hard
errors rather than warnings, because a silently ignored typo is the
usual way a "reproduction" stops reproducing anything. Every value has
a default, so an empty file is a valid (full-size) configuration.

The config hash covers every value that can change results, including
the seed; the output directory and the worker count are excluded, since
moving a run or changing parallelism must not change its outputs.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, fields

from .corpus import MODALITIES
from .semantic import check_token_geometry


class ConfigError(ValueError):
    """Malformed, unknown, or out-of-range configuration input."""


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# section -> key -> (converter, default)
SCHEMA = {
    "corpus": {
        "conversations": (int, 12),
        "utterances": (int, 8),
        "speakers": (int, 2),
        "classes": (int, 6),
        "class_separation": (float, 3.0),
        "dim_l": (int, 24),
        "dim_v": (int, 20),
        "dim_a": (int, 16),
        "protocol": (str, "fixed"),
        "eta": (float, 0.4),
        "patterns": (str, "l+v,l+a,v+a"),
    },
    "model": {
        "d": (int, 64),
        "s_tok": (int, 4),
        "p_tok": (int, 16),
        "window": (int, 2),
        "hidden": (int, 64),
        "heads": (int, 2),
        "pretrain_epochs": (int, 20),
        "pretrain_lr": (float, 1e-2),
    },
    "sampler": {
        "sampler": (str, "ddim"),
        "timesteps": (int, 1000),
        "sample_steps": (int, 50),
        "guidance_w": (float, 2.0),
        "p_drop": (float, 0.1),
        "beta_start": (float, 1e-4),
        "beta_end": (float, 0.02),
        "train_guidance_w": (float, 0.0),
        "clip_scale": (float, 1.5),
    },
    "federation": {
        "n_c": (int, 3),
        "rounds": (int, 9),
        "E": (int, 3),
        "local_epochs": (int, 1),
        "participation": (str, "all"),
        "strict_alternation": (_bool, False),
        "imputation": (str, "diffusion"),
        "diffusion_lr": (float, 1e-3),
        "classifier_lr": (float, 1e-3),
    },
    "run": {
        "seed": (int, 0),
        "out": (str, "runs/out"),
        "jobs": (int, 1),
        "val_every": (int, 0),
        "eval_eta_grid": (str, "0.2,0.4,0.6"),
    },
}

# resolved values that must not influence the config hash
_UNHASHED = {("run", "out"), ("run", "jobs")}


@dataclass
class RunConfig:
    """Flat resolved view of one configuration, plus its hash."""

    # corpus
    conversations: int
    utterances: int
    speakers: int
    classes: int
    class_separation: float
    dim_l: int
    dim_v: int
    dim_a: int
    protocol: str
    eta: float
    patterns: str
    # model
    d: int
    s_tok: int
    p_tok: int
    window: int
    hidden: int
    heads: int
    pretrain_epochs: int
    pretrain_lr: float
    # sampler
    sampler: str
    timesteps: int
    sample_steps: int
    guidance_w: float
    p_drop: float
    beta_start: float
    beta_end: float
    train_guidance_w: float
    clip_scale: float
    # federation
    n_c: int
    rounds: int
    E: int
    local_epochs: int
    participation: str
    strict_alternation: bool
    imputation: str
    diffusion_lr: float
    classifier_lr: float
    # run
    seed: int
    out: str
    jobs: int
    val_every: int
    eval_eta_grid: str
    config_hash: str = ""

    def modality_dims(self) -> dict[str, int]:
        return {"l": self.dim_l, "v": self.dim_v, "a": self.dim_a}

    def pattern_list(self) -> list[tuple[str, ...]]:
        """Per-client availability patterns, parsed from e.g. 'l+v,l+a,v+a'."""
        out = []
        for chunk in self.patterns.split(","):
            mods = tuple(p.strip() for p in chunk.split("+"))
            if not mods or any(m not in MODALITIES for m in mods) or len(set(mods)) != len(mods):
                raise ConfigError(f"bad availability pattern {chunk!r}")
            out.append(mods)
        return out

    def eta_grid(self) -> list[float]:
        try:
            return [float(x) for x in self.eval_eta_grid.split(",") if x.strip()]
        except ValueError as exc:
            raise ConfigError(f"bad eta grid {self.eval_eta_grid!r}") from exc


def _validate(cfg: RunConfig) -> None:
    checks = [
        (cfg.conversations >= cfg.n_c, "need at least one conversation per client"),
        (cfg.utterances >= 1, "utterances must be positive"),
        (cfg.speakers >= 1, "speakers must be positive"),
        (cfg.classes >= 2, "need at least two classes"),
        (min(cfg.dim_l, cfg.dim_v, cfg.dim_a) >= 1, "modality dims must be positive"),
        (cfg.protocol in ("fixed", "random"), f"unknown protocol {cfg.protocol!r}"),
        (0.0 <= cfg.eta <= 2.0 / 3.0, "missing rate must lie in [0, 2/3]"),
        (cfg.sampler in ("ddpm", "ddim"), f"unknown sampler {cfg.sampler!r}"),
        (cfg.timesteps >= 1, "timesteps must be positive"),
        (1 <= cfg.sample_steps <= cfg.timesteps, "sample steps must lie in [1, timesteps]"),
        (0.0 < cfg.beta_start <= cfg.beta_end < 1.0, "noise range must satisfy 0 < start <= end < 1"),
        (0.0 <= cfg.p_drop <= 1.0, "condition dropout must lie in [0, 1]"),
        (cfg.clip_scale > 0.0, "clip scale must be positive"),
        (cfg.n_c >= 1, "need at least one client"),
        (cfg.rounds >= 0, "rounds must be nonnegative"),
        (cfg.E >= 2, "alternation interval must be at least 2"),
        (cfg.local_epochs >= 1, "local epochs must be at least 1"),
        (cfg.imputation in ("diffusion", "zero"), f"unknown imputation {cfg.imputation!r}"),
        (cfg.pretrain_epochs >= 0, "pretraining epochs must be nonnegative"),
        (cfg.jobs >= 1, "jobs must be at least 1"),
        (cfg.val_every >= 0, "val_every must be nonnegative"),
        (cfg.seed >= 0, "seed must be nonnegative"),
    ]
    for ok, message in checks:
        if not ok:
            raise ConfigError(message)
    try:
        check_token_geometry(cfg.d, cfg.s_tok, cfg.p_tok)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.participation != "all":
        try:
            k = int(cfg.participation)
        except ValueError:
            raise ConfigError(f"participation must be 'all' or an integer, got {cfg.participation!r}")
        if not 1 <= k <= cfg.n_c:
            raise ConfigError("participation subset must lie in [1, n_c]")
    cfg.pattern_list()
    for eta in cfg.eta_grid():
        if not 0.0 <= eta <= 2.0 / 3.0:
            raise ConfigError(f"eta grid value {eta} outside [0, 2/3]")


def _hash(values: dict[tuple[str, str], object]) -> str:
    lines = [
        f"{section}.{key}={values[(section, key)]!r}"
        for section, keys in sorted(SCHEMA.items())
        for key in sorted(keys)
        if (section, key) not in _UNHASHED
    ]
    return hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()[:12]


def load_config(
    path: str | None = None,
    *,
    seed_override: int | None = None,
    out_override: str | None = None,
    jobs_override: int | None = None,
) -> RunConfig:
    """Resolve a config file (or pure defaults) into a validated RunConfig."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keys are case-sensitive
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    values: dict[tuple[str, str], object] = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            convert, _ = SCHEMA[section][key]
            try:
                values[(section, key)] = convert(raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {section}.{key}: {raw!r} ({exc})") from exc
    for section, keys in SCHEMA.items():
        for key, (_, default) in keys.items():
            values.setdefault((section, key), default)
    if seed_override is not None:
        values[("run", "seed")] = int(seed_override)
    if out_override is not None:
        values[("run", "out")] = str(out_override)
    if jobs_override is not None:
        values[("run", "jobs")] = int(jobs_override)
    flat = {key: values[(section, key)] for section, keys in SCHEMA.items() for key in keys}
    cfg = RunConfig(**flat, config_hash=_hash(values))
    _validate(cfg)
    return cfg


def config_echo(cfg: RunConfig) -> str:
    """Render the resolved configuration back as a sectioned file."""
    lines = [f"# config {cfg.config_hash} seed {cfg.seed}"]
    for section, keys in SCHEMA.items():
        lines.append(f"[{section}]")
        for key in keys:
            lines.append(f"{key} = {getattr(cfg, key)}")
        lines.append("")
    return "\n".join(lines)


def provenance(cfg: RunConfig) -> str:
    """The one-line stamp embedded in every output artifact."""
    return f"config {cfg.config_hash} seed {cfg.seed}"


__all__ = [
    "ConfigError",
    "RunConfig",
    "SCHEMA",
    "config_echo",
    "load_config",
    "provenance",
]

# keep the dataclass and schema in lockstep
assert {f.name for f in fields(RunConfig)} - {"config_hash"} == {
    key for keys in SCHEMA.values() for key in keys
}
