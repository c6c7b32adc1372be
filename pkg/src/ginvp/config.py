"""Run configuration: defaults, flat ``key = value`` files, environment and flags."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .analytics import ForestConfig
from .gin import MAX_LATENT_DIM, GanConfig, InverseConfig
from .vpgen import GenerationTarget

SEED_ENV = "GIN_SEED"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    latent_dim: int = 10
    image_size: int = 32
    n_base: int = 168
    augment: bool = True
    gan_iterations: int = 8000
    gan_batch: int = 64
    n_critic: int = 5
    clip_c: float = 0.01
    gan_lr: float = 5e-5
    warmup_critic: int = 100
    inv_iterations: int = 3000
    inv_batch: int = 64
    inv_lr: float = 1e-3
    n_trees: int = 500
    max_depth: int = 16
    min_leaf: int = 1
    folds: int = 4
    isomap_k: int = 8
    tau_high: float = 0.7
    tau_low: float = 0.3
    beta: float = 0.1
    max_attempts: int = 10_000
    out_dir: str = "gin_out"

    def validate(self):
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if not 1 <= self.latent_dim <= MAX_LATENT_DIM:
            raise ConfigError(f"latent_dim must lie in [1, {MAX_LATENT_DIM}] (dimension cap), got {self.latent_dim}")
        if self.folds < 2:
            raise ConfigError(f"folds must be >= 2, got {self.folds}")
        if self.n_base < 8:
            raise ConfigError(f"n_base must be >= 8, got {self.n_base}")
        if self.image_size < 16:
            raise ConfigError(f"image_size must be >= 16, got {self.image_size}")
        for name in ("clip_c", "gan_lr", "inv_lr"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("gan_iterations", "inv_iterations", "n_critic", "n_trees", "max_depth", "min_leaf", "isomap_k", "max_attempts"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.gan_batch < 2 or self.inv_batch < 2:
            raise ConfigError("batch sizes must be >= 2")
        if self.warmup_critic < 0:
            raise ConfigError("warmup_critic must be >= 0")
        try:
            self.target("boundary")
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def gan(self):
        return GanConfig(
            iterations=self.gan_iterations,
            batch_size=self.gan_batch,
            n_critic=self.n_critic,
            clip_c=self.clip_c,
            lr=self.gan_lr,
            warmup_critic=self.warmup_critic,
        )

    def inverse(self):
        return InverseConfig(iterations=self.inv_iterations, batch_size=self.inv_batch, lr=self.inv_lr)

    def forest(self):
        return ForestConfig(n_trees=self.n_trees, max_depth=self.max_depth, min_leaf=self.min_leaf)

    def target(self, kind):
        return GenerationTarget(kind, self.tau_high, self.tau_low, self.beta)

    def to_text(self):
        return "".join(f"{k} = {_show(v)}\n" for k, v in asdict(self).items())


def _show(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def parse_value(key, text):
    if key not in _TYPES:
        raise ConfigError(f"unknown configuration key {key!r}")
    kind = _TYPES[key]
    text = text.strip()
    try:
        if kind == "bool":
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind == "int":
            return int(text, 0)
        if kind == "float":
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind}") from None
    return text


def read_config_file(path):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for n, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        try:
            out[key] = parse_value(key, value)
        except ConfigError as exc:
            raise ConfigError(f"{path}:{n}: {exc}") from None
    return out


def resolve(flags=None, config_file=None, environ=None):
    """Defaults < ``GIN_SEED`` (seed only) < config file < explicit flags."""
    environ = os.environ if environ is None else environ
    values = asdict(RunConfig())
    if environ.get(SEED_ENV):
        values["seed"] = parse_value("seed", environ[SEED_ENV])
    if config_file is not None:
        values.update(read_config_file(config_file))
    for key, v in (flags or {}).items():
        if v is not None:
            if key not in values:
                raise ConfigError(f"unknown configuration key {key!r}")
            values[key] = v
    return RunConfig(**values).validate()


def derive_seed(seed, stream):
    """An independent 63-bit seed for a named pipeline stage."""
    state = np.random.SeedSequence([int(seed), int(stream)]).generate_state(1, np.uint64)
    return int(state[0]) >> 1
