"""Outcome-guided virtual patients and latent-space cross-section grids."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gin import check_latent_dim, generate, invert, sample_latent

TARGET_KINDS = ("high_pvl", "low_pvl", "boundary")


class SamplingExhausted(RuntimeError):
    def __init__(self, target, attempts, accepted=0):
        self.target = target
        self.attempts = attempts
        self.acceptance_rate = accepted / attempts if attempts else 0.0
        super().__init__(
            f"no latent vector met target {target.kind!r} in {attempts} attempts "
            f"(empirical acceptance rate {self.acceptance_rate:.4g}); relax the thresholds"
        )


@dataclass(frozen=True)
class GenerationTarget:
    kind: str = "high_pvl"
    tau_high: float = 0.7
    tau_low: float = 0.3
    beta: float = 0.1

    def __post_init__(self):
        if self.kind not in TARGET_KINDS:
            raise ValueError(f"target kind must be one of {TARGET_KINDS}, got {self.kind!r}")
        if not 0.5 < self.tau_high <= 1.0:
            raise ValueError("tau_high must lie in (0.5, 1]")
        if not 0.0 <= self.tau_low < 0.5:
            raise ValueError("tau_low must lie in [0, 0.5)")
        if not 0.0 < self.beta <= 0.25:
            raise ValueError("beta must lie in (0, 0.25]")

    def accepts(self, p):
        if self.kind == "high_pvl":
            return p >= self.tau_high
        if self.kind == "low_pvl":
            return p <= self.tau_low
        return abs(p - 0.5) <= self.beta


@dataclass
class VirtualPatient:
    u: np.ndarray
    image: np.ndarray
    predicted_proba: float
    target: GenerationTarget
    attempt_count: int

    def __post_init__(self):
        if not self.target.accepts(self.predicted_proba):
            raise ValueError(
                f"predicted probability {self.predicted_proba} violates target {self.target.kind!r}"
            )

    @property
    def target_kind(self):
        return self.target.kind


def guided_sample(gan, forest, target, rng, max_attempts=10_000, chunk=256):
    """Rejection-sample ``u ~ U[-1,1]^d`` until the forest's probability meets ``target``.

    Candidates are drawn and scored in chunks; ``attempt_count`` is the
    1-based position of the accepted draw in the sequence.
    """
    if forest.n_features != gan.latent_dim:
        raise ValueError(f"forest expects {forest.n_features} features, GAN latent dimension is {gan.latent_dim}")
    attempts = 0
    while attempts < max_attempts:
        m = min(chunk, max_attempts - attempts)
        us = sample_latent(rng, gan.latent_dim, m)
        probs = forest.predict_proba_batch(us)
        for i in range(m):
            attempts += 1
            p = float(probs[i])
            if target.accepts(p):
                return VirtualPatient(us[i], generate(gan, us[i]), p, target, attempts)
    raise SamplingExhausted(target, attempts)


def acceptance_probability(forest, target, rng, n=20_000, d=None):
    """Monte-Carlo estimate of P(accept) for u uniform on the latent cube."""
    d = forest.n_features if d is None else d
    us = rng.uniform(-1.0, 1.0, size=(n, d)).astype(np.float32)
    probs = forest.predict_proba_batch(us)
    return float(np.mean([target.accepts(float(p)) for p in probs]))


@dataclass
class GridSpec:
    dims: tuple = (0, 1)
    ranges: tuple = ((-1.0, 1.0, 5), (-1.0, 1.0, 5))
    fixed: np.ndarray = field(default=None)

    def validate(self, d):
        check_latent_dim(d)
        i, j = self.dims
        if i == j or not (0 <= i < d and 0 <= j < d):
            raise ValueError(f"grid dims must be two distinct indices below {d}, got {self.dims}")
        for lo, hi, steps in self.ranges:
            if steps < 2:
                raise ValueError("each grid axis needs at least 2 steps")
            if not (-1.0 <= lo <= 1.0 and -1.0 <= hi <= 1.0):
                raise ValueError("grid ranges must lie within [-1, 1]")
        fixed = np.zeros(d, np.float32) if self.fixed is None else np.asarray(self.fixed, np.float32)
        if fixed.shape != (d,):
            raise ValueError(f"fixed values must have length {d}")
        if np.any(np.abs(fixed) > 1.0):
            raise ValueError("fixed values must lie within [-1, 1]")
        return fixed

    def latent(self, d, a, b):
        """Latent vector for column ``a`` (axis i) and row ``b`` (axis j)."""
        u = self.validate(d).copy()
        (lo_i, hi_i, n_i), (lo_j, hi_j, n_j) = self.ranges
        u[self.dims[0]] = np.linspace(lo_i, hi_i, n_i)[a]
        u[self.dims[1]] = np.linspace(lo_j, hi_j, n_j)[b]
        return u


def feature_grid(gan, spec):
    """Render every grid point; returns ``(tiles, montage)``.

    ``tiles[b][a]`` is the image at column ``a`` of axis ``dims[0]`` (left to
    right, min to max) and row ``b`` of axis ``dims[1]`` (top to bottom, min to
    max). The montage separates tiles with 1-pixel white lines.
    """
    spec.validate(gan.latent_dim)
    n_i, n_j = spec.ranges[0][2], spec.ranges[1][2]
    us = np.stack([spec.latent(gan.latent_dim, a, b) for b in range(n_j) for a in range(n_i)])
    images = [generate(gan, u) for u in us]
    tiles = [images[b * n_i : (b + 1) * n_i] for b in range(n_j)]
    s = gan.image_size
    montage = np.ones((n_j * s + n_j - 1, n_i * s + n_i - 1), dtype=np.float32)
    for b in range(n_j):
        for a in range(n_i):
            montage[b * (s + 1) : b * (s + 1) + s, a * (s + 1) : a * (s + 1) + s] = tiles[b][a]
    return tiles, montage


@dataclass
class ConsistencyReport:
    distance: float
    reextracted_u: np.ndarray
    reextracted_proba: float
    original_proba: float

    @property
    def class_kept(self):
        return (self.reextracted_proba > 0.5) == (self.original_proba > 0.5)


def classify_virtual(forest, inv, vp):
    """Invert a virtual patient's image and compare with its originating latent vector."""
    u2 = invert(inv, vp.image)
    dist = float(np.max(np.abs(u2.astype(np.float64) - vp.u.astype(np.float64))))
    p2 = float(forest.predict_proba_batch(u2[None])[0])
    return ConsistencyReport(dist, u2, p2, vp.predicted_proba)
