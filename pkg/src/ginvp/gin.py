"""Generator/critic training and the per-sample inverse network.

Training is sequential: a Wasserstein GAN maps the latent cube ``[-1, 1]^d``
to images, then a convolutional regressor is fitted on freshly generated
``(G(u), u)`` pairs so that it inverts the generator sample by sample.
"""

from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import nn

log = logging.getLogger(__name__)

MAX_LATENT_DIM = 20


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class GanConfig:
    iterations: int = 8000
    batch_size: int = 64
    n_critic: int = 5
    clip_c: float = 0.01
    lr: float = 5e-5
    rho: float = 0.9
    hidden: int = 512
    # extra critic steps early on and periodically, so the critic stays near optimal
    warmup_critic: int = 100
    warmup_iters: int = 25
    warmup_every: int = 500

    def critic_steps(self, it):
        if self.warmup_critic and (it <= self.warmup_iters or (self.warmup_every and it % self.warmup_every == 0)):
            return max(self.warmup_critic, self.n_critic)
        return self.n_critic

    def validate(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.iterations < 1 or self.n_critic < 1:
            raise ValueError("iterations and n_critic must be >= 1")
        if self.clip_c <= 0 or self.lr <= 0:
            raise ValueError("clip_c and lr must be positive")
        return self


@dataclass
class InverseConfig:
    iterations: int = 3000
    batch_size: int = 64
    lr: float = 1e-3
    rho: float = 0.9
    hidden: int = 512
    # the learning rate drops by ``decay_factor`` once this fraction of iterations is done
    decay_at: float = 0.8
    decay_factor: float = 0.1

    def lr_at(self, it):
        return self.lr * (self.decay_factor if it > self.decay_at * self.iterations else 1.0)

    def validate(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if not 0.0 <= self.decay_at <= 1.0 or not 0.0 < self.decay_factor <= 1.0:
            raise ValueError("decay_at must lie in [0, 1] and decay_factor in (0, 1]")
        if self.iterations < 1 or self.lr <= 0:
            raise ValueError("iterations must be >= 1 and lr positive")
        return self


@dataclass
class GanModel:
    generator: nn.Network
    critic: nn.Network
    latent_dim: int
    image_size: int
    clip_c: float = 0.01

    def generate_batch(self, u):
        u = np.asarray(u, dtype=np.float32)
        if u.ndim != 2 or u.shape[1] != self.latent_dim:
            raise ValueError(f"latent batch must have shape (n, {self.latent_dim}), got {u.shape}")
        out = self.generator.forward(u, train=False)
        return out.reshape(-1, self.image_size, self.image_size)


@dataclass
class InverseModel:
    network: nn.Network
    latent_dim: int
    image_size: int

    def invert_batch(self, images):
        images = np.asarray(images, dtype=np.float32)
        if images.ndim != 3 or images.shape[1:] != (self.image_size, self.image_size):
            raise ValueError(
                f"inverse model expects images of size {self.image_size}x{self.image_size}, got {images.shape[1:]}"
            )
        out = self.network.forward(images[:, None], train=False)
        return np.clip(out, -1.0, 1.0)


@dataclass
class TrainingLog:
    rows: list = field(default_factory=list)

    def append(self, iteration, critic_loss=None, gen_loss=None, inverse_mse=None, elapsed_ms=0.0):
        if self.rows and iteration <= self.rows[-1]["iter"]:
            raise ValueError("training log iterations must increase")
        self.rows.append(
            {
                "iter": int(iteration),
                "critic_loss": critic_loss,
                "gen_loss": gen_loss,
                "inverse_mse": inverse_mse,
                "elapsed_ms": float(elapsed_ms),
            }
        )

    def extend(self, other, offset=0):
        for r in other.rows:
            self.append(r["iter"] + offset, r["critic_loss"], r["gen_loss"], r["inverse_mse"], r["elapsed_ms"])
        return self

    def column(self, name):
        return np.array([r[name] for r in self.rows if r[name] is not None], dtype=np.float64)

    @property
    def last_iter(self):
        return self.rows[-1]["iter"] if self.rows else 0


def check_latent_dim(d):
    if not 1 <= int(d) <= MAX_LATENT_DIM:
        raise ValueError(f"latent dimension must lie in [1, {MAX_LATENT_DIM}], got {d}")
    return int(d)


def sample_latent(rng, d, n=None):
    """Uniform draws from ``[-1, 1]^d``; a single vector when ``n`` is None."""
    check_latent_dim(d)
    shape = (d,) if n is None else (n, d)
    return rng.uniform(-1.0, 1.0, size=shape).astype(np.float32)


def build_generator(d, image_size, rng, hidden=512, zero_final=False):
    return nn.Network(
        [
            nn.Dense(d, hidden, rng),
            nn.ReLU(),
            nn.Dense(hidden, hidden, rng),
            nn.ReLU(),
            nn.Dense(hidden, image_size * image_size, rng, zero_init=zero_final),
            nn.Sigmoid(),
        ]
    )


def build_critic(image_size, rng, hidden=512):
    return nn.Network(
        [
            nn.Dense(image_size * image_size, hidden, rng),
            nn.ReLU(),
            nn.Dense(hidden, hidden, rng),
            nn.ReLU(),
            nn.Dense(hidden, 1, rng),
        ]
    )


def build_inverse(d, image_size, rng, hidden=512, slope=0.2):
    s1 = nn.conv_output_size(image_size, 5, 2, 2)
    s2 = nn.conv_output_size(s1, 5, 2, 2)
    return nn.Network(
        [
            nn.Conv2d(1, 8, 5, stride=2, padding=2, rng=rng),
            nn.BatchNorm(8),
            nn.LeakyReLU(slope),
            nn.Conv2d(8, 16, 5, stride=2, padding=2, rng=rng),
            nn.BatchNorm(16),
            nn.LeakyReLU(slope),
            nn.Flatten(),
            nn.Dense(16 * s2 * s2, hidden, rng),
            nn.LeakyReLU(slope),
            nn.Dense(hidden, d, rng),
            nn.Tanh(),
        ]
    )


def new_gan(d, image_size, seed, cfg=None, zero_final=False):
    cfg = cfg or GanConfig()
    check_latent_dim(d)
    rng = np.random.default_rng(seed)
    gen = build_generator(d, image_size, rng, cfg.hidden, zero_final=zero_final)
    critic = build_critic(image_size, rng, cfg.hidden)
    nn.clip_params(critic, cfg.clip_c)
    return GanModel(gen, critic, d, image_size, cfg.clip_c)


def generate(model, u):
    """Image for a single latent vector (eval mode)."""
    u = np.asarray(u, dtype=np.float32)
    if u.shape != (model.latent_dim,):
        raise ValueError(f"latent vector must have length {model.latent_dim}, got shape {u.shape}")
    return model.generate_batch(u[None])[0]


def _check_loss(value, iteration, what):
    if not np.isfinite(value):
        raise TrainingDiverged(f"{what} became non-finite at iteration {iteration}")


def train_gan(images, latent_dim=10, cfg=None, seed=0, on_iteration=None):
    """Wasserstein GAN with weight clipping.

    ``images`` is an ``(n, H, W)`` array (or anything with ``.images()``).
    Each iteration runs ``cfg.critic_steps(it)`` critic updates on
    ``mean D(fake) - mean D(real)`` followed by one generator update on
    ``-mean D(fake)``; both use RMSProp. ``on_iteration(it, model)`` is called
    after every generator step. Returns ``(GanModel, TrainingLog)``.
    """
    cfg = (cfg or GanConfig()).validate()
    if hasattr(images, "images"):
        images = images.images()
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 3 or len(images) == 0 or images.shape[1] != images.shape[2]:
        raise ValueError("train_gan needs a non-empty stack of square images")
    n, size = len(images), images.shape[1]
    flat = images.reshape(n, -1)

    rng = np.random.default_rng(seed)
    model = new_gan(latent_dim, size, rng.integers(2**63), cfg)
    gen, critic = model.generator, model.critic
    opt_c = nn.RMSProp(cfg.lr, cfg.rho)
    opt_g = nn.RMSProp(cfg.lr, cfg.rho)
    b = cfg.batch_size
    real_grad = np.full((b, 1), -1.0 / b, dtype=np.float32)
    fake_grad = np.full((b, 1), 1.0 / b, dtype=np.float32)
    critic_grad = np.concatenate([real_grad, fake_grad])

    tlog = TrainingLog()
    t0 = time.perf_counter()
    for it in range(1, cfg.iterations + 1):
        for _ in range(cfg.critic_steps(it)):
            real = flat[rng.integers(0, n, size=b)]
            fake = gen.forward(sample_latent(rng, latent_dim, b), train=False)
            scores = critic.forward(np.concatenate([real, fake]), train=True)
            wdist = float(scores[:b].astype(np.float64).mean() - scores[b:].astype(np.float64).mean())
            _check_loss(wdist, it, "critic loss")
            grads, _ = critic.backward(critic_grad)
            opt_c.step(critic.trainable, grads)
            nn.clip_params(critic, cfg.clip_c)

        u = sample_latent(rng, latent_dim, b)
        fake = gen.forward(u, train=True)
        scores = critic.forward(fake, train=True)
        gen_loss = -float(scores.astype(np.float64).mean())
        _check_loss(gen_loss, it, "generator loss")
        _, dfake = critic.backward(real_grad)
        ggrads, _ = gen.backward(dfake)
        opt_g.step(gen.trainable, ggrads)

        tlog.append(it, critic_loss=wdist, gen_loss=gen_loss, elapsed_ms=(time.perf_counter() - t0) * 1e3)
        if on_iteration is not None:
            on_iteration(it, model)
        if it % 500 == 0:
            log.info("gan iter %d  wdist %.5f  gen %.5f", it, wdist, gen_loss)
    return model, tlog


def params_digest(net):
    h = hashlib.sha256()
    for name, v in net.params.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(v).tobytes())
    return h.hexdigest()


def train_inverse(gan, cfg=None, seed=0, latent_dim=None, image_size=None):
    """Fit the convolutional regressor ``image -> u`` on fresh generator samples.

    ``gan`` is a GanModel or any callable mapping a ``(n, d)`` latent batch to
    ``(n, H, W)`` images; for a plain callable pass ``latent_dim`` and
    ``image_size``. The generator is only evaluated, never updated.
    Returns ``(InverseModel, TrainingLog)``.
    """
    cfg = (cfg or InverseConfig()).validate()
    if isinstance(gan, GanModel):
        render, d, size = gan.generate_batch, gan.latent_dim, gan.image_size
    else:
        render, d, size = gan, latent_dim, image_size
        if d is None or image_size is None:
            raise ValueError("latent_dim and image_size are required for a plain generator callable")
    check_latent_dim(d)
    rng = np.random.default_rng(seed)
    net = build_inverse(d, size, np.random.default_rng(rng.integers(2**63)), cfg.hidden)
    opt = nn.RMSProp(cfg.lr, cfg.rho)
    b = cfg.batch_size

    tlog = TrainingLog()
    t0 = time.perf_counter()
    for it in range(1, cfg.iterations + 1):
        opt.lr = cfg.lr_at(it)
        u = sample_latent(rng, d, b)
        x = np.asarray(render(u), dtype=np.float32).reshape(b, 1, size, size)
        pred = net.forward(x, train=True)
        diff = pred.astype(np.float64) - u
        mse = float(np.mean(diff * diff))
        _check_loss(mse, it, "inverse MSE")
        grads, _ = net.backward((2.0 * diff / diff.size).astype(np.float32))
        opt.step(net.trainable, grads)
        tlog.append(it, inverse_mse=mse, elapsed_ms=(time.perf_counter() - t0) * 1e3)
        if it % 500 == 0:
            log.info("inverse iter %d  mse %.5f", it, mse)
    return InverseModel(net, d, size), tlog


def invert(inv, image):
    image = np.asarray(image, dtype=np.float32)
    if image.shape != (inv.image_size, inv.image_size):
        raise ValueError(f"image must be {inv.image_size}x{inv.image_size}, got {image.shape}")
    return inv.invert_batch(image[None])[0]


def reconstruct(gan, inv, image):
    """``generate(invert(image))`` and its per-pixel MSE against ``image``."""
    image = np.asarray(image, dtype=np.float32)
    out = generate(gan, invert(inv, image))
    if out.shape != image.shape:
        raise ValueError("GAN and inverse image sizes differ")
    mse = float(np.mean((out.astype(np.float64) - image) ** 2))
    return out, mse


def reconstruct_batch(gan, inv, images):
    images = np.asarray(images, dtype=np.float32)
    out = gan.generate_batch(inv.invert_batch(images))
    mse = np.mean((out.astype(np.float64) - images) ** 2, axis=(1, 2))
    return out, mse
