"""Procedural valve-like grayscale images with ground-truth parameters.

Each image shows a dark lumen inside a mid-intensity elliptical wall with a
bright calcific nodule sitting on the wall. The binary outcome label depends
only on the amount of calcification.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

LABEL_THRESHOLD = 0.55
WALL_CEILING = 0.6
AUGMENT_DEGREES = (3, -3, 6, -6, 9, -9, 12, -12, 15)
MIN_SIZE = 16

_LUMEN = 0.12
_WALL = 0.5
_WALL_WIDTH = 0.09  # gaussian half-width of the wall profile, in half-width units


@dataclass(frozen=True)
class ValveParams:
    rotation_theta: float = 0.0
    wall_eccentricity: float = 0.8
    wall_radius: float = 0.65
    calcification_amount: float = 0.0
    nodule_angle: float = 0.0
    noise_sigma: float = 0.0

    def validate(self):
        checks = [
            ("wall_eccentricity", 0.6, 1.0),
            ("wall_radius", 0.5, 0.8),
            ("calcification_amount", 0.0, 1.0),
            ("noise_sigma", 0.0, 0.05),
        ]
        for name, lo, hi in checks:
            v = getattr(self, name)
            if not lo <= v <= hi:
                raise ValueError(f"{name}={v} outside [{lo}, {hi}]")
        for name in ("rotation_theta", "nodule_angle"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        return self


@dataclass
class PatientRecord:
    id: int
    image: np.ndarray
    pvl_label: int
    params: ValveParams
    augmented_from: Optional[int] = None
    angle_deg: float = 0.0

    @property
    def group(self):
        return self.id if self.augmented_from is None else self.augmented_from


@dataclass
class Dataset:
    records: list
    seed: int
    augmented: bool = False
    size: int = 32

    def __len__(self):
        return len(self.records)

    def images(self):
        return np.stack([r.image for r in self.records]).astype(np.float32)

    def labels(self):
        return np.array([r.pvl_label for r in self.records], dtype=np.int64)

    def groups(self):
        return np.array([r.group for r in self.records], dtype=np.int64)

    def base(self):
        return Dataset([r for r in self.records if r.augmented_from is None], self.seed, False, self.size)


def label_pvl(params):
    """1 (high leakage) iff calcification exceeds the threshold, else 0."""
    return int(params.calcification_amount > LABEL_THRESHOLD)


def _grid(size):
    # pixel centres in [-1, 1], y pointing up
    c = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    x = np.broadcast_to(c[None, :], (size, size))
    y = np.broadcast_to(-c[:, None], (size, size))
    return x, y


def render_valve(params, size=32, rng=None):
    """Render ``params`` to a ``size`` x ``size`` float32 image in [0, 1].

    Noise is only drawn when ``noise_sigma > 0``; pass ``rng`` to control it.
    """
    if size < MIN_SIZE:
        raise ValueError(f"image size must be >= {MIN_SIZE}, got {size}")
    params.validate()
    x, y = _grid(size)
    th = params.rotation_theta
    ct, st = math.cos(th), math.sin(th)
    xr = ct * x + st * y
    yr = -st * x + ct * y
    a = params.wall_radius
    b = params.wall_radius * params.wall_eccentricity
    rho = np.sqrt((xr / a) ** 2 + (yr / b) ** 2)

    # wall: gaussian ridge along the ellipse; lumen: soft-edged fill inside it
    dist = (rho - 1.0) * b
    wall = np.exp(-0.5 * (dist / _WALL_WIDTH) ** 2)
    inside = 1.0 / (1.0 + np.exp(np.clip((rho - 1.0) * b / 0.03, -50, 50)))
    img = _LUMEN * inside
    img = img + (_WALL - img) * wall

    c = params.calcification_amount
    if c > 0:
        phi = params.nodule_angle
        px, py = a * math.cos(phi), b * math.sin(phi)
        nx, ny = ct * px - st * py, st * px + ct * py
        radius = 0.06 + 0.3 * c
        peak = WALL_CEILING + 0.4 * c
        blob = peak * np.exp(-0.5 * ((x - nx) ** 2 + (y - ny) ** 2) / radius**2)
        img = np.maximum(img, blob)

    if params.noise_sigma > 0:
        rng = np.random.default_rng(0) if rng is None else rng
        img = img + rng.normal(0.0, params.noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def rotate_image(image, angle):
    """Rotate a square image about its centre by ``angle`` radians (counter-clockwise).

    Bilinear interpolation; samples falling outside the frame read as 0.
    """
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 2 or image.shape[0] != image.shape[1]:
        raise ValueError(f"rotate_image needs a square 2-D image, got shape {image.shape}")
    if angle == 0:
        return image.copy()
    n = image.shape[0]
    c = (n - 1) / 2.0
    rows, cols = np.mgrid[0:n, 0:n].astype(np.float64)
    # inverse map: output pixel -> source location (row axis points down)
    dx, dy = cols - c, c - rows
    ca, sa = math.cos(angle), math.sin(angle)
    sx = ca * dx + sa * dy
    sy = -sa * dx + ca * dy
    src_c, src_r = sx + c, c - sy

    r0 = np.floor(src_r).astype(np.int64)
    c0 = np.floor(src_c).astype(np.int64)
    fr, fc = src_r - r0, src_c - c0
    padded = np.zeros((n + 2, n + 2), dtype=np.float64)
    padded[1:-1, 1:-1] = image

    def tap(r, q):
        return padded[np.clip(r + 1, 0, n + 1), np.clip(q + 1, 0, n + 1)]

    out = (
        tap(r0, c0) * (1 - fr) * (1 - fc)
        + tap(r0, c0 + 1) * (1 - fr) * fc
        + tap(r0 + 1, c0) * fr * (1 - fc)
        + tap(r0 + 1, c0 + 1) * fr * fc
    )
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def augment(record, next_id=None):
    """The record itself followed by nine small in-plane rotations of it."""
    out = [record]
    base_id = record.id
    for k, deg in enumerate(AUGMENT_DEGREES):
        rid = None if next_id is None else next_id + k
        out.append(
            PatientRecord(
                id=rid,
                image=rotate_image(record.image, math.radians(deg)),
                pvl_label=record.pvl_label,
                params=record.params,
                augmented_from=base_id,
                angle_deg=float(deg),
            )
        )
    return out


def record_rng(seed, index):
    """Independent generator for record ``index`` of the dataset seeded with ``seed``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), int(index)]))


def sample_params(rng):
    return ValveParams(
        rotation_theta=float(rng.uniform(0.0, 2 * math.pi)),
        wall_eccentricity=float(rng.uniform(0.6, 1.0)),
        wall_radius=float(rng.uniform(0.5, 0.8)),
        calcification_amount=float(rng.beta(2.0, 3.0)),
        nodule_angle=float(rng.uniform(0.0, 2 * math.pi)),
        noise_sigma=float(rng.uniform(0.0, 0.05)),
    )


def make_dataset(n_base=168, size=32, seed=0, augment_data=True):
    if n_base < 8:
        raise ValueError(f"n_base must be >= 8, got {n_base}")
    if size < MIN_SIZE:
        raise ValueError(f"image size must be >= {MIN_SIZE}, got {size}")
    base = []
    for i in range(n_base):
        rng = record_rng(seed, i)
        params = sample_params(rng)
        img = render_valve(params, size, rng=rng)
        base.append(PatientRecord(id=i, image=img, pvl_label=label_pvl(params), params=params))
    records = list(base)
    if augment_data:
        next_id = n_base
        for rec in base:
            records.extend(augment(rec, next_id)[1:])
            next_id += len(AUGMENT_DEGREES)
    return Dataset(records, seed=seed, augmented=augment_data, size=size)


def with_params(params, **changes):
    return replace(params, **changes)
