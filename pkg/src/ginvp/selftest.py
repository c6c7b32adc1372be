"""Fast invariant checks runnable from an installed package (``gin selftest``)."""

from __future__ import annotations

import time

import numpy as np

from . import analytics, gin, io, nn, synthdata


def random_net(seed):
    """A small stack covering every layer kind, with a matching random input."""
    rng = np.random.default_rng(seed)
    c, k, s, n = int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 3)), int(rng.integers(5, 8))
    out = nn.conv_output_size(n, k, s, k // 2)
    act = [nn.ReLU(), nn.Tanh(), nn.Sigmoid(), nn.LeakyReLU(0.2)][seed % 4]
    layers = [nn.Conv2d(c, 2, k, s, k // 2, rng=rng), nn.BatchNorm(2), nn.LeakyReLU(0.2), nn.Flatten()]
    layers += [nn.Dense(2 * out * out, 4, rng), act, nn.BatchNorm(4), nn.Dense(4, 2, rng), nn.Sigmoid()]
    return nn.Network(layers), rng.standard_normal((3, c, n, n))


def check_gradients():
    worst = max(nn.grad_check(*random_net(seed)) for seed in range(20))
    return worst < 1e-2, f"max relative error {worst:.2e} over 20 nets"


def check_auc():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(300):
        n = int(rng.integers(2, 200))
        y = rng.integers(0, 2, n)
        y[:2] = [0, 1]
        s = rng.integers(0, 6, n) / 5.0
        worst = max(worst, abs(analytics.roc_auc(s, y).auc - analytics.pairwise_auc(s, y)))
    return worst < 1e-12, f"max |trapezoid - pairwise| {worst:.1e}"


def check_isomap():
    x = np.random.default_rng(1).standard_normal((10, 4))
    emb = analytics.isomap(x, k=9, out_dim=2)
    xc = x - x.mean(axis=0)
    u, sv, _ = np.linalg.svd(xc, full_matrices=False)
    ref = u[:, :2] * sv[:2]
    err = np.max(np.abs(emb * np.sign(np.sum(emb * ref, axis=0)) - ref))
    return err < 1e-6, f"complete-graph MDS deviation {err:.1e}"


def check_model_roundtrip():
    gan = gin.new_gan(2, 16, seed=0, cfg=gin.GanConfig(hidden=8))
    data = io.serialize_model(gan)
    ok = io.serialize_model(io.deserialize_model(data)) == data
    try:
        io.deserialize_model(data[:-3])
        ok = False
    except io.ModelFormatError:
        pass
    return ok, "model bytes round-trip; truncation rejected"


def check_rotation():
    img = synthdata.render_valve(synthdata.ValveParams(0.3, 0.8, 0.65, 0.6, 1.0, 0.0))
    back = synthdata.rotate_image(synthdata.rotate_image(img, 0.2), -0.2)
    err = float(np.mean(np.abs(back - img)))
    return err < 0.02, f"rotate round-trip mean abs error {err:.4f}"


def check_forest():
    rng = np.random.default_rng(2)
    x = rng.uniform(-1, 1, (120, 2))
    x = x[np.abs(x[:, 0]) > 0.25]
    data = analytics.FeatureMatrix(x, (x[:, 0] > 0).astype(int))
    m = analytics.cross_validate(data, analytics.ForestConfig(n_trees=30), k=4, seed=0)
    return m.accuracy == 1.0 and min(m.aucs) == 1.0, f"separable CV accuracy {m.accuracy:.3f}"


CHECKS = [check_gradients, check_auc, check_isomap, check_model_roundtrip, check_rotation, check_forest]


def run(emit=print):
    failures = 0
    for check in CHECKS:
        t0 = time.perf_counter()
        ok, detail = check()
        failures += not ok
        name = check.__name__.replace("check_", "")
        emit(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail} ({time.perf_counter() - t0:.1f}s)")
    emit(f"{len(CHECKS) - failures}/{len(CHECKS)} checks passed")
    return 0 if failures == 0 else 2
