import numpy as np
import pytest

from ginvp import gin, nn

SMALL = gin.GanConfig(iterations=3, batch_size=8, hidden=16, warmup_critic=0)


def test_sample_latent_moments():
    u = gin.sample_latent(np.random.default_rng(0), 10, 20_000)
    assert u.dtype == np.float32 and u.shape == (20_000, 10)
    assert u.min() >= -1 and u.max() <= 1
    np.testing.assert_allclose(u.mean(axis=0), 0, atol=0.02)
    np.testing.assert_allclose(u.var(axis=0), 1 / 3, atol=0.01)
    assert gin.sample_latent(np.random.default_rng(0), 4).shape == (4,)


@pytest.mark.parametrize("d", [0, 21, 25])
def test_latent_dim_cap(d):
    with pytest.raises(ValueError, match="20"):
        gin.new_gan(d, 16, seed=0)


def test_zero_final_generator_is_half_gray():
    gan = gin.new_gan(10, 32, seed=1, zero_final=True)
    img = gin.generate(gan, gin.sample_latent(np.random.default_rng(2), 10))
    assert img.shape == (32, 32)
    np.testing.assert_array_equal(img, np.full((32, 32), 0.5, np.float32))


def test_generate_checks_shape():
    gan = gin.new_gan(3, 16, seed=0, cfg=SMALL)
    with pytest.raises(ValueError):
        gin.generate(gan, np.zeros(4))
    with pytest.raises(ValueError):
        gan.generate_batch(np.zeros((2, 2)))


def test_critic_weights_stay_clipped():
    images = np.random.default_rng(0).random((20, 16, 16), dtype=np.float32)
    gan, tlog = gin.train_gan(images, 3, SMALL, seed=0)
    worst = max(np.abs(v).max() for v in gan.critic.trainable.values())
    assert worst <= SMALL.clip_c
    assert [r["iter"] for r in tlog.rows] == [1, 2, 3]
    assert len(tlog.column("critic_loss")) == 3


def test_warmup_schedule():
    cfg = gin.GanConfig(n_critic=5, warmup_critic=100, warmup_iters=25, warmup_every=500)
    assert [cfg.critic_steps(i) for i in (1, 25, 26, 499, 500, 1000, 1001)] == [100, 100, 5, 5, 100, 100, 5]
    assert gin.GanConfig(warmup_critic=0).critic_steps(1) == 5


def test_train_gan_deterministic():
    images = np.random.default_rng(1).random((10, 16, 16), dtype=np.float32)
    a, la = gin.train_gan(images, 2, SMALL, seed=4)
    b, lb = gin.train_gan(images, 2, SMALL, seed=4)
    c, _ = gin.train_gan(images, 2, SMALL, seed=5)
    assert gin.params_digest(a.generator) == gin.params_digest(b.generator)
    assert gin.params_digest(a.critic) == gin.params_digest(b.critic)
    assert gin.params_digest(a.generator) != gin.params_digest(c.generator)
    assert la.column("gen_loss").tolist() == lb.column("gen_loss").tolist()


def test_train_gan_rejects_bad_input():
    with pytest.raises(ValueError):
        gin.train_gan(np.zeros((0, 16, 16)), 2, SMALL)
    with pytest.raises(ValueError):
        gin.train_gan(np.zeros((3, 16, 12)), 2, SMALL)
    with pytest.raises(ValueError):
        gin.GanConfig(batch_size=1).validate()


def test_non_finite_data_diverges():
    images = np.full((4, 16, 16), np.nan, np.float32)
    with pytest.raises(gin.TrainingDiverged, match="iteration 1"):
        gin.train_gan(images, 2, SMALL, seed=0)


def linear_toy(d=2, size=4, seed=0):
    a = np.random.default_rng(seed).standard_normal((d, size * size)).astype(np.float32) * 0.2

    def render(u):
        return (0.5 + u @ a).reshape(-1, size, size)

    return render


def test_inverse_learns_linear_map():
    render = linear_toy()
    cfg = gin.InverseConfig(iterations=2000, batch_size=32, hidden=64)
    inv, tlog = gin.train_inverse(render, cfg, seed=0, latent_dim=2, image_size=4)
    u = gin.sample_latent(np.random.default_rng(9), 2, 1000)
    mse = np.mean((inv.invert_batch(render(u)) - u) ** 2)
    assert mse < 1e-3
    assert tlog.column("inverse_mse")[-50:].mean() < tlog.column("inverse_mse")[:50].mean()


def test_inverse_leaves_generator_untouched():
    gan = gin.new_gan(3, 16, seed=2, cfg=SMALL)
    before = gin.params_digest(gan.generator)
    gin.train_inverse(gan, gin.InverseConfig(iterations=5, batch_size=4, hidden=8), seed=0)
    assert gin.params_digest(gan.generator) == before


def test_inverse_needs_dims_for_callable():
    with pytest.raises(ValueError):
        gin.train_inverse(linear_toy(), gin.InverseConfig(iterations=1))


def test_invert_and_reconstruct_contract():
    gan = gin.new_gan(3, 16, seed=0, cfg=SMALL)
    inv = gin.InverseModel(gin.build_inverse(3, 16, np.random.default_rng(0), hidden=8), 3, 16)
    img = np.random.default_rng(1).random((16, 16), dtype=np.float32)
    u = gin.invert(inv, img)
    assert u.shape == (3,) and np.all(np.abs(u) <= 1)
    out, mse = gin.reconstruct(gan, inv, img)
    assert mse == pytest.approx(np.mean((out.astype(np.float64) - img) ** 2))
    outs, mses = gin.reconstruct_batch(gan, inv, img[None])
    np.testing.assert_array_equal(outs[0], out)
    with pytest.raises(ValueError, match="16x16"):
        gin.invert(inv, np.zeros((8, 8)))


def test_inverse_lr_schedule():
    cfg = gin.InverseConfig(iterations=100, lr=1e-3, decay_at=0.8, decay_factor=0.1)
    assert cfg.lr_at(80) == 1e-3
    assert cfg.lr_at(81) == pytest.approx(1e-4)
    with pytest.raises(ValueError):
        gin.InverseConfig(decay_factor=0).validate()


def test_training_log_rules():
    tlog = gin.TrainingLog()
    tlog.append(1, critic_loss=0.1)
    with pytest.raises(ValueError):
        tlog.append(1)
    other = gin.TrainingLog()
    other.append(1, inverse_mse=0.5)
    tlog.extend(other, offset=tlog.last_iter)
    assert [r["iter"] for r in tlog.rows] == [1, 2]
    assert tlog.column("inverse_mse").tolist() == [0.5]


def test_inverse_architecture_shapes():
    net = gin.build_inverse(10, 32, np.random.default_rng(0))
    out = net.forward(np.zeros((2, 1, 32, 32), np.float32))
    assert out.shape == (2, 10)
    kinds = [s["kind"] for s in net.specs()]
    assert kinds[:3] == ["conv2d", "batch_norm", "leaky_relu"]
    assert kinds[-1] == "tanh"
    assert isinstance(net.layers[0], nn.Conv2d) and net.layers[0].stride == 2
