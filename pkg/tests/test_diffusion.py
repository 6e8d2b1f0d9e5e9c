import numpy as np
import pytest

from scenedecomp import diffusion
from scenedecomp.diffusion import (
    NoiseSchedule, add_noise, ancestral_sample, attn_loss, downsample_mask, rec_loss,
    respaced, total_loss,
)
from scenedecomp.gradcore import backward, fd_check

SCHED = NoiseSchedule()


def test_schedule_invariants():
    b, ab = SCHED.beta, SCHED.alpha_bar
    assert b[0] == 1e-4 and b[-1] == 0.02 and len(b) == 1000
    assert (np.diff(b) > 0).all() and (b > 0).all() and (b < 1).all()
    assert (np.diff(ab) < 0).all() and (ab > 0).all() and (ab <= 1).all()
    np.testing.assert_allclose(ab, np.cumprod(1 - b), rtol=0)


def test_add_noise_near_identity_at_zero():
    rng = np.random.default_rng(0)
    z0 = rng.uniform(-1, 1, (4, 4, 3))
    zt = add_noise(z0, 0, rng.standard_normal(z0.shape), SCHED)
    assert np.abs(zt - z0).max() < 0.05  # sqrt(1e-4) = 0.01 noise scale
    np.testing.assert_allclose(np.sqrt(SCHED.alpha_bar[0]), 1.0, atol=1e-4)


def test_add_noise_zero_eps_exact():
    z0 = np.linspace(-1, 1, 12).reshape(2, 2, 3)
    zt = add_noise(z0, 700, np.zeros_like(z0), SCHED)
    np.testing.assert_array_equal(zt, np.sqrt(SCHED.alpha_bar[700]) * z0)


def test_add_noise_errors():
    with pytest.raises(ValueError):
        add_noise(np.zeros(3), 1000, np.zeros(3), SCHED)
    with pytest.raises(ValueError):
        add_noise(np.zeros(3), 5, np.zeros(4), SCHED)


def test_forward_process_monte_carlo():
    rng = np.random.default_rng(11)
    n, t = 10_000, 500
    z0 = np.full((n, 2), 0.7)
    zt = add_noise(z0, t, rng.standard_normal(z0.shape), SCHED)
    d = (zt - np.sqrt(SCHED.alpha_bar[t]) * z0).ravel()
    var = 1 - SCHED.alpha_bar[t]
    m = d.size
    assert abs(d.mean()) < 3 * np.sqrt(var / m)
    assert abs(d.var() - var) < 3 * var * np.sqrt(2.0 / (m - 1))


# -- rec_loss ------------------------------------------------------------------
def test_rec_loss_ones_is_mse():
    rng = np.random.default_rng(1)
    for _ in range(100):
        e, h = rng.standard_normal((2, 5, 5, 3))
        assert abs(rec_loss(e, h, np.ones((5, 5))) - np.mean((e - h) ** 2)) < 1e-12


def test_rec_loss_zero_mask():
    rng = np.random.default_rng(2)
    e, h = rng.standard_normal((2, 4, 4, 3))
    assert rec_loss(e, h, np.zeros((4, 4))) == 0.0


def test_rec_loss_hand_example():
    eps = np.array([[1.0, 0.0], [0.0, 2.0]])[..., None]
    mask = np.array([[1.0, 0.0], [0.0, 0.0]])
    assert rec_loss(eps, np.zeros_like(eps), mask) == 0.25


def test_rec_loss_mask_normalization_flag():
    eps = np.array([[1.0, 0.0], [0.0, 2.0]])[..., None]
    mask = np.array([[1.0, 1.0], [0.0, 0.0]])
    assert rec_loss(eps, np.zeros_like(eps), mask, normalize="mask") == 0.5


def test_rec_loss_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        rec_loss(np.zeros((2, 2, 3)), np.zeros((2, 2, 1)), np.ones((2, 2)))


def test_rec_loss_nonnegative_zero_iff_residual_zero():
    rng = np.random.default_rng(3)
    e = rng.standard_normal((4, 4, 3))
    mask = (rng.uniform(size=(4, 4)) > 0.5).astype(float)
    h = e + (1 - mask)[..., None] * rng.standard_normal(e.shape)
    assert rec_loss(e, h, mask) == 0.0
    assert rec_loss(e, h, np.ones((4, 4))) > 0


# -- downsample_mask ---------------------------------------------------------
def test_downsample_all_ones():
    np.testing.assert_array_equal(downsample_mask(np.ones((32, 32))), np.ones((16, 16)))


def test_downsample_one_block():
    m = np.zeros((32, 32))
    m[6:8, 10:12] = 1
    d = downsample_mask(m)
    assert d[3, 5] == 1 and d.sum() == 1


def test_downsample_checkerboard():
    m = np.indices((32, 32)).sum(axis=0) % 2
    np.testing.assert_array_equal(downsample_mask(m), np.full((16, 16), 0.5))


def test_downsample_indivisible():
    with pytest.raises(ValueError, match="divisible"):
        downsample_mask(np.ones((30, 30)))


# -- attn_loss / total_loss ------------------------------------------------
def test_attn_loss_examples():
    rng = np.random.default_rng(4)
    m = [rng.uniform(size=(16, 16)) for _ in range(2)]
    assert attn_loss(m, m) == 0.0
    assert attn_loss([np.zeros((16, 16))], [np.ones((16, 16))]) == 1.0
    a0 = np.zeros((16, 16))
    t1 = np.full((16, 16), np.sqrt(0.2))
    t2 = np.full((16, 16), np.sqrt(0.4))
    assert abs(attn_loss([a0, a0], [t1, t2]) - 0.3) < 1e-15


def test_attn_loss_length_mismatch():
    with pytest.raises(ValueError):
        attn_loss([np.zeros((2, 2))], [])


def test_total_loss_examples():
    assert total_loss(0.5, 1.0, 0.01).total == 0.51
    assert total_loss(0.37, 5.0, 0.0).total == 0.37
    assert total_loss(0.0, 0.0).total == 0.0
    with pytest.raises(ValueError):
        total_loss(1.0, 1.0, -0.1)


def test_total_is_exact_combination():
    rng = np.random.default_rng(5)
    for rec, attn in rng.uniform(0, 3, (100, 2)):
        b = total_loss(rec, attn)
        assert b.total == rec + 0.01 * attn


def test_total_loss_gradients_on_shrunken_model():
    import helpers
    g, nodes, total = helpers.shrunken_loss_graph(seed=2)
    grads = backward(g, total)
    assert all(np.isfinite(v).all() for v in grads.values())
    for name in ("handles", "unet.attn.k", "text.table", "unet.out.w"):
        assert fd_check(g, total, nodes[name], helpers.fd_step(g, nodes[name])) < 1e-4


# -- sampling ----------------------------------------------------------------
def test_respaced_full_schedule_matches_betas():
    ts, betas, _, _ = respaced(SCHED, SCHED.T)
    np.testing.assert_array_equal(ts, np.arange(1000))
    np.testing.assert_allclose(betas, SCHED.beta, rtol=1e-9)


def test_one_step_oracle_recovers_z0():
    sched = NoiseSchedule(T=1, beta_start=0.3, beta_end=0.3)
    z0 = np.random.default_rng(6).uniform(-1, 1, (1, 3, 4, 4))
    ab = sched.alpha_bar[0]

    def oracle(x, t):
        return (x - np.sqrt(ab) * z0) / np.sqrt(1 - ab)

    out = ancestral_sample(oracle, z0.shape, sched, 1, np.random.default_rng(0))
    np.testing.assert_allclose(out, z0, atol=1e-6)


def test_full_length_oracle_recovers_z0():
    z0 = np.random.default_rng(7).uniform(-0.9, 0.9, (1, 3, 2, 2))

    def oracle(x, t):
        ab = SCHED.alpha_bar[t]
        return (x - np.sqrt(ab) * z0) / np.sqrt(1 - ab)

    out = ancestral_sample(oracle, z0.shape, SCHED, SCHED.T, np.random.default_rng(1))
    np.testing.assert_allclose(out, z0, atol=1e-6)


def test_sample_deterministic_and_in_range():
    from scenedecomp.model import Model
    m = Model.init(0, d_model=8, image_size=8)
    a = diffusion.sample(m, "a photo of red square", steps=5, seed=3)
    b = diffusion.sample(m, "a photo of red square", steps=5, seed=3)
    c = diffusion.sample(m, "a photo of red square", steps=5, seed=4)
    assert a.shape == (1, 8, 8, 3)
    assert a.tobytes() == b.tobytes()
    assert a.min() >= 0 and a.max() <= 1
    assert np.mean(np.any(a != c, axis=-1)) >= 0.01


def test_sample_bad_prompt():
    from scenedecomp.model import Model
    from scenedecomp.textenc import TokenizeError
    with pytest.raises(TokenizeError):
        diffusion.sample(Model.init(0, d_model=8, image_size=8), "a photo of zeppelin", steps=2)
