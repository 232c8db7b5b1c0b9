import numpy as np
import pytest

from tgd import autodiff as ad
from tgd.actor import ActorConfig, NoiseConfig, actor_act, actor_act_noisy, actor_init
from tgd.decoders import greedy_decode, trainable_greedy_decode
from tgd.nn import ContractError

CFG = ActorConfig(state_dim=6, context_dim=12, hidden=32)


def test_zero_weights_give_zero_action():
    phi = actor_init(CFG, init_scale=0.0).arrays
    z, e = np.ones((3, 6)), np.ones((3, 12))
    assert np.array_equal(actor_act(z, e, phi), np.zeros((3, 6)))


def test_zero_init_actor_decodes_like_greedy(model_factory):
    params = model_factory(vocab=7, seed=1, hidden=6)
    actor = actor_init(ActorConfig(6, 12), init_scale=0.0)
    for src in ([4], [4, 5, 6], [6, 6, 5, 4]):
        assert trainable_greedy_decode(src, params, actor).tokens == greedy_decode(src, params).tokens


def test_same_seed_same_params():
    a, b = actor_init(CFG, seed=4), actor_init(CFG, seed=4)
    assert all(np.array_equal(a[k], b[k]) for k in a.names())
    assert not np.array_equal(a["W1"], actor_init(CFG, seed=5)["W1"])


def test_uniform_init_range_and_small_actions():
    actor = actor_init(CFG)
    assert np.abs(actor["W1"]).max() <= 0.001 and np.abs(actor["W2"]).max() <= 0.001
    assert not actor["b1"].any() and not actor["b2"].any()
    rng = np.random.default_rng(0)
    a = actor_act(rng.standard_normal((1000, 6)), rng.standard_normal((1000, 12)), actor.arrays)
    assert np.abs(a).mean() < 0.01


def test_hand_two_dim_example():
    phi = {
        "W1": np.array([[0.5, -1.0], [0.25, 0.0], [1.0, 2.0], [0.0, -0.5]]),
        "b1": np.array([0.1, -0.2]),
        "W2": np.array([[1.0, 0.0], [-2.0, 0.5]]),
        "b2": np.array([0.01, 0.02]),
    }
    z, e = np.array([[0.2, -0.4]]), np.array([[1.0, 0.3]])
    h0 = np.tanh(0.2 * 0.5 + -0.4 * 0.25 + 1.0 * 1.0 + 0.3 * 0.0 + 0.1)
    h1 = np.tanh(0.2 * -1.0 + 0.0 + 1.0 * 2.0 + 0.3 * -0.5 - 0.2)
    expect = [h0 * 1.0 + h1 * -2.0 + 0.01, h0 * 0.0 + h1 * 0.5 + 0.02]
    assert np.allclose(actor_act(z, e, phi)[0], expect, atol=1e-12)


def test_dim_mismatch():
    phi = actor_init(CFG).arrays
    with pytest.raises(ContractError):
        actor_act(np.ones((1, 5)), np.ones((1, 12)), phi)


def test_gradient_check():
    with ad.precision("extended"):
        actor = actor_init(ActorConfig(4, 6, hidden=5), init_scale=0.5, seed=2, dtype=np.float64)
        phi = actor.tensors()
        rng = np.random.default_rng(3)
        z, e, w = rng.standard_normal((3, 4)), rng.standard_normal((3, 6)), rng.standard_normal((3, 4))
        f = lambda: ad.sum_(ad.mul(ad.tanh(actor_act(z, e, phi)), w))
        assert ad.finite_diff_check(f, list(phi.values()), max_coords=200).passed


def test_noise_zero_sigma_is_exact():
    phi = actor_init(CFG, init_scale=0.3).arrays
    z, e = np.ones((2, 6)), np.ones((2, 12))
    a, eps = actor_act_noisy(z, e, phi, 0.0, None)
    assert np.array_equal(a, actor_act(z, e, phi)) and not eps.any()


def test_noise_std_matches_sigma():
    phi = actor_init(CFG, init_scale=0.3).arrays
    z, e = np.zeros((10_000, 6)), np.zeros((10_000, 12))
    a, _ = actor_act_noisy(z, e, phi, 0.2, np.random.default_rng(0))
    std = (a - actor_act(z, e, phi)).std()
    assert abs(std - 0.2) < 0.05 * 0.2


def test_noise_reproducible_under_seed():
    phi = actor_init(CFG).arrays
    z, e = np.ones((1, 6)), np.ones((1, 12))
    a = actor_act_noisy(z, e, phi, 0.1, np.random.default_rng(7))[1]
    b = actor_act_noisy(z, e, phi, 0.1, np.random.default_rng(7))[1]
    assert np.array_equal(a, b)


def test_noise_config_validation():
    with pytest.raises(ValueError):
        NoiseConfig(-0.1)


def test_action_bounded_by_weight_norms():
    actor = actor_init(CFG, init_scale=2.0, seed=1)
    actor.arrays["b2"][:] = 0.3
    rng = np.random.default_rng(0)
    a = actor_act(rng.standard_normal((500, 6)) * 10, rng.standard_normal((500, 12)) * 10, actor.arrays)
    bound = np.abs(actor["W2"]).sum(axis=0) + np.abs(actor["b2"])
    assert np.all(np.abs(a) <= bound + 1e-6)
