import numpy as np
import pytest

from tgd import autodiff as ad
from tgd.critic import CriticConfig, critic_init, critic_loss, critic_predict
from tgd.nn import ContractError
from tgd.training import OptimizerState, optimizer_step

REFS = [(4, 5, 6, 2), (7, 2)]
TOKS = [(4, 5, 2), (8, 9, 10, 11, 2)]


def make(bounded=True, seed=1, dtype=np.float64):
    cfg = CriticConfig(vocab=12, state_dim=6, emb_dim=5, hidden=4, att_dim=4, head_dim=4, bounded=bounded)
    with ad.precision("extended" if dtype == np.float64 else "standard"):
        return critic_init(cfg, seed=seed, dtype=dtype)


def states(seed=0):
    rng = np.random.default_rng(seed)
    return [rng.standard_normal((3, 6)), rng.standard_normal((5, 6))]


def test_bounded_output_in_unit_interval():
    for seed in range(5):
        c = make(seed=seed)
        for k in c.names():
            c.arrays[k] *= 3
        out = critic_predict(REFS, states(seed), TOKS, c)
        assert out.shape == (2,) and np.all((out > 0) & (out < 1))


def test_deterministic_and_padded_input_equivalent():
    c = make()
    s = states()
    a = critic_predict(REFS, s, TOKS, c)
    assert np.array_equal(a, critic_predict(REFS, s, TOKS, c))
    padded = np.zeros((2, 5, 6))
    padded[0, :3], padded[1] = s
    assert np.allclose(a, critic_predict(REFS, padded, TOKS, c), atol=1e-12)


def test_unbounded_mode_rescales():
    c = make(bounded=False)
    raw = critic_predict(REFS, states(), TOKS, c) / c.config.scale
    from tgd.critic import critic_forward

    assert np.allclose(raw, critic_forward(c.arrays, c.config, REFS, states(), TOKS))


def test_empty_inputs_rejected():
    c = make()
    with pytest.raises(ContractError):
        critic_predict(REFS, [np.zeros((0, 6)), states()[1]], [(), TOKS[1]], c)
    with pytest.raises(ContractError):
        critic_predict([(), (7, 2)], states(), TOKS, c)
    with pytest.raises(ContractError):
        critic_loss(np.zeros(0), [], c.config)


def test_loss_hand_values():
    c = make()
    assert critic_loss(np.array([0.4, 0.7]), [0.4, 0.7], c.config)[0] == 0.0
    assert abs(critic_loss(np.array([0.6, 0.2]), [0.5, 0.5], c.config)[0] - 0.05) < 1e-12


def test_gradient_wrt_states_and_params():
    with ad.precision("extended"):
        for bounded in (True, False):
            c = make(bounded)
            P = c.tensors()
            S = [ad.Tensor(s, requires_grad=True) for s in states()]
            f = lambda: critic_loss(critic_predict(REFS, S, TOKS, c, P), [0.3, -1.0], c.config)
            rep = ad.finite_diff_check(f, list(P.values()) + S, max_coords=300)
            assert rep.passed, rep
            g = lambda: ad.sum_(critic_predict(REFS, S, TOKS, c))
            assert ad.finite_diff_check(g, S).passed


def test_training_on_frozen_batch_decreases_loss():
    c = make(dtype=np.float32)
    s = [x.astype(np.float32) for x in states()]
    targets = [0.2, 0.9]
    st = OptimizerState("rmsprop")
    history = []
    for i in range(200):
        P = c.tensors()
        with ad.Graph() as g:
            loss = critic_loss(critic_predict(REFS, s, TOKS, c, P), targets, c.config)
            ad.backward(loss, g)
        optimizer_step(c.arrays, {k: P[k].grad for k in P}, st, 1e-3)
        if i % 20 == 0:
            history.append(loss.item())
    assert history[-1] < 0.5 * history[0]
    for prev, cur in zip(history, history[1:]):
        assert cur <= prev * 1.1


def test_state_only_trajectory_ignores_tokens():
    with ad.precision("extended"):
        cfg = CriticConfig(12, 6, emb_dim=4, hidden=5, att_dim=4, head_dim=4, use_tokens=False)
        c = critic_init(cfg, seed=2, dtype=np.float64)
        swapped = [tuple(reversed(t[:-1])) + (2,) for t in TOKS]
        assert np.array_equal(critic_predict(REFS, states(), TOKS, c), critic_predict(REFS, states(), swapped, c))
        S = [ad.Tensor(s, requires_grad=True) for s in states()]
        assert ad.finite_diff_check(lambda: ad.sum_(critic_predict(REFS, S, TOKS, c)), S).passed
