import math

import numpy as np
import pytest

from tgd import autodiff as ad
from tgd.actor import ActorConfig, actor_init
from tgd.critic import CriticConfig, critic_init, critic_predict
from tgd.data import Pair
from tgd.model import EOS, Seq2SeqConfig, init_seq2seq
from tgd.nn import ContractError
from tgd.training import (
    BleuObjective,
    NegPerplexityObjective,
    OptimizerState,
    TrainSchedule,
    actor_gradient,
    actor_update_critic_aware,
    critic_aware_weights,
    critic_update,
    decode_rollouts,
    get_objective,
    optimizer_step,
    replay_states,
    train_actor_critic,
    train_mle,
)


def small_setup(seed=0, dtype=np.float64, bounded=True):
    prec = "extended" if dtype == np.float64 else "standard"
    with ad.precision(prec):
        cfg = Seq2SeqConfig(9, 9, emb_dim=4, hidden=6, att_dim=5, readout_dim=6, max_len_decode=8)
        params = init_seq2seq(cfg, seed=seed, dtype=dtype)
        params.arrays["out.W"] *= 3
        actor = actor_init(ActorConfig(6, 12, hidden=5), init_scale=0.3, seed=seed + 1, dtype=dtype)
        critic = critic_init(
            CriticConfig(9, 6, emb_dim=4, hidden=5, att_dim=4, head_dim=4, bounded=bounded), seed=seed + 2, dtype=dtype
        )
    return params, actor, critic


PAIRS = [Pair((4, 5, 6), (6, 5, 4, EOS)), Pair((7, 8), (8, 7, EOS)), Pair((5, 5, 8, 4), (4, 8, 5, 5, EOS))]


# ----------------------------------------------------------------- optimizers


def test_rmsprop_hand_recurrence():
    p = {"w": np.array([1.0])}
    st = OptimizerState("rmsprop")
    acc, w = 0.0, 1.0
    for _ in range(2):
        optimizer_step(p, {"w": np.array([1.0])}, st, 0.01)
        acc = 0.9 * acc + 0.1
        w -= 0.01 / math.sqrt(acc + 1e-8)
    assert abs(p["w"][0] - w) < 1e-15
    assert st.buffers["w"][0].shape == (1,)


def test_adadelta_hand_recurrence():
    p = {"w": np.array([0.5])}
    st = OptimizerState("adadelta")
    eg = edx = 0.0
    w = 0.5
    for g in (1.0, -0.5, 2.0):
        optimizer_step(p, {"w": np.array([g])}, st, 1.0)
        eg = 0.95 * eg + 0.05 * g * g
        d = -math.sqrt(edx + 1e-6) / math.sqrt(eg + 1e-6) * g
        edx = 0.95 * edx + 0.05 * d * d
        w += d
    assert abs(p["w"][0] - w) < 1e-15


@pytest.mark.parametrize("rule", ["rmsprop", "adadelta"])
def test_zero_grad_or_zero_lr_leaves_params(rule):
    p = {"w": np.array([0.3, -0.2])}
    optimizer_step(p, {"w": np.zeros(2)}, OptimizerState(rule), 0.1)
    optimizer_step(p, {"w": np.ones(2)}, OptimizerState(rule), 0.0)
    assert np.array_equal(p["w"], [0.3, -0.2])


def test_optimizer_errors():
    with pytest.raises(ValueError):
        optimizer_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, OptimizerState("rmsprop"), 0.1)
    with pytest.raises(ValueError):
        OptimizerState("sgd")


def test_schedule_validation():
    with pytest.raises(ValueError):
        TrainSchedule(tau=0)
    with pytest.raises(ValueError):
        TrainSchedule(sigma=-1)
    with pytest.raises(ValueError):
        TrainSchedule(N_c=0)
    s = TrainSchedule()
    assert (s.N_c, s.N_a, s.lr_actor, s.lr_critic) == (10, 1, 2e-6, 2e-4)


# ------------------------------------------------------------------------ MLE


def test_initial_loss_near_uniform_and_memorization():
    cfg = Seq2SeqConfig(10, 10, emb_dim=8, hidden=16, att_dim=8, readout_dim=16)
    params = init_seq2seq(cfg, seed=0)
    pair = Pair((4, 5, 6, 7), (7, 6, 5, 4, EOS))
    from tgd.model import mle_loss

    l0 = mle_loss([pair], params)[0]
    assert abs(l0 - 5 * math.log(10)) < 0.5
    res = train_mle([pair], [], params, TrainSchedule(epochs=500, batch_size=1, lr_mle=1.0, seed=0))
    assert mle_loss([pair], res.params)[0] < 0.1


def test_mle_is_deterministic_and_keeps_best():
    cfg = Seq2SeqConfig(10, 10, emb_dim=4, hidden=8, att_dim=4, readout_dim=8)
    sched = TrainSchedule(epochs=3, batch_size=2, seed=3)
    runs = [train_mle(PAIRS, PAIRS[:2], init_seq2seq(cfg, seed=1), sched) for _ in range(2)]
    assert runs[0].curve == runs[1].curve
    assert runs[0].best_valid == min(r["valid_loss"] for r in runs[0].curve)


def test_mle_divergence_aborts():
    cfg = Seq2SeqConfig(10, 10, emb_dim=4, hidden=8, att_dim=4, readout_dim=8)
    params = init_seq2seq(cfg, seed=1)
    params.arrays["out.W"][:] = np.nan
    with pytest.raises(ad.NumericalFailure):
        train_mle(PAIRS, [], params, TrainSchedule(epochs=1, batch_size=3))


# ------------------------------------------------------------------- rollouts


def test_rollouts_with_reference():
    params, actor, critic = small_setup(dtype=np.float32)
    rng = np.random.default_rng(0)
    r, rc, eps = decode_rollouts(3, PAIRS[0].source, PAIRS[0].target, True, params, actor, critic, 0.1, rng, BleuObjective())
    assert len(r) == len(rc) == len(eps) == 4
    assert eps[-1].is_reference and r[-1] == 1.0
    assert all(0 < v < 1 for v in rc)
    r0, _, e0 = decode_rollouts(2, PAIRS[0].source, PAIRS[0].target, False, params, actor, critic, 0.0, rng, BleuObjective())
    assert e0[0].tokens == e0[1].tokens and r0[0] == r0[1]
    with pytest.raises(ValueError):
        decode_rollouts(0, PAIRS[0].source, PAIRS[0].target, False, params, actor, critic, 0.0, rng, BleuObjective())


def test_neg_perplexity_objective_scores_under_fixed_model():
    from tgd.model import force_decode

    params, actor, critic = small_setup(dtype=np.float32, bounded=False)
    obj = get_objective("neg_ppl")
    tokens = [4, 4, EOS]
    expect = force_decode(PAIRS[0].source, tokens, params).step_logprobs.mean()
    assert abs(obj.score(PAIRS[0].source, PAIRS[0].target, tokens, params) - expect) < 1e-6
    assert not obj.bounded and BleuObjective().bounded
    with pytest.raises(ValueError):
        get_objective("meteor")


def test_critic_update_isolation_and_zero_residual():
    params, actor, critic = small_setup(dtype=np.float32)
    rng = np.random.default_rng(1)
    _, _, eps = decode_rollouts(2, PAIRS[1].source, PAIRS[1].target, True, params, actor, critic, 0.1, rng, BleuObjective())
    phi_before = actor.copy()
    psi_before = critic.copy()
    for e in eps:
        e.r = e.rc
    loss = critic_update(eps, critic, OptimizerState("rmsprop"), 1e-3)
    assert loss < 1e-12
    for k in critic.names():
        assert np.allclose(critic[k], psi_before[k], atol=1e-6)
    for k in actor.names():
        assert np.array_equal(actor[k], phi_before[k])
    with pytest.raises(ContractError):
        critic_update([], critic, OptimizerState("rmsprop"), 1e-3)


def test_critic_update_reduces_loss_on_frozen_batch():
    params, actor, critic = small_setup(dtype=np.float32)
    rng = np.random.default_rng(2)
    _, _, eps = decode_rollouts(4, PAIRS[2].source, PAIRS[2].target, True, params, actor, critic, 0.5, rng, BleuObjective())
    st = OptimizerState("rmsprop")
    losses = [critic_update(eps, critic, st, 1e-3) for _ in range(50)]
    assert losses[-1] < losses[0]


# --------------------------------------------------------------- actor update


def test_weight_examples():
    w, fb = critic_aware_weights([0.0, 1.0], [0.0, 0.0], 1.0)
    assert np.allclose(w, [0.7311, 0.2689], atol=1e-4) and not fb
    w, _ = critic_aware_weights([0.3, 0.5, 0.1], [0.1, 0.3, -0.1], 0.01)
    assert np.allclose(w, 1 / 3)
    w, _ = critic_aware_weights([0.9, 0.0, 0.4], [0.0, 0.5, 0.4], 1e9)
    assert np.allclose(w, 1 / 3, atol=1e-6)


def test_weight_underflow_falls_back_to_uniform(caplog):
    w, fb = critic_aware_weights([10.0, -10.0], [0.0, 0.0], 1e-3)
    assert fb and np.array_equal(w, [0.5, 0.5])
    assert "underflow" in caplog.text


def test_weights_normalized():
    rng = np.random.default_rng(0)
    for _ in range(100):
        rc, r = rng.random(5), rng.random(5)
        w, fb = critic_aware_weights(rc, r, 10 ** rng.uniform(-3, 2))
        if not fb:
            assert abs(w.sum() - 1) < 1e-9


def test_large_tau_matches_explicit_uniform_gradient():
    params, actor, critic = small_setup()
    with ad.precision("extended"):
        rng = np.random.default_rng(3)
        src, ref = PAIRS[2]
        r, rc, eps = decode_rollouts(3, src, ref, False, params, actor, critic, 0.2, rng, BleuObjective())
        w, _ = critic_aware_weights(rc, r, 1e9)
        g_tau, _ = actor_gradient(src, eps, w, params, actor, critic, 0.2)
        g_uni, _ = actor_gradient(src, eps, np.full(3, 1 / 3), params, actor, critic, 0.2)
    for k in g_tau:
        assert np.allclose(g_tau[k], g_uni[k], atol=1e-6)


def test_replay_reproduces_rollout_states():
    params, actor, critic = small_setup()
    with ad.precision("extended"):
        rng = np.random.default_rng(4)
        src, ref = PAIRS[0]
        _, rc, eps = decode_rollouts(3, src, ref, False, params, actor, critic, 0.3, rng, BleuObjective())
        Z = ad._raw(replay_states(src, eps, params, actor.tensors(), 0.3))
        for i, e in enumerate(eps):
            assert np.allclose(Z[i, : len(e.tokens)], e.states, atol=1e-12)
        _, rc_replay = actor_gradient(src, eps, np.full(3, 1 / 3), params, actor, critic, 0.3)
        assert np.allclose(rc_replay, rc, atol=1e-12)


def test_actor_gradient_check_through_critic():
    params, actor, critic = small_setup()
    with ad.precision("extended"):
        rng = np.random.default_rng(5)
        src, ref = PAIRS[1]
        _, _, eps = decode_rollouts(2, src, ref, False, params, actor, critic, 0.3, rng, BleuObjective())
        w = np.array([0.7, 0.3])
        phi = actor.tensors()

        def f():
            Z = replay_states(src, eps, params, phi, 0.3)
            rc = critic_predict([e.reference for e in eps], Z, [e.tokens for e in eps], critic)
            return ad.scale(ad.sum_(ad.mul(rc, w)), -1.0)

        rep = ad.finite_diff_check(f, list(phi.values()), max_coords=200)
        assert rep.passed, rep


def test_actor_step_is_local_ascent_and_critic_untouched():
    params, actor, critic = small_setup()
    with ad.precision("extended"):
        rng = np.random.default_rng(6)
        src, ref = PAIRS[2]
        _, rc, eps = decode_rollouts(1, src, ref, False, params, actor, critic, 0.2, rng, BleuObjective())
        psi = critic.copy()
        info = actor_update_critic_aware(src, eps, params, actor, critic, 0.01, OptimizerState("rmsprop"), 1e-5, 0.2)
        assert np.allclose(info.weights, [1.0])
        _, rc_after = actor_gradient(src, eps, [1.0], params, actor, critic, 0.2)
        assert rc_after[0] >= rc[0] - 1e-8
        for k in critic.names():
            assert np.array_equal(critic[k], psi[k])


def test_actor_update_contracts():
    params, actor, critic = small_setup(dtype=np.float32)
    with pytest.raises(ValueError):
        actor_update_critic_aware((4,), [], params, actor, critic, 0.0, OptimizerState("rmsprop"), 1e-3, 0.1)
    with pytest.raises(ContractError):
        actor_update_critic_aware((4,), [], params, actor, critic, 0.1, OptimizerState("rmsprop"), 1e-3, 0.1)


# ---------------------------------------------------------------- outer loop


@pytest.mark.parametrize("objective", [BleuObjective(), NegPerplexityObjective()])
def test_train_actor_critic_keeps_model_frozen_and_selects_best(objective):
    params, actor, critic = small_setup(dtype=np.float32, bounded=objective.bounded)
    checksum = params.checksum()
    sched = TrainSchedule(N_c=2, N_a=1, S_c=2, S_a=2, max_cycles=6, validation_interval=2, critic_warmup=3,
                          lr_actor=1e-3, lr_critic=1e-3, seed=0)
    res = train_actor_critic(PAIRS, PAIRS, params, actor, critic, sched, objective)
    assert params.checksum() == checksum
    assert [row["cycle"] for row in res.curve] == [0, 2, 4, 6]
    assert res.best_value == max(row["val_objective"] for row in res.curve)
    from tgd.training import evaluate_decoder, objective_value

    ev = evaluate_decoder(params, PAIRS, res.actor)
    assert abs(objective_value(objective, ev) - res.best_value) < 1e-9


def test_train_actor_critic_detects_model_mutation(monkeypatch):
    import tgd.training as tr

    params, actor, critic = small_setup(dtype=np.float32)
    real = tr.critic_update

    def sneaky(*a, **k):
        params.arrays["out.b"][0] += 1.0
        return real(*a, **k)

    monkeypatch.setattr(tr, "critic_update", sneaky)
    sched = TrainSchedule(N_c=1, N_a=1, S_c=1, S_a=1, max_cycles=1, validation_interval=1, critic_warmup=0)
    with pytest.raises(ContractError):
        train_actor_critic(PAIRS, PAIRS, params, actor, critic, sched, BleuObjective())
