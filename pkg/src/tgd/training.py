"""Maximum-likelihood pretraining and critic-aware actor-critic training."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .actor import ActorParams, NoiseConfig, actor_act
from .critic import CriticParams, critic_loss, critic_predict, critic_forward
from .data import batch_iter
from .decoders import DecodeResult, greedy_decode, trainable_greedy_decode
from .metrics import corpus_bleu, neg_perplexity, sentence_bleu_smoothed
from .model import (
    BOS,
    ContractError,
    Seq2SeqParams,
    attend,
    decoder_step,
    encode_batch,
    force_decode,
    mle_loss,
    teacher_forced_states,
)
from .nn import ParamSet, pad_sequences

log = logging.getLogger(__name__)

RULES = ("rmsprop", "adadelta")


@dataclass
class TrainSchedule:
    # actor-critic
    N_c: int = 10
    N_a: int = 1
    S_c: int = 4
    S_a: int = 4
    sigma: float = 0.1
    tau: float = 0.01
    lr_actor: float = 2e-6
    lr_critic: float = 2e-4
    max_cycles: int = 1000
    validation_interval: int = 10
    critic_warmup: int = 200
    patience: int = 20
    val_size: int = 0  # 0 = whole validation split
    clip_norm: float = 5.0
    # maximum likelihood
    lr_mle: float = 1.0
    mle_rule: str = "adadelta"
    epochs: int = 10
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        for name in ("N_c", "N_a", "S_c", "S_a", "max_cycles", "validation_interval", "epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"schedule.{name} must be >= 1")
        if self.tau <= 0:
            raise ValueError("schedule.tau must be > 0")
        if self.sigma < 0:
            raise ValueError("schedule.sigma must be >= 0")
        for name in ("lr_actor", "lr_critic", "lr_mle"):
            if getattr(self, name) <= 0:
                raise ValueError(f"schedule.{name} must be > 0")
        if self.mle_rule not in RULES:
            raise ValueError(f"schedule.mle_rule must be one of {RULES}")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- optimizers


@dataclass
class OptimizerState:
    rule: str
    buffers: dict = field(default_factory=dict)
    steps: int = 0

    def __post_init__(self):
        if self.rule not in RULES:
            raise ValueError(f"unknown optimizer rule {self.rule!r}; expected one of {RULES}")


def optimizer_step(params: dict, grads: dict, state: OptimizerState, lr: float) -> None:
    """Apply one RMSProp or Adadelta update to ``params`` in place.

    rmsprop:  acc <- 0.9 acc + 0.1 g^2;  p <- p - lr g / sqrt(acc + 1e-8)
    adadelta: Eg <- rho Eg + (1 - rho) g^2;  d = -sqrt(Edx + eps) / sqrt(Eg + eps) g;
              Edx <- rho Edx + (1 - rho) d^2;  p <- p + lr d   (rho 0.95, eps 1e-6)
    """
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"optimizer_step: gradient shape {list(g.shape)} != parameter shape {list(p.shape)} for {name}")
        buf = state.buffers.get(name)
        if state.rule == "rmsprop":
            if buf is None:
                buf = state.buffers[name] = [np.zeros_like(p)]
            acc = buf[0]
            acc *= 0.9
            acc += 0.1 * g * g
            p -= (lr * g / np.sqrt(acc + 1e-8)).astype(p.dtype)
        else:
            if buf is None:
                buf = state.buffers[name] = [np.zeros_like(p), np.zeros_like(p)]
            eg, edx = buf
            eg *= 0.95
            eg += 0.05 * g * g
            d = -np.sqrt(edx + 1e-6) / np.sqrt(eg + 1e-6) * g
            edx *= 0.95
            edx += 0.05 * d * d
            p += (lr * d).astype(p.dtype)
    state.steps += 1


def _collect_grads(tensors: dict, clip_norm: float = 0.0) -> tuple[dict, float]:
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in tensors.items()}
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if not math.isfinite(norm):
        bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
        raise ad.NumericalFailure(f"non-finite gradient in {', '.join(bad)}")
    if clip_norm and norm > clip_norm:
        f = clip_norm / norm
        grads = {k: g * f for k, g in grads.items()}
    return grads, norm


# ------------------------------------------------------------------------ MLE


@dataclass
class MLEResult:
    params: Seq2SeqParams
    curve: list  # dicts: epoch, step, train_loss, valid_loss
    best_valid: float


def validation_loss(params: Seq2SeqParams, pairs, batch_size: int = 256) -> float:
    total, n = 0.0, 0
    for i in range(0, len(pairs), batch_size):
        chunk = [(p.source, p.target) for p in pairs[i : i + batch_size]]
        total += float(mle_loss(chunk, params)[0]) * len(chunk)
        n += len(chunk)
    return total / n


def train_mle(
    train_pairs,
    valid_pairs,
    params: Seq2SeqParams,
    schedule: TrainSchedule,
    max_steps: int | None = None,
    time_budget: float | None = None,
    on_epoch=None,
) -> MLEResult:
    """Minibatch training on the negative log-likelihood.

    Validation loss is measured after every epoch; the returned parameters
    are those with the lowest validation loss.
    """
    if not train_pairs:
        raise ValueError("train_mle: empty corpus")
    state = OptimizerState(schedule.mle_rule)
    start = time.perf_counter()
    curve = []
    best, best_params = math.inf, params.copy()
    step = 0
    done = False
    for epoch in range(1, schedule.epochs + 1):
        losses = []
        for batch in batch_iter(train_pairs, schedule.batch_size, seed=schedule.seed + epoch, length_sorted_chunks=20):
            T = params.tensors()
            with ad.Graph() as g:
                loss = mle_loss([(p.source, p.target) for p in batch.pairs], params, T)
                value = loss.item()
                if not math.isfinite(value):
                    raise ad.NumericalFailure(f"MLE loss diverged at step {step}: {value}")
                ad.backward(loss, g)
            grads, _ = _collect_grads(T, schedule.clip_norm)
            optimizer_step(params.arrays, grads, state, schedule.lr_mle)
            losses.append(value)
            step += 1
            if (max_steps and step >= max_steps) or (time_budget and time.perf_counter() - start > time_budget):
                done = True
                break
        vl = validation_loss(params, valid_pairs) if valid_pairs else float(np.mean(losses))
        row = dict(epoch=epoch, step=step, train_loss=float(np.mean(losses)), valid_loss=vl)
        curve.append(row)
        log.info("mle epoch %d step %d train %.4f valid %.4f", epoch, step, row["train_loss"], vl)
        if on_epoch is not None:
            on_epoch(row, params)
        if vl < best:
            best, best_params = vl, params.copy()
        if done:
            break
    return MLEResult(best_params, curve, best)


# ------------------------------------------------------------------ objectives


class Objective:
    """A decoding objective R(Y, Y_hat)."""

    name = "base"
    bounded = True

    def score(self, source, reference, tokens, params: Seq2SeqParams, logprobs=None) -> float:
        raise NotImplementedError


class BleuObjective(Objective):
    name = "bleu"
    bounded = True

    def score(self, source, reference, tokens, params, logprobs=None) -> float:
        return sentence_bleu_smoothed(tokens, reference)


class NegPerplexityObjective(Objective):
    """Length-normalized log-probability of the output under the fixed model."""

    name = "neg_ppl"
    bounded = False

    def score(self, source, reference, tokens, params, logprobs=None) -> float:
        if logprobs is None:
            logprobs = force_decode(source, tokens, params).step_logprobs
        return neg_perplexity(logprobs)


OBJECTIVES = {"bleu": BleuObjective, "neg_ppl": NegPerplexityObjective}


def get_objective(name: str) -> Objective:
    try:
        return OBJECTIVES[name]()
    except KeyError:
        raise ValueError(f"unknown objective {name!r}; expected one of {sorted(OBJECTIVES)}") from None


# -------------------------------------------------------------------- rollouts


@dataclass
class Episode:
    source: tuple
    reference: tuple
    tokens: list
    states: np.ndarray
    noise: np.ndarray | None  # per-step standard-normal draws; None for the reference episode
    r: float = 0.0
    rc: float = 0.0
    is_reference: bool = False


def decode_rollouts(
    S: int,
    source,
    reference,
    include_reference: bool,
    params: Seq2SeqParams,
    actor: ActorParams,
    critic: CriticParams,
    sigma: float,
    rng: np.random.Generator,
    objective: Objective,
):
    """``S`` noisy trainable-greedy rollouts, plus the force-fed reference if asked.

    Returns ``(r, r_c, episodes)`` with one entry per episode.
    """
    if S < 1:
        raise ValueError("decode_rollouts: S must be >= 1")
    episodes = []
    noise = NoiseConfig(sigma)
    for _ in range(S):
        res = trainable_greedy_decode(source, params, actor, noise=noise, rng=rng)
        # the objective scores the output under the unperturbed model
        r = objective.score(source, reference, res.tokens, params)
        episodes.append(Episode(tuple(source), tuple(reference), res.tokens, res.states, res.noise, r))
    if include_reference:
        forced = teacher_forced_states(source, reference, params)
        r = objective.score(source, reference, list(reference), params, logprobs=forced.step_logprobs)
        episodes.append(Episode(tuple(source), tuple(reference), list(reference), forced.states, None, r, is_reference=True))
    rc = critic_predict([e.reference for e in episodes], [e.states for e in episodes], [e.tokens for e in episodes], critic)
    for e, v in zip(episodes, rc):
        e.rc = float(v)
    return np.array([e.r for e in episodes]), np.array([e.rc for e in episodes]), episodes


def critic_update(episodes, critic: CriticParams, state: OptimizerState, lr: float, clip_norm: float = 0.0) -> float:
    """One optimizer step on the critic's squared error; returns the pre-step loss."""
    if not episodes:
        raise ContractError("critic_update: empty batch")
    psi = critic.tensors()
    with ad.Graph() as g:
        pred = critic_predict(
            [e.reference for e in episodes], [e.states for e in episodes], [e.tokens for e in episodes], critic, psi
        )
        loss = critic_loss(pred, [e.r for e in episodes], critic.config)
        value = loss.item()
        if not math.isfinite(value):
            raise ad.NumericalFailure(f"critic loss is not finite: {value}")
        ad.backward(loss, g)
    grads, _ = _collect_grads(psi, clip_norm)
    optimizer_step(critic.arrays, grads, state, lr)
    return value


def critic_aware_weights(rc, r, tau: float) -> tuple[np.ndarray, bool]:
    """Normalized weights ``exp(-(r^c - r)^2 / tau)``; uniform if all underflow."""
    d2 = (np.asarray(rc, dtype=np.float64) - np.asarray(r, dtype=np.float64)) ** 2
    w = np.exp(-d2 / tau)
    total = w.sum()
    if not np.isfinite(total) or total <= 0.0:
        log.warning("critic-aware weights underflowed (min residual^2 %.3g, tau %.3g); using uniform weights", d2.min(), tau)
        return np.full(len(d2), 1.0 / len(d2)), True
    return w / total, False


def replay_states(source, episodes, params: Seq2SeqParams, phi, sigma: float):
    """Re-run the recorded rollouts with the actor on the tape.

    Tokens and exploration noise are taken from ``episodes``; the decoder
    parameters stay constant, so gradients reach only ``phi``.  Returns a
    (B, T, H) state tensor.
    """
    p = params.arrays
    B = len(episodes)
    tok, _ = pad_sequences([e.tokens for e in episodes])
    T = tok.shape[1]
    prev = np.concatenate([np.full((B, 1), BOS, dtype=np.int64), tok[:, :-1]], axis=1)
    H = params.config.hidden
    dtype = p["dec.U_h"].dtype
    noise = np.zeros((B, T, H), dtype=dtype)
    for i, e in enumerate(episodes):
        if e.noise is not None:
            noise[i, : len(e.tokens)] = e.noise
    src = np.tile(np.asarray(source, dtype=np.int64)[None, :], (B, 1))
    enc = encode_batch(p, params.config, src, np.ones_like(src, dtype=bool))
    z = enc.init_state
    states = []
    for t in range(T):
        e_t, _ = attend(z, enc, p)
        a = actor_act(z, e_t, phi)
        if sigma > 0:
            a = ad.add(a, (sigma * noise[:, t]).astype(dtype))
        z = decoder_step(z, prev[:, t], e_t, p, a)
        states.append(z)
    return ad.stack(states, axis=1)


def actor_gradient(source, episodes, weights, params: Seq2SeqParams, actor: ActorParams, critic: CriticParams, sigma: float):
    """Gradient of ``-sum_k w_k r^c_k`` with respect to the actor's parameters.

    The critic is held fixed: its parameters enter as constants.
    """
    phi = actor.tensors()
    with ad.Graph() as g:
        Z = replay_states(source, episodes, params, phi, sigma)
        rc = critic_predict([e.reference for e in episodes], Z, [e.tokens for e in episodes], critic)
        w = np.asarray(weights, dtype=ad._raw(rc).dtype)
        loss = ad.scale(ad.sum_(ad.mul(rc, w)), -1.0)
        ad.backward(loss, g)
    return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in phi.items()}, ad._raw(rc).copy()


@dataclass
class ActorStepInfo:
    weights: np.ndarray
    residuals: np.ndarray
    fallback: bool
    grad_norm: float


def actor_update_critic_aware(
    source,
    episodes,
    params: Seq2SeqParams,
    actor: ActorParams,
    critic: CriticParams,
    tau: float,
    state: OptimizerState,
    lr: float,
    sigma: float,
    clip_norm: float = 0.0,
) -> ActorStepInfo:
    """One ascent step on the critic-weighted predicted return."""
    if tau <= 0:
        raise ValueError("tau must be > 0")
    if not episodes:
        raise ContractError("actor update needs at least one rollout")
    r = np.array([e.r for e in episodes])
    rc = np.array([e.rc for e in episodes])
    w, fallback = critic_aware_weights(rc, r, tau)
    grads, _ = actor_gradient(source, episodes, w, params, actor, critic, sigma)
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if not math.isfinite(norm):
        raise ad.NumericalFailure("non-finite actor gradient")
    if clip_norm and norm > clip_norm:
        grads = {k: g * (clip_norm / norm) for k, g in grads.items()}
    optimizer_step(actor.arrays, grads, state, lr)
    return ActorStepInfo(w, rc - r, fallback, norm)


# ------------------------------------------------------------------ evaluation


def evaluate_decoder(params: Seq2SeqParams, pairs, actor: ActorParams | None = None, beam=None) -> dict:
    """Corpus BLEU and mean negative perplexity (under the fixed model) on ``pairs``.

    Also returns per-sentence outputs for significance testing.
    """
    from .decoders import beam_search

    hyps, negppl = [], []
    for pr in pairs:
        if beam is not None:
            res = beam_search(pr.source, params, beam, actor=actor)
        elif actor is not None:
            res = trainable_greedy_decode(pr.source, params, actor)
        else:
            res = greedy_decode(pr.source, params)
        hyps.append(res.tokens)
        # rescore every condition the same way so float round-off cannot favour one
        negppl.append(neg_perplexity(force_decode(pr.source, res.tokens, params).step_logprobs))
    refs = [pr.target for pr in pairs]
    return dict(bleu=corpus_bleu(hyps, refs), neg_ppl=float(np.mean(negppl)), hyps=hyps, neg_ppl_per_sentence=negppl)


def objective_value(objective: Objective, ev: dict) -> float:
    return ev["bleu"] if objective.name == "bleu" else ev["neg_ppl"]


# ------------------------------------------------------------- actor-critic


@dataclass
class ActorCriticResult:
    actor: ActorParams
    critic: CriticParams
    curve: list  # dict rows
    best_value: float
    best_cycle: int
    baseline: dict


CURVE_FIELDS = ("cycle", "updates", "critic_mse", "val_objective", "greedy_bleu", "greedy_neg_ppl")


def train_actor_critic(
    train_pairs,
    valid_pairs,
    params: Seq2SeqParams,
    actor: ActorParams,
    critic: CriticParams,
    schedule: TrainSchedule,
    objective: Objective,
    time_budget: float | None = None,
    on_eval=None,
) -> ActorCriticResult:
    """Alternate critic and actor updates; keep the actor with the best validation objective.

    ``params`` must not change; this is verified by checksum at the end.
    """
    checksum = params.checksum()
    rng = np.random.default_rng(schedule.seed)
    d_psi = rng.permutation(len(train_pairs))
    d_phi = rng.permutation(len(train_pairs))
    ptr = {"psi": 0, "phi": 0}

    def draw(which):
        order = d_psi if which == "psi" else d_phi
        pair = train_pairs[order[ptr[which] % len(order)]]
        ptr[which] += 1
        return pair

    val = list(valid_pairs[: schedule.val_size] if schedule.val_size else valid_pairs)
    critic_state = OptimizerState("rmsprop")
    actor_state = OptimizerState("rmsprop")
    start = time.perf_counter()

    def critic_round():
        pr = draw("psi")
        _, _, eps = decode_rollouts(schedule.S_c, pr.source, pr.target, True, params, actor, critic, schedule.sigma, rng, objective)
        return critic_update(eps, critic, critic_state, schedule.lr_critic, schedule.clip_norm)

    for _ in range(schedule.critic_warmup):
        critic_round()

    baseline = evaluate_decoder(params, val)
    ev0 = evaluate_decoder(params, val, actor)
    best_value, best_cycle, best_actor = objective_value(objective, ev0), 0, actor.copy()
    curve = [dict(cycle=0, updates=0, critic_mse=float("nan"), val_objective=best_value,
                  greedy_bleu=ev0["bleu"], greedy_neg_ppl=ev0["neg_ppl"])]
    if on_eval is not None:
        on_eval(curve[-1])
    stale = 0
    updates = 0
    mse_window: list[float] = []
    for cycle in range(1, schedule.max_cycles + 1):
        for _ in range(schedule.N_c):
            mse_window.append(critic_round())
        for _ in range(schedule.N_a):
            pr = draw("phi")
            _, _, eps = decode_rollouts(schedule.S_a, pr.source, pr.target, False, params, actor, critic, schedule.sigma, rng, objective)
            actor_update_critic_aware(pr.source, eps, params, actor, critic, schedule.tau, actor_state,
                                      schedule.lr_actor, schedule.sigma, schedule.clip_norm)
            updates += 1
        out_of_time = time_budget is not None and time.perf_counter() - start > time_budget
        if cycle % schedule.validation_interval == 0 or cycle == schedule.max_cycles or out_of_time:
            ev = evaluate_decoder(params, val, actor)
            value = objective_value(objective, ev)
            row = dict(cycle=cycle, updates=updates, critic_mse=float(np.mean(mse_window)), val_objective=value,
                       greedy_bleu=ev["bleu"], greedy_neg_ppl=ev["neg_ppl"])
            curve.append(row)
            mse_window = []
            log.info("cycle %d critic_mse %.5f val %.5f bleu %.4f negppl %.4f", cycle, row["critic_mse"], value, ev["bleu"], ev["neg_ppl"])
            if on_eval is not None:
                on_eval(row)
            if value > best_value:
                best_value, best_cycle, best_actor = value, cycle, actor.copy()
                stale = 0
            else:
                stale += 1
                if schedule.patience and stale >= schedule.patience:
                    break
        if out_of_time:
            break
    if params.checksum() != checksum:
        raise ContractError("translation model parameters changed during actor-critic training")
    return ActorCriticResult(best_actor, critic, curve, best_value, best_cycle, dict(bleu=baseline["bleu"], neg_ppl=baseline["neg_ppl"]))
