"""Inference strategies: greedy, beam search, NPAD and trainable greedy decoding."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .actor import ActorParams, NoiseConfig, actor_act, actor_act_noisy
from .model import EOS, BOS, ContractError, Seq2SeqParams, attend, decoder_step, encode, force_decode, readout
from .metrics import influence_kl, INFLUENCE_THRESHOLD


@dataclass
class DecodeResult:
    tokens: list[int]
    step_logprobs: np.ndarray
    states: np.ndarray  # (T, H)
    contexts: np.ndarray  # (T, 2H)
    actions: np.ndarray  # (T, H); zeros without an actor
    noise: np.ndarray  # (T, H); the standard-normal draws scaled into actions
    truncated: bool = False
    total_logprob: float = field(init=False)

    def __post_init__(self):
        self.total_logprob = float(np.sum(self.step_logprobs))

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def stripped(self) -> list[int]:
        """Tokens without the trailing end-of-sentence id."""
        return self.tokens[:-1] if self.tokens and self.tokens[-1] == EOS else list(self.tokens)


@dataclass(frozen=True)
class BeamConfig:
    K: int = 5
    max_len: int = 40

    def __post_init__(self):
        if self.K < 1:
            raise ValueError(f"beam width must be >= 1, got {self.K}")
        if self.max_len < 1:
            raise ValueError(f"max_len must be >= 1, got {self.max_len}")


@dataclass(frozen=True)
class NpadConfig:
    sigma0: float = 0.5
    num_parallel: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.sigma0 < 0:
            raise ValueError(f"sigma0 must be >= 0, got {self.sigma0}")
        if self.num_parallel < 1:
            raise ValueError(f"num_parallel must be >= 1, got {self.num_parallel}")


def _max_len(params: Seq2SeqParams, max_len: int | None) -> int:
    n = params.config.max_len_decode if max_len is None else max_len
    if n < 1:
        raise ValueError(f"max_len must be >= 1, got {n}")
    return n


def _run_greedy(source, params, max_len, actor=None, sigma=0.0, rng=None, npad_sigma0=0.0):
    p = params.arrays
    phi = actor.arrays if actor is not None else None
    if phi is not None and phi["W2"].shape[1] != params.config.hidden:
        raise ContractError(
            f"actor output dim {phi['W2'].shape[1]} does not match decoder hidden size {params.config.hidden}"
        )
    enc = encode(source, params)
    z = enc.init_state
    H = z.shape[1]
    y = BOS
    tokens, lps, states, ctxs, acts, noise = [], [], [], [], [], []
    for t in range(1, max_len + 1):
        e, _ = attend(z, enc, p)
        if phi is not None:
            a, eps = actor_act_noisy(z, e, phi, sigma, rng)
        elif npad_sigma0 > 0:
            eps = rng.standard_normal((1, H)).astype(z.dtype)
            a = (npad_sigma0 / t) * eps
        else:
            a, eps = None, None
        z = decoder_step(z, [y], e, p, a)
        logp = readout(z, e, p)[0]
        y = int(np.argmax(logp))
        tokens.append(y)
        lps.append(logp[y])
        states.append(z[0])
        ctxs.append(e[0])
        acts.append(np.zeros(H, dtype=z.dtype) if a is None else a[0])
        noise.append(np.zeros(H, dtype=z.dtype) if eps is None else eps[0])
        if y == EOS:
            break
    return DecodeResult(
        tokens,
        np.asarray(lps),
        np.stack(states),
        np.stack(ctxs),
        np.stack(acts),
        np.stack(noise),
        truncated=tokens[-1] != EOS,
    )


def greedy_decode(source, params: Seq2SeqParams, max_len: int | None = None) -> DecodeResult:
    """Pick the most probable token at each step (lowest id on ties)."""
    return _run_greedy(source, params, _max_len(params, max_len))


def trainable_greedy_decode(
    source,
    params: Seq2SeqParams,
    actor: ActorParams,
    noise: NoiseConfig | None = None,
    max_len: int | None = None,
    rng: np.random.Generator | None = None,
) -> DecodeResult:
    """Greedy decoding with the actor perturbing the state before each transition.

    With ``noise.sigma > 0`` a fresh standard-normal vector is drawn per step
    from ``rng`` (or from a generator seeded with ``noise.seed``).
    """
    sigma = 0.0 if noise is None else noise.sigma
    if sigma > 0 and rng is None:
        rng = np.random.default_rng(noise.seed)
    return _run_greedy(source, params, _max_len(params, max_len), actor=actor, sigma=sigma, rng=rng)


def npad_decode(source, params: Seq2SeqParams, cfg: NpadConfig, max_len: int | None = None) -> DecodeResult:
    """Noisy parallel approximate decoding; keeps the run with highest log-probability.

    Run ``k`` adds ``N(0, (sigma0 / t)^2)`` noise to ``z_{t-1}`` at step ``t``.
    Candidates are rescored under the noise-free model, and the returned
    log-probabilities are those clean scores.
    """
    n = _max_len(params, max_len)
    rng = np.random.default_rng(cfg.seed)
    best = None
    for _ in range(cfg.num_parallel):
        res = _run_greedy(source, params, n, rng=rng, npad_sigma0=cfg.sigma0)
        if cfg.sigma0 > 0:
            res = replace(res, step_logprobs=force_decode(source, res.tokens, params).step_logprobs)
        if best is None or res.total_logprob > best.total_logprob:
            best = res
    return best


@dataclass
class _Hyp:
    score: float
    tokens: list
    lps: list
    states: list
    ctxs: list
    acts: list
    z: np.ndarray


def beam_search(
    source,
    params: Seq2SeqParams,
    cfg: BeamConfig,
    actor: ActorParams | None = None,
    return_finished: bool = False,
):
    """Beam search scored by raw total log-probability.

    Each step keeps the ``K`` best unfinished expansions; expansions that emit
    the end token and rank within the top ``K`` overall are moved to the
    finished pool.  Search stops once ``K`` hypotheses have finished, none
    remain live, or ``max_len`` is hit.
    Ties go to the earlier hypothesis, then the lower token id.
    """
    p = params.arrays
    phi = actor.arrays if actor is not None else None
    enc1 = encode(source, params)
    K = cfg.K
    z0 = enc1.init_state
    live = [_Hyp(0.0, [], [], [], [], [], z0[0])]
    finished: list[_Hyp] = []
    for _ in range(cfg.max_len):
        n = len(live)
        Z = np.stack([h.z for h in live])
        enc = enc1 if n == 1 else enc1._replace(
            annotations=np.repeat(enc1.annotations, n, axis=0),
            keys=np.repeat(enc1.keys, n, axis=0),
            mask=np.repeat(enc1.mask, n, axis=0),
            bias=np.repeat(enc1.bias, n, axis=0),
        )
        E, _ = attend(Z, enc, p)
        A = actor_act(Z, E, phi) if phi is not None else None
        prev = [h.tokens[-1] if h.tokens else BOS for h in live]
        Znew = decoder_step(Z, prev, E, p, A)
        logp = readout(Znew, E, p)
        V = logp.shape[1]
        scores = np.array([h.score for h in live])[:, None] + logp
        flat = scores.reshape(-1)
        # stable sort: earlier hypothesis, then lower token id, on ties
        order = np.argsort(-flat, kind="stable")
        new_live = []
        for rank, idx in enumerate(order):
            if len(new_live) >= K and rank >= K:
                break
            i, y = divmod(int(idx), V)
            h = live[i]
            child = _Hyp(
                float(flat[idx]),
                h.tokens + [y],
                h.lps + [float(logp[i, y])],
                h.states + [Znew[i]],
                h.ctxs + [E[i]],
                h.acts + [A[i] if A is not None else np.zeros_like(Znew[i])],
                Znew[i],
            )
            if y == EOS:
                if rank < K and len(finished) < K:
                    finished.append(child)
            elif len(new_live) < K:
                new_live.append(child)
        live = new_live
        if len(finished) >= K or not live:
            break
    truncated = not finished
    pool = finished if finished else live
    best = max(pool, key=lambda h: h.score)  # max() keeps the first of equal scores
    result = DecodeResult(
        best.tokens,
        np.asarray(best.lps),
        np.stack(best.states),
        np.stack(best.ctxs),
        np.stack(best.acts),
        np.zeros((len(best.tokens), z0.shape[1]), dtype=z0.dtype),
        truncated=truncated,
    )
    if return_finished:
        return result, [f.tokens for f in finished]
    return result


@dataclass
class InfluenceStep:
    token: int
    kl: float
    influenced: bool


def influence_profile(source, params: Seq2SeqParams, actor: ActorParams, max_len: int | None = None):
    """Per-step KL between the next-token distributions without and with the actor.

    Both distributions share the previous state and token of the actor-driven
    trajectory; only the perturbation differs.
    """
    res = trainable_greedy_decode(source, params, actor, max_len=max_len)
    p = params.arrays
    enc = encode(source, params)
    z = enc.init_state
    y = BOS
    out = []
    for t, tok in enumerate(res.tokens):
        e, _ = attend(z, enc, p)
        a = actor_act(z, e, actor.arrays)
        plain = readout(decoder_step(z, [y], e, p), e, p)[0]
        z = decoder_step(z, [y], e, p, a)
        steered = readout(z, e, p)[0]
        kl = influence_kl(plain, steered)
        out.append(InfluenceStep(tok, kl, kl > INFLUENCE_THRESHOLD))
        y = tok
    return res, out
