"""Attention-based GRU encoder-decoder translation model.

The decoder transition is ``z_t = f(z_{t-1} + a_t, y_{t-1}, e_t)`` where
``a_t`` is an optional perturbation (NPAD noise or an actor's action) and
``e_t`` is the attention context computed from the unperturbed ``z_{t-1}``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .actor import actor_act
from .nn import (
    ContractError,
    CALLS,
    ParamSet,
    additive_attention,
    bigru_encode,
    glorot,
    init_gru,
    input_projection,
    gru_step,
    mask_bias,
    masked_mean,
    pad_sequences,
)

PAD, BOS, EOS, UNK = 0, 1, 2, 3




@dataclass(frozen=True)
class Seq2SeqConfig:
    src_vocab: int
    tgt_vocab: int
    emb_dim: int = 32
    hidden: int = 64
    att_dim: int = 64
    readout_dim: int = 64
    max_len_train: int = 20
    max_len_decode: int = 40

    @property
    def context_dim(self) -> int:
        return 2 * self.hidden

    def to_dict(self) -> dict:
        return asdict(self)


# Documented presets; the full-scale one is far too large for the desk runs.
PRESETS = {
    "desk": dict(emb_dim=32, hidden=64, att_dim=64, readout_dim=64, max_len_train=20, max_len_decode=40),
    "full": dict(emb_dim=512, hidden=1028, att_dim=1028, readout_dim=512, max_len_train=50, max_len_decode=200),
}


class Seq2SeqParams(ParamSet):
    kind = "nmt"


def init_seq2seq(config: Seq2SeqConfig, seed: int = 0, dtype=None) -> Seq2SeqParams:
    dtype = dtype or ad.default_dtype()
    rng = np.random.default_rng(seed)
    E, H, A, R = config.emb_dim, config.hidden, config.att_dim, config.readout_dim
    C = config.context_dim
    a: dict[str, np.ndarray] = {}
    a["src_emb"] = (rng.standard_normal((config.src_vocab, E)) * 0.1).astype(dtype)
    a["tgt_emb"] = (rng.standard_normal((config.tgt_vocab, E)) * 0.1).astype(dtype)
    init_gru(a, "enc.fwd", E, H, rng, dtype)
    init_gru(a, "enc.bwd", E, H, rng, dtype)
    a["att.W_ann"] = glorot(rng, (C, A), dtype)
    a["att.W_z"] = glorot(rng, (H, A), dtype)
    a["att.v"] = glorot(rng, (A, 1), dtype)
    a["init.W"] = glorot(rng, (C, H), dtype)
    a["init.b"] = np.zeros(H, dtype=dtype)
    init_gru(a, "dec", E + C, H, rng, dtype)
    a["out.W_h"] = glorot(rng, (H + C, R), dtype)
    a["out.b_h"] = np.zeros(R, dtype=dtype)
    a["out.W"] = glorot(rng, (R, config.tgt_vocab), dtype)
    a["out.b"] = np.zeros(config.tgt_vocab, dtype=dtype)
    return Seq2SeqParams(config, a)


class EncodedSource(NamedTuple):
    annotations: object  # (B, S, 2H)
    keys: object  # (B, S, A), annotations projected for attention
    mask: np.ndarray  # (B, S) bool
    bias: np.ndarray  # (B, S) additive attention mask
    init_state: object  # (B, H)

    @property
    def length(self) -> int:
        return self.mask.shape[1]


def _check_ids(ids: np.ndarray, vocab: int, what: str):
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"{what}: token id {int(ids.max())} outside vocabulary of size {vocab}")


def encode_batch(p, config: Seq2SeqConfig, src_ids: np.ndarray, src_mask: np.ndarray) -> EncodedSource:
    """Encode a padded batch of sources; ``p`` maps names to arrays or Tensors."""
    if src_ids.shape[1] == 0 or not src_mask.any(axis=1).all():
        raise ContractError("encode: every source needs at least one token")
    _check_ids(src_ids, config.src_vocab, "encode")
    emb = ad.embedding(p["src_emb"], src_ids)
    ann = bigru_encode(p, "enc", emb, src_mask, config.hidden)
    keys = ad.matmul(ann, p["att.W_ann"])
    z0 = ad.tanh(ad.add(ad.matmul(masked_mean(ann, src_mask), p["init.W"]), p["init.b"]))
    dtype = ad._raw(ann).dtype
    return EncodedSource(ann, keys, src_mask, mask_bias(src_mask, dtype), z0)


def encode(source, params: Seq2SeqParams, p=None) -> EncodedSource:
    """Encode one token sequence (batch of one)."""
    src = np.asarray(source, dtype=np.int64).reshape(1, -1)
    if src.shape[1] < 1:
        raise ContractError("encode: empty source")
    return encode_batch(params.arrays if p is None else p, params.config, src, np.ones_like(src, dtype=bool))


def attend(z_prev, enc: EncodedSource, p):
    """Context vector e_t (B, 2H) and attention weights (B, S)."""
    if not enc.mask.any(axis=1).all():
        raise ContractError("attend: all source positions are masked")
    return additive_attention(z_prev, enc.keys, enc.annotations, enc.bias, p["att.W_z"], p["att.v"])


def decoder_step(z_prev, y_prev, e_t, p, perturbation=None):
    """``z_t = f(z_{t-1} + perturbation, y_{t-1}, e_t)`` for a batch."""
    if perturbation is not None:
        if ad._raw(perturbation).shape != ad._raw(z_prev).shape:
            raise ContractError(
                f"decoder_step: perturbation shape {list(ad._raw(perturbation).shape)} "
                f"does not match state shape {list(ad._raw(z_prev).shape)}"
            )
        z_prev = ad.add(z_prev, perturbation)
    y = ad.embedding(p["tgt_emb"], np.asarray(y_prev, dtype=np.int64).reshape(-1))
    x = ad.concat([y, e_t], axis=-1)
    return gru_step(p, "dec", z_prev, input_projection(p, "dec", x))


def readout_logits(z_t, e_t, p):
    h = ad.tanh(ad.add(ad.matmul(ad.concat([z_t, e_t], axis=-1), p["out.W_h"]), p["out.b_h"]))
    return ad.add(ad.matmul(h, p["out.W"]), p["out.b"])


def readout(z_t, e_t, p):
    """Log-probabilities over the target vocabulary, shape (B, V)."""
    CALLS["readout"] += 1
    return ad.log_softmax(readout_logits(z_t, e_t, p), axis=-1)


class ForcedPath(NamedTuple):
    states: np.ndarray  # (T, H)
    contexts: np.ndarray  # (T, 2H)
    actions: np.ndarray  # (T, H)
    step_logprobs: np.ndarray  # (T,)

    @property
    def total_logprob(self) -> float:
        return float(self.step_logprobs.sum())


def teacher_forced_states(source, reference, params: Seq2SeqParams, actor=None) -> ForcedPath:
    """Run the decoder on the reference tokens regardless of its own argmax.

    ``reference`` must end with the end-of-sentence id.  With an actor its
    perturbations are applied at every step.
    """
    ref = [int(t) for t in reference]
    if not ref or ref[-1] != EOS:
        raise ContractError("teacher_forced_states: reference must end with the end-of-sentence token")
    return force_decode(source, ref, params, actor)


def force_decode(source, tokens, params: Seq2SeqParams, actor=None) -> ForcedPath:
    """Feed ``tokens`` as decoder inputs; no end-token requirement."""
    ref = [int(t) for t in tokens]
    p = params.arrays
    enc = encode(source, params)
    z = enc.init_state
    y_prev = BOS
    states, ctxs, acts, lps = [], [], [], []
    for y in ref:
        e, _ = attend(z, enc, p)
        a = None
        if actor is not None:
            a = actor_act(z, e, actor.arrays)
        z = decoder_step(z, [y_prev], e, p, a)
        logp = readout(z, e, p)
        states.append(z[0])
        ctxs.append(e[0])
        acts.append(np.zeros_like(z[0]) if a is None else a[0])
        lps.append(logp[0, y])
        y_prev = y
    return ForcedPath(np.stack(states), np.stack(ctxs), np.stack(acts), np.array(lps))


def sequence_logprobs(p, config: Seq2SeqConfig, sources, targets):
    """Per-sentence teacher-forced ``sum_t log p(y_t | y_<t, X)`` for a batch.

    ``targets`` end with the end token.  Returns a (B,) array or Tensor.
    """
    src_ids, src_mask = pad_sequences(sources)
    tgt_out, tgt_mask = pad_sequences(targets)
    _check_ids(tgt_out, config.tgt_vocab, "sequence_logprobs")
    B, T = tgt_out.shape
    tgt_in = np.concatenate([np.full((B, 1), BOS, dtype=np.int64), tgt_out[:, :-1]], axis=1)
    enc = encode_batch(p, config, src_ids, src_mask)
    dtype = ad._raw(enc.annotations).dtype
    z = enc.init_state
    total = None
    for t in range(T):
        e, _ = attend(z, enc, p)
        z_new = decoder_step(z, tgt_in[:, t], e, p)
        if not tgt_mask[:, t].all():
            col = tgt_mask[:, t : t + 1].astype(dtype)
            z_new = ad.add(z, ad.mul(ad.sub(z_new, z), col))
        logp = ad.pick(readout(z_new, e, p), tgt_out[:, t])
        if not tgt_mask[:, t].all():
            logp = ad.mul(logp, tgt_mask[:, t].astype(dtype))
        total = logp if total is None else ad.add(total, logp)
        z = z_new
    return total


def mle_loss(pairs, params: Seq2SeqParams, p=None):
    """Mean over the batch of per-sentence negative log-likelihood.

    ``pairs`` is a sequence of ``(source, target)`` with targets ending in
    the end token.  Pass ``p=params.tensors()`` to obtain a differentiable
    loss.
    """
    if not pairs:
        raise ContractError("mle_loss: empty batch")
    p = params.arrays if p is None else p
    cap = params.config.max_len_train
    for s, t in pairs:
        if len(s) > cap or len(t) > cap + 1:
            raise ContractError(f"mle_loss: sequence longer than configured cap {cap}")
    lp = sequence_logprobs(p, params.config, [s for s, _ in pairs], [t for _, t in pairs])
    return ad.scale(ad.mean(lp), -1.0)


def score_sequences(params: Seq2SeqParams, source, hypotheses) -> list[np.ndarray]:
    """Per-step log-probabilities of each hypothesis under the unperturbed model."""
    return [force_decode(source, hyp, params).step_logprobs for hyp in hypotheses]
