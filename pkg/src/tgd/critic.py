"""Return regressor that reads a reference and a decoded state sequence.

The reference is encoded by a bidirectional GRU.  A second GRU walks the
trajectory; at step ``t`` its input is ``[z_t; emb(y_t); c_t]`` where
``c_t`` attends over the reference annotations; the token embedding can be
switched off so that the return must be read from the states alone.  The head reads the final
trajectory state together with its attention context and emits a scalar,
squashed by a sigmoid for bounded returns (BLEU) or left linear and
rescaled for unbounded ones (negative perplexity).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .model import ContractError
from .nn import (
    ParamSet,
    additive_attention,
    bigru_encode,
    glorot,
    gru_step,
    init_gru,
    mask_bias,
    masked_mean,
    pad_sequences,
)


@dataclass(frozen=True)
class CriticConfig:
    vocab: int
    state_dim: int
    emb_dim: int = 32
    hidden: int = 64
    att_dim: int = 64
    head_dim: int = 64
    bounded: bool = True
    scale: float = 10.0  # divisor for unbounded targets
    use_tokens: bool = True  # False: trajectory input is [z_t; c_t] only

    @property
    def output_scale(self) -> float:
        return 1.0 if self.bounded else self.scale

    def to_dict(self) -> dict:
        return asdict(self)


class CriticParams(ParamSet):
    kind = "critic"


def critic_init(config: CriticConfig, seed: int = 0, dtype=None) -> CriticParams:
    dtype = dtype or ad.default_dtype()
    rng = np.random.default_rng(seed)
    E, H, A, Z = config.emb_dim, config.hidden, config.att_dim, config.state_dim
    a: dict[str, np.ndarray] = {}
    a["emb"] = (rng.standard_normal((config.vocab, E)) * 0.1).astype(dtype)
    init_gru(a, "ref.fwd", E, H, rng, dtype)
    init_gru(a, "ref.bwd", E, H, rng, dtype)
    a["att.W_ann"] = glorot(rng, (2 * H, A), dtype)
    a["att.W_s"] = glorot(rng, (H, A), dtype)
    a["att.v"] = glorot(rng, (A, 1), dtype)
    a["init.W"] = glorot(rng, (2 * H, H), dtype)
    a["init.b"] = np.zeros(H, dtype=dtype)
    init_gru(a, "traj", Z + (E if config.use_tokens else 0), H, rng, dtype)
    a["traj.Wc"] = glorot(rng, (2 * H, 3 * H), dtype)
    a["head.W"] = glorot(rng, (3 * H, config.head_dim), dtype)
    a["head.b"] = np.zeros(config.head_dim, dtype=dtype)
    a["head.w"] = glorot(rng, (config.head_dim, 1), dtype)
    a["head.b_out"] = np.zeros(1, dtype=dtype)
    return CriticParams(config, a)


def _pad_states(states, T: int):
    """Stack per-episode (T_k, H) states into (B, T, H), zero-padding."""
    rows = []
    for s in states:
        n = ad._raw(s).shape[0]
        if n < T:
            s = ad.concat([s, np.zeros((T - n, ad._raw(s).shape[1]), dtype=ad._raw(s).dtype)], axis=0)
        rows.append(s)
    return ad.stack(rows, axis=0)


def critic_forward(psi, config: CriticConfig, references, states, tokens):
    """Raw head values (B,) for a batch of episodes, before output scaling.

    ``states`` is either a list of per-episode (T_k, H) arrays/Tensors or a
    padded (B, T, H) array/Tensor whose valid lengths come from ``tokens``.
    """
    if not tokens or any(len(t) == 0 for t in tokens):
        raise ContractError("critic: empty trajectory")
    if any(len(r) == 0 for r in references):
        raise ContractError("critic: empty reference")
    ref_ids, ref_mask = pad_sequences(references)
    tok_ids, tok_mask = pad_sequences(tokens)
    B, T = tok_ids.shape
    H = config.hidden
    if isinstance(states, (list, tuple)):
        Z = _pad_states(states, T)
    else:
        Z = states
    if ad._raw(Z).shape[:2] != (B, T) or ad._raw(Z).shape[2] != config.state_dim:
        raise ContractError(f"critic: states shape {list(ad._raw(Z).shape)} does not match trajectories ({B}, {T}, {config.state_dim})")
    emb_ref = ad.embedding(psi["emb"], ref_ids)
    ann = bigru_encode(psi, "ref", emb_ref, ref_mask, H)
    dtype = ad._raw(ann).dtype
    keys = ad.matmul(ann, psi["att.W_ann"])
    bias = mask_bias(ref_mask, dtype)
    s = ad.tanh(ad.add(ad.matmul(masked_mean(ann, ref_mask), psi["init.W"]), psi["init.b"]))
    x = ad.concat([Z, ad.embedding(psi["emb"], tok_ids)], axis=-1) if config.use_tokens else Z
    xproj = ad.add(ad.matmul(x, psi["traj.Wx"]), psi["traj.b"])
    cols = tok_mask[:, :, None].astype(dtype)
    for t in range(T):
        c, _ = additive_attention(s, keys, ann, bias, psi["att.W_s"], psi["att.v"])
        xp = ad.add(ad.slice_(xproj, (slice(None), t)), ad.matmul(c, psi["traj.Wc"]))
        s = gru_step(psi, "traj", s, xp, None if tok_mask[:, t].all() else cols[:, t])
    c, _ = additive_attention(s, keys, ann, bias, psi["att.W_s"], psi["att.v"])
    h = ad.tanh(ad.add(ad.matmul(ad.concat([s, c], axis=-1), psi["head.W"]), psi["head.b"]))
    out = ad.reshape(ad.add(ad.matmul(h, psi["head.w"]), psi["head.b_out"]), (B,))
    if config.bounded:
        return ad.sigmoid(out)
    return out


def critic_predict(references, states, tokens, critic: CriticParams, psi=None):
    """Predicted returns for a batch of episodes, in the objective's own units.

    Pass ``psi=critic.tensors()`` (or Tensor states) for a differentiable
    result; otherwise a plain array is returned.
    """
    psi = critic.arrays if psi is None else psi
    out = critic_forward(psi, critic.config, references, states, tokens)
    k = critic.config.output_scale
    return out if k == 1.0 else ad.scale(out, k)


def critic_loss(predicted, targets, config: CriticConfig):
    """``sum_k (r^c_k - r_k)^2 / n`` with residuals measured in head units.

    For bounded objectives head units are the objective's units; unbounded
    targets are divided by ``config.scale`` first.
    """
    r = np.asarray(targets, dtype=ad._raw(predicted).dtype)
    if r.size == 0:
        raise ContractError("critic_loss: empty batch")
    k = config.output_scale
    pred = predicted if k == 1.0 else ad.scale(predicted, 1.0 / k)
    r = r / k
    return ad.mean(ad.squared_error(pred, r))
