"""Building blocks shared by the translation model and the critic.

Parameters live in flat ``name -> array`` dictionaries.  The same functions
run on raw arrays (inference) or on :class:`~tgd.autodiff.Tensor` values
(training), see :mod:`tgd.autodiff`.
"""
from __future__ import annotations

import hashlib
from collections import Counter

import numpy as np

from . import autodiff as ad

NEG_INF = -1e9

# Instrumentation for operation-count properties (readout / actor calls).
CALLS: Counter = Counter()


class ContractError(ValueError):
    """Raised when an operation's documented precondition is violated."""


class ParamSet:
    """Named parameter arrays plus the config that shaped them."""

    kind = "generic"

    def __init__(self, config, arrays: dict[str, np.ndarray]):
        self.config = config
        self.arrays = dict(arrays)

    def __getitem__(self, name):
        return self.arrays[name]

    def names(self) -> list[str]:
        return list(self.arrays)

    def tensors(self, requires_grad: bool = True) -> dict[str, ad.Tensor]:
        """Tensor views of the parameters (shared memory in matching precision)."""
        return {k: ad.Tensor(v, requires_grad=requires_grad, name=k) for k, v in self.arrays.items()}

    def astype(self, dtype) -> "ParamSet":
        return type(self)(self.config, {k: v.astype(dtype) for k, v in self.arrays.items()})

    def copy(self) -> "ParamSet":
        return type(self)(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.arrays):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.arrays[k]).tobytes())
        return h.hexdigest()

    def num_params(self) -> int:
        return sum(v.size for v in self.arrays.values())


def glorot(rng, shape, dtype):
    limit = np.sqrt(6.0 / (shape[0] + shape[-1]))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def orthogonal(rng, n, dtype):
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return (q * np.sign(np.diag(r))).astype(dtype)


def init_gru(arrays, prefix, in_dim, hidden, rng, dtype):
    arrays[f"{prefix}.Wx"] = glorot(rng, (in_dim, 3 * hidden), dtype)
    arrays[f"{prefix}.U_rz"] = np.concatenate([orthogonal(rng, hidden, dtype), orthogonal(rng, hidden, dtype)], axis=1)
    arrays[f"{prefix}.U_h"] = orthogonal(rng, hidden, dtype)
    arrays[f"{prefix}.b"] = np.zeros(3 * hidden, dtype=dtype)


def gru_step(p, prefix, h, xproj, mask=None):
    """One GRU update given the input projection ``x @ Wx + b``.

    Gate layout along the last axis of ``xproj`` is ``[reset | update | candidate]``.
    ``mask`` is an optional ``(B, 1)`` column; rows with 0 keep ``h``.
    """
    H = h.shape[-1]
    rz = ad.sigmoid(ad.add(ad.slice_(xproj, (slice(None), slice(0, 2 * H))), ad.matmul(h, p[f"{prefix}.U_rz"])))
    r = ad.slice_(rz, (slice(None), slice(0, H)))
    u = ad.slice_(rz, (slice(None), slice(H, 2 * H)))
    cand = ad.tanh(ad.add(ad.slice_(xproj, (slice(None), slice(2 * H, 3 * H))), ad.matmul(ad.mul(r, h), p[f"{prefix}.U_h"])))
    if mask is not None:
        u = ad.mul(u, mask)
    return ad.add(h, ad.mul(u, ad.sub(cand, h)))


def input_projection(p, prefix, x):
    return ad.add(ad.matmul(x, p[f"{prefix}.Wx"]), p[f"{prefix}.b"])


def bigru_encode(p, prefix, emb, mask, hidden):
    """Bidirectional GRU over ``emb`` (B, S, E); returns annotations (B, S, 2H)."""
    B, S = mask.shape
    dtype = ad._raw(emb).dtype
    xf = input_projection(p, f"{prefix}.fwd", emb)
    xb = input_projection(p, f"{prefix}.bwd", emb)
    cols = mask[:, :, None].astype(dtype)
    full = bool(mask.all())
    h = np.zeros((B, hidden), dtype=dtype)
    fwd = []
    for t in range(S):
        h = gru_step(p, f"{prefix}.fwd", h, ad.slice_(xf, (slice(None), t)), None if full else cols[:, t])
        fwd.append(h)
    h = np.zeros((B, hidden), dtype=dtype)
    bwd = [None] * S
    for t in range(S - 1, -1, -1):
        h = gru_step(p, f"{prefix}.bwd", h, ad.slice_(xb, (slice(None), t)), None if full else cols[:, t])
        bwd[t] = h
    return ad.concat([ad.stack(fwd, axis=1), ad.stack(bwd, axis=1)], axis=-1)


def masked_mean(ann, mask):
    """Mean over valid positions of (B, S, D) annotations."""
    dtype = ad._raw(ann).dtype
    cols = mask[:, :, None].astype(dtype)
    total = ad.sum_(ad.mul(ann, cols), axis=1)
    inv_len = (1.0 / mask.sum(axis=1, keepdims=True)).astype(dtype)
    return ad.mul(total, inv_len)


def mask_bias(mask, dtype):
    return np.where(mask, 0.0, NEG_INF).astype(dtype)


def additive_attention(query, keys, values, bias, w_query, v):
    """Bahdanau-style attention.

    ``keys`` are pre-projected annotations (B, S, A), ``values`` the raw
    annotations (B, S, D), ``bias`` a (B, S) additive mask.  Returns the
    context (B, D) and the weights (B, S).
    """
    B, S, A = ad._raw(keys).shape
    q = ad.reshape(ad.matmul(query, w_query), (B, 1, A))
    if S > 1:
        q = ad.repeat(q, S, axis=1)
    scores = ad.reshape(ad.matmul(ad.tanh(ad.add(keys, q)), v), (B, S))
    alpha = ad.softmax(ad.add(scores, bias), axis=-1)
    ctx = ad.reshape(ad.matmul(ad.reshape(alpha, (B, 1, S)), values), (B, ad._raw(values).shape[-1]))
    return ctx, alpha


def pad_sequences(seqs, pad_id: int = 0):
    """Right-pad integer sequences; returns (ids (B, T), mask (B, T))."""
    T = max(len(s) for s in seqs)
    ids = np.full((len(seqs), T), pad_id, dtype=np.int64)
    mask = np.zeros((len(seqs), T), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask
