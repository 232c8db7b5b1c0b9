"""
Greedy, beam and noisy decoding on a random model
=================================================

A tiny untrained translation model is enough to see how the decoders relate.
Beam search with a single hypothesis, NPAD with no noise and trainable
greedy decoding with an all-zero actor all collapse to plain greedy decoding.
"""

###########################################################################
# Build a random model with a 6-symbol target vocabulary.

import numpy as np

from tgd.actor import ActorConfig, actor_init
from tgd.decoders import BeamConfig, NpadConfig, beam_search, greedy_decode, npad_decode, trainable_greedy_decode
from tgd.model import Seq2SeqConfig, init_seq2seq

cfg = Seq2SeqConfig(src_vocab=9, tgt_vocab=6, emb_dim=8, hidden=12, att_dim=8, readout_dim=8, max_len_decode=8)
params = init_seq2seq(cfg, seed=3)
params.arrays["out.W"] *= 4.0  # sharper distributions make the search differences visible
source = [4, 5, 6, 7]

###########################################################################
# Greedy picks the argmax at each step.  Wider beams can only match or
# beat its total log-probability.

g = greedy_decode(source, params)
print("greedy", g.tokens, round(g.total_logprob, 4))
for k in (1, 2, 5):
    b = beam_search(source, params, BeamConfig(k, 8))
    print(f"beam-{k}", b.tokens, round(b.total_logprob, 4))

###########################################################################
# The degenerate cases coincide token for token.

zero = actor_init(ActorConfig(cfg.hidden, cfg.context_dim), init_scale=0.0)
print(npad_decode(source, params, NpadConfig(0.0, 5)).tokens == g.tokens)
print(trainable_greedy_decode(source, params, zero).tokens == g.tokens)

###########################################################################
# Noise on the hidden state explores nearby translations; NPAD keeps the
# most probable of its parallel samples.

for sigma0 in (0.5, 1.0, 2.0):
    r = npad_decode(source, params, NpadConfig(sigma0, 8, seed=0))
    print(sigma0, r.tokens, round(r.total_logprob, 4))

###########################################################################
# A random actor steers the decoder away from greedy.

actor = actor_init(ActorConfig(cfg.hidden, cfg.context_dim), init_scale=0.5, seed=1)
steered = trainable_greedy_decode(source, params, actor)
print("steered", steered.tokens, "action norms", np.round(np.linalg.norm(steered.actions, axis=1), 3))
