"""
Training an actor on top of a frozen model
==========================================

The actor adds a small learned perturbation to the decoder state at every
step.  A critic regresses the sentence-level objective from the decoded
state sequence and the reference, and the actor climbs the critic's
gradient.  Episodes on which the critic is accurate get larger weights.

This short run only demonstrates the mechanics.  The acceptance suite runs
the full desk experiment.
"""

###########################################################################
# Pretrain a small model as in the previous script.

import tempfile
from pathlib import Path

import numpy as np

from tgd.actor import ActorConfig, actor_init
from tgd.critic import CriticConfig, critic_init
from tgd.data import build_vocab, gen_synthetic_corpus, load_splits
from tgd.decoders import influence_profile
from tgd.model import Seq2SeqConfig, init_seq2seq
from tgd.training import (
    BleuObjective,
    TrainSchedule,
    critic_aware_weights,
    decode_rollouts,
    evaluate_decoder,
    train_actor_critic,
    train_mle,
)

root = Path(tempfile.mkdtemp())
gen_synthetic_corpus("reverse", 3000, (3, 8), 12, 0.1, seed=0, out_dir=root)
sv, tv = build_vocab(root / "train.tsv"), build_vocab(root / "train.tsv", side="target")
corpus = load_splits(root, sv, tv)
cfg = Seq2SeqConfig(len(sv), len(tv), emb_dim=16, hidden=32, att_dim=32, readout_dim=32)
params = train_mle(corpus.train, corpus.valid, init_seq2seq(cfg, seed=0), TrainSchedule(epochs=4, batch_size=32)).params

###########################################################################
# One round of rollouts: the first episode force-feeds the reference, the
# rest decode greedily with noise on the actions.

objective = BleuObjective()
actor = actor_init(ActorConfig(cfg.hidden, cfg.context_dim))
critic = critic_init(CriticConfig(len(tv), cfg.hidden, emb_dim=16, hidden=32, att_dim=32, head_dim=32))
rng = np.random.default_rng(0)
pair = corpus.train[0]
r, rc, episodes = decode_rollouts(4, pair.source, pair.target, True, params, actor, critic, 0.5, rng, objective)
print("returns", np.round(r, 3))
print("critic ", np.round(rc, 3))
w, _ = critic_aware_weights(rc[1:], r[1:], tau=0.01)
print("weights", np.round(w, 3))

###########################################################################
# The full loop: critic warm-up, then ten critic updates per actor update.
# Validation BLEU of noise-free trainable greedy decoding is logged.

schedule = TrainSchedule(sigma=0.5, tau=0.01, lr_actor=1e-5, lr_critic=3e-4, critic_warmup=300,
                         max_cycles=40, validation_interval=10, val_size=100, patience=0)
res = train_actor_critic(corpus.train, corpus.valid, params, actor, critic, schedule, objective)
for row in res.curve:
    print({k: round(v, 4) if isinstance(v, float) else v for k, v in row.items()})

###########################################################################
# Where does the actor intervene?  Steps whose output distribution moves
# by more than 1e-3 nats are flagged.

before = evaluate_decoder(params, corpus.test)
after = evaluate_decoder(params, corpus.test, res.actor)
print(f"test BLEU {100 * before['bleu']:.2f} -> {100 * after['bleu']:.2f}")
_, steps = influence_profile(corpus.test[0].source, params, res.actor)
print([(tv.itos[s.token], f"{s.kl:.2e}", s.influenced) for s in steps])
