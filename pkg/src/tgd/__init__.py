"""Trainable greedy decoding for attention encoder-decoder models."""
from .actor import ActorConfig, ActorParams, actor_act, actor_init
from .critic import CriticConfig, CriticParams, critic_init, critic_loss, critic_predict
from .decoders import BeamConfig, NpadConfig, beam_search, greedy_decode, npad_decode, trainable_greedy_decode
from .metrics import corpus_bleu, neg_perplexity, paired_bootstrap_test, sentence_bleu_smoothed
from .model import Seq2SeqConfig, Seq2SeqParams, init_seq2seq, mle_loss
from .training import TrainSchedule, train_actor_critic, train_mle

__version__ = "0.1.0"
