"""
Pretraining a reversal model
============================

Generate a synthetic reversal corpus, fit the attention encoder-decoder by
maximum likelihood and compare greedy decoding with beam search.  Sizes are
kept small so the script runs in well under a minute; the acceptance suite uses
10,000 pairs and the default dimensions.
"""

###########################################################################
# Corpus: each target is the source reversed, and 10% of training target
# tokens are replaced at random.

import tempfile
import time
from pathlib import Path

from tgd.data import build_vocab, gen_synthetic_corpus, load_splits
from tgd.decoders import BeamConfig
from tgd.model import Seq2SeqConfig, init_seq2seq
from tgd.training import TrainSchedule, evaluate_decoder, train_mle

root = Path(tempfile.mkdtemp())
gen_synthetic_corpus("reverse", 3000, (3, 8), 12, 0.1, seed=0, out_dir=root)
print((root / "train.tsv").read_text().splitlines()[:3])

src_vocab = build_vocab(root / "train.tsv")
tgt_vocab = build_vocab(root / "train.tsv", side="target")
corpus = load_splits(root, src_vocab, tgt_vocab)
print({k: len(v) for k, v in corpus.splits.items()})

###########################################################################
# Train with Adadelta; the parameters with the best validation loss are kept.

cfg = Seq2SeqConfig(len(src_vocab), len(tgt_vocab), emb_dim=16, hidden=32, att_dim=32, readout_dim=32)
params = init_seq2seq(cfg, seed=0)
t0 = time.time()
res = train_mle(corpus.train, corpus.valid, params, TrainSchedule(epochs=6, batch_size=32))
for row in res.curve:
    print(row)
print(f"{time.time() - t0:.0f}s")

###########################################################################
# Greedy against beam search on the clean test split.

greedy = evaluate_decoder(res.params, corpus.test)
beam = evaluate_decoder(res.params, corpus.test, beam=BeamConfig(5, cfg.max_len_decode))
print(f"greedy BLEU {100 * greedy['bleu']:.2f}  neg-ppl {greedy['neg_ppl']:.4f}")
print(f"beam-5 BLEU {100 * beam['bleu']:.2f}  neg-ppl {beam['neg_ppl']:.4f}")

###########################################################################
# A few decoded examples.

for pair, hyp in list(zip(corpus.test, greedy["hyps"]))[:5]:
    print(src_vocab.decode(pair.source), "->", tgt_vocab.decode(hyp))
