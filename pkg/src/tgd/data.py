"""Synthetic parallel corpora, vocabularies, corpus files and batching.

Corpus files are UTF-8, one pair per line: ``source tokens<TAB>target tokens``
with space-separated tokens and LF line endings.  Generated corpora are
split 90/5/5 into ``train.tsv``, ``valid.tsv`` and ``test.tsv``.
"""
from __future__ import annotations

import os
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from .model import BOS, EOS, PAD, UNK

RESERVED = ("<pad>", "<s>", "</s>", "<unk>")
TASKS = ("reverse", "shift-cipher", "sort")
SPLITS = ("train", "valid", "test")


class Pair(NamedTuple):
    source: tuple
    target: tuple


class Vocab:
    """Token <-> id bijection with ids 0-3 reserved for pad/begin/end/unk."""

    def __init__(self, tokens=()):
        self.itos = list(RESERVED)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    def encode(self, tokens) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids, strip_special: bool = True) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if strip_special and i in (PAD, BOS, EOS):
                continue
            out.append(self.itos[i] if i < len(self.itos) else RESERVED[UNK])
        return out

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.itos[len(RESERVED):]), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls(Path(path).read_text(encoding="utf-8").split("\n")[:-1])


@dataclass
class Corpus:
    splits: dict = field(default_factory=dict)  # name -> list[Pair]

    def __getitem__(self, split: str) -> list[Pair]:
        return self.splits[split]

    @property
    def train(self):
        return self.splits["train"]

    @property
    def valid(self):
        return self.splits["valid"]

    @property
    def test(self):
        return self.splits["test"]


def symbol(i: int) -> str:
    return f"w{i}"


def apply_task(task: str, seq: list[int], vocab_size: int) -> list[int]:
    if task == "reverse":
        return seq[::-1]
    if task == "shift-cipher":
        return [(s + 1) % vocab_size for s in seq]
    if task == "sort":
        return sorted(seq)
    raise ValueError(f"unknown task {task!r}; expected one of {', '.join(TASKS)}")


def gen_synthetic_corpus(
    task: str = "reverse",
    size: int = 10_000,
    len_range: tuple[int, int] = (3, 12),
    vocab_size: int = 20,
    corruption_rate: float = 0.1,
    seed: int = 0,
    out_dir=None,
) -> dict[str, list[tuple[list[str], list[str]]]]:
    """Generate a deterministic synthetic corpus with distinct sources.

    Targets are ``task(source)``; in the train split each target token is
    replaced, with probability ``corruption_rate``, by a different random
    symbol.  Valid/test targets are left clean.  When ``out_dir`` is given
    the three splits are written there as TSV files.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {', '.join(TASKS)}")
    if vocab_size < 5:
        raise ValueError("vocab_size must be >= 5")
    lo, hi = len_range
    if not 1 <= lo <= hi:
        raise ValueError(f"invalid length range {len_range}")
    if not 0.0 <= corruption_rate <= 1.0:
        raise ValueError("corruption_rate must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    seen: set = set()
    sources: list[list[int]] = []
    attempts = 0
    while len(sources) < size:
        attempts += 1
        if attempts > 50 * size:
            raise ValueError("cannot draw enough distinct sources for this length range and vocabulary")
        n = int(rng.integers(lo, hi + 1))
        s = rng.integers(0, vocab_size, n).tolist()
        key = tuple(s)
        if key in seen:
            continue
        seen.add(key)
        sources.append(s)
    n_train = int(round(0.9 * size))
    n_valid = int(round(0.05 * size))
    bounds = {"train": (0, n_train), "valid": (n_train, n_train + n_valid), "test": (n_train + n_valid, size)}
    out: dict[str, list] = {}
    for split, (a, b) in bounds.items():
        rows = []
        for s in sources[a:b]:
            t = apply_task(task, s, vocab_size)
            if split == "train" and corruption_rate > 0:
                flips = rng.random(len(t)) < corruption_rate
                for i in np.flatnonzero(flips):
                    r = int(rng.integers(0, vocab_size - 1))
                    t[i] = r if r < t[i] else r + 1
            rows.append(([symbol(x) for x in s], [symbol(x) for x in t]))
        out[split] = rows
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for split, rows in out.items():
            save_pairs(out_dir / f"{split}.tsv", rows)
    return out


def save_pairs(path, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for src, tgt in rows:
            f.write(" ".join(src) + "\t" + " ".join(tgt) + "\n")


def read_pairs(path) -> list[tuple[list[str], list[str]]]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read corpus file {path}: {exc.strerror}") from exc
    rows = []
    for lineno, line in enumerate(text.split("\n"), start=1):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0].strip() or not parts[1].strip():
            raise ValueError(f"{path}:{lineno}: malformed line, expected 'source<TAB>target'")
        rows.append((parts[0].split(), parts[1].split()))
    return rows


def build_vocab(path, max_size: int | None = None, side: str = "source") -> Vocab:
    """Frequency-ranked vocabulary (ties lexicographic) from one side of a corpus file.

    ``max_size`` bounds the non-reserved entries; the rest map to unk.
    """
    col = {"source": 0, "target": 1, "both": None}[side]
    counts: Counter = Counter()
    for src, tgt in read_pairs(path):
        if col in (0, None):
            counts.update(src)
        if col in (1, None):
            counts.update(tgt)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    if max_size is not None:
        ranked = ranked[:max_size]
    return Vocab(t for t, _ in ranked)


def load_corpus(path, src_vocab: Vocab, tgt_vocab: Vocab) -> list[Pair]:
    """Map a TSV file to id pairs; targets get the end id appended."""
    return [
        Pair(tuple(src_vocab.encode(s)), tuple(tgt_vocab.encode(t) + [EOS]))
        for s, t in read_pairs(path)
    ]


def load_splits(directory, src_vocab: Vocab, tgt_vocab: Vocab) -> Corpus:
    d = Path(directory)
    return Corpus({s: load_corpus(d / f"{s}.tsv", src_vocab, tgt_vocab) for s in SPLITS if (d / f"{s}.tsv").exists()})


def save_corpus(path, pairs, src_vocab: Vocab, tgt_vocab: Vocab) -> None:
    rows = []
    for p in pairs:
        rows.append((src_vocab.decode(p.source), tgt_vocab.decode(p.target)))
    save_pairs(path, rows)


class Batch(NamedTuple):
    pairs: list
    src: np.ndarray  # (B, S)
    src_mask: np.ndarray
    tgt: np.ndarray  # (B, T), ends with the end id
    tgt_mask: np.ndarray


def _pad(seqs):
    T = max(len(s) for s in seqs)
    ids = np.full((len(seqs), T), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), T), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


def batch_iter(pairs, batch_size: int, seed: int = 0, length_sorted_chunks: int = 0) -> Iterator[Batch]:
    """One epoch of padded batches in a seeded random order.

    ``length_sorted_chunks > 0`` sorts each run of that many batches by
    source length before cutting batches, which reduces padding.
    """
    if not pairs:
        raise ValueError("batch_iter: empty split")
    order = np.random.default_rng(seed).permutation(len(pairs))
    if length_sorted_chunks > 0:
        span = batch_size * length_sorted_chunks
        chunks = [order[i : i + span] for i in range(0, len(order), span)]
        order = np.concatenate([c[np.argsort([len(pairs[j].source) for j in c], kind="stable")] for c in chunks])
    batches = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    if length_sorted_chunks > 0:
        perm = np.random.default_rng(seed + 1).permutation(len(batches))
        batches = [batches[i] for i in perm]
    for idx in batches:
        chosen = [pairs[j] for j in idx]
        src, sm = _pad([p.source for p in chosen])
        tgt, tm = _pad([p.target for p in chosen])
        yield Batch(chosen, src, sm, tgt, tm)
