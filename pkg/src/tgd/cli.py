"""Command-line entry point: ``tgd <command> --config PATH [--seed N] [--out DIR] [--set section.key=value ...]``.

Exit status is 0 on success, 1 for usage or configuration errors (including
missing or mismatched checkpoints) and 2 for runtime or numerical failures.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .actor import ActorConfig, actor_init
from .checkpoint import CheckpointFormatError, CheckpointKindError, load_params, save_checkpoint
from .config import ConfigError, ExperimentConfig, load_config
from .critic import CriticConfig, critic_init
from .data import Pair, Vocab, build_vocab, gen_synthetic_corpus, load_corpus, load_splits, read_pairs
from .decoders import BeamConfig, NpadConfig, beam_search, greedy_decode, influence_profile, npad_decode, trainable_greedy_decode
from .metrics import bleu_stats, corpus_bleu, neg_perplexity, paired_bootstrap_test
from .model import EOS, ContractError, Seq2SeqConfig, force_decode, init_seq2seq
from .training import CURVE_FIELDS, TrainSchedule, get_objective, train_actor_critic, train_mle

log = logging.getLogger("tgd")

COMMANDS = ("gen-data", "train-mle", "train-actor", "decode", "evaluate", "report")
GRID_FIELDS = ("condition", "metric", "value", "p_value_vs_baseline")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="tgd", description="Trainable greedy decoding experiments")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True, help="INI experiment config")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=".", help="output directory")
    ap.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", dest="overrides")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path: Path, fields, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(fields)
        for r in rows:
            w.writerow([_fmt(r[k]) if k in r else "" for k in fields])


def _bleu100(row: dict, key: str) -> dict:
    # BLEU is kept on 0-1 internally and written on 0-100
    return {**row, key: 100.0 * row[key]}


# ---------------------------------------------------------------- commands


def cmd_gen_data(cfg: ExperimentConfig, out: Path, seed: int) -> None:
    d = cfg["data"]
    gen_synthetic_corpus(d["task"], d["size"], (d["min_len"], d["max_len"]), d["vocab_size"], d["corruption"], d["seed"] + seed, out)
    log.info("wrote corpus to %s", out)


def _vocabs(cfg, corpus_dir: Path):
    mv = cfg["data"]["max_vocab"] or None
    return build_vocab(corpus_dir / "train.tsv", mv, "source"), build_vocab(corpus_dir / "train.tsv", mv, "target")


def _load_nmt(cfg):
    cfg.require_paths("nmt")
    params, ck = load_params(cfg["paths"]["nmt"], "nmt")
    meta = ck.meta
    sv, tv = Vocab(meta.get("src_vocab", [])), Vocab(meta.get("tgt_vocab", []))
    return params, sv, tv


def _load_actor(cfg):
    params, _ = load_params(cfg["paths"]["actor"], "actor")
    return params


def _schedule(cfg, seed: int) -> TrainSchedule:
    s, m = cfg["schedule"], cfg["mle"]
    return TrainSchedule(
        N_c=s["n_c"], N_a=s["n_a"], S_c=s["s_c"], S_a=s["s_a"], sigma=s["sigma"], tau=s["tau"],
        lr_actor=s["lr_actor"], lr_critic=s["lr_critic"], max_cycles=s["max_cycles"],
        validation_interval=s["validation_interval"], critic_warmup=s["critic_warmup"], patience=s["patience"],
        val_size=s["val_size"], clip_norm=s["clip_norm"],
        lr_mle=m["lr"], mle_rule=m["rule"], epochs=m["epochs"], batch_size=m["batch_size"], seed=seed,
    )


def cmd_train_mle(cfg: ExperimentConfig, out: Path, seed: int) -> None:
    cfg.require_paths("corpus")
    corpus_dir = Path(cfg["paths"]["corpus"])
    sv, tv = _vocabs(cfg, corpus_dir)
    corpus = load_splits(corpus_dir, sv, tv)
    if "train" not in corpus.splits:
        raise ConfigError(f"paths.corpus = {corpus_dir} has no train.tsv")
    m = cfg["model"]
    mcfg = Seq2SeqConfig(len(sv), len(tv), m["emb_dim"], m["hidden"], m["att_dim"], m["readout_dim"], m["max_len_train"], m["max_len_decode"])
    cap = mcfg.max_len_train
    train = [p for p in corpus.train if len(p.source) <= cap and len(p.target) <= cap + 1]
    if len(train) < len(corpus.train):
        log.info("dropped %d training pairs longer than model.max_len_train", len(corpus.train) - len(train))
    valid = [p for p in corpus.splits.get("valid", []) if len(p.source) <= cap and len(p.target) <= cap + 1]
    params = init_seq2seq(mcfg, seed=m["seed"] + seed)
    mle = cfg["mle"]
    res = train_mle(train, valid, params, _schedule(cfg, seed), max_steps=mle["max_steps"] or None,
                    time_budget=mle["time_budget"] or None)
    save_checkpoint(res.params, out / "nmt.ckpt", step=res.curve[-1]["step"],
                    meta={"src_vocab": sv.itos[4:], "tgt_vocab": tv.itos[4:]})
    write_csv(out / "mle_curve.csv", ("epoch", "step", "train_loss", "valid_loss"), res.curve)
    log.info("best validation loss %.4f", res.best_valid)


def cmd_train_actor(cfg: ExperimentConfig, out: Path, seed: int) -> None:
    params, sv, tv = _load_nmt(cfg)
    cfg.require_paths("corpus")
    corpus = load_splits(Path(cfg["paths"]["corpus"]), sv, tv)
    if "train" not in corpus.splits or "valid" not in corpus.splits:
        raise ConfigError("paths.corpus must contain train.tsv and valid.tsv")
    a, c = cfg["actor"], cfg["critic"]
    objective = get_objective(a["objective"])
    H = params.config.hidden
    actor = actor_init(ActorConfig(H, params.config.context_dim, a["hidden"]), a["init_scale"], seed=a["seed"] + seed)
    critic = critic_init(
        CriticConfig(len(tv), H, c["emb_dim"], c["hidden"], c["att_dim"], c["head_dim"], objective.bounded, c["scale"], c["use_tokens"]),
        seed=c["seed"] + seed,
    )
    res = train_actor_critic(corpus.train, corpus.valid, params, actor, critic, _schedule(cfg, seed), objective,
                             time_budget=cfg["schedule"]["time_budget"] or None)
    save_checkpoint(res.actor, out / "actor.ckpt", step=res.best_cycle, meta={"objective": objective.name})
    save_checkpoint(res.critic, out / "critic.ckpt", step=res.curve[-1]["cycle"], meta={"objective": objective.name})
    write_csv(out / "learning_curve.csv", CURVE_FIELDS, [_bleu100(r, "greedy_bleu") for r in res.curve])
    log.info("best validation %s %.4f at cycle %d", objective.name, res.best_value, res.best_cycle)


def _sources(cfg, sv: Vocab, tv: Vocab, split_key: str):
    """Source id sequences (and targets when available) for decode/evaluate."""
    section = "decode" if split_key == "decode" else "evaluate"
    if section == "decode" and cfg["decode"]["input"]:
        path = Path(cfg["decode"]["input"])
        if not path.exists():
            raise ConfigError(f"decode.input = {path} does not exist")
        lines = [ln.split() for ln in path.read_text(encoding="utf-8").split("\n") if ln.strip()]
        return [Pair(tuple(sv.encode(t)), ()) for t in lines]
    cfg.require_paths("corpus")
    split = cfg[section]["split"]
    path = Path(cfg["paths"]["corpus"]) / f"{split}.tsv"
    if not path.exists():
        raise ConfigError(f"{path} does not exist ({section}.split = {split})")
    return load_corpus(path, sv, tv)


def _workers() -> int:
    raw = os.environ.get("TGD_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"TGD_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def _map(fn, items):
    """Order-stable map, parallel over ``TGD_THREADS`` workers when > 1."""
    n = _workers()
    if n == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as ex:
        return list(ex.map(fn, items))


def cmd_decode(cfg: ExperimentConfig, out: Path, seed: int) -> None:
    params, sv, tv = _load_nmt(cfg)
    actor = None
    if cfg["paths"]["actor"]:
        cfg.require_paths("actor")
        actor = _load_actor(cfg)
    d = cfg["decode"]
    pairs = _sources(cfg, sv, tv, "decode")
    strategy = d["strategy"]
    if strategy == "npad" and actor is not None:
        raise ConfigError("decode.strategy = npad cannot be combined with paths.actor")

    def run(pr):
        if strategy == "beam":
            return beam_search(pr.source, params, BeamConfig(d["beam_k"], params.config.max_len_decode), actor=actor)
        if strategy == "npad":
            return npad_decode(pr.source, params, NpadConfig(d["npad_sigma0"], d["npad_parallel"], seed))
        if actor is not None:
            return trainable_greedy_decode(pr.source, params, actor)
        return greedy_decode(pr.source, params)

    results = _map(run, pairs)
    with open(out / "translations.txt", "w", encoding="utf-8", newline="\n") as f:
        for r in results:
            f.write(" ".join(tv.decode(r.tokens)) + "\n")
    if actor is not None and d["influence"] and strategy == "greedy":
        profiles = _map(lambda pr: influence_profile(pr.source, params, actor)[1], pairs)
        with open(out / "influence.tsv", "w", encoding="utf-8", newline="\n") as f:
            for steps in profiles:
                cells = [f"{tv.itos[s.token]}:{s.kl:.6g}:{int(s.influenced)}" for s in steps]
                f.write("\t".join(cells) + "\n")
    log.info("decoded %d sentences", len(results))


def cmd_evaluate(cfg: ExperimentConfig, out: Path, seed: int) -> None:
    params, sv, tv = _load_nmt(cfg)
    cfg.require_paths("actor")
    actor = _load_actor(cfg)
    pairs = _sources(cfg, sv, tv, "evaluate")
    e = cfg["evaluate"]
    K = e["beam_k"]
    beam = BeamConfig(K, params.config.max_len_decode)
    conditions = {
        "greedy": lambda pr: greedy_decode(pr.source, params),
        "greedy+actor": lambda pr: trainable_greedy_decode(pr.source, params, actor),
        f"beam-{K}": lambda pr: beam_search(pr.source, params, beam),
        f"beam-{K}+actor": lambda pr: beam_search(pr.source, params, beam, actor=actor),
    }
    # each actor condition is tested against the same decoder without the actor
    baseline = {"greedy+actor": "greedy", f"beam-{K}+actor": f"beam-{K}", f"beam-{K}": "greedy"}
    refs = [p.target for p in pairs]
    per = {}
    for name, fn in conditions.items():
        hyps = [r.tokens for r in _map(fn, pairs)]
        negppl = _map(lambda i: neg_perplexity(force_decode(pairs[i].source, hyps[i], params).step_logprobs), range(len(pairs)))
        per[name] = dict(
            hyps=hyps,
            stats=np.array([bleu_stats(h, r) for h, r in zip(hyps, refs)]),
            negppl=np.array(negppl),
        )
    rows = []
    for name, v in per.items():
        base = baseline.get(name)
        for metric in ("bleu", "neg_perplexity"):
            if metric == "bleu":
                value = 100.0 * corpus_bleu(v["hyps"], refs)
                p = paired_bootstrap_test(v["stats"], per[base]["stats"], e["resamples"], seed, "bleu") if base else ""
            else:
                value = float(np.mean(v["negppl"]))
                p = paired_bootstrap_test(v["negppl"], per[base]["negppl"], e["resamples"], seed, "mean") if base else ""
            rows.append(dict(condition=name, metric=metric, value=value, p_value_vs_baseline=p))
    write_csv(out / "evaluation.csv", GRID_FIELDS, rows)
    for r in rows:
        log.info("%-16s %-15s %.4f  p=%s", r["condition"], r["metric"], r["value"], r["p_value_vs_baseline"])


def cmd_report(cfg: ExperimentConfig, out: Path, seed: int) -> None:
    inputs = [s.strip() for s in cfg["report"]["inputs"].split(",") if s.strip()]
    if not inputs:
        raise ConfigError("report.inputs must list at least one CSV file")
    fields: list[str] = ["source"]
    rows = []
    for name in inputs:
        path = Path(name)
        if not path.is_absolute() and cfg.path is not None:
            path = cfg.path.parent / path
        if not path.exists():
            raise ConfigError(f"report.inputs: {path} does not exist")
        with open(path, encoding="utf-8", newline="") as f:
            reader = csv.DictReader(f)
            for k in reader.fieldnames or []:
                if k not in fields:
                    fields.append(k)
            for r in reader:
                rows.append({"source": path.name, **r})
    write_csv(out / "report.csv", fields, rows)


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train-mle": cmd_train_mle,
    "train-actor": cmd_train_actor,
    "decode": cmd_decode,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with ad.precision("standard"):
            HANDLERS[args.command](cfg, out, args.seed)
    except (ConfigError, UsageError, CheckpointKindError, CheckpointFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ad.NumericalFailure, ContractError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
