"""Command line front-end: ``e2eslu <command> ...``.

Exit status: 0 success, 1 usage error, 2 data/config error, 3 numeric
failure (divergence, infeasible target).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor

from . import __version__
from . import config as configlib
from . import lm as lmlib
from .decode import (
    BeamConfig,
    beam_decode,
    check_lm_vocabulary,
    greedy_decode,
    lm_tokens,
    read_hypotheses,
    write_hypotheses,
)
from .errors import ConfigError, DataError, DecodeConfigError, SluError
from .metrics import cer_by_frequency, confusion_matrix, evaluate_corpus, tag_only_prf
from .model import NetworkConfig, init_checkpoint, load_checkpoint, save_checkpoint
from .synthcorpus import GeneratorSpec, corpus_stats, generate, load_corpus, preset, write_corpus
from .tagcodec import DEFAULT_GRAPHEMES, STAR, TagInventory, Vocabulary, star_map_text
from .train import ChainSpec, StageSpec, TrainConfig, batch_logprobs, run_chain, target_text

logger = logging.getLogger("e2eslu")


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on usage errors; we reserve 2 for data errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# -- gen-corpus --------------------------------------------------------------------------

def _load_spec(arg: str, seed) -> GeneratorSpec:
    if arg.startswith("preset:"):
        spec = preset(arg[len("preset:"):])
    else:
        if not os.path.exists(arg):
            raise DataError(f"generator spec {arg} does not exist")
        spec = GeneratorSpec.load(arg)
    if seed is not None:
        spec.seed = seed
    return spec


def cmd_gen_corpus(args):
    spec = _load_spec(args.spec, args.seed)
    sizes = {"train": args.train, "dev": args.dev, "test": args.test}
    corpus = generate(spec, sizes)
    write_corpus(corpus, args.out_dir, spec)
    for split, utts in corpus.splits.items():
        st = corpus_stats(utts, spec.task, split)
        print("\t".join(f"{k}={v}" for k, v in st.row().items()))
    return 0


# -- build-vocab --------------------------------------------------------------------------

def _corpus_alphabet(corpus_dir) -> str:
    p = os.path.join(corpus_dir, "spec.json")
    if os.path.exists(p):
        return GeneratorSpec.load(p).alphabet
    return DEFAULT_GRAPHEMES


def cmd_build_vocab(args):
    corpus = load_corpus(args.corpus)
    alphabet = _corpus_alphabet(args.corpus)
    for split, utts in corpus.splits.items():
        for u in utts:
            bad = set(u.transcript) - set(alphabet)
            if bad:
                raise DataError(f"utterance {u.id} uses characters {sorted(bad)} outside the alphabet")
    if args.no_tags:
        inv = None
    elif args.tags:
        inv = TagInventory.load(args.tags)
    else:
        inv = corpus.inventory
    vocab = Vocabulary(alphabet, inv, args.star)
    if inv is not None:
        for utts in corpus.splits.values():
            for u in utts:
                target_text(u, vocab)  # raises on tags missing from the inventory
    vocab.save(args.out)
    print(f"{args.out}: {len(vocab)} units ({len(alphabet)} graphemes, "
          f"{len(inv) if inv else 0} tags{', star' if args.star else ''})")
    return 0


# -- train / chain ----------------------------------------------------------------------

def _stage_specs(cfg: configlib.ExperimentConfig, seed: int):
    stages, feat_dim = [], None
    for i, st in enumerate(cfg.stages):
        corpus = load_corpus(cfg.path(st["corpus"]), ("train", "dev"))
        if "train" not in corpus.splits or "dev" not in corpus.splits:
            raise DataError(f"corpus {st['corpus']} needs train and dev splits")
        vocab = Vocabulary.load(cfg.path(st["vocabulary"]))
        tc = dict(st.get("train", {}))
        tc.setdefault("seed", seed + i)
        train_cfg = TrainConfig.from_dict(tc)
        dim = corpus["train"][0].features.shape[1]
        if feat_dim is not None and dim != feat_dim:
            raise DataError(f"stage {st['name']} features have dim {dim}, earlier stages {feat_dim}")
        feat_dim = dim
        stages.append(StageSpec(st["name"], corpus["train"], corpus["dev"], vocab, train_cfg,
                                int(st.get("speaker_dim", 0))))
    return stages, feat_dim


def _run_experiment(args, single: bool):
    cfg = configlib.load(args.config)
    if single and len(cfg.stages) != 1:
        raise ConfigError("train takes a config with exactly one stage; use chain for several")
    seed = args.seed if args.seed is not None else cfg.seed
    stages, feat_dim = _stage_specs(cfg, seed)
    if cfg.data.get("init_checkpoint"):
        initial = load_checkpoint(cfg.path(cfg.data["init_checkpoint"]))
    else:
        m = dict(cfg.data["model"])
        net = NetworkConfig.from_dict({"input_dim": feat_dim, "output_units": len(stages[0].vocabulary), **m})
        initial = init_checkpoint(net, stages[0].vocabulary, seed)
    out = cfg.output_dir
    os.makedirs(out, exist_ok=True)
    log_path = os.path.join(out, "train_log.jsonl")
    if os.path.exists(log_path):
        os.remove(log_path)
    with open(os.path.join(out, "config.yaml"), "w", encoding="utf-8") as f:
        f.write(cfg.dump())
    results = run_chain(ChainSpec(stages, out, seed), initial)
    final = results[-1][0]
    save_checkpoint(final, os.path.join(out, "final.ckpt"))
    for st, (ck, hist) in zip(stages, results):
        best = ck.meta.get("epoch")
        print(f"{st.name}: best epoch {best}, dev CER {min(r.dev_cer for r in hist):.4f}")
    return 0


def cmd_train(args):
    return _run_experiment(args, single=True)


def cmd_chain(args):
    return _run_experiment(args, single=False)


# -- train-lm -------------------------------------------------------------------------

def lm_training_text(utts, vocab: Vocabulary):
    """Chunked transcripts under ``vocab``; star-mapped when ``vocab`` has the star."""
    for u in utts:
        text = target_text(u, vocab)
        yield star_map_text(text, vocab) if vocab.star else text


def cmd_train_lm(args):
    corpus = load_corpus(args.corpus, (args.split,))
    vocab = Vocabulary.load(args.vocab)
    sents = [lm_tokens(t, vocab, args.unit) for t in lm_training_text(corpus[args.split], vocab)]
    model = lmlib.estimate(sents, args.order)
    if vocab.star and STAR not in model.vocab:
        logger.warning("no star token in the LM training text")
    lmlib.write_arpa(model, args.out)
    counts = model.ngram_counts()
    print(f"{args.out}: order {args.order}, " + ", ".join(f"{n}-grams={c}" for n, c in counts.items()))
    return 0


# -- decode -------------------------------------------------------------------------------

_worker = {}


def _init_worker(vocab, lm, beam_cfg):
    _worker.update(vocab=vocab, lm=lm, cfg=beam_cfg)


def _beam_one(logp):
    return beam_decode(logp, _worker["vocab"], _worker["lm"], _worker["cfg"])


def cmd_decode(args):
    ckpt = load_checkpoint(args.checkpoint)
    vocab = ckpt.vocabulary
    corpus = load_corpus(args.corpus, (args.split,))
    utts = corpus[args.split]
    logps = batch_logprobs(ckpt, utts, "adapted")
    use_beam = args.lm is not None or args.beam is not None
    if not use_beam and (args.alpha or args.beta):
        raise DecodeConfigError("--alpha/--beta need --lm or --beam")
    if use_beam:
        lm = lmlib.read_arpa(args.lm) if args.lm else None
        cfg = BeamConfig(args.beam or 8, args.alpha if lm is not None else 0.0, args.beta, args.lm_unit)
        if lm is not None:
            check_lm_vocabulary(lm, vocab, args.lm_unit)
        if args.jobs > 1:
            with ProcessPoolExecutor(args.jobs, initializer=_init_worker, initargs=(vocab, lm, cfg)) as ex:
                decoded = list(ex.map(_beam_one, logps, chunksize=8))
        else:
            _init_worker(vocab, lm, cfg)
            decoded = [_beam_one(lp) for lp in logps]
    else:
        decoded = [(greedy_decode(lp, vocab), float(lp.max(axis=1).sum())) for lp in logps]
    write_hypotheses([(u.id, text, score) for u, (text, score) in zip(utts, decoded)], args.out)
    print(f"{args.out}: {len(utts)} hypotheses ({'beam' if use_beam else 'greedy'})")
    return 0


# -- evaluate ------------------------------------------------------------------------------

def cmd_evaluate(args):
    corpus = load_corpus(args.corpus, tuple(dict.fromkeys((args.split, "train"))))
    inv = TagInventory.load(args.tags) if args.tags else corpus.inventory
    vocab = Vocabulary(_corpus_alphabet(args.corpus), inv)
    hyps = read_hypotheses(args.hyp)
    utts = corpus[args.split]
    missing = [u.id for u in utts if u.id not in hyps]
    if missing:
        raise DataError(f"hypothesis file lacks {len(missing)} utterances, e.g. {missing[0]}")
    pairs = [(target_text(u, vocab), hyps[u.id][0]) for u in utts]
    report, evals = evaluate_corpus(pairs, inv)
    os.makedirs(args.out_dir, exist_ok=True)
    d = report.to_dict()
    if args.tag_only:
        p, r, f = tag_only_prf(evals)
        d.update(precision=p, recall=r, f_measure=f, prf_mode="tag")
        report.precision, report.recall, report.f_measure = p, r, f
    else:
        d["prf_mode"] = "tag+value"
    with open(os.path.join(args.out_dir, "report.json"), "w", encoding="utf-8") as f:
        json.dump(d, f, indent=2, sort_keys=True)
    table = report.table()
    with open(os.path.join(args.out_dir, "report.txt"), "w", encoding="utf-8") as f:
        f.write(table + "\n")
    cm = confusion_matrix([e.tag_alignment for e in evals], args.top_k)
    cm.to_csv(os.path.join(args.out_dir, "confusion.csv"), normalized=True)
    cm.to_csv(os.path.join(args.out_dir, "confusion_counts.csv"), normalized=False)
    train_counts = corpus_stats(corpus["train"]).concept_counts if "train" in corpus.splits else {}
    with open(os.path.join(args.out_dir, "cer_by_frequency.csv"), "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["concept", "train_count", "concept_error_rate"])
        for tag, n, rate in cer_by_frequency(evals, train_counts):
            w.writerow([tag, n, "%.6g" % rate])
    print(table)
    for flag in report.flags:
        print("warning: " + flag, file=sys.stderr)
    return 0


# -- parser ------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="e2eslu", description="End-to-end CTC spoken language understanding toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-corpus", help="generate a synthetic corpus")
    g.add_argument("spec", help="generator spec JSON file, or preset:NAME (sf1, sf2, sf12, ner, asr)")
    g.add_argument("out_dir")
    g.add_argument("--train", type=int, default=2000, help="train split size (default 2000)")
    g.add_argument("--dev", type=int, default=200, help="dev split size (default 200)")
    g.add_argument("--test", type=int, default=200, help="test split size (default 200)")
    g.add_argument("--seed", type=int, help="override the spec's seed")
    g.set_defaults(func=cmd_gen_corpus)

    b = sub.add_parser("build-vocab", help="write a vocabulary file for a corpus")
    b.add_argument("corpus", help="corpus directory")
    b.add_argument("--tags", help="tag inventory file (default: the corpus's tags.txt)")
    b.add_argument("--no-tags", action="store_true", help="grapheme-only vocabulary (ASR)")
    b.add_argument("--star", action="store_true", help="add the star unit")
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_build_vocab)

    for name, fn, text in (("train", cmd_train, "train a single stage"),
                           ("chain", cmd_chain, "train a transfer chain")):
        t = sub.add_parser(name, help=text)
        t.add_argument("config", help="experiment YAML file")
        t.add_argument("--seed", type=int, help="override the config's seed")
        t.set_defaults(func=fn)

    lmp = sub.add_parser("train-lm", help="estimate an n-gram LM on corpus transcripts")
    lmp.add_argument("corpus")
    lmp.add_argument("--vocab", required=True, help="vocabulary of the model the LM will decode with")
    lmp.add_argument("--order", type=int, default=4)
    lmp.add_argument("--split", default="train")
    lmp.add_argument("--unit", choices=("word", "char"), default="word")
    lmp.add_argument("--out", required=True)
    lmp.set_defaults(func=cmd_train_lm)

    d = sub.add_parser("decode", help="decode a corpus split (greedy unless --lm or --beam)")
    d.add_argument("checkpoint")
    d.add_argument("corpus")
    d.add_argument("--split", default="test")
    d.add_argument("--lm", help="ARPA language model")
    d.add_argument("--alpha", type=float, default=0.0, help="LM weight")
    d.add_argument("--beta", type=float, default=0.0, help="token insertion bonus")
    d.add_argument("--beam", type=int, help="beam width (default 8 when beam search is on)")
    d.add_argument("--lm-unit", choices=("word", "char"), default="word")
    d.add_argument("--jobs", type=int, default=1, help="parallel decoding processes")
    d.add_argument("--out", required=True, help="hypothesis file (JSON lines)")
    d.set_defaults(func=cmd_decode)

    e = sub.add_parser("evaluate", help="score hypotheses against a corpus split")
    e.add_argument("corpus")
    e.add_argument("hyp")
    e.add_argument("--tags", help="tag inventory file (default: the corpus's tags.txt)")
    e.add_argument("--split", default="test")
    e.add_argument("--top-k", type=int, help="confusion matrix rows to keep")
    e.add_argument("--tag-only", action="store_true", help="precision/recall/F on tags alone")
    e.add_argument("--out-dir", required=True)
    e.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SluError as e:
        kind = {1: "usage", 2: "data", 3: "numeric"}.get(e.exit_code, "error")
        print(f"e2eslu: {kind} error ({type(e).__name__}): {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"e2eslu: data error (OSError): {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
