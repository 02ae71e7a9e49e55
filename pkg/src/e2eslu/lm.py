r"""Witten-Bell back-off n-gram language model with ARPA read/write.

Probabilities are natural logs in memory and log10 in ARPA files. The
vocabulary is closed over the training tokens plus ``</s>`` and ``<unk>``;
``<unk>`` holds the unigram mass Witten-Bell reserves for unseen types.

For a context h with c(h) tokens following it and N1+(h) distinct followers,
a seen n-gram gets ``c(h, w) / (c(h) + N1+(h))`` and the remaining
``N1+(h) / (c(h) + N1+(h))`` is spread over unseen followers through the
back-off weight of h.
"""
from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Sequence, Tuple

from .errors import DataError, ParseError

logger = logging.getLogger(__name__)

BOS = "<s>"
EOS = "</s>"
UNK = "<unk>"
LN10 = math.log(10.0)
ARPA_FLOOR = -99.0


@dataclass
class NgramModel:
    order: int
    probs: Dict[Tuple[str, ...], float]  # n-gram (context + token) -> ln p
    backoffs: Dict[Tuple[str, ...], float] = field(default_factory=dict)  # context -> ln weight

    def __post_init__(self):
        self.vocab = {ng[0] for ng in self.probs if len(ng) == 1}

    def tokens(self) -> List[str]:
        """Predictable tokens (every unigram except <s>)."""
        return sorted(t for t in self.vocab if t != BOS)

    def map_token(self, token: str) -> str:
        return token if token in self.vocab else UNK

    def log_prob(self, context: Sequence[str], token: str) -> float:
        return log_prob(self, context, token)

    def ngram_counts(self) -> Dict[int, int]:
        counts = defaultdict(int)
        for ng in self.probs:
            counts[len(ng)] += 1
        return dict(sorted(counts.items()))


def estimate(sentences: Iterable[Sequence[str]], order: int = 4) -> NgramModel:
    if order < 1:
        raise DataError("n-gram order must be >= 1")
    counts = [defaultdict(int) for _ in range(order + 1)]
    n_sent = 0
    for sent in sentences:
        toks = [BOS] + list(sent) + [EOS]
        for t in sent:
            if t in (BOS, EOS, UNK):
                raise DataError(f"reserved token {t!r} in training text")
        n_sent += 1
        for n in range(1, order + 1):
            for i in range(1, len(toks)):
                start = i - n + 1
                if start < 0:
                    continue
                counts[n][tuple(toks[start:i + 1])] += 1
    if n_sent == 0:
        raise DataError("cannot estimate a language model from an empty corpus")

    # followers per context, for every order
    followers = [defaultdict(dict) for _ in range(order + 1)]
    for n in range(1, order + 1):
        for ng, c in counts[n].items():
            followers[n][ng[:-1]][ng[-1]] = c

    probs = {}
    backoffs = {}
    # unigrams
    uni = followers[1][()]
    total = sum(uni.values())
    types = len(uni)
    denom = total + types
    for w, c in uni.items():
        probs[(w,)] = math.log(c / denom)
    probs[(UNK,)] = math.log(types / denom)
    probs[(BOS,)] = ARPA_FLOOR * LN10

    for n in range(2, order + 1):
        for ctx, foll in sorted(followers[n].items()):
            c_h = sum(foll.values())
            n1 = len(foll)
            d = c_h + n1
            seen_lower = 0.0
            for w, c in foll.items():
                probs[ctx + (w,)] = math.log(c / d)
                seen_lower += math.exp(_lookup(probs, backoffs, ctx[1:], w))
            reserved = n1 / d
            rest = 1.0 - seen_lower
            if rest <= 1e-12:
                logger.warning("context %s covers all lower-order mass; back-off weight floored", ctx)
                rest = 1e-12
            backoffs[ctx] = math.log(reserved / rest)
    return NgramModel(order, probs, backoffs)


def log_prob(model: NgramModel, context: Sequence[str], token: str) -> float:
    """ln P(token | context) via the back-off recursion.

    Unknown tokens (in the prediction or the context) map to ``<unk>``.
    """
    token = model.map_token(token)
    ctx = tuple(model.map_token(t) if t != BOS else BOS for t in context)
    if model.order > 1:
        ctx = ctx[-(model.order - 1):]
    else:
        ctx = ()
    return _lookup(model.probs, model.backoffs, ctx, token)


def _lookup(probs, backoffs, ctx, token):
    penalty = 0.0
    while True:
        ng = ctx + (token,)
        if ng in probs:
            return penalty + probs[ng]
        if not ctx:
            return penalty + probs[(UNK,)]
        penalty += backoffs.get(ctx, 0.0)
        ctx = ctx[1:]


def sentence_log_prob(model: NgramModel, tokens: Sequence[str]) -> float:
    ctx = [BOS]
    total = 0.0
    for t in list(tokens) + [EOS]:
        total += log_prob(model, ctx, t)
        ctx.append(t)
    return total


# -- ARPA ------------------------------------------------------------------------------

def _fmt(x_ln: float) -> str:
    return "%.10g" % max(x_ln / LN10, ARPA_FLOOR)


def write_arpa(model: NgramModel, path):
    by_order = defaultdict(list)
    for ng in model.probs:
        by_order[len(ng)].append(ng)
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n\\data\\\n")
        for n in range(1, model.order + 1):
            f.write(f"ngram {n}={len(by_order[n])}\n")
        for n in range(1, model.order + 1):
            f.write(f"\n\\{n}-grams:\n")
            for ng in sorted(by_order[n]):
                line = _fmt(model.probs[ng]) + "\t" + " ".join(ng)
                if n < model.order and ng in model.backoffs:
                    line += "\t" + _fmt(model.backoffs[ng])
                f.write(line + "\n")
        f.write("\n\\end\\\n")


def read_arpa(path) -> NgramModel:
    with open(path, encoding="utf-8") as f:
        lines = f.read().split("\n")
    i = 0

    def err(msg):
        raise ParseError(msg, i + 1, path)

    while i < len(lines) and lines[i].strip() != "\\data\\":
        if lines[i].strip():
            err("expected \\data\\ header")
        i += 1
    if i == len(lines):
        err("missing \\data\\ header")
    i += 1
    declared = {}
    while i < len(lines) and lines[i].strip().startswith("ngram "):
        try:
            lhs, rhs = lines[i].strip()[6:].split("=")
            declared[int(lhs)] = int(rhs)
        except ValueError:
            err("malformed ngram count line")
        i += 1
    if not declared:
        err("no ngram counts in \\data\\ section")
    order = max(declared)
    if sorted(declared) != list(range(1, order + 1)):
        err("ngram orders in \\data\\ are not contiguous from 1")

    probs, backoffs = {}, {}
    seen = defaultdict(int)
    current = None
    ended = False
    while i < len(lines):
        line = lines[i].strip()
        if not line:
            i += 1
            continue
        if line == "\\end\\":
            ended = True
            break
        if line.startswith("\\") and line.endswith("-grams:"):
            try:
                current = int(line[1:-7])
            except ValueError:
                err(f"malformed section header {line!r}")
            if current not in declared:
                err(f"section for undeclared order {current}")
            i += 1
            continue
        if current is None:
            err("n-gram entry outside any section")
        parts = line.split()
        if len(parts) not in (current + 1, current + 2):
            err(f"expected {current} tokens in a {current}-gram entry")
        try:
            lp = float(parts[0]) * LN10
            bo = float(parts[current + 1]) * LN10 if len(parts) == current + 2 else None
        except ValueError:
            err("non-numeric probability or back-off weight")
        ng = tuple(parts[1:current + 1])
        probs[ng] = lp
        if bo is not None:
            backoffs[ng] = bo
        seen[current] += 1
        i += 1
    if not ended:
        err("missing \\end\\ marker")
    for n, c in declared.items():
        if seen[n] != c:
            raise ParseError(f"\\data\\ declares {c} {n}-grams but the file has {seen[n]}", None, path)
    if (UNK,) not in probs:
        logger.warning("%s has no <unk> unigram; unknown tokens will fail", path)
    return NgramModel(order, probs, backoffs)
