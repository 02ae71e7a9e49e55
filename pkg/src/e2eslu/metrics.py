"""Slot-filling and NER evaluation.

Concept sequences are aligned by minimum edit distance with unit costs.
Ties prefer match, then substitution, then deletion, then insertion, so
alignments are deterministic.

* concept error rate (tag equality) and concept-value error rate (tag and
  normalized value equality): ``(S + D + I) / N_ref``
* entity precision / recall / F from alignment matches
* character error rate: Levenshtein distance over characters / ``len(ref)``

An empty reference makes every error rate 0 if the hypothesis is empty too,
and ``inf`` (flagged in the report) otherwise.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .tagcodec import SEPARATOR, ConceptChunk, TagInventory, parse_chunks_with_repairs, plain_text

logger = logging.getLogger(__name__)

MATCH, SUB, DEL, INS = "match", "substitution", "deletion", "insertion"
KINDS = (MATCH, SUB, DEL, INS)
MODES = ("tag", "tag+value")
DEL_COLUMN = "<del>"
INS_ROW = "<ins>"
OTHER = "<other>"


@dataclass(frozen=True)
class AlignmentOp:
    kind: str
    ref: Optional[ConceptChunk] = None
    hyp: Optional[ConceptChunk] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown alignment op {self.kind!r}")
        if self.kind == INS and self.ref is not None:
            raise ValueError("insertion has no reference chunk")
        if self.kind == DEL and self.hyp is not None:
            raise ValueError("deletion has no hypothesis chunk")


def normalize_value(value: str) -> str:
    """Trim separators, collapse separator runs, case-fold."""
    return SEPARATOR.join(w for w in value.split(SEPARATOR) if w).casefold()


def chunks_equal(a: ConceptChunk, b: ConceptChunk, mode: str) -> bool:
    if a.tag != b.tag:
        return False
    return mode == "tag" or normalize_value(a.value) == normalize_value(b.value)


def _edit_table(n, m, same):
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d[i, j] = min(d[i - 1, j - 1] + (0 if same(i - 1, j - 1) else 1),
                          d[i - 1, j] + 1, d[i, j - 1] + 1)
    return d


def align_concepts(ref: Sequence[ConceptChunk], hyp: Sequence[ConceptChunk], mode: str = "tag") -> List[AlignmentOp]:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    ref, hyp = list(ref), list(hyp)

    def same(i, j):
        return chunks_equal(ref[i], hyp[j], mode)

    d = _edit_table(len(ref), len(hyp), same)
    # trace back from the end; at each cell take the first optimal move in
    # preference order, then reverse
    ops = []
    i, j = len(ref), len(hyp)
    while i > 0 or j > 0:
        if i > 0 and j > 0 and same(i - 1, j - 1) and d[i, j] == d[i - 1, j - 1]:
            ops.append(AlignmentOp(MATCH, ref[i - 1], hyp[j - 1]))
            i, j = i - 1, j - 1
        elif i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + 1 and not same(i - 1, j - 1):
            ops.append(AlignmentOp(SUB, ref[i - 1], hyp[j - 1]))
            i, j = i - 1, j - 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            ops.append(AlignmentOp(DEL, ref[i - 1], None))
            i -= 1
        else:
            ops.append(AlignmentOp(INS, None, hyp[j - 1]))
            j -= 1
    ops.reverse()
    return ops


def op_counts(alignment: Sequence[AlignmentOp]) -> Dict[str, int]:
    c = Counter(op.kind for op in alignment)
    return {k: c.get(k, 0) for k in KINDS}


def alignment_cost(alignment: Sequence[AlignmentOp]) -> int:
    c = op_counts(alignment)
    return c[SUB] + c[DEL] + c[INS]


def _rate(errors: int, n_ref: int) -> float:
    if n_ref == 0:
        return 0.0 if errors == 0 else math.inf
    return errors / n_ref


def concept_error_rate(alignment: Sequence[AlignmentOp]) -> float:
    c = op_counts(alignment)
    return _rate(c[SUB] + c[DEL] + c[INS], c[MATCH] + c[SUB] + c[DEL])


def concept_value_error_rate(alignment: Sequence[AlignmentOp]) -> float:
    """Same formula as :func:`concept_error_rate`; pass a tag+value alignment."""
    return concept_error_rate(alignment)


def prf(correct: int, n_ref: int, n_hyp: int) -> Tuple[float, float, float]:
    """Precision, recall, F. Both sides empty counts as perfect."""
    if n_ref == 0 and n_hyp == 0:
        return 1.0, 1.0, 1.0
    p = correct / n_hyp if n_hyp else 0.0
    r = correct / n_ref if n_ref else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


def entity_prf(ref: Sequence[ConceptChunk], hyp: Sequence[ConceptChunk], mode: str = "tag+value"):
    correct = op_counts(align_concepts(ref, hyp, mode))[MATCH]
    return prf(correct, len(ref), len(hyp))


def edit_distance(a: Sequence, b: Sequence) -> int:
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, 1):
            cur[j] = min(prev[j - 1] + (x != y), prev[j] + 1, cur[j - 1] + 1)
        prev = cur
    return prev[-1]


def char_error_rate(ref: str, hyp: str) -> float:
    return _rate(edit_distance(ref, hyp), len(ref))


# -- corpus level ------------------------------------------------------------------

@dataclass
class MetricsReport:
    precision: float
    recall: float
    f_measure: float
    concept_error_rate: float
    concept_value_error_rate: float
    char_error_rate: float
    counts: Dict[str, int]  # tag-mode alignment op counts
    value_counts: Dict[str, int]  # tag+value-mode alignment op counts
    n_utterances: int = 0
    n_ref_chunks: int = 0
    n_hyp_chunks: int = 0
    both_empty: int = 0  # utterances with no reference and no hypothesis chunks
    repairs: int = 0  # repairs applied while parsing hypotheses
    flags: List[str] = field(default_factory=list)

    def error_proportions(self) -> Dict[str, float]:
        """Share of substitutions, deletions and insertions among all tag errors."""
        errs = {k: self.counts[k] for k in (SUB, DEL, INS)}
        total = sum(errs.values())
        return {k: (v / total if total else 0.0) for k, v in errs.items()}

    def to_dict(self):
        d = asdict(self)
        d["error_proportions"] = self.error_proportions()
        return {k: (None if isinstance(v, float) and math.isinf(v) else v) for k, v in d.items()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self) -> str:
        def pct(x):
            return "inf" if math.isinf(x) else f"{100 * x:6.2f}"

        rows = [("F-measure", pct(self.f_measure)), ("precision", pct(self.precision)),
                ("recall", pct(self.recall)), ("concept ER", pct(self.concept_error_rate)),
                ("concept-value ER", pct(self.concept_value_error_rate)),
                ("character ER", pct(self.char_error_rate))]
        props = self.error_proportions()
        rows += [(f"{k} share", pct(props[k])) for k in (SUB, DEL, INS)]
        rows += [("utterances", str(self.n_utterances)), ("ref chunks", str(self.n_ref_chunks)),
                 ("hyp chunks", str(self.n_hyp_chunks))]
        width = max(len(r[0]) for r in rows)
        return "\n".join(f"{name:<{width}}  {val:>8}" for name, val in rows)


@dataclass
class UtteranceEval:
    ref_chunks: List[ConceptChunk]
    hyp_chunks: List[ConceptChunk]
    tag_alignment: List[AlignmentOp]
    value_alignment: List[AlignmentOp]
    char_errors: int
    ref_chars: int


def evaluate_pair(ref_text: str, hyp_text: str, inv: TagInventory) -> Tuple[UtteranceEval, int]:
    """Evaluate one chunked reference against one chunked hypothesis.

    Character error counts compare transcripts with tag symbols stripped.
    Returns the evaluation and the number of repairs the hypothesis needed.
    """
    ref_chunks, _ = parse_chunks_with_repairs(ref_text, inv)
    hyp_chunks, repairs = parse_chunks_with_repairs(hyp_text, inv)
    ref_plain = plain_text(ref_text, inv)
    hyp_plain = plain_text(hyp_text, inv)
    return UtteranceEval(ref_chunks, hyp_chunks, align_concepts(ref_chunks, hyp_chunks, "tag"),
                         align_concepts(ref_chunks, hyp_chunks, "tag+value"),
                         edit_distance(ref_plain, hyp_plain), len(ref_plain)), repairs


def evaluate_corpus(pairs: Sequence[Tuple[str, str]], inv: TagInventory):
    """Score (reference, hypothesis) chunked strings. Returns (report, per-utterance evals)."""
    evals = []
    tag_c, val_c = Counter(), Counter()
    repairs = both_empty = n_hyp = char_err = ref_chars = 0
    for ref_text, hyp_text in pairs:
        ev, r = evaluate_pair(ref_text, hyp_text, inv)
        evals.append(ev)
        repairs += r
        tag_c.update(op_counts(ev.tag_alignment))
        val_c.update(op_counts(ev.value_alignment))
        n_hyp += len(ev.hyp_chunks)
        both_empty += not ev.ref_chunks and not ev.hyp_chunks
        char_err += ev.char_errors
        ref_chars += ev.ref_chars
    tag_c = {k: tag_c.get(k, 0) for k in KINDS}
    val_c = {k: val_c.get(k, 0) for k in KINDS}
    n_ref = tag_c[MATCH] + tag_c[SUB] + tag_c[DEL]
    p, r, f = prf(val_c[MATCH], n_ref, n_hyp)
    cer = _rate(tag_c[SUB] + tag_c[DEL] + tag_c[INS], n_ref)
    cver = _rate(val_c[SUB] + val_c[DEL] + val_c[INS], n_ref)
    chars = _rate(char_err, ref_chars)
    flags = []
    if math.isinf(cer):
        flags.append("empty reference with non-empty hypothesis: concept error rates are infinite")
    if math.isinf(chars):
        flags.append("empty reference text with non-empty hypothesis: character error rate is infinite")
    report = MetricsReport(p, r, f, cer, cver, chars, tag_c, val_c, len(evals), n_ref, n_hyp,
                           both_empty, repairs, flags)
    return report, evals


def tag_only_prf(evals: Sequence[UtteranceEval]):
    correct = sum(op_counts(e.tag_alignment)[MATCH] for e in evals)
    return prf(correct, sum(len(e.ref_chunks) for e in evals), sum(len(e.hyp_chunks) for e in evals))


# -- confusion matrix --------------------------------------------------------------

@dataclass
class ConfusionMatrix:
    rows: List[str]  # reference tags by descending error count, then the insertion row
    columns: List[str]  # hypothesis tags, then OTHER (if truncated), then the deletion column
    counts: np.ndarray

    def normalized(self) -> np.ndarray:
        totals = self.counts.sum(axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            out = np.where(totals > 0, self.counts / np.maximum(totals, 1), 0.0)
        return out

    def to_csv(self, path, normalized: bool = True):
        m = self.normalized() if normalized else self.counts
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["reference"] + self.columns)
            for name, row in zip(self.rows, m):
                w.writerow([name] + [("%.6g" % v) if normalized else int(v) for v in row])


def confusion_matrix(alignments: Sequence[Sequence[AlignmentOp]], top_k: Optional[int] = None) -> ConfusionMatrix:
    """Reference-by-hypothesis concept confusion from tag-mode alignments.

    Rows are reference concepts ordered by descending error count (ties by
    name), truncated to ``top_k``, followed by an insertion row. Columns are
    the same concepts in the same order, an ``<other>`` column when the row
    set was truncated, and a final deletion column.
    """
    cells = Counter()
    errors = Counter()
    seen = set()
    for al in alignments:
        for op in al:
            r = op.ref.tag if op.ref is not None else INS_ROW
            h = op.hyp.tag if op.hyp is not None else DEL_COLUMN
            cells[(r, h)] += 1
            if op.ref is not None:
                seen.add(op.ref.tag)
                if op.kind != MATCH:
                    errors[op.ref.tag] += 1
            if op.hyp is not None:
                seen.add(op.hyp.tag)
    order = sorted(seen, key=lambda t: (-errors[t], t))
    if top_k is not None:
        order = order[:top_k]
    truncated = len(order) < len(seen)
    rows = order + [INS_ROW]
    cols = order + ([OTHER] if truncated else []) + [DEL_COLUMN]
    col_index = {c: i for i, c in enumerate(cols)}
    row_index = {r: i for i, r in enumerate(rows)}
    m = np.zeros((len(rows), len(cols)), dtype=np.int64)
    for (r, h), n in cells.items():
        if r not in row_index:
            continue
        c = col_index.get(h, col_index.get(OTHER))
        m[row_index[r], c] += n
    return ConfusionMatrix(rows, cols, m)


# -- error rate vs training frequency ----------------------------------------------

def cer_by_frequency(evals_or_alignments, training_counts: Dict[str, int]) -> List[Tuple[str, int, float]]:
    """Per-concept error rate against its training-set frequency.

    A concept's errors are the substitutions and deletions of its reference
    occurrences plus insertions of it. Concepts absent from the test
    references are omitted (and logged).
    """
    alignments = [e.tag_alignment if isinstance(e, UtteranceEval) else e for e in evals_or_alignments]
    n_ref, errs = Counter(), Counter()
    inserted = set()
    for al in alignments:
        for op in al:
            if op.ref is not None:
                n_ref[op.ref.tag] += 1
                if op.kind != MATCH:
                    errs[op.ref.tag] += 1
            else:
                errs[op.hyp.tag] += 1
                inserted.add(op.hyp.tag)
    out = []
    for tag in sorted(set(n_ref) | inserted):
        if n_ref[tag] == 0:
            logger.info("concept %s has no reference occurrence in the test set; omitted", tag)
            continue
        out.append((tag, int(training_counts.get(tag, 0)), errs[tag] / n_ref[tag]))
    return out


def per_concept_events(alignments) -> Dict[str, Dict[str, int]]:
    """Event counts per reference concept (insertions under the inserted tag)."""
    out = defaultdict(lambda: {k: 0 for k in KINDS})
    for al in alignments:
        for op in al:
            tag = op.ref.tag if op.ref is not None else op.hyp.tag
            out[tag][op.kind] += 1
    return dict(out)
