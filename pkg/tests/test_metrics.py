import functools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from e2eslu.metrics import (
    DEL,
    DEL_COLUMN,
    INS,
    INS_ROW,
    MATCH,
    OTHER,
    SUB,
    AlignmentOp,
    align_concepts,
    alignment_cost,
    cer_by_frequency,
    char_error_rate,
    concept_error_rate,
    concept_value_error_rate,
    confusion_matrix,
    edit_distance,
    entity_prf,
    evaluate_corpus,
    normalize_value,
    op_counts,
    per_concept_events,
    prf,
)
from e2eslu.tagcodec import CLOSE_SYMBOL, ConceptChunk, TagInventory


def chunks(*pairs):
    return [ConceptChunk(t, v, i) for i, (t, v) in enumerate(pairs)]


def tags(*names):
    return chunks(*[(n, n.lower()) for n in names])


# -- hand fixtures ----------------------------------------------------------------------

def test_one_substitution_one_deletion_over_four():
    al = align_concepts(tags("A", "B", "C", "D"), tags("A", "X", "C"))
    assert [op.kind for op in al] == [MATCH, SUB, MATCH, DEL]
    assert concept_error_rate(al) == 0.5


def test_value_error_only():
    ref = chunks(("A", "one"), ("B", "two"), ("C", "three"), ("D", "four"))
    hyp = chunks(("A", "one"), ("B", "two"), ("C", "tree"), ("D", "four"))
    assert concept_error_rate(align_concepts(ref, hyp, "tag")) == 0.0
    assert concept_value_error_rate(align_concepts(ref, hyp, "tag+value")) == 0.25


def test_empty_hypothesis_is_all_deletions():
    al = align_concepts(tags("A", "B"), [])
    assert [op.kind for op in al] == [DEL, DEL]
    assert concept_error_rate(al) == 1.0


def test_empty_reference_with_output_is_infinite():
    assert concept_error_rate(align_concepts([], tags("A"))) == math.inf
    assert concept_error_rate(align_concepts([], [])) == 0.0


def test_prf_fixture():
    p, r, f = prf(correct=2, n_ref=4, n_hyp=3)
    assert (p, r) == (2 / 3, 1 / 2)
    assert f == pytest.approx(4 / 7, abs=1e-15)
    assert prf(0, 0, 0) == (1.0, 1.0, 1.0)
    assert prf(0, 2, 0) == (0.0, 0.0, 0.0)


def test_entity_prf_counts_value_matches():
    ref = chunks(("A", "x"), ("B", "y"), ("C", "z"), ("D", "w"))
    hyp = chunks(("A", "x"), ("B", "y"), ("C", "q"))
    p, r, f = entity_prf(ref, hyp)
    assert (p, r) == (2 / 3, 1 / 2)
    assert entity_prf(ref, hyp, mode="tag")[0] == 1.0


def test_substitution_preferred_over_delete_insert():
    al = align_concepts(tags("A"), tags("B"))
    assert [op.kind for op in al] == [SUB]
    al = align_concepts(tags("A", "B"), tags("B"))
    assert [op.kind for op in al] == [DEL, MATCH]


def test_value_normalization():
    assert normalize_value("  New   York ") == "new york"
    a = chunks(("city", "New  York"))
    b = chunks(("city", "new york "))
    assert [op.kind for op in align_concepts(a, b, "tag+value")] == [MATCH]


def test_character_error_rate():
    assert char_error_rate("abc", "axc") == 1 / 3
    assert char_error_rate("abc", "") == 1.0
    assert char_error_rate("", "") == 0.0
    assert edit_distance("kitten", "sitting") == 3


def test_alignment_op_validation():
    with pytest.raises(ValueError):
        AlignmentOp("swap")
    with pytest.raises(ValueError):
        AlignmentOp(INS, ref=tags("A")[0])


# -- properties ---------------------------------------------------------------------------

def _recursive_distance(a, b, same):
    @functools.lru_cache(maxsize=None)
    def d(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        return min(d(i - 1, j - 1) + (0 if same(a[i - 1], b[j - 1]) else 1), d(i - 1, j) + 1, d(i, j - 1) + 1)
    return d(len(a), len(b))


CHUNK = st.tuples(st.sampled_from("ABC"), st.sampled_from(["x", "y", "X "]))
CHUNKS = st.lists(CHUNK, max_size=6).map(lambda ps: chunks(*ps))


@settings(max_examples=300, deadline=None)
@given(CHUNKS, CHUNKS, st.sampled_from(["tag", "tag+value"]))
def test_alignment_cost_is_edit_distance(ref, hyp, mode):
    al = align_concepts(ref, hyp, mode)
    if mode == "tag":
        same = lambda x, y: x.tag == y.tag  # noqa: E731
    else:
        same = lambda x, y: x.tag == y.tag and x.value.strip().lower() == y.value.strip().lower()  # noqa: E731
    assert alignment_cost(al) == _recursive_distance(tuple(ref), tuple(hyp), same)
    c = op_counts(al)
    assert c[MATCH] + c[SUB] + c[DEL] == len(ref)
    assert c[MATCH] + c[SUB] + c[INS] == len(hyp)
    assert [op.ref for op in al if op.ref is not None] == ref
    assert [op.hyp for op in al if op.hyp is not None] == hyp


@settings(max_examples=300, deadline=None)
@given(CHUNKS, CHUNKS)
def test_value_error_rate_dominates_concept_error_rate(ref, hyp):
    cer = concept_error_rate(align_concepts(ref, hyp, "tag"))
    cver = concept_value_error_rate(align_concepts(ref, hyp, "tag+value"))
    assert cver >= cer


# -- corpus report ------------------------------------------------------------------------

INV = TagInventory(("city", "date"))
CITY, DATE = INV.opening_symbols
C = CLOSE_SYMBOL


def test_corpus_report_fixture():
    pairs = [
        (f"to {CITY}paris{C} on {DATE}monday{C}", f"to {CITY}paris{C} on {DATE}sunday{C}"),
        (f"{CITY}rome{C}", ""),
        ("hello", f"{DATE}hello{C}"),
        ("", ""),
    ]
    rep, evals = evaluate_corpus(pairs, INV)
    assert rep.counts == {MATCH: 2, SUB: 0, DEL: 1, INS: 1}
    assert rep.value_counts == {MATCH: 1, SUB: 1, DEL: 1, INS: 1}
    assert rep.concept_error_rate == 2 / 3
    assert rep.concept_value_error_rate == 1.0
    assert (rep.precision, rep.recall) == (1 / 3, 1 / 3)
    assert rep.n_ref_chunks == 3 and rep.n_hyp_chunks == 3 and rep.both_empty == 1
    assert rep.error_proportions() == {SUB: 0.0, DEL: 0.5, INS: 0.5}
    assert len(evals) == 4
    assert "F-measure" in rep.table()


def test_infinite_rates_are_flagged_and_serialized_as_null():
    rep, _ = evaluate_corpus([("", f"{CITY}x{C}")], INV)
    assert rep.concept_error_rate == math.inf and rep.flags
    assert rep.to_dict()["concept_error_rate"] is None
    assert '"concept_error_rate": null' in rep.to_json()


def test_repairs_counted():
    rep, _ = evaluate_corpus([(f"{CITY}x{C}", f"{CITY}x")], INV)
    assert rep.repairs == 1 and rep.counts[MATCH] == 1


# -- confusion matrix ----------------------------------------------------------------------

def _fixture_alignments():
    return [
        align_concepts(tags("A", "B", "C"), tags("A", "C", "C")),  # B->C
        align_concepts(tags("B", "B"), tags("B")),  # B deleted
        align_concepts(tags("C"), tags("C", "A")),  # A inserted
        align_concepts(tags("A"), tags("C")),  # A->C
        align_concepts(tags("B"), tags("A")),  # B->A
    ]


def test_confusion_matrix_cells():
    cm = confusion_matrix(_fixture_alignments())
    # errors: B 3, A 1, C 0
    assert cm.rows == ["B", "A", "C", INS_ROW]
    assert cm.columns == ["B", "A", "C", DEL_COLUMN]
    expected = np.array([
        [1, 1, 1, 1],  # B: one kept, ->A, ->C, deleted
        [0, 1, 1, 0],  # A: one kept, ->C
        [0, 0, 2, 0],  # C: kept twice
        [0, 1, 0, 0],  # inserted A
    ])
    np.testing.assert_array_equal(cm.counts, expected)
    norm = cm.normalized()
    np.testing.assert_allclose(norm.sum(axis=1), 1.0, atol=1e-12)
    assert norm[0, 3] == 0.25


def test_confusion_matrix_truncation_keeps_mass():
    cm = confusion_matrix(_fixture_alignments(), top_k=1)
    assert cm.rows == ["B", INS_ROW]
    assert cm.columns == ["B", OTHER, DEL_COLUMN]
    np.testing.assert_array_equal(cm.counts, [[1, 2, 1], [0, 1, 0]])


def test_confusion_matrix_csv(tmp_path):
    cm = confusion_matrix(_fixture_alignments())
    cm.to_csv(tmp_path / "c.csv", normalized=False)
    lines = (tmp_path / "c.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == f"reference,B,A,C,{DEL_COLUMN}"
    assert lines[-1] == f"{INS_ROW},0,1,0,0"


# -- error rate by training frequency --------------------------------------------------------

def test_cer_by_frequency_fixture_and_conservation():
    als = _fixture_alignments()
    table = cer_by_frequency(als, {"A": 50, "B": 5})
    assert table == [("A", 50, 2 / 2), ("B", 5, 3 / 4), ("C", 0, 0.0)]
    events = per_concept_events(als)
    total_errors = sum(e[SUB] + e[DEL] + e[INS] for e in events.values())
    n_ref = {t: e[MATCH] + e[SUB] + e[DEL] for t, e in events.items()}
    assert sum(rate * n_ref[t] for t, _, rate in table) == pytest.approx(total_errors)
