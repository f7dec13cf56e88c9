import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mlsent.data import LABELS, Dataset, DatasetError, Example, LabelSet
from mlsent.metrics import AnnotationSet, agreement_report, cohens_kappa, evaluate, load_annotations

from oracles import kappa_oracle, metrics_oracle


def test_perfect_predictions():
    rng = np.random.default_rng(0)
    gold = rng.integers(0, 2, size=(10, 5))
    gold[:, 0] = 1  # every label present somewhere
    gold[0] = 1
    r = evaluate(gold, gold)
    assert r.subset_accuracy == 1.0 and r.micro_f1 == 1.0 and r.macro_f1 == 1.0
    assert all(s.f1 == 1.0 for s in r.per_label)


def test_macro_f1_hand_example():
    # label A: TP=1, FP=1, FN=0 -> 2/3; label B: TP=0, FP=0, FN=1 -> 0
    pred = [[1, 0], [1, 0]]
    gold = [[1, 0], [0, 1]]
    r = evaluate(pred, gold, labels=("A", "B"))
    assert r.per_label[0].f1 == pytest.approx(2 / 3) and r.per_label[1].f1 == 0.0
    assert r.macro_f1 == pytest.approx(1 / 3)


def test_one_wrong_label_voids_subset_match():
    r = evaluate([[1, 1, 0, 0, 0]], [[1, 0, 0, 0, 0]])
    assert r.subset_accuracy == 0.0 and r.samples_f1 == pytest.approx(2 / 3)


def test_confusion_counts_sum_to_n_and_csv():
    rng = np.random.default_rng(1)
    p, g = rng.integers(0, 2, (37, 5)), rng.integers(0, 2, (37, 5))
    r = evaluate(p, g)
    assert all(s.tp + s.fp + s.fn + s.tn == 37 for s in r.per_label)
    lines = r.confusion_csv().splitlines()
    assert lines[0] == "label,TP,FP,FN,TN" and lines[1].startswith("Anger,")
    assert len(lines) == 6


def test_evaluate_errors():
    with pytest.raises(ValueError):
        evaluate([[1, 0, 0, 0, 0]], [[1, 0, 0, 0, 0], [0, 0, 0, 0, 0]])
    with pytest.raises(ValueError):
        evaluate(np.zeros((0, 5), int), np.zeros((0, 5), int))


def test_zero_division_convention():
    r = evaluate(np.zeros((4, 5), int), np.zeros((4, 5), int))
    assert r.subset_accuracy == 1.0
    assert r.micro_f1 == 0.0 and r.macro_f1 == 0.0 and r.samples_f1 == 0.0


def test_accepts_label_sets():
    gold = [LabelSet.from_names(["Joy"]), LabelSet()]
    assert evaluate(gold, gold).subset_accuracy == 1.0


label_rows = st.lists(st.tuples(*[st.integers(0, 1)] * 5), min_size=1, max_size=30)


@settings(max_examples=150, deadline=None)
@given(st.data())
def test_matches_rational_oracle(data):
    gold = data.draw(label_rows)
    pred = data.draw(st.lists(st.tuples(*[st.integers(0, 1)] * 5), min_size=len(gold), max_size=len(gold)))
    r, o = evaluate(pred, gold), metrics_oracle(pred, gold)
    for key in ("subset_accuracy", "micro_f1", "macro_f1", "samples_f1"):
        assert abs(getattr(r, key) - float(o[key])) < 1e-12
    for s, f1, c in zip(r.per_label, o["f1"], o["counts"]):
        assert (s.tp, s.fp, s.fn, s.tn) == c and abs(s.f1 - float(f1)) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.data())
def test_metrics_permutation_invariant(data):
    gold = data.draw(label_rows)
    pred = data.draw(st.lists(st.tuples(*[st.integers(0, 1)] * 5), min_size=len(gold), max_size=len(gold)))
    perm = data.draw(st.permutations(range(len(gold))))
    a = evaluate(pred, gold)
    b = evaluate([pred[i] for i in perm], [gold[i] for i in perm])
    assert a.summary() == pytest.approx(b.summary(), abs=1e-15)


def test_micro_equals_macro_for_identical_label_counts():
    block = np.array([[1], [1], [0], [0]])
    pred = np.repeat(np.array([[1], [0], [1], [0]]), 5, axis=1)
    gold = np.repeat(block, 5, axis=1)
    r = evaluate(pred, gold)
    assert r.micro_f1 == pytest.approx(r.macro_f1, abs=1e-15)


# kappa

def test_kappa_examples():
    assert cohens_kappa([1, 0, 1, 1], [1, 0, 1, 1]) == 1.0
    assert cohens_kappa([1, 1, 0, 0], [1, 0, 1, 0]) == 0.0
    assert cohens_kappa([1, 1, 1, 0], [1, 1, 0, 0]) == pytest.approx(0.5, abs=1e-15)
    assert cohens_kappa([1, 1, 1], [1, 1, 1]) == 1.0
    with pytest.raises(ValueError):
        cohens_kappa([], [])


@settings(max_examples=150)
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=40))
def test_kappa_matches_oracle_and_is_symmetric(pairs):
    a, b = [x for x, _ in pairs], [y for _, y in pairs]
    k = cohens_kappa(a, b)
    assert abs(k - float(kappa_oracle(a, b))) < 1e-12
    assert k == cohens_kappa(b, a)
    assert -1.0 <= k <= 1.0


# agreement

def _gold(rows):
    return Dataset([Example(f"e{i}", "t", LabelSet.from_vector(r)) for i, r in enumerate(rows)])


def _ann(name, rows):
    return AnnotationSet(name, {f"e{i}": LabelSet.from_vector(r) for i, r in enumerate(rows)})


def test_identical_annotators_agree_perfectly():
    rows = np.random.default_rng(2).integers(0, 2, (12, 5))
    rows[0], rows[1] = 1, 0
    report = agreement_report([_ann(n, rows) for n in "abc"], _gold(rows))
    assert all(v == 1.0 for v in report.per_label_kappa.values())
    assert all(r.subset_accuracy == 1.0 for r in report.per_annotator.values())


def test_agreement_composes_kappa_per_label():
    a = np.zeros((4, 5), int)
    b = np.zeros((4, 5), int)
    a[:, 0], b[:, 0] = [1, 1, 0, 0], [1, 0, 1, 0]
    a[:, 1], b[:, 1] = [1, 1, 1, 0], [1, 1, 0, 0]
    report = agreement_report([_ann("x", a), _ann("y", b)], _gold(a))
    assert report.per_label_kappa["Anger"] == 0.0
    assert report.per_label_kappa["Fear"] == pytest.approx(0.5)
    assert report.per_annotator["x"].subset_accuracy == 1.0


def test_agreement_errors():
    rows = np.zeros((3, 5), int)
    with pytest.raises(ValueError):
        agreement_report([_ann("a", rows)], _gold(rows))
    short = AnnotationSet("b", {"e0": LabelSet(), "e9": LabelSet()})
    with pytest.raises(DatasetError, match=r"missing ids \['e1', 'e2'\]"):
        agreement_report([_ann("a", rows), short], _gold(rows))


def test_load_annotations(tmp_path):
    tsv = tmp_path / "ann.tsv"
    tsv.write_text("ann1\te0\tsome text\tJoy,Fear\nann2\te0\tsome text\t\n")
    sets = {a.annotator: a for a in load_annotations(tsv)}
    assert sets["ann1"].labels["e0"].names == ["Fear", "Joy"] and len(sets["ann2"].labels["e0"]) == 0
    jl = tmp_path / "ann.jsonl"
    jl.write_text('{"annotator": "z", "id": "e0", "text": "x", "labels": ["Anger"]}\n')
    assert load_annotations(jl)[0].labels["e0"].names == ["Anger"]
