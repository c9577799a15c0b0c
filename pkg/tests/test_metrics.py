import random

import pytest
from hypothesis import given, strategies as st

from lobavqa.metrics import (
    LabelLexicon, MetricsError, evaluate, extract_labels, flip_rate, micro_prf, normalize_yesno,
    strip_localization,
)

LEX = LabelLexicon.default()
LABELS = ["a", "b", "c", "d"]


def brute_prf(pred, gold):
    # enumerate every (item, label) cell of the confusion matrix
    tp = fp = fn = 0
    for p, g in zip(pred, gold):
        for label in set(LABELS) | set(p) | set(g):
            tp += label in p and label in g
            fp += label in p and label not in g
            fn += label not in p and label in g
    P = tp / (tp + fp) if tp + fp else 0.0
    R = tp / (tp + fn) if tp + fn else 0.0
    return P, R, (2 * P * R / (P + R) if P + R else 0.0)


def test_paper_extraction_example():
    text = "The heart suffers from pneumonia, pulmonary fibrosis and nodule/mass"
    assert extract_labels(text, LEX) == {"pneumonia", "pulmonary fibrosis", "nodule/mass"}


def test_extraction_empty_and_negation():
    assert extract_labels("", LEX) == set()
    assert extract_labels("no pneumonia, but shows nodule", LEX) == {"nodule/mass"}
    assert extract_labels("without effusion", LEX) == set()
    assert extract_labels("No abnormalities are present in the heart.", LEX) == set()


def test_extraction_longest_match():
    lex = LabelLexicon({"fibrosis": ["fibrosis"], "pulmonary fibrosis": ["pulmonary fibrosis"]})
    assert extract_labels("signs of pulmonary fibrosis", lex) == {"pulmonary fibrosis"}


def test_lexicon_rejects_shared_synonyms():
    with pytest.raises(MetricsError):
        LabelLexicon({"a": ["mass"], "b": ["mass"]})


@given(st.text())
def test_extraction_subset_and_idempotent(text):
    found = extract_labels(text, LEX)
    assert found <= set(LEX.labels)
    assert extract_labels(text, LEX) == found
    rendered = " and ".join(sorted(found))
    assert extract_labels(rendered, LEX) == found


@pytest.mark.parametrize("text,expected", [
    ("Yes.", "yes"), ("No, there is nothing", "no"), ("Possibly", "unparseable"), ("", "unparseable"),
    ("The location of the heart is at <SEG>. Yes.", "yes"), ("  NO!", "no"),
])
def test_normalize_yesno(text, expected):
    assert normalize_yesno(text) == expected


def test_strip_localization():
    assert strip_localization("The location of the left lower lung is at <SEG>. No.") == "No."
    assert strip_localization("Yes.") == "Yes."


def test_micro_prf_examples():
    gold = [{"a"}, {"b", "c"}, {"a", "d"}]
    assert micro_prf(gold, gold) == (1.0, 1.0, 1.0)
    assert micro_prf([set(), set(), set()], gold) == (0.0, 0.0, 0.0)
    # TP=3, FP=1, FN=2
    pred = [{"a"}, {"b", "d"}, {"a"}]
    gold = [{"a"}, {"b", "c"}, {"a", "d"}]
    P, R, F = micro_prf(pred, gold)
    assert (P, R) == (0.75, 0.6)
    assert F == pytest.approx(2 * 0.75 * 0.6 / 1.35, abs=1e-15)


def test_micro_prf_length_mismatch():
    with pytest.raises(MetricsError):
        micro_prf([set()], [])


def test_micro_prf_matches_brute_force():
    rng = random.Random(0)
    for _ in range(300):
        n = rng.randint(0, 6)
        pred = [set(rng.sample(LABELS, rng.randint(0, 3))) for _ in range(n)]
        gold = [set(rng.sample(LABELS, rng.randint(0, 3))) for _ in range(n)]
        assert micro_prf(pred, gold) == brute_prf(pred, gold)


def test_flip_rate():
    assert flip_rate(["yes"] * 4, ["no"] * 4) == 1.0
    assert flip_rate(["yes"] * 4, ["yes"] * 4) == 0.0
    assert flip_rate(["yes"] * 10, ["no"] * 7 + ["yes"] * 3) == 0.7
    assert flip_rate(["yes"] * 2, ["unparseable", "no"]) == 0.5
    with pytest.raises(MetricsError):
        flip_rate([], [])


@given(st.lists(st.sampled_from(["yes", "no", "unparseable"]), min_size=1), st.randoms())
def test_flip_rate_permutation_invariant(after, rnd):
    shuffled = list(after)
    rnd.shuffle(shuffled)
    before = ["yes"] * len(after)
    assert flip_rate(before, after) == flip_rate(before, shuffled)


def test_evaluate_report(small_shard):
    gold = {q.qa_id: q.gold_answer for q in small_shard.qa}
    report = evaluate(gold, small_shard, tpt_after=["No.", "Yes."], vpt_after=["No."])
    assert report.per_kind["closed"].f1 == 1.0
    assert report.per_kind["open_abnormal"].f1 == 1.0
    assert report.tpt_score == 0.5 and report.vpt_score == 1.0
    assert report.counts["tpt"] == 2
    for m in report.per_kind.values():
        assert 0 <= m.precision <= 1 and 0 <= m.recall <= 1 and 0 <= m.f1 <= 1
    assert "closed" in report.table() and '"tpt_score": 0.5' in report.to_json()


def test_evaluate_unparseable_counts_as_wrong(small_shard):
    preds = {q.qa_id: "Maybe." for q in small_shard.qa}
    report = evaluate(preds, small_shard)
    assert report.per_kind["closed"].accuracy == 0.0
    with pytest.raises(MetricsError):
        evaluate({}, small_shard)
