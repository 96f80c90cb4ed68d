import random
from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import TOPS, quantile_exact, quantile_numpy, segment_oracle, topology_label_oracle
from strategies import make_record, random_labels, stub_question
from topotrace.errors import (
    EmptyInput,
    EmptyResponseSet,
    MalformedGroundTruth,
    MissingTopologyScore,
    QuestionMismatch,
    ValidationError,
)
from topotrace.labeling import (
    Difficulty,
    QuestionLabels,
    TopologyScore,
    classify_difficulty,
    difficulty_thresholds,
    label_records,
    match_answer,
    outcome_label,
    quantile,
    question_labels,
    segment_difficulty,
    topology_label,
)
from topotrace.records import GenerationRecord
from topotrace.trace import TOPOLOGIES, ExtractedAnswer, TopologyKind

CHAIN = TopologyKind.CHAIN


def _ql(qid, c, t, g, n=1, difficulty=None):
    return QuestionLabels(
        qid,
        {k: TopologyScore(v, n) for k, v in zip(TOPOLOGIES, (c, t, g))},
        difficulty,
    )


# answer matching


def test_match_examples():
    assert match_answer(ExtractedAnswer("choice", choice="b"), "B", "multiple-choice") == 1
    assert match_answer(ExtractedAnswer("number", number=0.3333333), "0.333333", "free-form") == 1
    assert match_answer(None, "C", "multiple-choice") == 0


def test_match_numeric_tolerance():
    num = lambda x: ExtractedAnswer("number", number=x)  # noqa: E731
    assert match_answer(num(100.00009), "100", "free-form") == 1
    assert match_answer(num(100.001), "100", "free-form") == 0
    assert match_answer(num(5e-10), "0", "free-form") == 1
    assert match_answer(num(2e-9), "0", "free-form") == 0
    assert match_answer(ExtractedAnswer("text", text="blue whale"), "Blue  Whale.", "free-form") == 1
    assert match_answer(ExtractedAnswer("text", text="7"), "7", "free-form") == 1
    assert match_answer(ExtractedAnswer("choice", choice="A"), "B", "multiple-choice") == 0


def test_match_malformed_mc_truth():
    with pytest.raises(MalformedGroundTruth):
        match_answer(ExtractedAnswer("choice", choice="A"), "AB", "multiple-choice")
    with pytest.raises(MalformedGroundTruth):
        match_answer(None, "F", "multiple-choice")


def test_outcome_label_and_mismatch():
    q = stub_question("q1", truth="12")
    good = replace(make_record("q1", CHAIN, 0, 0), raw_text="NODE a: x\nANSWER: 12", outcome=None)
    bad = replace(good, raw_text="NODE a: x\nANSWER: 13")
    assert outcome_label(good, q) == 1
    assert outcome_label(bad, q) == 0
    with pytest.raises(QuestionMismatch):
        outcome_label(replace(good, question_id="q2"), q)


def test_outcome_injection_100():
    rng = random.Random(3)
    qs, recs, truth = {}, [], []
    for k in range(100):
        if k % 2:
            q = stub_question(f"q{k}", "multiple-choice", rng.choice("ABCDE"))
            ans = q.ground_truth if rng.random() < 0.5 else rng.choice([c for c in "ABCDE" if c != q.ground_truth])
        else:
            q = stub_question(f"q{k}", "free-form", str(rng.randint(-50, 50)))
            ans = q.ground_truth if rng.random() < 0.5 else str(int(q.ground_truth) + rng.randint(1, 9))
        qs[q.id] = q
        raw = f"TOPOLOGY: chain\nNODE a: think\nANSWER: {ans}"
        recs.append(replace(make_record(q.id, CHAIN, 0, 0), raw_text=raw, outcome=None))
        truth.append(int(ans == q.ground_truth))
    assert [r.outcome for r in label_records(recs, qs)] == truth


# topology scores


def test_topology_label_examples():
    recs = [make_record("q", CHAIN, i, h) for i, h in enumerate([1, 0, 1, 1, 0])]
    assert topology_label(recs).value == pytest.approx(0.6)
    assert topology_label([make_record("q", CHAIN, i, 1) for i in range(10)]).value == 1.0
    with pytest.raises(EmptyResponseSet):
        topology_label([])


def test_topology_label_requires_homogeneous():
    with pytest.raises(ValidationError):
        topology_label([make_record("q", CHAIN, 0, 1), make_record("q", TopologyKind.TREE, 0, 1)])
    with pytest.raises(ValidationError):
        topology_label([make_record("q", CHAIN, 0, 1), make_record("r", CHAIN, 0, 1)])


def test_topology_label_vs_counting_oracle_500():
    rng = random.Random(11)
    for _ in range(500):
        outs = [rng.randint(0, 1) for _ in range(rng.randint(1, 20))]
        got = topology_label([make_record("q", CHAIN, i, h) for i, h in enumerate(outs)])
        assert (got.n_correct, got.n_total, got.value) == topology_label_oracle(outs)


def test_score_invariants():
    for n in range(1, 8):
        vals = [TopologyScore(c, n).value for c in range(n + 1)]
        assert vals == sorted(vals)
        assert 0.0 <= min(vals) and max(vals) <= 1.0
    with pytest.raises(ValidationError):
        TopologyScore(3, 2)
    with pytest.raises(ValidationError):
        TopologyScore(0, 0)


def test_question_labels_coverage():
    recs = [make_record(q, t, 0, 1) for q in ("a", "b") for t in TOPOLOGIES]
    labels = question_labels(recs, ["b", "a"])
    assert [ql.question_id for ql in labels] == ["b", "a"]
    with pytest.raises(EmptyResponseSet):
        question_labels(recs[:-1], ["a", "b"])


def test_labels_json_round_trip():
    ql = _ql("q", 1, 2, 3, n=4, difficulty=Difficulty.HARD)
    assert QuestionLabels.from_json(ql.to_json()) == ql
    assert list(ql.to_json()["scores"]) == ["chain", "tree", "graph"]


# quantile


def test_quantile_examples():
    assert quantile([1, 2, 3, 4], 0.5) == 2.5
    for p in (0.0, 0.3, 1.0):
        assert quantile([7], p) == 7
    with pytest.raises(EmptyInput):
        quantile([], 0.5)
    with pytest.raises(ValueError):
        quantile([1], 1.5)


@settings(max_examples=500, deadline=None)
@given(
    st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=40),
    st.floats(0.0, 1.0),
)
def test_quantile_vs_oracles(values, p):
    got = quantile(values, p)
    exact = float(quantile_exact(values, p))
    scale = max(1.0, max(abs(v) for v in values))
    assert abs(got - exact) <= 1e-12 * scale
    assert abs(got - quantile_numpy(values, p)) <= 1e-9 * scale


# segmentation


def test_segment_extremal():
    labels = [_ql("top", 1, 1, 1)] + [_ql(f"z{i}", 0, 0, 0) for i in range(9)]
    tiers = segment_difficulty(labels)
    assert tiers["top"] is Difficulty.EASY
    assert all(tiers[f"z{i}"] in (Difficulty.HARD, Difficulty.MEDIUM) for i in range(9))


def test_segment_all_equal_is_medium():
    labels = [_ql(f"q{i}", 2, 2, 2, n=4) for i in range(6)]
    assert set(segment_difficulty(labels).values()) == {Difficulty.MEDIUM}


def test_segment_preconditions():
    with pytest.raises(EmptyInput):
        segment_difficulty([_ql("a", 1, 1, 1)])
    with pytest.raises(ValidationError):
        segment_difficulty([_ql("a", 1, 1, 1), _ql("b", 0, 0, 0)], q_hi=0.1, q_lo=0.5)
    partial = QuestionLabels("x", {CHAIN: TopologyScore(1, 1)})
    with pytest.raises(MissingTopologyScore):
        segment_difficulty([partial, _ql("b", 0, 0, 0)])


def test_segment_vs_rule_oracle_200():
    rng = random.Random(5)
    for _ in range(200):
        labels = random_labels(rng, rng.randint(2, 30), n_total=rng.choice((None, 4, 10)))
        tiers = segment_difficulty(labels)
        scores = {ql.question_id: {t.value: ql.f(t) for t in TOPOLOGIES} for ql in labels}
        expected = segment_oracle(scores, 0.85, 0.15)
        assert {k: v.value for k, v in tiers.items()} == expected
        # partition: every question exactly once
        assert sorted(tiers) == sorted(ql.question_id for ql in labels)
        th = difficulty_thresholds(labels)
        for ql in labels:
            if tiers[ql.question_id] is Difficulty.EASY:
                assert all(ql.f(t) > th.hi[t] for t in TOPOLOGIES)
            if tiers[ql.question_id] is Difficulty.HARD:
                assert all(ql.f(t) < th.lo[t] for t in TOPOLOGIES)


def test_relabel_wrong_never_promotes_to_easy():
    rng = random.Random(8)
    for _ in range(200):
        labels = random_labels(rng, rng.randint(3, 15), n_total=5)
        th = difficulty_thresholds(labels)
        k = rng.randrange(len(labels))
        ql = labels[k]
        t = rng.choice(TOPOLOGIES)
        if ql.scores[t].n_correct == 0:
            continue
        lowered = replace(ql, scores={**ql.scores, t: TopologyScore(ql.scores[t].n_correct - 1, 5)})
        before = classify_difficulty(ql, th)
        after = classify_difficulty(lowered, th)
        if before is not Difficulty.EASY:
            assert after is not Difficulty.EASY


def test_label_records_keeps_order_and_sets_outcome():
    q = stub_question("q", truth="3")
    recs = [
        GenerationRecord("q", t, i, "m", f"ANSWER: {i}", 2)
        for t in TOPOLOGIES
        for i in range(4)
    ]
    out = label_records(recs, {"q": q})
    assert [r.record_id for r in out] == [r.record_id for r in recs]
    assert [r.outcome for r in out] == [int(i == 3) for _ in TOPS for i in range(4)]
