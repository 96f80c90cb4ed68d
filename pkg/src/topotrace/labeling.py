"""Outcome labels, per-question topology scores and difficulty tiers."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace
from typing import Iterable, Mapping, Sequence

from topotrace.errors import (
    EmptyInput,
    EmptyResponseSet,
    MalformedGroundTruth,
    MissingTopologyScore,
    QuestionMismatch,
    ValidationError,
)
from topotrace.records import GenerationRecord, Question
from topotrace.trace import (
    TOPOLOGIES,
    ExtractedAnswer,
    TopologyKind,
    extract_answer,
    normalize_text,
    parse_number,
)

REL_TOL = 1e-6
ZERO_ABS_TOL = 1e-9


class Difficulty(enum.Enum):
    EASY = "easy"
    MEDIUM = "medium"
    HARD = "hard"

    def __str__(self) -> str:
        return self.value


def match_answer(extracted: ExtractedAnswer | None, ground_truth: str, qtype: str) -> int:
    """1 if ``extracted`` matches ``ground_truth`` else 0.

    Numbers match within a relative tolerance of 1e-6 (absolute 1e-9 when
    the truth is zero); text compares after normalization.
    """
    gt = str(ground_truth).strip()
    if not gt:
        raise MalformedGroundTruth("empty ground truth")
    if qtype == "multiple-choice":
        letter = gt.strip("().").upper()
        if len(letter) != 1 or letter not in "ABCDE":
            raise MalformedGroundTruth(f"multiple-choice ground truth must be a letter A-E, got {gt!r}")
        if extracted is None:
            return 0
        return int(extracted.kind == "choice" and extracted.choice.upper() == letter)

    if extracted is None:
        return 0
    if extracted.kind == "number":
        truth = parse_number(gt)
        if truth is None:
            return 0
        if truth == 0.0:
            return int(abs(extracted.number) <= ZERO_ABS_TOL)
        return int(abs(extracted.number - truth) <= REL_TOL * abs(truth))
    if extracted.kind == "text":
        return int(normalize_text(extracted.text) == normalize_text(gt))
    return int(normalize_text(extracted.choice) == normalize_text(gt))


def outcome_label(record: GenerationRecord, question: Question) -> int:
    if record.question_id != question.id:
        raise QuestionMismatch(f"record for {record.question_id!r} checked against {question.id!r}")
    return match_answer(extract_answer(record.raw_text, question.qtype), question.ground_truth, question.qtype)


def label_records(records: Iterable[GenerationRecord], questions: Mapping[str, Question]) -> list[GenerationRecord]:
    """Attach outcome labels; re-extracts answers so stored fields stay consistent."""
    out = []
    for r in records:
        q = questions.get(r.question_id)
        if q is None:
            raise QuestionMismatch(f"response references unknown question {r.question_id!r}")
        answer = extract_answer(r.raw_text, q.qtype)
        out.append(replace(r, answer=answer, outcome=match_answer(answer, q.ground_truth, q.qtype)))
    return out


@dataclass(frozen=True)
class TopologyScore:
    n_correct: int
    n_total: int

    def __post_init__(self):
        if self.n_total <= 0:
            raise EmptyResponseSet("topology score needs at least one response")
        if not 0 <= self.n_correct <= self.n_total:
            raise ValidationError(f"n_correct={self.n_correct} outside [0, {self.n_total}]")

    @property
    def value(self) -> float:
        return self.n_correct / self.n_total

    def to_json(self) -> dict:
        return {"n_correct": self.n_correct, "n_total": self.n_total, "value": self.value}


def topology_label(records: Sequence[GenerationRecord]) -> TopologyScore:
    """Fraction of correct responses for one (question, topology) cell."""
    if not records:
        raise EmptyResponseSet("no responses for this (question, topology)")
    keys = {(r.question_id, r.declared_topology) for r in records}
    if len(keys) != 1:
        raise ValidationError(f"records span several (question, topology) cells: {sorted(map(str, keys))}")
    if any(r.outcome is None for r in records):
        raise ValidationError("records must carry outcome labels")
    return TopologyScore(sum(r.outcome for r in records), len(records))


@dataclass(frozen=True)
class QuestionLabels:
    question_id: str
    scores: Mapping[TopologyKind, TopologyScore]
    difficulty: Difficulty | None = None

    def f(self, topology: TopologyKind) -> float:
        try:
            return self.scores[topology].value
        except KeyError:
            raise MissingTopologyScore(f"{self.question_id}: no {topology.value} score") from None

    def to_json(self) -> dict:
        return {
            "question_id": self.question_id,
            "scores": {t.value: self.scores[t].to_json() for t in TOPOLOGIES if t in self.scores},
            "difficulty": self.difficulty.value if self.difficulty else None,
        }

    @classmethod
    def from_json(cls, obj: dict) -> QuestionLabels:
        scores = {
            TopologyKind.parse(k): TopologyScore(int(v["n_correct"]), int(v["n_total"]))
            for k, v in obj["scores"].items()
        }
        diff = obj.get("difficulty")
        return cls(str(obj["question_id"]), scores, Difficulty(diff) if diff else None)


def question_labels(
    records: Iterable[GenerationRecord], question_order: Sequence[str]
) -> list[QuestionLabels]:
    """Group labeled records into one :class:`QuestionLabels` per question.

    Every question in ``question_order`` must have at least one response for
    each of the three topologies.
    """
    cells: dict[tuple[str, TopologyKind], list[GenerationRecord]] = {}
    for r in records:
        cells.setdefault((r.question_id, r.declared_topology), []).append(r)
    out = []
    for qid in question_order:
        scores = {}
        for t in TOPOLOGIES:
            cell = cells.get((qid, t))
            if not cell:
                raise EmptyResponseSet(f"question {qid!r} has no {t.value} responses")
            scores[t] = topology_label(cell)
        out.append(QuestionLabels(qid, scores))
    return out


def quantile(values: Sequence[float], p: float) -> float:
    """Linear interpolation between order statistics at rank ``p * (n - 1)``."""
    if not len(values):
        raise EmptyInput("quantile of an empty sequence")
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must be in [0, 1], got {p}")
    v = sorted(values)
    h = p * (len(v) - 1)
    lo = math.floor(h)
    frac = h - lo
    if lo + 1 >= len(v) or frac == 0.0:
        return float(v[lo])
    return float(v[lo] + frac * (v[lo + 1] - v[lo]))


@dataclass(frozen=True)
class Thresholds:
    hi: Mapping[TopologyKind, float]
    lo: Mapping[TopologyKind, float]
    q_hi: float = 0.85
    q_lo: float = 0.15


def difficulty_thresholds(all_labels: Sequence[QuestionLabels], q_hi: float = 0.85, q_lo: float = 0.15) -> Thresholds:
    for ql in all_labels:
        missing = [t.value for t in TOPOLOGIES if t not in ql.scores]
        if missing:
            raise MissingTopologyScore(f"question {ql.question_id!r} lacks scores for {missing}")
    hi = {t: quantile([ql.f(t) for ql in all_labels], q_hi) for t in TOPOLOGIES}
    lo = {t: quantile([ql.f(t) for ql in all_labels], q_lo) for t in TOPOLOGIES}
    return Thresholds(hi, lo, q_hi, q_lo)


def classify_difficulty(ql: QuestionLabels, th: Thresholds) -> Difficulty:
    if all(ql.f(t) > th.hi[t] for t in TOPOLOGIES):
        return Difficulty.EASY
    if all(ql.f(t) < th.lo[t] for t in TOPOLOGIES):
        return Difficulty.HARD
    return Difficulty.MEDIUM


def segment_difficulty(
    all_labels: Sequence[QuestionLabels], q_hi: float = 0.85, q_lo: float = 0.15
) -> dict[str, Difficulty]:
    """Easy/Medium/Hard per question from per-topology quantile thresholds.

    Easy requires every topology score strictly above that topology's
    ``q_hi`` quantile; Hard requires every score strictly below its ``q_lo``
    quantile. Everything else is Medium.
    """
    if len(all_labels) < 2:
        raise EmptyInput("difficulty segmentation needs at least two questions")
    if not 0.0 < q_lo < q_hi < 1.0:
        raise ValidationError(f"need 0 < q_lo < q_hi < 1, got q_lo={q_lo}, q_hi={q_hi}")
    th = difficulty_thresholds(all_labels, q_hi, q_lo)
    return {ql.question_id: classify_difficulty(ql, th) for ql in all_labels}


def with_difficulty(all_labels: Sequence[QuestionLabels], tiers: Mapping[str, Difficulty]) -> list[QuestionLabels]:
    return [replace(ql, difficulty=tiers[ql.question_id]) for ql in all_labels]

