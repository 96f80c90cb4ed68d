"""SFT and preference-pair dataset construction."""

from __future__ import annotations

import logging
import math
import random
from collections import defaultdict
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

from topotrace.errors import LeakageError, ValidationError
from topotrace.genclient.templates import contains_sentinel, strip_topology_instructions
from topotrace.labeling import Difficulty, QuestionLabels, quantile
from topotrace.records import GenerationRecord, Question
from topotrace.trace import TopologyKind

log = logging.getLogger(__name__)

VARIANTS = ("standard", "frugal_v1", "frugal_v2")
DEFAULT_MAX_PAIRS = 4
DEFAULT_LENGTH_QUANTILE = 0.25

Scorer = Callable[[Question, GenerationRecord], float]


def training_prompt(question: Question) -> str:
    """Question text as it appears in training data, with no topology instructions."""
    prompt = strip_topology_instructions(question.text())
    if contains_sentinel(prompt):
        raise LeakageError(f"question {question.id!r}: topology instructions survived stripping")
    return prompt


@dataclass(frozen=True)
class SftRecord:
    question_id: str
    prompt: str
    response: str
    topology: TopologyKind
    difficulty: Difficulty
    orm_score: float
    record_id: str = ""

    def to_json(self) -> dict:
        return {
            "question_id": self.question_id,
            "prompt": self.prompt,
            "response": self.response,
            "topology": self.topology.value,
            "difficulty": self.difficulty.value,
            "orm_score": self.orm_score,
        }


class StubORM:
    """Stand-in outcome reward model: ``H_r * F_{q, t(r)}``.

    Correct responses from topologies that do well on the question score
    higher; incorrect ones score 0.
    """

    def __init__(self, labels: Mapping[str, QuestionLabels]):
        self.labels = labels

    def __call__(self, question: Question, record: GenerationRecord) -> float:
        return stub_orm_score(self.labels[question.id], record)


def stub_orm_score(question_labels: QuestionLabels, record: GenerationRecord) -> float:
    if record.outcome is None:
        raise ValidationError(f"record {record.record_id} has no outcome label")
    return record.outcome * question_labels.f(record.declared_topology)


def _require_outcomes(records: Iterable[GenerationRecord]) -> list[GenerationRecord]:
    records = list(records)
    for r in records:
        if r.outcome is None:
            raise ValidationError(f"record {r.record_id} has no outcome label")
    return records


def select_balanced(
    labels: Sequence[QuestionLabels], per_tier: Mapping[Difficulty, int], seed: int = 0
) -> list[str]:
    """Sample ``min(quota, available)`` question ids from every tier.

    Sampling uses a seeded RNG over ids sorted within the tier, so the result
    depends only on the label set and the seed. Returned ids are sorted.
    """
    by_tier: dict[Difficulty, list[str]] = defaultdict(list)
    for ql in labels:
        if ql.difficulty is None:
            raise ValidationError(f"question {ql.question_id!r} has no difficulty tier")
        by_tier[ql.difficulty].append(ql.question_id)
    rng = random.Random(seed)
    chosen: list[str] = []
    for tier in Difficulty:
        pool = sorted(by_tier.get(tier, []))
        k = min(per_tier.get(tier, 0), len(pool))
        chosen += rng.sample(pool, k)
    return sorted(chosen)


def build_sft(
    records: Iterable[GenerationRecord],
    questions: Mapping[str, Question],
    labels: Sequence[QuestionLabels],
    scorer: Scorer,
    per_tier: Mapping[Difficulty, int],
    keep_top_m: int = 1,
    seed: int = 0,
) -> list[SftRecord]:
    """Three-step filter: balanced tier sampling, positives only, top-m by score.

    Ties in score go to the shorter response, then to the smaller record id.
    Questions with no correct response are skipped with a warning.
    """
    if keep_top_m < 1:
        raise ValidationError("keep_top_m must be >= 1")
    records = _require_outcomes(records)
    tier_of = {ql.question_id: ql.difficulty for ql in labels}
    selected = select_balanced(labels, per_tier, seed)

    by_q: dict[str, list[GenerationRecord]] = defaultdict(list)
    for r in records:
        by_q[r.question_id].append(r)

    out = []
    for qid in selected:
        q = questions[qid]
        positives = [r for r in by_q.get(qid, []) if r.outcome == 1]
        if not positives:
            log.warning("question %s has no correct responses; skipped", qid)
            continue
        scored = [(float(scorer(q, r)), r) for r in positives]
        scored.sort(key=lambda sr: (-sr[0], sr[1].token_length, sr[1].record_id))
        prompt = training_prompt(q)
        for score, r in scored[:keep_top_m]:
            out.append(SftRecord(qid, prompt, r.raw_text, r.declared_topology, tier_of[qid], score, r.record_id))
    return out


@dataclass(frozen=True)
class PreferencePair:
    question_id: str
    prompt: str
    winner: GenerationRecord
    loser: GenerationRecord
    variant: str

    def to_json(self) -> dict:
        def side(r: GenerationRecord) -> dict:
            return {"text": r.raw_text, "length": r.token_length, "topology": r.declared_topology.value}

        return {
            "question_id": self.question_id,
            "prompt": self.prompt,
            "winner": side(self.winner),
            "loser": side(self.loser),
            "variant": self.variant,
        }

    def key(self) -> tuple[str, str]:
        return self.winner.record_id, self.loser.record_id


def zip_pairs(winners: Sequence, losers: Sequence, max_pairs: int | None) -> list[tuple[int, int]]:
    """Index pairs from cycling both lists in lockstep, without repeats.

    Pair ``i`` is ``(i mod |W|, (i + i // lcm) mod |L|)``. The first
    ``lcm(|W|, |L|)`` pairs are the plain cycled zip; the shift per block
    walks the remaining combinations so the first ``|W|*|L|`` pairs are all
    distinct.
    """
    nw, nl = len(winners), len(losers)
    if not nw or not nl:
        return []
    total = nw * nl if max_pairs is None else min(max_pairs, nw * nl)
    period = math.lcm(nw, nl)
    return [(i % nw, (i + i // period) % nl) for i in range(total)]


def _pair_question(
    winners: list[GenerationRecord],
    losers: list[GenerationRecord],
    prompt: str,
    variant: str,
    max_pairs: int | None,
) -> list[PreferencePair]:
    winners = sorted(winners, key=lambda r: (r.token_length, r.record_id))
    losers = sorted(losers, key=lambda r: (-r.token_length, r.record_id))
    return [
        PreferencePair(winners[i].question_id, prompt, winners[i], losers[j], variant)
        for i, j in zip_pairs(winners, losers, max_pairs)
    ]


def _group(records: Iterable[GenerationRecord]) -> dict[str, list[GenerationRecord]]:
    by_q: dict[str, list[GenerationRecord]] = defaultdict(list)
    for r in records:
        by_q[r.question_id].append(r)
    return by_q


def length_threshold(records: Sequence[GenerationRecord], p: float = DEFAULT_LENGTH_QUANTILE) -> float:
    """Corpus-wide length quantile used by the frugal variants."""
    return quantile([r.token_length for r in records], p)


def build_pairs(
    records: Iterable[GenerationRecord],
    questions: Mapping[str, Question],
    variant: str = "standard",
    max_pairs: int | None = DEFAULT_MAX_PAIRS,
    p: float = DEFAULT_LENGTH_QUANTILE,
) -> list[PreferencePair]:
    """Preference pairs for one variant.

    ``standard``: correct beats incorrect. ``frugal_v1``: only correct
    responses at or under the corpus length quantile win, incorrect ones lose.
    ``frugal_v2``: same winners; losers also include correct responses
    longer than the threshold. ``max_pairs=None`` keeps every combination.
    """
    if variant not in VARIANTS:
        raise ValidationError(f"unknown pair variant {variant!r}; expected one of {VARIANTS}")
    records = _require_outcomes(records)
    if not records:
        return []
    limit = length_threshold(records, p) if variant != "standard" else math.inf

    out: list[PreferencePair] = []
    by_q = _group(records)
    for qid in sorted(by_q):
        group = by_q[qid]
        if variant == "standard":
            winners = [r for r in group if r.outcome == 1]
            losers = [r for r in group if r.outcome == 0]
        else:
            winners = [r for r in group if r.outcome == 1 and r.token_length <= limit]
            losers = [r for r in group if r.outcome == 0]
            if variant == "frugal_v2":
                losers += [r for r in group if r.outcome == 1 and r.token_length > limit]
        if not winners or not losers:
            continue
        out += _pair_question(winners, losers, training_prompt(questions[qid]), variant, max_pairs)
    return out


def build_pref_standard(records, questions, max_pairs: int | None = DEFAULT_MAX_PAIRS) -> list[PreferencePair]:
    return build_pairs(records, questions, "standard", max_pairs)


def build_pref_frugal_v1(
    records, questions, p: float = DEFAULT_LENGTH_QUANTILE, max_pairs: int | None = DEFAULT_MAX_PAIRS
) -> list[PreferencePair]:
    return build_pairs(records, questions, "frugal_v1", max_pairs, p)


def build_pref_frugal_v2(
    records, questions, p: float = DEFAULT_LENGTH_QUANTILE, max_pairs: int | None = DEFAULT_MAX_PAIRS
) -> list[PreferencePair]:
    return build_pairs(records, questions, "frugal_v2", max_pairs, p)
