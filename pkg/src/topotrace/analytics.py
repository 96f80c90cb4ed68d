"""Corpus statistics over labeled generations and their CSV/text renderings."""

from __future__ import annotations

import csv
import io
import os
from collections import defaultdict
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from topotrace.errors import EmptyCorpus
from topotrace.labeling import QuestionLabels, quantile
from topotrace.records import GenerationRecord, Question
from topotrace.trace import TOPOLOGIES, TopologyKind

TIE_POLICY = "k-way ties split one win as 1/k credit to each tied topology"


@dataclass(frozen=True)
class WinRateReport:
    rate: Mapping[TopologyKind, float]
    credit: Mapping[TopologyKind, Fraction]
    n_questions: int
    tie_policy_note: str = TIE_POLICY


def winners(ql: QuestionLabels) -> list[TopologyKind]:
    best = max(ql.f(t) for t in TOPOLOGIES)
    return [t for t in TOPOLOGIES if ql.f(t) == best]


def win_rate(labels: Sequence[QuestionLabels]) -> WinRateReport:
    if not labels:
        raise EmptyCorpus("win rate over zero questions")
    # exact rational credit keeps the sum equal to N_Q regardless of order
    credit = {t: Fraction(0) for t in TOPOLOGIES}
    for ql in labels:
        top = winners(ql)
        for t in top:
            credit[t] += Fraction(1, len(top))
    n = len(labels)
    return WinRateReport({t: float(credit[t] / n) for t in TOPOLOGIES}, credit, n)


@dataclass(frozen=True)
class SubjectCell:
    subject: str
    topology: TopologyKind
    accuracy: float
    n: int


def subject_accuracy(records: Iterable[GenerationRecord], questions: Mapping[str, Question]) -> list[SubjectCell]:
    """Accuracy per (subject, prompted topology); rows sorted by subject then topology."""
    correct: dict[tuple[str, TopologyKind], int] = defaultdict(int)
    total: dict[tuple[str, TopologyKind], int] = defaultdict(int)
    for r in records:
        if r.outcome is None:
            raise ValueError(f"record {r.record_id} has no outcome label")
        key = (questions[r.question_id].subject, r.declared_topology)
        total[key] += 1
        correct[key] += r.outcome
    return [
        SubjectCell(s, t, correct[(s, t)] / total[(s, t)], total[(s, t)])
        for s, t in sorted(total, key=lambda k: (k[0], k[1].rank))
    ]


@dataclass(frozen=True)
class LengthSummary:
    mean: float
    median: float
    q25: float
    q75: float
    n: int


def length_stats(records: Iterable[GenerationRecord]) -> dict[TopologyKind, LengthSummary]:
    groups: dict[TopologyKind, list[int]] = defaultdict(list)
    for r in records:
        groups[r.declared_topology].append(r.token_length)
    out = {}
    for t in TOPOLOGIES:
        xs = groups.get(t)
        if not xs:
            continue
        xs = sorted(xs)
        out[t] = LengthSummary(
            mean=sum(xs) / len(xs),
            median=quantile(xs, 0.5),
            q25=quantile(xs, 0.25),
            q75=quantile(xs, 0.75),
            n=len(xs),
        )
    return out


def topology_fractions(
    records: Iterable[GenerationRecord], split_of: Mapping[str, str]
) -> dict[str, dict[TopologyKind, float]]:
    """Share of each *classified* topology per split.

    ``split_of`` maps question id to split name (usually the dataset).
    Records whose trace could not be classified are left out.
    """
    counts: dict[str, dict[TopologyKind, int]] = defaultdict(lambda: {t: 0 for t in TOPOLOGIES})
    for r in records:
        if r.classified_topology is None:
            continue
        counts[split_of[r.question_id]][r.classified_topology] += 1
    out = {}
    for split in sorted(counts):
        row = counts[split]
        n = sum(row.values())
        out[split] = {t: row[t] / n for t in TOPOLOGIES}
    return out


# rendering


def _fmt(x: float) -> str:
    return repr(float(x))


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue(), encoding="utf-8")


def write_win_rate_csv(path: str | os.PathLike, rep: WinRateReport) -> None:
    _write_csv(Path(path), ("topology", "rate", "n"), ((t.value, _fmt(rep.rate[t]), rep.n_questions) for t in TOPOLOGIES))


def write_subject_accuracy_csv(path: str | os.PathLike, cells: Sequence[SubjectCell]) -> None:
    _write_csv(
        Path(path),
        ("subject", "topology", "accuracy", "n"),
        ((c.subject, c.topology.value, _fmt(c.accuracy), c.n) for c in cells),
    )


def write_length_stats_csv(path: str | os.PathLike, stats: Mapping[TopologyKind, LengthSummary]) -> None:
    _write_csv(
        Path(path),
        ("topology", "mean", "median", "q25", "q75", "n"),
        (
            (t.value, _fmt(s.mean), _fmt(s.median), _fmt(s.q25), _fmt(s.q75), s.n)
            for t, s in sorted(stats.items(), key=lambda kv: kv[0].rank)
        ),
    )


def write_topology_fractions_csv(path: str | os.PathLike, fr: Mapping[str, Mapping[TopologyKind, float]]) -> None:
    _write_csv(
        Path(path),
        ("split", "topology", "fraction"),
        ((split, t.value, _fmt(fr[split][t])) for split in sorted(fr) for t in TOPOLOGIES),
    )


def format_summary(
    rep: WinRateReport | None,
    cells: Sequence[SubjectCell],
    stats: Mapping[TopologyKind, LengthSummary],
    fractions: Mapping[str, Mapping[TopologyKind, float]],
) -> str:
    lines = []
    if rep is not None:
        lines.append(f"Win rate over {rep.n_questions} questions ({rep.tie_policy_note})")
        lines += [f"  {t.value:<6} {100 * rep.rate[t]:6.1f}%" for t in TOPOLOGIES]
        lines.append("")
    if stats:
        lines.append("Generated length (tokens)")
        lines.append(f"  {'':<6} {'mean':>8} {'median':>8} {'q25':>8} {'q75':>8} {'n':>6}")
        for t in TOPOLOGIES:
            if t in stats:
                s = stats[t]
                lines.append(f"  {t.value:<6} {s.mean:8.1f} {s.median:8.1f} {s.q25:8.1f} {s.q75:8.1f} {s.n:6d}")
        lines.append("")
    if cells:
        lines.append("Accuracy by subject")
        for c in cells:
            lines.append(f"  {c.subject:<24} {c.topology.value:<6} {100 * c.accuracy:6.1f}%  (n={c.n})")
        lines.append("")
    if fractions:
        lines.append("Classified topology share")
        lines.append(f"  {'split':<16} " + " ".join(f"{t.value:>7}" for t in TOPOLOGIES))
        for split, row in fractions.items():
            lines.append(f"  {split:<16} " + " ".join(f"{100 * row[t]:6.1f}%" for t in TOPOLOGIES))
        lines.append("")
    return "\n".join(lines)
