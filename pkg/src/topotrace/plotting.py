"""Report figures. Rendering only; every number comes from :mod:`topotrace.analytics`."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from topotrace.analytics import SubjectCell, WinRateReport  # noqa: E402
from topotrace.records import GenerationRecord  # noqa: E402
from topotrace.trace import TOPOLOGIES, TopologyKind  # noqa: E402

COLORS = {TopologyKind.CHAIN: "#4c72b0", TopologyKind.TREE: "#55a868", TopologyKind.GRAPH: "#c44e52"}
# no timestamp or version stamp, so reruns write identical bytes
_PNG_META = {"Software": None}


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def length_violin(records: Sequence[GenerationRecord], path: str | os.PathLike) -> Path | None:
    data = [(t, [r.token_length for r in records if r.declared_topology is t]) for t in TOPOLOGIES]
    data = [(t, xs) for t, xs in data if xs]
    if not data:
        return None
    fig, ax = plt.subplots(figsize=(5, 3.5))
    parts = ax.violinplot([xs for _, xs in data], showmedians=True)
    for body, (t, _) in zip(parts["bodies"], data):
        body.set_facecolor(COLORS[t])
        body.set_alpha(0.6)
    ax.set_xticks(range(1, len(data) + 1), [t.value for t, _ in data])
    ax.set_ylabel("tokens")
    ax.set_title("Generated length by topology")
    return _save(fig, Path(path))


def win_rate_bar(rep: WinRateReport, path: str | os.PathLike) -> Path:
    fig, ax = plt.subplots(figsize=(4, 3.5))
    ax.bar([t.value for t in TOPOLOGIES], [rep.rate[t] for t in TOPOLOGIES], color=[COLORS[t] for t in TOPOLOGIES])
    ax.set_ylim(0, 1)
    ax.set_ylabel("win rate")
    ax.set_title(f"Win rate (N={rep.n_questions})")
    return _save(fig, Path(path))


def subject_accuracy_bars(cells: Sequence[SubjectCell], path: str | os.PathLike) -> Path | None:
    subjects = sorted({c.subject for c in cells})
    if not subjects:
        return None
    acc = {(c.subject, c.topology): c.accuracy for c in cells}
    width = 0.8 / len(TOPOLOGIES)
    fig, ax = plt.subplots(figsize=(max(5, 1.2 * len(subjects)), 3.8))
    for k, t in enumerate(TOPOLOGIES):
        xs = [i + (k - 1) * width for i in range(len(subjects))]
        ax.bar(xs, [acc.get((s, t), 0.0) for s in subjects], width, label=t.value, color=COLORS[t])
    ax.set_xticks(range(len(subjects)), subjects, rotation=30, ha="right")
    ax.set_ylim(0, 1)
    ax.set_ylabel("accuracy")
    ax.legend(fontsize="small")
    return _save(fig, Path(path))


def fractions_stacked(fr: Mapping[str, Mapping[TopologyKind, float]], path: str | os.PathLike) -> Path | None:
    splits = sorted(fr)
    if not splits:
        return None
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(splits)), 3.5))
    bottom = [0.0] * len(splits)
    for t in TOPOLOGIES:
        vals = [fr[s][t] for s in splits]
        ax.bar(splits, vals, bottom=bottom, label=t.value, color=COLORS[t])
        bottom = [b + v for b, v in zip(bottom, vals)]
    ax.set_ylim(0, 1)
    ax.set_ylabel("share of responses")
    ax.set_title("Classified topology")
    ax.legend(fontsize="small")
    return _save(fig, Path(path))
