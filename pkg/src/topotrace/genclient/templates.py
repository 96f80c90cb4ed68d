"""Per-topology prompt templates.

Every template embeds :data:`SENTINEL` exactly once so that topology
instructions can be found and removed from anything headed for training.
"""

from __future__ import annotations

import re
import string
from dataclasses import dataclass
from typing import Mapping

from topotrace.errors import LeakageError, MissingTemplate, TemplateError
from topotrace.records import Question
from topotrace.trace import TOPOLOGIES, TopologyKind

TEMPLATE_VERSION = "v1"
SENTINEL = "[[topology-instructions:v1]]"

ALLOWED_FIELDS: dict[TopologyKind, frozenset[str]] = {
    TopologyKind.CHAIN: frozenset({"question", "max_depth"}),
    TopologyKind.TREE: frozenset({"question", "max_depth", "n_children"}),
    TopologyKind.GRAPH: frozenset({"question", "max_depth", "n_children", "n_neighbors"}),
}
_NUMERIC_FIELDS = frozenset({"max_depth", "n_children", "n_neighbors"})


@dataclass(frozen=True)
class PromptTemplate:
    topology: TopologyKind
    body: str
    sentinel: str = SENTINEL

    def __post_init__(self):
        count = self.body.count(self.sentinel)
        if count != 1:
            raise TemplateError(f"{self.topology.value} template must contain the sentinel once, found {count}")
        names = self.fields()
        extra = names - ALLOWED_FIELDS[self.topology]
        if extra:
            raise MissingTemplate(
                f"{self.topology.value} template uses placeholders not valid for this topology: {sorted(extra)}"
            )
        if "question" not in names:
            raise TemplateError(f"{self.topology.value} template has no {{question}} placeholder")

    def fields(self) -> set[str]:
        return {name for _, name, _, _ in string.Formatter().parse(self.body) if name is not None}

    def pattern(self) -> re.Pattern:
        parts = []
        seen_question = False
        for literal, name, _, _ in string.Formatter().parse(self.body):
            parts.append(re.escape(literal))
            if name is None:
                continue
            if name == "question" and not seen_question:
                parts.append("(?P<question>.*)")
                seen_question = True
            elif name == "question":
                parts.append("(?P=question)")
            else:
                parts.append(r"\d+")
        return re.compile("".join(parts), re.DOTALL)


_FORMAT_CHAIN = """\
Write your reasoning ONLY in the following line format, one statement per line:
TOPOLOGY: {kind}
NODE <id>: <step text>
NODE <id> PARENT <id>[,<id>...]: <step text>
{edge}ANSWER: <final answer only>"""

_CHAIN_BODY = (
    SENTINEL
    + """
Reason as a single chain of thought: each step follows directly from the one before it,
with no branching, and use at most {max_depth} steps.
"""
    + _FORMAT_CHAIN.format(kind="chain", edge="")
    + """

Question:
{question}"""
)

_TREE_BODY = (
    SENTINEL
    + """
Reason as a tree of thoughts: start from an overview, branch into at most {n_children} sub-ideas
per step, and keep the tree at most {max_depth} levels deep. Each step has one parent.
"""
    + _FORMAT_CHAIN.format(kind="tree", edge="")
    + """

Question:
{question}"""
)

_GRAPH_BODY = (
    SENTINEL
    + """
Reason as a graph of thoughts: steps may combine several earlier steps (list every parent),
and you may cross-link related steps with up to {n_neighbors} links per step. Use at most
{n_children} children per step and at most {max_depth} levels.
"""
    + _FORMAT_CHAIN.format(kind="graph", edge="EDGE <id> -- <id>\n")
    + """

Question:
{question}"""
)

DEFAULT_TEMPLATES: dict[TopologyKind, PromptTemplate] = {
    TopologyKind.CHAIN: PromptTemplate(TopologyKind.CHAIN, _CHAIN_BODY),
    TopologyKind.TREE: PromptTemplate(TopologyKind.TREE, _TREE_BODY),
    TopologyKind.GRAPH: PromptTemplate(TopologyKind.GRAPH, _GRAPH_BODY),
}


def load_templates(bodies: Mapping[str, str]) -> dict[TopologyKind, PromptTemplate]:
    """Build a template registry from ``{topology name: body}``, validating each."""
    out = dict(DEFAULT_TEMPLATES)
    for name, body in bodies.items():
        t = TopologyKind.parse(name)
        out[t] = PromptTemplate(t, body)
    return out


def render_prompt(
    question: Question,
    topology: TopologyKind,
    max_depth: int,
    n_children: int,
    n_neighbors: int,
    templates: Mapping[TopologyKind, PromptTemplate] = DEFAULT_TEMPLATES,
) -> str:
    try:
        tpl = templates[topology]
    except KeyError:
        raise MissingTemplate(f"no template registered for {topology.value}") from None
    values = {"question": question.text(), "max_depth": max_depth, "n_children": n_children, "n_neighbors": n_neighbors}
    return tpl.body.format(**{k: values[k] for k in tpl.fields()})


def strip_topology_instructions(
    text: str, templates: Mapping[TopologyKind, PromptTemplate] = DEFAULT_TEMPLATES
) -> str:
    """Recover the bare question from a rendered prompt.

    Text without a sentinel is returned unchanged. Raises ``LeakageError`` if
    a sentinel is present but no registered template accounts for it.
    """
    sentinels = {tpl.sentinel for tpl in templates.values()} | {SENTINEL}
    if not any(s in text for s in sentinels):
        return text
    for t in TOPOLOGIES:
        tpl = templates.get(t)
        if tpl is None:
            continue
        m = tpl.pattern().fullmatch(text)
        if m:
            return m.group("question")
    raise LeakageError("text carries a topology sentinel but matches no registered template")


def contains_sentinel(text: str, templates: Mapping[TopologyKind, PromptTemplate] = DEFAULT_TEMPLATES) -> bool:
    return any(s in text for s in {tpl.sentinel for tpl in templates.values()} | {SENTINEL})
