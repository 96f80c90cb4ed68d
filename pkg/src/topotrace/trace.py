"""Reasoning-trace grammar: parsing, serialization, topology classification
and final-answer extraction.

Canonical documents are line oriented::

    TOPOLOGY: chain|tree|graph
    NODE <id>: <text>
    NODE <id> PARENT <id>[,<id>...]: <text>
    EDGE <id> -- <id>
    ANSWER: <text>
"""

from __future__ import annotations

import enum
import functools
import re
from dataclasses import dataclass
from typing import Literal

from topotrace.errors import (
    DuplicateNodeId,
    EmptyTrace,
    InvariantViolation,
    TraceSyntaxError,
    UnknownLinkEndpoint,
    UnknownParentId,
)

ID_PATTERN = r"[A-Za-z0-9_]+"

_TOPOLOGY_RE = re.compile(r"^TOPOLOGY:\s*(chain|tree|graph)\s*$", re.IGNORECASE)
_NODE_RE = re.compile(
    rf"^NODE ({ID_PATTERN})(?: PARENT ({ID_PATTERN}(?:,{ID_PATTERN})*))?: ?(.*)$"
)
_EDGE_RE = re.compile(rf"^EDGE ({ID_PATTERN}) -- ({ID_PATTERN})\s*$")
_ANSWER_RE = re.compile(r"^ANSWER: ?(.*)$")
_ID_RE = re.compile(rf"^{ID_PATTERN}$")

# lenient mode tolerates list bullets and code fences around statements
_LENIENT_PREFIX_RE = re.compile(r"^(?:[-*>]\s+|\d+[.)]\s+|`+)")


@functools.total_ordering
class TopologyKind(enum.Enum):
    CHAIN = "chain"
    TREE = "tree"
    GRAPH = "graph"

    @property
    def rank(self) -> int:
        return _RANK[self]

    def __lt__(self, other: object) -> bool:
        if not isinstance(other, TopologyKind):
            return NotImplemented
        return self.rank < other.rank

    @classmethod
    def parse(cls, value: str | TopologyKind) -> TopologyKind:
        if isinstance(value, TopologyKind):
            return value
        try:
            return cls(value.strip().lower())
        except ValueError:
            raise ValueError(f"unknown topology {value!r}") from None

    def __str__(self) -> str:
        return self.value


_RANK = {TopologyKind.CHAIN: 0, TopologyKind.TREE: 1, TopologyKind.GRAPH: 2}
TOPOLOGIES: tuple[TopologyKind, ...] = (TopologyKind.CHAIN, TopologyKind.TREE, TopologyKind.GRAPH)


@dataclass(frozen=True)
class TraceNode:
    id: str
    text: str
    parents: tuple[str, ...] = ()


@dataclass(frozen=True)
class ReasoningTrace:
    nodes: tuple[TraceNode, ...] = ()
    links: tuple[tuple[str, str], ...] = ()
    declared_topology: TopologyKind | None = None
    answer: str | None = None

    def node_ids(self) -> list[str]:
        return [n.id for n in self.nodes]

    def children(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {n.id: [] for n in self.nodes}
        for n in self.nodes:
            for p in n.parents:
                out[p].append(n.id)
        return out

    def validate(self) -> None:
        """Raise ``InvariantViolation`` if the trace cannot be serialized canonically."""
        seen: set[str] = set()
        for n in self.nodes:
            if not _ID_RE.match(n.id):
                raise InvariantViolation(f"bad node id {n.id!r}")
            if n.id in seen:
                raise InvariantViolation(f"duplicate node id {n.id!r}")
            if "\n" in n.text or "\r" in n.text:
                raise InvariantViolation(f"node {n.id!r} text spans lines")
            seen.add(n.id)
        for n in self.nodes:
            if len(set(n.parents)) != len(n.parents):
                raise InvariantViolation(f"node {n.id!r} repeats a parent")
            for p in n.parents:
                if p == n.id:
                    raise InvariantViolation(f"node {n.id!r} is its own parent")
                if p not in seen:
                    raise InvariantViolation(f"node {n.id!r} has unknown parent {p!r}")
        for a, b in self.links:
            if a not in seen or b not in seen:
                raise InvariantViolation(f"link {a!r} -- {b!r} has unknown endpoint")
        if self.answer is not None and ("\n" in self.answer or "\r" in self.answer):
            raise InvariantViolation("answer spans lines")
        if not self.nodes and (self.links or self.answer is not None):
            raise InvariantViolation("non-empty trace without nodes")


Mode = Literal["strict", "lenient"]


def parse_trace(text: str, mode: Mode = "strict") -> ReasoningTrace:
    """Parse ``text`` into a :class:`ReasoningTrace`.

    Strict mode rejects any non-blank line outside the grammar and any
    structural error. Lenient mode is meant for free-form model output: it
    skips unrecognized lines, keeps the first declaration of a node id, drops
    parent references and links that point at undeclared nodes, and uses the
    last ``ANSWER:`` line. A lenient parse may return an empty trace.
    """
    if mode not in ("strict", "lenient"):
        raise ValueError(f"mode must be 'strict' or 'lenient', got {mode!r}")
    strict = mode == "strict"

    declared: TopologyKind | None = None
    answer: str | None = None
    raw_nodes: list[tuple[int, str, tuple[str, ...], str]] = []
    raw_links: list[tuple[int, str, str]] = []
    n_statements = 0

    for line_no, line in enumerate(text.split("\n"), start=1):
        if line.endswith("\r"):
            line = line[:-1]
        if not line.strip():
            continue
        candidate = line
        if not strict:
            candidate = _LENIENT_PREFIX_RE.sub("", line.strip()).rstrip("`").rstrip()

        if strict and answer is not None:
            raise TraceSyntaxError(line_no, line, "statement after ANSWER")

        m = _TOPOLOGY_RE.match(candidate)
        if m:
            if strict and n_statements:
                raise TraceSyntaxError(line_no, line, "TOPOLOGY must be the first statement")
            if declared is None:
                declared = TopologyKind.parse(m.group(1))
            n_statements += 1
            continue
        m = _NODE_RE.match(candidate)
        if m:
            parents = tuple(m.group(2).split(",")) if m.group(2) else ()
            raw_nodes.append((line_no, m.group(1), parents, m.group(3)))
            n_statements += 1
            continue
        m = _EDGE_RE.match(candidate)
        if m:
            raw_links.append((line_no, m.group(1), m.group(2)))
            n_statements += 1
            continue
        m = _ANSWER_RE.match(candidate)
        if m:
            answer = m.group(1)
            n_statements += 1
            continue
        if strict:
            raise TraceSyntaxError(line_no, line)

    ids: set[str] = set()
    kept: list[tuple[str, tuple[str, ...], str]] = []
    for line_no, node_id, parents, node_text in raw_nodes:
        if node_id in ids:
            if strict:
                raise DuplicateNodeId(f"line {line_no}: node id {node_id!r} declared twice")
            continue
        ids.add(node_id)
        kept.append((node_id, parents, node_text))

    nodes = []
    for node_id, parents, node_text in kept:
        clean: list[str] = []
        for p in parents:
            if p == node_id or p not in ids:
                if strict:
                    if p == node_id:
                        raise UnknownParentId(f"node {node_id!r} lists itself as parent")
                    raise UnknownParentId(f"node {node_id!r} has unknown parent {p!r}")
                continue
            if p in clean:
                if strict:
                    raise UnknownParentId(f"node {node_id!r} lists parent {p!r} twice")
                continue
            clean.append(p)
        nodes.append(TraceNode(node_id, node_text, tuple(clean)))

    links = []
    for line_no, a, b in raw_links:
        if a not in ids or b not in ids:
            if strict:
                raise UnknownLinkEndpoint(f"line {line_no}: link {a!r} -- {b!r}")
            continue
        links.append((a, b))

    if not nodes:
        if strict and answer is not None:
            raise InvariantViolation("ANSWER without any NODE statement")
        # empty traces carry no answer; extract_answer reads raw text instead
        return ReasoningTrace(declared_topology=declared)
    return ReasoningTrace(tuple(nodes), tuple(links), declared, answer)


def serialize_trace(trace: ReasoningTrace) -> str:
    trace.validate()
    lines = []
    if trace.declared_topology is not None:
        lines.append(f"TOPOLOGY: {trace.declared_topology.value}")
    for n in trace.nodes:
        if n.parents:
            lines.append(f"NODE {n.id} PARENT {','.join(n.parents)}: {n.text}")
        else:
            lines.append(f"NODE {n.id}: {n.text}")
    for a, b in trace.links:
        lines.append(f"EDGE {a} -- {b}")
    if trace.answer is not None:
        lines.append(f"ANSWER: {trace.answer}")
    return "".join(line + "\n" for line in lines)


def _has_cycle(trace: ReasoningTrace) -> bool:
    # Kahn's algorithm over parent -> child edges
    indeg = {n.id: len(n.parents) for n in trace.nodes}
    children = trace.children()
    ready = [i for i, d in indeg.items() if d == 0]
    visited = 0
    while ready:
        cur = ready.pop()
        visited += 1
        for c in children[cur]:
            indeg[c] -= 1
            if indeg[c] == 0:
                ready.append(c)
    return visited != len(indeg)


def classify_topology(trace: ReasoningTrace) -> TopologyKind:
    """Structural topology of a trace; ``declared_topology`` is ignored.

    Graph wins over Tree, Tree over Chain. A forest of several roots counts
    as a Tree.
    """
    if not trace.nodes:
        raise EmptyTrace("cannot classify a trace without nodes")
    if trace.links or any(len(n.parents) >= 2 for n in trace.nodes) or _has_cycle(trace):
        return TopologyKind.GRAPH
    roots = sum(1 for n in trace.nodes if not n.parents)
    if roots > 1 or any(len(c) >= 2 for c in trace.children().values()):
        return TopologyKind.TREE
    return TopologyKind.CHAIN


# answer extraction

QType = Literal["multiple-choice", "free-form"]
QTYPES: tuple[str, ...] = ("multiple-choice", "free-form")


@dataclass(frozen=True)
class ExtractedAnswer:
    kind: Literal["choice", "number", "text"]
    choice: str | None = None
    number: float | None = None
    text: str | None = None

    def __post_init__(self):
        populated = {
            "choice": self.choice is not None,
            "number": self.number is not None,
            "text": self.text is not None,
        }
        if sum(populated.values()) != 1 or not populated.get(self.kind, False):
            raise ValueError(f"ExtractedAnswer of kind {self.kind!r} must carry exactly that payload")

    @property
    def value(self) -> str | float:
        return {"choice": self.choice, "number": self.number, "text": self.text}[self.kind]

    def to_json(self) -> dict:
        return {"kind": self.kind, "value": self.value}

    @classmethod
    def from_json(cls, obj: dict | None) -> ExtractedAnswer | None:
        if obj is None:
            return None
        return cls(obj["kind"], **{obj["kind"]: obj["value"]})


def normalize_text(s: str) -> str:
    s = " ".join(s.lower().split())
    return s.rstrip(".,;:!?。").rstrip()


_NUMBER_TOKEN_RE = re.compile(r"(?<![\w.])[-+]?\d+(?:\.\d+)?(?![\w])")
_WHOLE_NUMBER_RE = re.compile(r"^[-+]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][-+]?\d+)?$")
_LETTER_TOKEN_RE = re.compile(r"(?<![A-Za-z0-9])([A-E])(?![A-Za-z0-9])")
_ANSWER_LINE_RE = re.compile(r"^\s*ANSWER:[ \t]*(.*?)\s*$", re.MULTILINE)


def parse_number(s: str) -> float | None:
    s = s.strip().strip("$").replace(",", "").rstrip(".").strip()
    if _WHOLE_NUMBER_RE.match(s):
        return float(s)
    return None


def _boxed_payloads(raw: str) -> list[str]:
    out = []
    marker = "\\boxed{"
    start = raw.find(marker)
    while start != -1:
        i = start + len(marker)
        depth = 1
        j = i
        while j < len(raw) and depth:
            if raw[j] == "{":
                depth += 1
            elif raw[j] == "}":
                depth -= 1
            j += 1
        if depth == 0:
            out.append(raw[i : j - 1])
        start = raw.find(marker, j if depth == 0 else i)
    return out


def _interpret(payload: str, qtype: str) -> ExtractedAnswer | None:
    payload = payload.strip()
    if not payload:
        return None
    if qtype == "multiple-choice":
        letters = _LETTER_TOKEN_RE.findall(payload)
        if not letters and re.fullmatch(r"\(?[a-e]\)?[.:]?", payload):
            letters = [payload.strip("().:").upper()]
        return ExtractedAnswer("choice", choice=letters[-1]) if letters else None
    num = parse_number(payload)
    if num is not None:
        return ExtractedAnswer("number", number=num)
    text = normalize_text(payload)
    return ExtractedAnswer("text", text=text) if text else None


def extract_answer(raw_text: str, qtype: str) -> ExtractedAnswer | None:
    """Pull the final answer out of a model response.

    Rules are tried in order: last ``ANSWER:`` line, last ``\\boxed{...}``
    payload, then the last standalone A-E letter (multiple-choice) or the last
    decimal number (free-form). ``None`` when nothing fires.
    """
    if qtype not in QTYPES:
        raise ValueError(f"unknown question type {qtype!r}")
    answers = _ANSWER_LINE_RE.findall(raw_text)
    if answers:
        got = _interpret(answers[-1], qtype)
        if got is not None:
            return got
    boxed = _boxed_payloads(raw_text)
    if boxed:
        got = _interpret(boxed[-1], qtype)
        if got is not None:
            return got
    if qtype == "multiple-choice":
        letters = _LETTER_TOKEN_RE.findall(raw_text)
        if letters:
            return ExtractedAnswer("choice", choice=letters[-1])
        return None
    numbers = _NUMBER_TOKEN_RE.findall(raw_text)
    if numbers:
        return ExtractedAnswer("number", number=float(numbers[-1]))
    return None


@dataclass(frozen=True)
class TraceSummary:
    """What the pipeline keeps from a lenient parse of one response."""

    trace: ReasoningTrace
    classified: TopologyKind | None


def summarize(raw_text: str) -> TraceSummary:
    trace = parse_trace(raw_text, "lenient")
    return TraceSummary(trace, classify_topology(trace) if trace.nodes else None)
