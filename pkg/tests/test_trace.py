import random

import networkx as nx
import pytest
from hypothesis import given, settings

from oracles import classify_oracle
from strategies import random_trace, traces
from topotrace.errors import (
    DuplicateNodeId,
    EmptyTrace,
    InvariantViolation,
    TraceSyntaxError,
    UnknownLinkEndpoint,
    UnknownParentId,
)
from topotrace.trace import (
    ExtractedAnswer,
    ReasoningTrace,
    TopologyKind,
    TraceNode,
    classify_topology,
    extract_answer,
    parse_trace,
    serialize_trace,
    summarize,
)

CHAIN, TREE, GRAPH = TopologyKind.CHAIN, TopologyKind.TREE, TopologyKind.GRAPH


def _t(*nodes, links=(), declared=None, answer=None):
    return ReasoningTrace(tuple(TraceNode(i, "x", tuple(ps)) for i, ps in nodes), tuple(links), declared, answer)


# grammar


def test_parse_basic_chain():
    t = parse_trace("TOPOLOGY: chain\nNODE a: read figure\nNODE b PARENT a: count\nANSWER: 7")
    assert [n.id for n in t.nodes] == ["a", "b"]
    assert t.nodes[1].parents == ("a",)
    assert t.nodes[0].text == "read figure"
    assert t.declared_topology is CHAIN
    assert t.answer == "7"


def test_unknown_parent_strict():
    with pytest.raises(UnknownParentId):
        parse_trace("NODE a: x\nNODE b PARENT c: y")


def test_strict_errors():
    with pytest.raises(DuplicateNodeId):
        parse_trace("NODE a: x\nNODE a: y")
    with pytest.raises(UnknownParentId):
        parse_trace("NODE a PARENT a: x")
    with pytest.raises(UnknownLinkEndpoint):
        parse_trace("NODE a: x\nEDGE a -- z")
    with pytest.raises(TraceSyntaxError) as ei:
        parse_trace("NODE a: x\nhello there\n")
    assert ei.value.line_no == 2
    with pytest.raises(TraceSyntaxError):
        parse_trace("NODE a: x\nTOPOLOGY: tree")
    with pytest.raises(TraceSyntaxError):
        parse_trace("NODE a: x\nANSWER: 1\nNODE b: y")


def test_lenient_skips_noise():
    raw = "Sure, here it is.\n- NODE a: first\n* NODE b PARENT a,zz: second\n`EDGE a -- q`\nANSWER: 3\nANSWER: 4"
    t = parse_trace(raw, "lenient")
    assert [(n.id, n.parents) for n in t.nodes] == [("a", ()), ("b", ("a",))]
    assert t.links == ()
    assert t.answer == "4"
    assert parse_trace("no structure at all", "lenient").nodes == ()


def test_blank_lines_and_crlf():
    t = parse_trace("\r\nNODE a: x\r\n\r\nNODE b PARENT a: y\r\n")
    assert [n.text for n in t.nodes] == ["x", "y"]


def test_serialize_single_node_chain():
    t = ReasoningTrace((TraceNode("n1", "step"),), declared_topology=CHAIN)
    assert serialize_trace(t) == "TOPOLOGY: chain\nNODE n1: step\n"


def test_serialize_link_line():
    t = _t(("a", ()), ("b", ()), links=[("a", "b")])
    assert "EDGE a -- b\n" in serialize_trace(t)


def test_serialize_rejects_invalid():
    with pytest.raises(InvariantViolation):
        serialize_trace(_t(("a", ("b",))))
    with pytest.raises(InvariantViolation):
        serialize_trace(ReasoningTrace((TraceNode("a", "two\nlines"),)))


def test_round_trip_1000_generated():
    rng = random.Random(20240601)
    for _ in range(1000):
        t = random_trace(rng)
        text = serialize_trace(t)
        back = parse_trace(text, "strict")
        assert back == t
        assert serialize_trace(back) == text


@settings(max_examples=200, deadline=None)
@given(traces())
def test_round_trip_property(t):
    assert parse_trace(serialize_trace(t)) == t


def test_canonical_document_identity():
    doc = "TOPOLOGY: graph\nNODE a: x\nNODE b PARENT a: y\nNODE c PARENT a,b: z\nEDGE a -- c\nANSWER: 42\n"
    assert serialize_trace(parse_trace(doc)) == doc


# classification


def test_classify_examples():
    assert classify_topology(_t(("a", ()), ("b", ("a",)), ("c", ("b",)))) is CHAIN
    assert classify_topology(_t(("a", ()), ("b", ("a",)), ("c", ("a",)))) is TREE
    assert classify_topology(_t(("a", ()), ("b", ("a",)), ("c", ("a", "b")))) is GRAPH
    assert classify_topology(_t(("a", ()), ("b", ()))) is TREE  # forest
    assert classify_topology(_t(("a", ()), ("b", ("a",)), links=[("a", "b")])) is GRAPH
    assert classify_topology(_t(("a", ("b",)), ("b", ("a",)))) is GRAPH  # cycle
    assert classify_topology(_t(("a", ()))) is CHAIN


def test_classify_ignores_declared():
    assert classify_topology(_t(("a", ()), ("b", ("a",)), declared=GRAPH)) is CHAIN


def test_classify_empty():
    with pytest.raises(EmptyTrace):
        classify_topology(ReasoningTrace())


def _networkx_oracle(t: ReasoningTrace) -> TopologyKind:
    g = nx.DiGraph()
    g.add_nodes_from(n.id for n in t.nodes)
    g.add_edges_from((p, n.id) for n in t.nodes for p in n.parents)
    if t.links or not nx.is_directed_acyclic_graph(g) or any(d >= 2 for _, d in g.in_degree()):
        return GRAPH
    if sum(1 for _, d in g.in_degree() if d == 0) > 1 or any(d >= 2 for _, d in g.out_degree()):
        return TREE
    return CHAIN


def test_classify_agrees_with_oracles_1000():
    rng = random.Random(7)
    seen = set()
    for _ in range(1000):
        t = random_trace(rng)
        got = classify_topology(t)
        assert got.value == classify_oracle([(n.id, n.parents) for n in t.nodes], list(t.links))
        assert got is _networkx_oracle(t)
        seen.add(got)
    assert seen == {CHAIN, TREE, GRAPH}


@settings(max_examples=300, deadline=None)
@given(traces())
def test_chain_implies_linear_structure(t):
    if classify_topology(t) is CHAIN:
        children = t.children()
        assert sum(1 for n in t.nodes if not n.parents) == 1
        assert all(len(n.parents) <= 1 for n in t.nodes)
        assert all(len(c) <= 1 for c in children.values())
        assert not t.links


def test_topology_order():
    assert CHAIN < TREE < GRAPH
    assert sorted([GRAPH, CHAIN, TREE]) == [CHAIN, TREE, GRAPH]
    assert TopologyKind.parse(" Tree ") is TREE


# answer extraction


def test_extract_examples():
    assert extract_answer("...\nANSWER: B", "multiple-choice") == ExtractedAnswer("choice", choice="B")
    assert extract_answer("the result is \\boxed{42}", "free-form") == ExtractedAnswer("number", number=42.0)


def test_extract_precedence():
    raw = "A is wrong. \\boxed{C}\nANSWER: D"
    assert extract_answer(raw, "multiple-choice").choice == "D"
    assert extract_answer("A then \\boxed{C} then B", "multiple-choice").choice == "C"
    assert extract_answer("maybe A, or perhaps E.", "multiple-choice").choice == "E"
    assert extract_answer("got 3, then 4.5 apples", "free-form").number == 4.5
    assert extract_answer("ANSWER: Blue Whale.", "free-form") == ExtractedAnswer("text", text="blue whale")
    assert extract_answer("\\boxed{\\frac{1}{2}} and \\boxed{7}", "free-form").number == 7.0
    assert extract_answer("nothing here", "free-form") is None
    assert extract_answer("no letters here", "multiple-choice") is None


def test_extract_rejects_unknown_qtype():
    with pytest.raises(ValueError):
        extract_answer("x", "essay")


def _inject(rng: random.Random, qtype: str):
    filler = ["we look at the figure", "count carefully", "the options differ", "so the total follows"]
    if qtype == "multiple-choice":
        truth = rng.choice("ABCDE")
        decoy = rng.choice([c for c in "ABCDE" if c != truth])
    else:
        truth = str(rng.randint(-500, 500)) if rng.random() < 0.5 else f"{rng.randint(0, 99)}.{rng.randint(1, 9)}"
        decoy = str(rng.randint(1000, 2000))
    tier = rng.choice(("answer", "boxed", "fallback"))
    body = [rng.choice(filler) for _ in range(3)]
    if tier == "answer":
        body.insert(1, f"\\boxed{{{decoy}}}")
        text = "\n".join(body) + f"\nANSWER: {truth}"
    elif tier == "boxed":
        body.insert(0, f"first guess {decoy}")
        text = "\n".join(body) + f"\nso \\boxed{{{truth}}}"
    else:
        text = " ".join(body) + f" earlier {decoy} but finally {truth}"
    return text, truth


def test_extraction_injection_200():
    rng = random.Random(99)
    for k in range(200):
        qtype = ("multiple-choice", "free-form")[k % 2]
        text, truth = _inject(rng, qtype)
        got = extract_answer(text, qtype)
        assert got is not None, text
        if qtype == "multiple-choice":
            assert got.choice == truth, text
        else:
            assert got.number == float(truth), text


def test_answer_json_round_trip():
    for a in (ExtractedAnswer("choice", choice="C"), ExtractedAnswer("number", number=-2.5), ExtractedAnswer("text", text="x y")):
        assert ExtractedAnswer.from_json(a.to_json()) == a
    with pytest.raises(ValueError):
        ExtractedAnswer("number", choice="A")


def test_summarize():
    s = summarize("Reasoning:\nNODE a: x\nNODE b PARENT a: y\nNODE c PARENT a: z\nANSWER: 1")
    assert s.classified is TREE
    assert summarize("just prose").classified is None
