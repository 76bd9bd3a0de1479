import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from consistency_ft.errors import ConfigurationError, ContradictionError, MalformedTemplateError
from consistency_ft.logic import (AssertionTemplate, GroundAtom, GroundingSet, Implication, Literal, PredicateDecl,
                                  TaskKind, check_implication, evaluate_assertions, satisfy)

ARITY = {"p": 1, "q": 2, "r": 2, "s": 3}
OBJECTS = ("o1", "o2", "o3", "o4")
VARS = ("X", "Y", "Z")


def atom(pred, *args):
    return GroundAtom(pred, tuple(args))


def brute_force(template, g):
    """First injective assignment in lexicographic order, or None."""
    for combo in itertools.permutations(sorted(g.universe), len(template.vars)):
        assignment = dict(zip(template.vars, combo))
        if all(g.contains(lit.predicate, tuple(assignment[a] for a in lit.args)) == lit.polarity
               for lit in template.body):
            return tuple(zip(template.vars, combo))
    return None


@st.composite
def groundings(draw):
    facts = set()
    for pred, arity in ARITY.items():
        tuples = draw(st.lists(st.tuples(*[st.sampled_from(OBJECTS)] * arity), max_size=5))
        facts.update(GroundAtom(pred, t) for t in tuples)
    return GroundingSet(frozenset(facts), frozenset(OBJECTS))


@st.composite
def templates(draw):
    body = []
    for _ in range(draw(st.integers(1, 3))):
        pred = draw(st.sampled_from(sorted(ARITY)))
        args = tuple(draw(st.sampled_from(VARS)) for _ in range(ARITY[pred]))
        body.append(Literal(pred, args, draw(st.booleans())))
    used = []
    for lit in body:
        for a in lit.args:
            if a not in used:
                used.append(a)
    order = draw(st.permutations(used))
    return AssertionTemplate("t", tuple(order), tuple(body))


def test_rear_end_pair_is_witnessed():
    t = AssertionTemplate("behind_close", ("X", "Y"),
                          (Literal("move_behind", ("X", "Y")), Literal("move_very_close", ("X", "Y"))))
    g = GroundingSet.from_atoms([atom("move_behind", "car1", "car2"), atom("move_very_close", "car1", "car2")])
    result = satisfy(t, g)
    assert result.satisfied
    assert result.mapping == {"X": "car1", "Y": "car2"}


def test_empty_grounding_satisfies_nothing():
    t = AssertionTemplate("a", ("X",), (Literal("p", ("X",)),))
    assert not satisfy(t, GroundingSet.empty()).satisfied


def test_chain_without_shared_middle_is_unsatisfied():
    t = AssertionTemplate("chain", ("X", "Y", "Z"),
                          (Literal("move_same_dirn", ("X", "Y")), Literal("move_same_dirn", ("Y", "Z"))))
    g = GroundingSet.from_atoms([atom("move_same_dirn", "car1", "car2"), atom("move_same_dirn", "car5", "car8")])
    assert not satisfy(t, g).satisfied


def test_assignment_is_injective():
    t = AssertionTemplate("a", ("X", "Y"), (Literal("q", ("X", "Y")),))
    g = GroundingSet.from_atoms([atom("q", "car1", "car1")])
    assert not satisfy(t, g).satisfied


def test_negated_literal_uses_closed_world():
    t = AssertionTemplate("static", ("X", "Y"),
                          (Literal("close", ("X", "Y")), Literal("moving", ("X",)), Literal("moving", ("Y",), False)))
    g = GroundingSet.from_atoms([atom("close", "car1", "car7"), atom("moving", "car1")])
    assert satisfy(t, g).mapping == {"X": "car1", "Y": "car7"}
    g2 = GroundingSet.from_atoms([atom("close", "car1", "car7"), atom("moving", "car1"), atom("moving", "car7")])
    assert not satisfy(t, g2).satisfied


def test_arity_mismatch_against_declaration():
    t = AssertionTemplate("a", ("X",), (Literal("q", ("X",)),))
    with pytest.raises(MalformedTemplateError):
        satisfy(t, GroundingSet.empty(), {"q": PredicateDecl("q", 2)})


def test_arity_mismatch_against_grounding():
    t = AssertionTemplate("a", ("X",), (Literal("q", ("X",)),))
    with pytest.raises(MalformedTemplateError):
        satisfy(t, GroundingSet.from_atoms([atom("q", "a", "b")]))


@pytest.mark.parametrize("vars_, body", [
    (("X",), ()),
    (("X", "X"), (Literal("p", ("X",)),)),
    (("X",), (Literal("q", ("X", "Y")),)),
    (("X", "Y"), (Literal("p", ("X",)),)),
    (("X", "Y"), (Literal("q", ("X", "Y")), Literal("q", ("X",)))),
])
def test_malformed_templates(vars_, body):
    with pytest.raises(MalformedTemplateError):
        AssertionTemplate("bad", vars_, body)


def test_contradictory_grounding():
    with pytest.raises(ContradictionError) as exc:
        GroundingSet.from_atoms([atom("p", "a"), GroundAtom("p", ("a",), False)])
    assert exc.value.atom == "p(a)"


def test_implication_on_rear_end_scene(tu_dat, rear_end):
    res = check_implication(Implication(1, TaskKind.MAIN, frozenset({"behind", "very-close"})), rear_end, tu_dat)
    assert res.holds
    assert res.offending == frozenset()


def test_implication_on_empty_grounding(tu_dat):
    required = frozenset({"behind", "very-close"})
    res = check_implication(Implication(1, TaskKind.MAIN, required), GroundingSet.empty(), tu_dat)
    assert not res.holds
    assert res.offending == required


def test_implication_reports_missing_assertion(tu_dat):
    g = GroundingSet.from_atoms([atom("move_behind", "car1", "car2")])
    res = check_implication(Implication(1, TaskKind.MAIN, frozenset({"behind", "very-close"})), g, tu_dat)
    assert not res.holds
    assert res.offending == {"very-close"}
    assert res.by_id["behind"].mapping == {"X": "car1", "Y": "car2"}


def test_unknown_assertion_id(tu_dat, rear_end):
    with pytest.raises(ConfigurationError, match="no-such"):
        evaluate_assertions(["no-such"], rear_end, tu_dat)


def test_empty_implication_rejected():
    with pytest.raises(ConfigurationError):
        Implication(1, TaskKind.MAIN, frozenset())


@settings(max_examples=1000, deadline=None)
@given(templates(), groundings())
def test_satisfy_agrees_with_enumeration(t, g):
    expected = brute_force(t, g)
    result = satisfy(t, g)
    assert result.satisfied == (expected is not None)
    assert result.witness == expected


@settings(max_examples=300, deadline=None)
@given(templates(), groundings(), groundings())
def test_positive_templates_are_monotone(t, g, extra):
    if t.has_negation:
        return
    if satisfy(t, g).satisfied:
        assert satisfy(t, g.union(extra)).satisfied


@settings(max_examples=300, deadline=None)
@given(templates(), groundings())
def test_witness_grounds_the_body(t, g):
    result = satisfy(t, g)
    if result.satisfied:
        mapping = result.mapping
        assert len(set(mapping.values())) == len(mapping)
        for ground in t.instantiate(mapping):
            assert g.contains(ground.predicate, ground.args) == ground.polarity
