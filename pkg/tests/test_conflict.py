from itertools import product

import pytest

from cupmem.conflict import (
    belief_incompatible,
    brute_force_scan,
    classify_conflict,
    explicitly_invalidated,
    observation_from_session,
)
from cupmem.schemas import ConditionKind, ConflictType, Observation, Polarity, Proposition, SlotRef, WitnessKind
from cupmem.simulator.generator import generate_scenario
from cupmem.simulator.haystack import build_haystack
from cupmem.simulator.lexicon import load_distractors
from cupmem.state_schema import load_knowledge, load_schema

from tests.helpers import session, span

UNIVERSE = """
version: "micro-1"
domains:
  - name: a
    slots:
      - {name: a1, cardinality: single}
      - {name: a2, cardinality: multi}
  - name: b
    slots:
      - {name: b1, cardinality: single}
      - {name: b2, cardinality: multi}
  - name: c
    slots:
      - {name: c1, cardinality: single}
dependency_edges:
  - {source: a, target: b}
  - {source: b, target: c}
"""

RULES = """
knowledge_rules:
  - rule_id: x_in_a1_unsettles_b1
    kind: DEPENDENCY
    source_slot: a/a1
    source_pattern: "x"
    target_slot: b/b1
    target_pattern: "y|z"
  - rule_id: b2_x_excludes_y
    kind: INCOMPAT_SAME_SLOT
    slot: b/b2
    value_predicate_pair: ["x", "y"]
"""

SLOTS = ("a/a1", "a/a2", "b/b1", "b/b2", "c/c1")
VALUES = ("x", "y", "z")
SINGLE = {"a/a1", "b/b1", "c/c1"}


@pytest.fixture(scope="module")
def micro():
    schema = load_schema(UNIVERSE)
    return schema, load_knowledge(RULES, schema)


def p(path, value, polarity=Polarity.ASSERT):
    return Proposition(attribute=path, value=value, polarity=polarity)


def classify(micro, history, o_index, n_index):
    schema, knowledge = micro
    return classify_conflict(history, o_index, n_index, knowledge, schema)


def obs(session_id, *assertions, negated=(), corrected=()):
    return Observation(
        session_id=session_id,
        assertions=tuple(p(*a) for a in assertions),
        explicit_negation_of=tuple(p(*n) for n in negated),
        corrected_slots=tuple(SlotRef.model_validate(c) for c in corrected),
    )


def expected_kind(old, new):
    """Worked out by hand for the micro universe"""
    (old_slot, old_value), (new_slot, new_value) = old, new
    if old_slot == new_slot and old_slot in SINGLE and old_value != new_value:
        return ConditionKind.SINGLE_SLOT
    if old_slot == new_slot == "b/b2" and {old_value, new_value} == {"x", "y"}:
        return ConditionKind.INCOMPAT_SAME_SLOT
    if (new_slot, new_value) == ("a/a1", "x") and old_slot == "b/b1" and old_value in ("y", "z"):
        return ConditionKind.DEPENDENCY
    return None


def test_single_update_against_every_belief(micro):
    schema, knowledge = micro
    propositions = list(product(SLOTS, VALUES))
    for old, new in product(propositions, propositions):
        condition = belief_incompatible(p(*old), [p(*new)], knowledge, schema)
        kind = condition.kind if condition else None
        assert kind == expected_kind(old, new), (old, new)


def test_precedence_and_supporting_indices(micro):
    schema, knowledge = micro
    condition = belief_incompatible(p("b/b1", "y"), [p("a/a1", "x"), p("b/b1", "z")], knowledge, schema)
    assert condition.kind == ConditionKind.SINGLE_SLOT
    assert condition.supporting == (1,)

    condition = belief_incompatible(
        p("b/b1", "z"), [p("a/a1", "x"), p("c/c1", "x"), p("a/a1", "x")], knowledge, schema,
    )
    assert condition.kind == ConditionKind.DEPENDENCY
    assert condition.rule_id == "x_in_a1_unsettles_b1"
    assert condition.supporting == (0, 2)


def test_negated_updates_and_beliefs_never_conflict(micro):
    schema, knowledge = micro
    assert belief_incompatible(p("b/b1", "y"), [p("a/a1", "x", Polarity.DENY)], knowledge, schema) is None
    assert belief_incompatible(p("b/b1", "y", Polarity.DENY), [p("a/a1", "x")], knowledge, schema) is None


def test_explicit_invalidation():
    belief = p("b/b1", "y")
    assert explicitly_invalidated([obs("s1", negated=[("b/b1", "y")])], belief)
    assert explicitly_invalidated([obs("s1", corrected=["b/b1"])], belief)
    assert not explicitly_invalidated([obs("s1", negated=[("b/b1", "z")])], belief)


class TestClassify:
    def test_type_ii(self, micro):
        history = [obs("s0", ("b/b1", "y")), obs("s1", ("a/a1", "x"))]
        witness = classify(micro, history, 0, 1)
        assert witness.kind == WitnessKind.TYPE_II
        assert witness.upstream_slot == SlotRef.model_validate("a/a1")
        assert witness.target_slot == SlotRef.model_validate("b/b1")
        assert witness.rule_id == "x_in_a1_unsettles_b1"

    def test_type_i_wins_over_type_ii(self, micro):
        history = [obs("s0", ("b/b1", "y"), ("b/b2", "x")), obs("s1", ("a/a1", "x"), ("b/b2", "y"))]
        witness = classify(micro, history, 0, 1)
        assert witness.kind == WitnessKind.TYPE_I
        assert witness.belief == p("b/b2", "x")
        assert witness.rule_id == "b2_x_excludes_y"

    @pytest.mark.parametrize("between", [
        obs("s1", negated=[("b/b1", "y")]),
        obs("s1", corrected=["b/b1"]),
    ])
    def test_explicit_negation_in_between_screens_out(self, micro, between):
        history = [obs("s0", ("b/b1", "y")), between, obs("s2", ("a/a1", "x"))]
        assert classify(micro, history, 0, 2).kind == WitnessKind.NONE

    def test_index_bounds(self, micro):
        history = [obs("s0", ("b/b1", "y")), obs("s1", ("a/a1", "x"))]
        with pytest.raises(IndexError):
            classify(micro, history, 1, 0)
        with pytest.raises(IndexError):
            classify(micro, history, 0, 2)


def test_brute_force_scan_matches_hand_enumeration(micro):
    schema, knowledge = micro
    history = [
        obs("s0", ("b/b1", "y")),
        obs("s1", ("a/a1", "x")),
        obs("s2", ("b/b1", "z")),
        obs("s3", ("c/c1", "x")),
    ]
    found = [(w.old_index, w.new_index, w.kind) for w in brute_force_scan(history, knowledge, schema)]
    assert found == [(0, 1, WitnessKind.TYPE_II), (0, 2, WitnessKind.TYPE_I)]


def test_observation_from_session():
    s = session(
        "s1", 1,
        span("a/a1", "x"),
        span("a/a1", "x"),
        span("b/b1", "y", historical=True),
        span("b/b2", "z", polarity=Polarity.DENY, correction=True),
    )
    observation = observation_from_session(s)
    assert observation.assertions == (p("a/a1", "x"),)
    assert observation.explicit_negation_of == (p("b/b2", "z"),)
    assert [c.path for c in observation.corrected_slots] == ["b/b2"]
    assert [m.path for m in observation.mentioned_slots] == ["a/a1", "b/b1", "b/b2"]


@pytest.mark.parametrize("conflict_type", list(ConflictType))
def test_generated_haystacks_carry_exactly_one_conflict_on_the_target(schema, knowledge, conflict_type):
    pool = load_distractors()
    for seed in range(20):
        scenario = generate_scenario(seed, schema, knowledge, conflict_type)
        haystack = build_haystack(scenario, pool, 8, seed, knowledge, schema, strict=False)
        history = [observation_from_session(s) for s in haystack.sessions]
        on_target = [
            w for w in brute_force_scan(history, knowledge, schema)
            if w.belief == scenario.old
        ]
        assert [(w.old_index, w.new_index) for w in on_target] == [(haystack.index_o, haystack.index_n)]
        assert on_target[0].kind.value == conflict_type.value
