"""
The implicit-conflict oracle.

Decides incompatibility of a belief against later assertions under the
knowledge rules, screens out explicit negations, and classifies conflicts
as TYPE_I (same slot) or TYPE_II (propagated across a dependency). Pure
functions over structured observations; the write pipeline and the
simulator both check themselves against it.
"""
from typing import List, Optional, Sequence

from cupmem.schemas import (
    Cardinality,
    ConditionKind,
    ConflictCondition,
    ConflictWitness,
    KnowledgeRule,
    Observation,
    Polarity,
    Proposition,
    RuleKind,
    Session,
    StateSchema,
    WitnessKind,
)
from cupmem.state_schema import Knowledge, pattern_matches


def _incompat_fires(rule: KnowledgeRule, old: Proposition, update: Proposition) -> bool:
    if old.attribute != rule.slot or update.attribute != rule.slot or old.value == update.value:
        return False
    first, second = rule.value_predicate_pair
    return (
        (pattern_matches(first, old.value) and pattern_matches(second, update.value))
        or (pattern_matches(second, old.value) and pattern_matches(first, update.value))
    )


def _dependency_fires(rule: KnowledgeRule, old: Proposition, update: Proposition) -> bool:
    return (
        update.attribute == rule.source_slot
        and old.attribute == rule.target_slot
        and pattern_matches(rule.source_pattern, update.value)
        and pattern_matches(rule.target_pattern, old.value)
    )


def belief_incompatible(
    old: Proposition,
    updates: Sequence[Proposition],
    knowledge: Knowledge,
    schema: StateSchema,
) -> Optional[ConflictCondition]:
    """
    Return the condition under which some update rules out `old`, or None.

    Precedence: same-slot SINGLE conflict, then INCOMPAT_SAME_SLOT rules, then
    DEPENDENCY rules, each in declaration order. `supporting` lists the
    indices of every update that fires the returned condition.
    """
    if old.polarity != Polarity.ASSERT:
        return None
    asserted = [(i, u) for i, u in enumerate(updates) if u.polarity == Polarity.ASSERT]

    if schema.cardinality_of(old.attribute) == Cardinality.SINGLE:
        supporting = tuple(i for i, u in asserted if u.attribute == old.attribute and u.value != old.value)
        if supporting:
            return ConflictCondition(kind=ConditionKind.SINGLE_SLOT, supporting=supporting)

    for rule in knowledge:
        if rule.kind != RuleKind.INCOMPAT_SAME_SLOT:
            continue
        supporting = tuple(i for i, u in asserted if _incompat_fires(rule, old, u))
        if supporting:
            return ConflictCondition(
                kind=ConditionKind.INCOMPAT_SAME_SLOT,
                rule_id=rule.rule_id,
                supporting=supporting,
            )

    for rule in knowledge:
        if rule.kind != RuleKind.DEPENDENCY:
            continue
        supporting = tuple(i for i, u in asserted if _dependency_fires(rule, old, u))
        if supporting:
            return ConflictCondition(
                kind=ConditionKind.DEPENDENCY,
                rule_id=rule.rule_id,
                supporting=supporting,
                implied_value=rule.implied_value,
            )
    return None


def explicitly_invalidated(segment: Sequence[Observation], belief: Proposition) -> bool:
    """True iff some observation negates the belief outright or corrects its slot"""
    for observation in segment:
        if any(negated.same_claim(belief) for negated in observation.explicit_negation_of):
            return True
        if belief.attribute in observation.corrected_slots:
            return True
    return False


def classify_conflict(
    history: Sequence[Observation],
    o_index: int,
    n_index: int,
    knowledge: Knowledge,
    schema: StateSchema,
) -> ConflictWitness:
    if not 0 <= o_index < n_index < len(history):
        raise IndexError(f"need 0 <= o < n < {len(history)}, got o={o_index} n={n_index}")
    old_obs = history[o_index]
    new_obs = history[n_index]
    between = history[o_index + 1:n_index + 1]

    propagated: Optional[ConflictWitness] = None
    for belief in old_obs.assertions:
        if belief.polarity != Polarity.ASSERT:
            continue
        condition = belief_incompatible(belief, new_obs.assertions, knowledge, schema)
        if condition is None or explicitly_invalidated(between, belief):
            continue

        trigger = new_obs.assertions[condition.supporting[0]]
        witness = dict(
            old_index=o_index,
            new_index=n_index,
            old_session=old_obs.session_id,
            new_session=new_obs.session_id,
            belief=belief,
            target_slot=belief.attribute,
            rule_id=condition.rule_id,
        )
        if trigger.attribute == belief.attribute:
            return ConflictWitness(kind=WitnessKind.TYPE_I, **witness)
        if propagated is None:
            propagated = ConflictWitness(kind=WitnessKind.TYPE_II, upstream_slot=trigger.attribute, **witness)

    if propagated is not None:
        return propagated
    return ConflictWitness(
        kind=WitnessKind.NONE,
        old_index=o_index,
        new_index=n_index,
        old_session=old_obs.session_id,
        new_session=new_obs.session_id,
    )


def brute_force_scan(
    history: Sequence[Observation],
    knowledge: Knowledge,
    schema: StateSchema,
) -> List[ConflictWitness]:
    """Every non-NONE witness over all ordered pairs, o ascending then n ascending"""
    witnesses = []
    for o_index in range(len(history)):
        for n_index in range(o_index + 1, len(history)):
            witness = classify_conflict(history, o_index, n_index, knowledge, schema)
            if witness.kind != WitnessKind.NONE:
                witnesses.append(witness)
    return witnesses


def observation_from_session(session: Session) -> Observation:
    """Project a session's tagged spans onto the oracle's view of it"""
    assertions = []
    mentioned = []
    corrected = []
    negated = []
    for _, _, span in session.tagged_spans():
        if span.slot not in mentioned:
            mentioned.append(span.slot)
        if span.correction and span.slot not in corrected:
            corrected.append(span.slot)
        if span.polarity == Polarity.DENY:
            negated.append(span.proposition())
        elif not (span.historical or span.wrapper):
            proposition = span.proposition()
            if proposition not in assertions:
                assertions.append(proposition)
    return Observation(
        session_id=session.session_id,
        timestamp=session.timestamp,
        assertions=tuple(assertions),
        mentioned_slots=tuple(mentioned),
        corrected_slots=tuple(corrected),
        explicit_negation_of=tuple(negated),
    )
