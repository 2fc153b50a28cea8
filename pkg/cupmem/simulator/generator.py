"""
Seeded generation of single-conflict scenarios.

A scenario is an old-evidence session, a new-evidence session that
implicitly invalidates the old belief (same slot for TYPE_I, through a
dependency rule for TYPE_II), and three probes. Every scenario is checked
against the conflict oracle and the probe leakage rules before it is
returned; rejected samples are redrawn a bounded number of times.
"""
import logging
import random
from dataclasses import dataclass
from typing import List, Optional, Tuple

from cupmem.conflict import classify_conflict, observation_from_session
from cupmem.errors import GenerationExhausted
from cupmem.lexical import content_tokens
from cupmem.schemas import (
    Cardinality,
    ConflictType,
    Dimension,
    GapSpec,
    GroundTruth,
    KnowledgeRule,
    Probe,
    Proposition,
    RuleKind,
    Scenario,
    ScenarioProbes,
    Session,
    SessionKind,
    SlotRef,
    StateSchema,
    TaggedSpan,
    Turn,
    WitnessKind,
)
from cupmem.simulator.lexicon import Lexicon, SlotLexicon, load_lexicon, render
from cupmem.state_schema import Knowledge, pattern_matches

logger = logging.getLogger(__name__)

MAX_ATTEMPTS = 50
DAY = 86400
DEFAULT_GAP = GapSpec(min_seconds=30 * DAY, max_seconds=180 * DAY)

_ID_PREFIX = {ConflictType.TYPE_I: "t1", ConflictType.TYPE_II: "t2"}


@dataclass(frozen=True)
class Route:
    """One way to realize a conflict: which slots, which values, which rule"""

    target: SlotRef
    old_values: Tuple[str, ...]
    new_slot: SlotRef
    new_values: Tuple[str, ...]
    rule: Optional[KnowledgeRule] = None


def _matching(values, pattern: str) -> Tuple[str, ...]:
    return tuple(v for v in values if pattern_matches(pattern, v))


def available_routes(
    conflict_type: ConflictType,
    schema: StateSchema,
    knowledge: Knowledge,
    lexicon: Lexicon,
    target_slot: Optional[SlotRef] = None,
) -> List[Route]:
    routes: List[Route] = []
    if conflict_type == ConflictType.TYPE_I:
        for slot in schema.all_slots():
            entry = lexicon.for_slot(slot)
            if entry and entry.implicit and schema.cardinality_of(slot) == Cardinality.SINGLE and len(entry.values) > 1:
                routes.append(Route(target=slot, old_values=entry.values, new_slot=slot, new_values=entry.values))
        for rule in knowledge:
            if rule.kind != RuleKind.INCOMPAT_SAME_SLOT:
                continue
            entry = lexicon.for_slot(rule.slot)
            if not entry or not entry.implicit:
                continue
            first, second = (_matching(entry.values, p) for p in rule.value_predicate_pair)
            for old_values, new_values in ((first, second), (second, first)):
                if old_values and new_values:
                    routes.append(Route(rule.slot, old_values, rule.slot, new_values, rule))
    else:
        for rule in knowledge:
            if rule.kind != RuleKind.DEPENDENCY or rule.source_slot == rule.target_slot:
                continue
            target_entry = lexicon.for_slot(rule.target_slot)
            source_entry = lexicon.for_slot(rule.source_slot)
            if not target_entry or not source_entry or not source_entry.implicit:
                continue
            old_values = _matching(target_entry.values, rule.target_pattern)
            new_values = _matching(source_entry.values, rule.source_pattern)
            if old_values and new_values:
                routes.append(Route(rule.target_slot, old_values, rule.source_slot, new_values, rule))

    if target_slot is not None:
        routes = [r for r in routes if r.target == target_slot]
    return routes


def _user_session(session_id: str, kind: SessionKind, text: str, span: TaggedSpan, ack: str) -> Session:
    return Session(
        session_id=session_id,
        kind=kind,
        turns=(
            Turn(speaker="user", text=text, spans=(span,)),
            Turn(speaker="assistant", text=ack),
        ),
    )


def _user_text(session: Session) -> str:
    return " ".join(t.text for t in session.turns if t.speaker == "user")


def leaked_tokens(probe_text: str, session_o: Session, session_n: Session) -> set:
    """Tokens of the probe that only the new evidence introduced"""
    introduced = content_tokens(_user_text(session_n)) - content_tokens(_user_text(session_o))
    return content_tokens(probe_text) & introduced


def cue_tokens(probe_text: str, scenario_sessions: Tuple[Session, ...], values: Tuple[str, ...]) -> set:
    """Tokens an IPA probe shares with either evidence session or any involved value"""
    evidence = set()
    for session in scenario_sessions:
        evidence |= content_tokens(_user_text(session))
    for value in values:
        evidence |= content_tokens(render(value))
    return content_tokens(probe_text) & evidence


def _probe(probe_id: str, dimension: Dimension, text: str, entry: SlotLexicon, premises=(), basis=()) -> Probe:
    return Probe(
        probe_id=probe_id,
        dimension=dimension,
        text=text,
        intent=entry.intent,
        action="answer" if dimension != Dimension.IPA else "plan",
        premises=tuple(premises),
        basis_slots=tuple(basis),
    )


def generate_scenario(
    seed: int,
    schema: StateSchema,
    knowledge: Knowledge,
    conflict_type: ConflictType,
    lexicon: Optional[Lexicon] = None,
    target_slot: Optional[SlotRef] = None,
    gap: GapSpec = DEFAULT_GAP,
) -> Scenario:
    """Deterministic in (seed, conflict_type, schema, knowledge, lexicon)"""
    lexicon = lexicon or load_lexicon()
    routes = available_routes(conflict_type, schema, knowledge, lexicon, target_slot)
    if not routes:
        raise GenerationExhausted(f"no rule or slot admits a {conflict_type.value} scenario")

    rng = random.Random(f"scenario:{conflict_type.value}:{seed}")
    scenario_id = f"{_ID_PREFIX[conflict_type]}-{seed:06d}"
    for attempt in range(MAX_ATTEMPTS):
        route = rng.choice(routes)
        old_value = rng.choice(route.old_values)
        new_choices = [v for v in route.new_values if route.new_slot != route.target or v != old_value]
        if not new_choices:
            continue
        new_value = rng.choice(new_choices)
        target_entry = lexicon.for_slot(route.target)
        new_entry = lexicon.for_slot(route.new_slot)

        old = Proposition(attribute=route.target, value=old_value)
        new = Proposition(attribute=route.new_slot, value=new_value)
        session_o = _user_session(
            f"{scenario_id}-o",
            SessionKind.OLD_EVIDENCE,
            rng.choice(target_entry.state).format(value=render(old_value)),
            TaggedSpan(slot=route.target, value=old_value),
            rng.choice(lexicon.acknowledgements),
        )
        session_n = _user_session(
            f"{scenario_id}-n",
            SessionKind.NEW_EVIDENCE,
            rng.choice(new_entry.implicit).format(value=render(new_value)),
            TaggedSpan(slot=route.new_slot, value=new_value),
            rng.choice(lexicon.acknowledgements),
        )

        m_o = observation_from_session(session_o)
        m_n = observation_from_session(session_n)
        witness = classify_conflict([m_o, m_n], 0, 1, knowledge, schema)
        if witness.kind != WitnessKind(conflict_type.value):
            logger.debug(f"{scenario_id} attempt {attempt}: oracle says {witness.kind.value}")
            continue

        sr_text = rng.choice(target_entry.sr).format(value=render(old_value))
        pr_text = rng.choice(target_entry.pr).format(value=render(old_value))
        ipa_text = rng.choice(target_entry.ipa)
        if leaked_tokens(pr_text, session_o, session_n):
            logger.debug(f"{scenario_id} attempt {attempt}: PR probe leaks new evidence")
            continue
        if cue_tokens(ipa_text, (session_o, session_n), (old_value, new_value)):
            logger.debug(f"{scenario_id} attempt {attempt}: IPA probe carries a conflict cue")
            continue

        upstream = route.new_slot if conflict_type == ConflictType.TYPE_II else None
        basis = (route.target,) + ((upstream,) if upstream else ())
        probes = ScenarioProbes(
            sr=_probe(f"{scenario_id}-sr", Dimension.SR, sr_text, target_entry, premises=(old,)),
            pr=_probe(f"{scenario_id}-pr", Dimension.PR, pr_text, target_entry, premises=(old,)),
            ipa=_probe(f"{scenario_id}-ipa", Dimension.IPA, ipa_text, target_entry, basis=basis),
        )

        if conflict_type == ConflictType.TYPE_I:
            expected = new
        elif route.rule.implied_value:
            expected = Proposition(attribute=route.target, value=route.rule.implied_value)
        else:
            expected = None

        return Scenario(
            id=scenario_id,
            seed=seed,
            conflict_type=conflict_type,
            target_slot=route.target,
            old=old,
            new=new,
            upstream_slot=upstream,
            rule_id=witness.rule_id,
            session_o=session_o,
            session_n=session_n,
            m_o=m_o,
            m_n=m_n,
            gap=gap,
            probes=probes,
            ground_truth=GroundTruth(ipa_forbidden=(old,), ipa_expected=expected),
        )

    raise GenerationExhausted(
        f"{scenario_id}: no valid {conflict_type.value} scenario after {MAX_ATTEMPTS} attempts"
    )
