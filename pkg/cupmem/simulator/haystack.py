"""
Embedding a scenario's evidence sessions among background distractors.
"""
import logging
import random
from typing import List, Optional, Sequence, Tuple

from cupmem.conflict import belief_incompatible
from cupmem.errors import ConfigError, PoolTooSmall, UnsafeDistractor
from cupmem.schemas import Haystack, Polarity, Scenario, Session, SessionKind, StateSchema
from cupmem.state_schema import Knowledge

logger = logging.getLogger(__name__)


def distractor_hazard(session: Session, scenario: Scenario, knowledge: Knowledge, schema: StateSchema) -> Optional[str]:
    """Why a session may not pad this scenario's haystack, or None when it is safe"""
    guarded = {scenario.target_slot}
    if scenario.upstream_slot is not None:
        guarded.add(scenario.upstream_slot)
    asserted = []
    for turn_index, _, span in session.tagged_spans():
        if span.slot in guarded:
            return f"turn {turn_index} touches {span.slot.path}"
        if span.correction or span.polarity == Polarity.DENY:
            if span.slot == scenario.old.attribute:
                return f"turn {turn_index} explicitly negates {scenario.old.attribute.path}"
        if span.polarity == Polarity.ASSERT:
            asserted.append(span.proposition())
    condition = belief_incompatible(scenario.old, asserted, knowledge, schema)
    if condition is not None:
        return f"fires {condition.rule_id or condition.kind.value} against {scenario.old}"
    return None


def filter_safe_distractors(
    pool: Sequence[Session],
    scenario: Scenario,
    knowledge: Knowledge,
    schema: StateSchema,
) -> List[Session]:
    """Deduplicated, safe distractors in session id order"""
    seen = {}
    for session in pool:
        if session.session_id in seen:
            continue
        if distractor_hazard(session, scenario, knowledge, schema) is None:
            seen[session.session_id] = session
    return [seen[key] for key in sorted(seen)]


def build_haystack(
    scenario: Scenario,
    pool: Sequence[Session],
    n_sessions: int,
    seed: int,
    knowledge: Knowledge,
    schema: StateSchema,
    strict: bool = True,
) -> Haystack:
    """
    Place Session_o uniformly in the first half and Session_n in the second
    half, padding the rest with sampled distractors. With `strict`, an unsafe
    session in the pool is an error instead of being skipped.
    """
    if n_sessions < 2:
        raise ConfigError(f"a haystack needs at least 2 sessions, got {n_sessions}")

    if strict:
        for session in pool:
            hazard = distractor_hazard(session, scenario, knowledge, schema)
            if hazard is not None:
                raise UnsafeDistractor(session.session_id, f"distractor '{session.session_id}' {hazard}")
    safe = filter_safe_distractors(pool, scenario, knowledge, schema)

    needed = n_sessions - 2
    if len(safe) < needed:
        raise PoolTooSmall(
            f"{scenario.id}: need {needed} safe distractors, pool has {len(safe)}"
        )

    rng = random.Random(f"haystack:{scenario.id}:{seed}")
    distractors = rng.sample(safe, needed)
    half = n_sessions // 2
    index_o = rng.randrange(0, half)
    index_n = rng.randrange(half, n_sessions)

    filler = iter(distractors)
    ordered: List[Tuple[Session, SessionKind]] = []
    for position in range(n_sessions):
        if position == index_o:
            ordered.append((scenario.session_o, SessionKind.OLD_EVIDENCE))
        elif position == index_n:
            ordered.append((scenario.session_n, SessionKind.NEW_EVIDENCE))
        else:
            ordered.append((next(filler), SessionKind.DISTRACTOR))

    sessions = tuple(
        session.model_copy(update={"session_id": f"{scenario.id}/s{position:02d}", "kind": kind})
        for position, (session, kind) in enumerate(ordered)
    )
    return Haystack(scenario_id=scenario.id, sessions=sessions, index_o=index_o, index_n=index_n)
