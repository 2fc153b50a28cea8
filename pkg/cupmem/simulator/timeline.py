"""
Timestamp assignment for haystacks, and the explicit-negation mutation.

All instants are whole seconds in UTC. Sessions fall inside the target
year; only the query time may spill past it through the audit margin.
"""
import logging
import random
from datetime import datetime, timedelta, timezone
from typing import List, Optional

from cupmem.errors import ConfigError, InfeasibleSchedule, InvalidGapSpec
from cupmem.schemas import GapSpec, Haystack, Polarity, Scenario, Session, SessionKind, TaggedSpan, Turn
from cupmem.simulator.lexicon import Lexicon, load_lexicon, render

logger = logging.getLogger(__name__)

DAY = 86400
MIN_AUDIT_MARGIN = DAY
MAX_AUDIT_MARGIN = 30 * DAY


def _year_start(year: int) -> datetime:
    return datetime(year, 1, 1, tzinfo=timezone.utc)


def schedule_timestamps(
    haystack: Haystack,
    gap: GapSpec,
    target_year: int,
    seed: int,
    validity_window: Optional[int] = None,
) -> Haystack:
    """
    Strictly increasing session instants with t(n) - t(o) drawn from the gap
    range, and a query time after the last session by an audit margin of one
    to thirty days (never more than `validity_window` seconds past t(n)).
    """
    if gap.min_seconds > gap.max_seconds:
        raise InvalidGapSpec(f"gap minimum {gap.min_seconds}s exceeds maximum {gap.max_seconds}s")

    count = len(haystack.sessions)
    o, n = haystack.index_o, haystack.index_n
    if not 0 <= o < n < count:
        raise ConfigError(f"haystack {haystack.scenario_id} has evidence indices o={o} n={n}")

    start = _year_start(target_year)
    span = int((_year_start(target_year + 1) - start).total_seconds())
    after = count - 1 - n

    rng = random.Random(f"schedule:{haystack.scenario_id}:{seed}")
    lowest_gap = max(gap.min_seconds, n - o)
    if lowest_gap > gap.max_seconds:
        raise InfeasibleSchedule(
            f"{n - o - 1} sessions between the evidence sessions cannot fit in a {gap.max_seconds}s gap"
        )
    gap_seconds = rng.randint(lowest_gap, gap.max_seconds)

    latest_o = span - 1 - after - gap_seconds
    if latest_o < o:
        raise InfeasibleSchedule(
            f"a {gap_seconds}s gap with {count} sessions does not fit inside {target_year}"
        )
    t_o = rng.randint(o, latest_o)
    t_n = t_o + gap_seconds

    offsets: List[int] = sorted(rng.sample(range(0, t_o), o))
    offsets.append(t_o)
    offsets.extend(sorted(rng.sample(range(t_o + 1, t_n), n - o - 1)))
    offsets.append(t_n)
    offsets.extend(sorted(rng.sample(range(t_n + 1, span), after)))

    ceiling = MAX_AUDIT_MARGIN
    if validity_window is not None:
        ceiling = min(ceiling, validity_window - (offsets[-1] - t_n))
        if ceiling < 1:
            raise InfeasibleSchedule(
                f"validity window of {validity_window}s closes before the last session"
            )
    margin = rng.randint(min(MIN_AUDIT_MARGIN, ceiling), ceiling)

    sessions = tuple(
        session.model_copy(update={"timestamp": start + timedelta(seconds=offset)})
        for session, offset in zip(haystack.sessions, offsets)
    )
    query_time = start + timedelta(seconds=offsets[-1] + margin)
    return haystack.model_copy(update={"sessions": sessions, "query_time": query_time})


def insert_explicit_negation(
    haystack: Haystack,
    scenario: Scenario,
    lexicon: Optional[Lexicon] = None,
) -> Haystack:
    """
    Insert a session that explicitly retracts the old belief, strictly
    between Session_o and Session_n.
    """
    t_o = haystack.session_o.timestamp
    t_n = haystack.session_n.timestamp
    if t_o is None or t_n is None:
        raise ConfigError(f"haystack {haystack.scenario_id} must be scheduled before mutation")

    taken = {s.timestamp for s in haystack.sessions}
    instant = t_o + timedelta(seconds=int((t_n - t_o).total_seconds()) // 2)
    while instant in taken and instant < t_n:
        instant += timedelta(seconds=1)
    if not t_o < instant < t_n:
        raise InfeasibleSchedule(f"no free second between the evidence sessions of {haystack.scenario_id}")

    lexicon = lexicon or load_lexicon()
    rng = random.Random(f"negation:{scenario.id}")
    negation = Session(
        session_id=f"{scenario.id}/neg",
        timestamp=instant,
        kind=SessionKind.NEGATION,
        turns=(
            Turn(
                speaker="user",
                text=rng.choice(lexicon.negation).format(value=render(scenario.old.value)),
                spans=(TaggedSpan(
                    slot=scenario.old.attribute,
                    value=scenario.old.value,
                    polarity=Polarity.DENY,
                    correction=True,
                ),),
            ),
            Turn(speaker="assistant", text=rng.choice(lexicon.acknowledgements)),
        ),
    )

    sessions = sorted(haystack.sessions + (negation,), key=lambda s: s.timestamp)
    o_id = haystack.session_o.session_id
    n_id = haystack.session_n.session_id
    return haystack.model_copy(update={
        "sessions": tuple(sessions),
        "index_o": next(i for i, s in enumerate(sessions) if s.session_id == o_id),
        "index_n": next(i for i, s in enumerate(sessions) if s.session_id == n_id),
    })
