"""Builders shared by the test modules."""
from datetime import datetime, timedelta, timezone
from typing import Optional

from cupmem.schemas import MemoryItem, Probe, Proposition, Provenance, Session, TaggedSpan, Turn

BASE = datetime(2027, 1, 1, tzinfo=timezone.utc)


def at(day: float) -> datetime:
    return BASE + timedelta(days=day)


def span(path: str, value: str, **flags) -> TaggedSpan:
    return TaggedSpan(slot=path, value=value, **flags)


def prop(path: str, value: str) -> Proposition:
    return Proposition(attribute=path, value=value)


def session(session_id: str, day: Optional[float], *spans: TaggedSpan, text: Optional[str] = None) -> Session:
    text = text or " and ".join(s.value.replace("_", " ") for s in spans) or "nothing new"
    return Session(
        session_id=session_id,
        timestamp=at(day) if day is not None else None,
        turns=(
            Turn(speaker="user", text=text, spans=spans),
            Turn(speaker="assistant", text="Noted."),
        ),
    )


def item(path: str, value: str, day: float, session_id: str = "s0") -> MemoryItem:
    return MemoryItem(
        slot=path,
        proposition=prop(path, value),
        provenance=Provenance(session_id=session_id, timestamp=at(day)),
    )


def probe(probe_id: str, dimension: str, premises=(), basis=(), text: str = "what now") -> Probe:
    return Probe(
        probe_id=probe_id,
        dimension=dimension,
        text=text,
        premises=tuple(prop(path, value) for path, value in premises),
        basis_slots=tuple(basis),
    )


CITY = "location_and_living/current_base_location"
WEATHER = "weather_and_environment/current_weather_pattern"
COMMUTE = "routine_and_transport/current_commute_mode"
LIMITATION = "health_and_mobility/functional_limitation"
ADJUSTMENT = "health_and_mobility/health_linked_adjustment"
WORK_CHANGE = "work_and_schedule/work_transition_or_change"
SKILL = "identity_and_background/skill_or_language_background"
ROUTINE = "routine_and_transport/routine_shift"
CAREGIVING = "family_and_caregiving/caregiving_responsibility"
