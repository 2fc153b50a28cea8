"""
Query-time readout over an adjudicated store.

Answers are grounded only in ACTIVE items; STALE items appear as historical
context and never as a choice. The readout never mutates the store.
"""
import logging
from typing import List, Optional

from cupmem.errors import MalformedProbe
from cupmem.schemas import (
    AnswerState,
    CurrentBasis,
    Dimension,
    GroundedAnswer,
    ItemStatus,
    PremiseStatus,
    PremiseVerdict,
    Probe,
    QueryAnalysis,
    SlotChoice,
    SlotRef,
    StateSchema,
)
from cupmem.store import MemoryStore

logger = logging.getLogger(__name__)

_SR_STATES = {
    PremiseStatus.SUPPORTED: AnswerState.STILL_VALID,
    PremiseStatus.OUTDATED: AnswerState.NO_LONGER_VALID,
    PremiseStatus.UNRESOLVED: AnswerState.UNRESOLVED,
}


def analyze_query(probe: Probe, schema: StateSchema, dimension: Optional[Dimension] = None) -> QueryAnalysis:
    dimension = dimension or probe.dimension
    for premise in probe.premises:
        if not schema.has_slot(premise.attribute):
            raise MalformedProbe(f"probe '{probe.probe_id}' presupposes undeclared slot '{premise.attribute.path}'")
    for slot in probe.basis_slots:
        if not schema.has_slot(slot):
            raise MalformedProbe(f"probe '{probe.probe_id}' names undeclared basis slot '{slot.path}'")

    if dimension in (Dimension.SR, Dimension.PR) and not probe.premises:
        raise MalformedProbe(f"{dimension.value} probe '{probe.probe_id}' carries no premise")
    if dimension == Dimension.IPA:
        if probe.premises:
            raise MalformedProbe(f"IPA probe '{probe.probe_id}' must not presuppose any state")
        if not probe.basis_slots:
            raise MalformedProbe(f"IPA probe '{probe.probe_id}' names no basis slots")

    return QueryAnalysis(
        intent=probe.intent or dimension.value.lower(),
        presupposed=probe.premises,
        basis_slots=probe.basis_slots,
        action=probe.action,
        dimension_hint=dimension,
    )


def verify_premises(store: MemoryStore, analysis: QueryAnalysis) -> List[PremiseVerdict]:
    verdicts = []
    for premise in analysis.presupposed:
        items = store.retrieve_same_slot(premise.attribute)
        equal = [item for item in items if item.proposition.value == premise.value]
        active = next((item for item in equal if item.is_active), None)
        stale = next((item for item in equal if item.status == ItemStatus.STALE), None)
        if active is not None:
            verdicts.append(PremiseVerdict(premise=premise, verdict=PremiseStatus.SUPPORTED, witness=active.id))
        elif stale is not None:
            verdicts.append(PremiseVerdict(premise=premise, verdict=PremiseStatus.OUTDATED, witness=stale.id))
        elif store.marker_for(premise.attribute) is not None:
            verdicts.append(PremiseVerdict(
                premise=premise,
                verdict=PremiseStatus.UNRESOLVED,
                witness=f"marker:{premise.attribute.path}",
            ))
        else:
            verdicts.append(PremiseVerdict(premise=premise, verdict=PremiseStatus.UNRESOLVED))
    return verdicts


def assemble_basis(store: MemoryStore, analysis: QueryAnalysis, verdicts: List[PremiseVerdict]) -> CurrentBasis:
    slots: List[SlotRef] = []
    for slot in list(analysis.basis_slots) + [p.attribute for p in analysis.presupposed]:
        if slot not in slots:
            slots.append(slot)

    grounding = [item for slot in slots for item in store.active_in_slot(slot)]
    historical = [
        store.get_item(v.witness) for v in verdicts
        if v.verdict == PremiseStatus.OUTDATED and v.witness
    ]
    unknown = [
        slot for slot in analysis.basis_slots
        if store.marker_for(slot) is not None or not store.active_in_slot(slot)
    ]
    return CurrentBasis(
        active_grounding=tuple(grounding),
        historical_context=tuple(historical),
        blocked_premises=tuple(v for v in verdicts if v.verdict != PremiseStatus.SUPPORTED),
        unknown_slots=tuple(unknown),
    )


def answer_query(store: MemoryStore, probe: Probe, dimension: Optional[Dimension] = None) -> GroundedAnswer:
    """Answer one probe from the authorized current-state basis"""
    analysis = analyze_query(probe, store.schema, dimension)
    dimension = analysis.dimension_hint
    verdicts = verify_premises(store, analysis)
    basis = assemble_basis(store, analysis, verdicts)

    state: Optional[AnswerState] = None
    choices = []
    if dimension == Dimension.SR:
        state = _SR_STATES[verdicts[0].verdict]
    elif dimension == Dimension.PR:
        state = AnswerState.PREMISE_REJECTED if basis.blocked_premises else AnswerState.PREMISE_FOLLOWED
    else:
        for slot in analysis.basis_slots:
            if slot in basis.unknown_slots:
                choices.append(SlotChoice(slot=slot, unknown=True))
            else:
                values = tuple(i.proposition.value for i in basis.active_grounding if i.slot == slot)
                choices.append(SlotChoice(slot=slot, values=values))

    logger.debug(f"Answered {probe.probe_id} ({dimension.value}): {state.value if state else 'choices'}")
    return GroundedAnswer(
        probe_id=probe.probe_id,
        dimension=dimension,
        verdict_summary=tuple(verdicts),
        basis=basis,
        answer_state=state,
        choices=tuple(choices),
    )
