"""
Systems under evaluation.

Each exposes ingest(session), answer(probe), last_retrieval_trace(),
memory_digest() and close(). EngineSystem is the adjudicating store;
NaiveRetrievalSystem keeps every tagged span and answers from whatever it
retrieves first.
"""
import hashlib
import json
import logging
from typing import List, Optional

from cupmem.adjudicator import Adjudicator, build_adjudicator
from cupmem.config import IngestConfig
from cupmem.lexical import query_terms_for, rank_by_overlap
from cupmem.readout import analyze_query, answer_query
from cupmem.schemas import (
    AnswerState,
    CurrentBasis,
    Dimension,
    GroundedAnswer,
    IngestReport,
    MemoryItem,
    PremiseStatus,
    PremiseVerdict,
    Probe,
    Provenance,
    SlotChoice,
    Session,
    StateSchema,
)
from cupmem.state_schema import Knowledge
from cupmem.store import MemoryStore
from cupmem.write_pipeline import ingest_session

logger = logging.getLogger(__name__)

TRACE_DEPTH = 20


def _probe_terms(probe: Probe) -> set:
    return query_terms_for([probe.text] + [p.value for p in probe.premises])


class EngineSystem:
    name = "engine"

    def __init__(
        self,
        schema: StateSchema,
        knowledge: Knowledge,
        config: Optional[IngestConfig] = None,
        adjudicator: Optional[Adjudicator] = None,
    ):
        self.knowledge = knowledge
        self.config = config or IngestConfig()
        self._owns_adjudicator = adjudicator is None
        self.adjudicator = adjudicator or build_adjudicator(self.config.adjudicator)
        self.store = MemoryStore(schema)
        self.reports: List[IngestReport] = []
        self._trace: List[MemoryItem] = []

    def ingest(self, session: Session) -> IngestReport:
        report = ingest_session(self.store, session, self.knowledge, self.config, self.adjudicator)
        self.reports.append(report)
        return report

    def answer(self, probe: Probe, dimension: Optional[Dimension] = None) -> GroundedAnswer:
        answer = answer_query(self.store, probe, dimension)
        trace = list(answer.basis.active_grounding) + list(answer.basis.historical_context)
        seen = {item.id for item in trace}
        for item, _ in self.store.retrieve_lexical(_probe_terms(probe), TRACE_DEPTH):
            if item.id not in seen:
                trace.append(item)
                seen.add(item.id)
        self._trace = trace[:TRACE_DEPTH]
        return answer

    def last_retrieval_trace(self) -> List[MemoryItem]:
        return list(self._trace)

    def memory_digest(self) -> str:
        return self.store.digest()

    def close(self) -> None:
        if self._owns_adjudicator:
            self.adjudicator.close()
        self.store.close()


class NaiveRetrievalSystem:
    """Retrieval-only reader without adjudication; oldest-first tie-break"""

    name = "naive"

    def __init__(self, schema: StateSchema):
        self.schema = schema
        self.items: List[MemoryItem] = []
        self._trace: List[MemoryItem] = []

    def ingest(self, session: Session) -> None:
        for turn_index, turn, span in session.tagged_spans():
            self.items.append(MemoryItem(
                id=f"n{len(self.items) + 1:06d}",
                slot=span.slot,
                proposition=span.proposition(),
                provenance=Provenance(session_id=session.session_id, timestamp=session.timestamp),
                evidence=({
                    "session_id": session.session_id,
                    "turn_index": turn_index,
                    "text": turn.text,
                    "tagged_slot": span.slot,
                },),
            ))

    def answer(self, probe: Probe, dimension: Optional[Dimension] = None) -> GroundedAnswer:
        analysis = analyze_query(probe, self.schema, dimension)
        dimension = analysis.dimension_hint
        ranked = [item for item, _ in rank_by_overlap(self.items, _probe_terms(probe), TRACE_DEPTH, newest_first=False)]
        self._trace = ranked

        def first_in(slot) -> Optional[MemoryItem]:
            return next((item for item in ranked if item.slot == slot), None)

        verdicts = []
        for premise in analysis.presupposed:
            hit = next((item for item in ranked if item.proposition.same_claim(premise)), None)
            status = PremiseStatus.SUPPORTED if hit else PremiseStatus.UNRESOLVED
            verdicts.append(PremiseVerdict(premise=premise, verdict=status, witness=hit.id if hit else None))

        state = None
        choices = []
        grounding = []
        if dimension == Dimension.SR:
            premise = analysis.presupposed[0]
            current = first_in(premise.attribute)
            if current is None:
                state = AnswerState.UNRESOLVED
            elif current.proposition.value == premise.value:
                state = AnswerState.STILL_VALID
            else:
                state = AnswerState.NO_LONGER_VALID
        elif dimension == Dimension.PR:
            followed = all(v.verdict == PremiseStatus.SUPPORTED for v in verdicts)
            state = AnswerState.PREMISE_FOLLOWED if followed else AnswerState.PREMISE_REJECTED
        else:
            for slot in analysis.basis_slots:
                current = first_in(slot)
                if current is None:
                    choices.append(SlotChoice(slot=slot, unknown=True))
                else:
                    grounding.append(current)
                    choices.append(SlotChoice(slot=slot, values=(current.proposition.value,)))

        return GroundedAnswer(
            probe_id=probe.probe_id,
            dimension=dimension,
            verdict_summary=tuple(verdicts),
            basis=CurrentBasis(active_grounding=tuple(grounding)),
            answer_state=state,
            choices=tuple(choices),
        )

    def last_retrieval_trace(self) -> List[MemoryItem]:
        return list(self._trace)

    def memory_digest(self) -> str:
        payload = json.dumps([item.model_dump(mode="json") for item in self.items], sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def close(self) -> None:
        self.items = []
