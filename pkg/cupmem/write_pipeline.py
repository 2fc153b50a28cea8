"""
Write-time pipeline: session -> update candidates -> local same-slot update ->
revision candidate set -> proposals -> adjudication -> applied decisions.

One session is ingested as a single store transaction.
"""
import logging
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

from cupmem.adjudicator import Adjudicator, build_adjudicator
from cupmem.config import IngestConfig
from cupmem.conflict import belief_incompatible
from cupmem.errors import ExtractorFailure, OutOfOrderSession
from cupmem.lexical import content_tokens, normalized_tokens
from cupmem.logging_config import metrics
from cupmem.monitoring import monitoring
from cupmem.schemas import (
    AdjudicationContext,
    AdjudicationDecision,
    AppliedDecision,
    CandidateTag,
    Cardinality,
    EvidenceSpan,
    IngestReport,
    ItemStatus,
    LocalAction,
    LocalActionKind,
    MemoryItem,
    Polarity,
    Provenance,
    RevisionCandidate,
    RevisionProposal,
    Session,
    SlotRef,
    SourceKind,
    StaleCause,
    StateSchema,
    UpdateCandidate,
    Verdict,
    item_id_key,
)
from cupmem.state_schema import Knowledge, dependency_neighbors, slot_cardinality
from cupmem.store import MemoryStore

logger = logging.getLogger(__name__)

_TAG_ORDER = {CandidateTag.DIRECT: 0, CandidateTag.AFFECTED: 1, CandidateTag.GLOBAL: 2}


def is_refinement(old_value: str, new_value: str) -> bool:
    """Old value's tokens are a strict prefix of the new value's tokens"""
    old_tokens = normalized_tokens(old_value)
    new_tokens = normalized_tokens(new_value)
    return bool(old_tokens) and len(old_tokens) < len(new_tokens) and new_tokens[:len(old_tokens)] == old_tokens


class StructuralExtractor:
    """
    Turns tagged spans into update candidates.

    Historical and wrapper spans are dropped. A SINGLE slot keeps only the
    last asserted value of the session; for MULTI slots a value that another
    value of the same session refines is dropped. When a session both asserts
    and denies a value, its last mention wins.
    """

    def extract(self, session: Session, schema: StateSchema) -> List[UpdateCandidate]:
        if session.timestamp is None:
            raise ExtractorFailure(f"session '{session.session_id}' has no timestamp")

        kept: List[Tuple[int, UpdateCandidate]] = []
        for turn_index, turn, span in session.tagged_spans():
            if span.historical or span.wrapper:
                continue
            if not schema.has_slot(span.slot):
                raise ExtractorFailure(
                    f"session '{session.session_id}' turn {turn_index} tags undeclared slot '{span.slot.path}'"
                )
            evidence = EvidenceSpan(
                session_id=session.session_id,
                turn_index=turn_index,
                text=turn.text,
                tagged_slot=span.slot,
            )
            kept.append((turn_index, UpdateCandidate(
                slot=span.slot,
                value=span.proposition(),
                origin=span.origin,
                confidence=span.confidence,
                timestamp=session.timestamp,
                evidence=(evidence,),
            )))

        last_single: Dict[SlotRef, int] = {}
        last_mention: Dict[Tuple[SlotRef, str], int] = {}
        for position, (_, candidate) in enumerate(kept):
            last_mention[(candidate.slot, candidate.value.value)] = position
            if (candidate.value.polarity == Polarity.ASSERT
                    and schema.cardinality_of(candidate.slot) == Cardinality.SINGLE):
                last_single[candidate.slot] = position

        # the last mention of a value decides its polarity for the session
        candidates: List[UpdateCandidate] = []
        for position, (_, candidate) in enumerate(kept):
            value = candidate.value
            if last_mention[(candidate.slot, value.value)] != position:
                continue
            if value.polarity == Polarity.ASSERT:
                cardinality = schema.cardinality_of(candidate.slot)
                if cardinality == Cardinality.SINGLE and last_single[candidate.slot] != position:
                    continue
                if cardinality == Cardinality.MULTI and any(
                    other.slot == candidate.slot
                    and other.value.polarity == Polarity.ASSERT
                    and is_refinement(value.value, other.value.value)
                    for _, other in kept
                ):
                    continue
            candidates.append(candidate)
        return candidates


def extract_candidates(session: Session, schema: StateSchema, extractor=None) -> List[UpdateCandidate]:
    return (extractor or StructuralExtractor()).extract(session, schema)


def _new_item(candidate: UpdateCandidate) -> MemoryItem:
    return MemoryItem(
        slot=candidate.slot,
        proposition=candidate.value,
        provenance=Provenance(
            session_id=candidate.session_id,
            timestamp=candidate.timestamp,
            source_kind=candidate.origin,
        ),
        evidence=candidate.evidence,
    )


def _cause(candidate: UpdateCandidate, rationale: str, rule_id: Optional[str] = None) -> StaleCause:
    return StaleCause(
        session_id=candidate.session_id,
        timestamp=candidate.timestamp,
        rationale=rationale,
        rule_id=rule_id,
    )


def local_update(store: MemoryStore, candidate: UpdateCandidate) -> LocalAction:
    """Same-slot revision only. Applies the action it returns."""
    cardinality = slot_cardinality(store.schema, candidate.slot)
    value = candidate.value
    with store.transaction():
        active = store.active_in_slot(candidate.slot)
        same = next((item for item in active if item.proposition.value == value.value), None)

        if value.polarity == Polarity.DENY:
            if same is None:
                return LocalAction(kind=LocalActionKind.NO_OP, value=value)
            store.mark_stale(same.id, _cause(candidate, "explicit negation"))
            return LocalAction(kind=LocalActionKind.RETRACT, target=same.id, value=value)

        if same is not None:
            return LocalAction(kind=LocalActionKind.NO_OP, target=same.id, value=value)

        if cardinality == Cardinality.SINGLE and active:
            old = active[0]
            store.mark_stale(old.id, _cause(candidate, f"superseded by {value.value}"))
            written = store.insert_item(_new_item(candidate))
            return LocalAction(kind=LocalActionKind.REPLACE, target=old.id, written=written, value=value)

        if cardinality == Cardinality.MULTI:
            refined = next((item for item in active if is_refinement(item.proposition.value, value.value)), None)
            if refined is not None:
                store.mark_stale(refined.id, _cause(candidate, f"refined to {value.value}"))
                written = store.insert_item(_new_item(candidate))
                return LocalAction(kind=LocalActionKind.REFINE, target=refined.id, written=written, value=value)

        written = store.insert_item(_new_item(candidate))
        return LocalAction(kind=LocalActionKind.ADD, written=written, value=value)


def touched_domains(updates: Sequence[UpdateCandidate]) -> Set[str]:
    domains = set()
    for update in updates:
        domains.add(update.slot.domain)
        domains.update(span.tagged_slot.domain for span in update.evidence if span.tagged_slot)
    return domains


def affected_regions(
    schema: StateSchema,
    updates: Sequence[UpdateCandidate],
    transitive: bool = False,
) -> Set[SlotRef]:
    """All slots of the dependency neighbors of every touched domain"""
    frontier = touched_domains(updates)
    reached: Set[str] = set()
    while frontier:
        next_frontier = set()
        for domain in sorted(frontier):
            for neighbor in dependency_neighbors(schema, domain):
                if neighbor not in reached:
                    reached.add(neighbor)
                    next_frontier.add(neighbor)
        frontier = next_frontier if transitive else set()
    return {slot for domain in reached for slot in schema.slots_of(domain)}


def _query_terms(updates: Sequence[UpdateCandidate]) -> Set[str]:
    terms: Set[str] = set()
    for update in updates:
        terms.update(content_tokens(update.value.value))
        for span in update.evidence:
            terms.update(content_tokens(span.text))
    return terms


def build_revision_candidates(
    store: MemoryStore,
    updates: Sequence[UpdateCandidate],
    schema: StateSchema,
    k: int,
    exclude: Iterable[str] = (),
    transitive: bool = False,
) -> List[RevisionCandidate]:
    """
    DIRECT, AFFECTED and GLOBAL candidates over ACTIVE items, deduplicated with
    that precedence and ordered by tag then id. Ids in `exclude` never appear.
    """
    if not updates:
        return []
    excluded = set(exclude)
    tagged: Dict[str, CandidateTag] = {}

    for domain in sorted(touched_domains(updates)):
        for item in store.retrieve_same_domain(domain):
            if item.is_active and item.id not in excluded:
                tagged.setdefault(item.id, CandidateTag.DIRECT)

    for slot in sorted(affected_regions(schema, updates, transitive), key=lambda s: s.path):
        for item in store.active_in_slot(slot):
            if item.id not in excluded:
                tagged.setdefault(item.id, CandidateTag.AFFECTED)

    if k > 0:
        ranked = store.retrieve_lexical(
            _query_terms(updates),
            k,
            active_only=True,
            exclude=excluded | set(tagged),
        )
        for item, _ in ranked:
            tagged.setdefault(item.id, CandidateTag.GLOBAL)

    return [
        RevisionCandidate(item_id=item_id, tag=tag)
        for item_id, tag in sorted(tagged.items(), key=lambda pair: (_TAG_ORDER[pair[1]], item_id_key(pair[0])))
    ]


def propose_revisions(
    store: MemoryStore,
    candidates: Sequence[RevisionCandidate],
    updates: Sequence[UpdateCandidate],
    knowledge: Knowledge,
    schema: StateSchema,
) -> List[RevisionProposal]:
    if not updates:
        return []
    earliest = min(u.timestamp for u in updates)
    propositions = [u.value for u in updates]
    proposals = []
    for candidate in candidates:
        item = store.get_item(candidate.item_id)
        if item.status != ItemStatus.ACTIVE or item.timestamp >= earliest:
            continue
        condition = belief_incompatible(item.proposition, propositions, knowledge, schema)
        if condition is None:
            continue
        supporting = tuple(updates[i] for i in condition.supporting)
        triggers = ", ".join(str(u.value) for u in supporting)
        if condition.rule_id:
            rationale = f"rule {condition.rule_id}: {triggers} rules out {item.proposition}"
        else:
            rationale = f"{triggers} conflicts with {item.proposition} in a single slot"
        proposals.append(RevisionProposal(
            old_item=item.id,
            supporting_updates=supporting,
            rationale=rationale,
            confidence=min(u.confidence for u in supporting),
            triggering_rule=condition.rule_id,
            condition=condition,
            tag=candidate.tag,
        ))
    return proposals


def ingest_session(
    store: MemoryStore,
    session: Session,
    knowledge: Knowledge,
    config: Optional[IngestConfig] = None,
    adjudicator: Optional[Adjudicator] = None,
    extractor=None,
) -> IngestReport:
    """Run the whole write pipeline for one session, all-or-nothing"""
    config = config or IngestConfig()
    adjudicator = adjudicator or build_adjudicator(config.adjudicator)
    schema = store.schema

    if session.timestamp is None:
        raise ExtractorFailure(f"session '{session.session_id}' has no timestamp")
    if store.clock is not None and session.timestamp < store.clock:
        raise OutOfOrderSession(
            session.session_id,
            f"session '{session.session_id}' at {session.timestamp.isoformat()} "
            f"precedes store clock {store.clock.isoformat()}",
        )

    candidates = extract_candidates(session, schema, extractor)
    if not candidates:
        store.advance_clock(session.timestamp)
        return IngestReport(session_id=session.session_id, candidates_extracted=0)

    written: List[str] = []
    staled: List[str] = []
    markers: List[SlotRef] = []
    notes: List[str] = []
    applied: List[AppliedDecision] = []
    unknown: Dict[SlotRef, Tuple[str, str]] = {}

    with store.transaction():
        actions = [local_update(store, candidate) for candidate in candidates]
        for action in actions:
            if action.written:
                written.append(action.written)
            if action.kind in (LocalActionKind.REPLACE, LocalActionKind.REFINE, LocalActionKind.RETRACT):
                staled.append(action.target)

        asserted = [c for c in candidates if c.value.polarity == Polarity.ASSERT]
        revision_set = build_revision_candidates(
            store, asserted, schema, config.global_k, exclude=written, transitive=config.transitive_affect,
        )
        proposals = propose_revisions(store, revision_set, asserted, knowledge, schema)
        contexts = [
            AdjudicationContext(
                proposal=proposal,
                old_item=store.get_item(proposal.old_item),
                session_text=session.text,
                schema_version=schema.version,
            )
            for proposal in proposals
        ]
        decisions = adjudicator.decide_batch(contexts)

        for proposal, decision in zip(proposals, decisions):
            old = store.get_item(proposal.old_item)
            if decision.verdict == Verdict.REPLACE and decision.replacement.attribute != old.slot:
                notes.append(f"{old.id}: replacement names another slot; treated as UNKNOWN")
                decision = AdjudicationDecision(verdict=Verdict.UNKNOWN, rationale=decision.rationale)
            applied.append(AppliedDecision(
                old_item=old.id, decision=decision, triggering_rule=proposal.triggering_rule,
            ))
            if decision.verdict == Verdict.KEEP:
                continue

            cause = StaleCause(
                session_id=session.session_id,
                timestamp=session.timestamp,
                rationale=decision.rationale,
                rule_id=proposal.triggering_rule,
            )
            store.mark_stale(old.id, cause)
            staled.append(old.id)

            if decision.verdict == Verdict.REPLACE:
                current = store.active_in_slot(old.slot)
                if any(item.proposition.value == decision.replacement.value for item in current):
                    notes.append(f"{old.id}: replacement {decision.replacement.value} is already current")
                elif current and slot_cardinality(schema, old.slot) == Cardinality.SINGLE:
                    notes.append(f"{old.id}: slot {old.slot.path} already holds {current[0].id}; replacement skipped")
                else:
                    evidence = tuple(span for u in proposal.supporting_updates for span in u.evidence)
                    written.append(store.insert_item(MemoryItem(
                        slot=old.slot,
                        proposition=decision.replacement,
                        provenance=Provenance(
                            session_id=session.session_id,
                            timestamp=session.timestamp,
                            source_kind=SourceKind.INFERRED,
                        ),
                        evidence=evidence,
                    )))
            elif decision.verdict == Verdict.UNKNOWN:
                unknown.setdefault(old.slot, (old.id, decision.rationale))

        # markers go on only once every stale of the session has been applied
        for slot, (old_id, rationale) in unknown.items():
            if store.active_in_slot(slot):
                notes.append(f"{old_id}: slot {slot.path} has a current value from this session; no marker")
            else:
                store.set_unknown_current(slot, session.timestamp, rationale)
                markers.append(slot)

        store.advance_clock(session.timestamp)

    report = IngestReport(
        session_id=session.session_id,
        candidates_extracted=len(candidates),
        local_actions=tuple(actions),
        proposals=tuple(proposals),
        decisions=tuple(applied),
        items_written=tuple(written),
        items_staled=tuple(staled),
        markers_set=tuple(markers),
        notes=tuple(notes),
    )
    metrics.log_ingest(report, adjudicator.name)
    for decision in applied:
        metrics.log_adjudication(decision.old_item, decision.decision.verdict.value, adjudicator.name, decision.triggering_rule)
    if monitoring:
        monitoring.record_ingest(len(written), len(staled), len(markers))
        for decision in applied:
            monitoring.record_verdict(decision.decision.verdict.value, adjudicator.name)
    return report
