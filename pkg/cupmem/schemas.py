"""
Pydantic domain types shared by the engine, the conflict oracle and the simulator.

Every value type is frozen; mutation happens only inside the store, which
hands out fresh copies.
"""
import re
from datetime import datetime
from enum import Enum
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, PrivateAttr, field_validator, model_validator

_WHITESPACE = re.compile(r"\s+")
_SEQUENCE_ID = re.compile(r"^m(\d+)$")


def normalize_value(raw: str) -> str:
    """Lowercase, trim and join internal whitespace with underscores"""
    return _WHITESPACE.sub("_", raw.strip().lower())


def item_id_key(item_id: Optional[str]) -> tuple:
    """Order store ids by sequence number; foreign ids sort after, lexically"""
    match = _SEQUENCE_ID.match(item_id or "")
    if match:
        return (0, int(match.group(1)), "")
    return (1, 0, item_id or "")


class Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


# ---------------------------------------------------------------------------
# State schema
# ---------------------------------------------------------------------------

class Cardinality(str, Enum):
    SINGLE = "SINGLE"
    MULTI = "MULTI"


class SlotRef(Frozen):
    domain: str
    slot: str

    @model_validator(mode="before")
    @classmethod
    def _from_path(cls, data):
        # "domain/slot" shorthand used by data files and the wire protocol
        if isinstance(data, str):
            domain, sep, slot = data.partition("/")
            if not sep or not domain or not slot:
                raise ValueError(f"slot reference must look like 'domain/slot', got {data!r}")
            return {"domain": domain.strip(), "slot": slot.strip()}
        return data

    @property
    def path(self) -> str:
        return f"{self.domain}/{self.slot}"

    def __str__(self) -> str:
        return self.path


class SlotSpec(Frozen):
    name: str
    cardinality: Cardinality

    @field_validator("cardinality", mode="before")
    @classmethod
    def _upper(cls, v):
        return v.upper() if isinstance(v, str) else v


class DomainSpec(Frozen):
    name: str
    slots: Tuple[SlotSpec, ...]


class DependencyEdge(Frozen):
    source: str
    target: str


class StateSchema(Frozen):
    """The two-level state space: domains, their slots and dependency edges"""

    version: str
    domain_specs: Tuple[DomainSpec, ...]
    dependency_edges: Tuple[DependencyEdge, ...] = ()

    _cardinality: Dict[Tuple[str, str], Cardinality] = PrivateAttr(default_factory=dict)

    def model_post_init(self, __context) -> None:
        self._cardinality = {
            (d.name, s.name): s.cardinality for d in self.domain_specs for s in d.slots
        }

    @property
    def domains(self) -> Tuple[str, ...]:
        return tuple(d.name for d in self.domain_specs)

    def slots_of(self, domain: str) -> Tuple[SlotRef, ...]:
        for spec in self.domain_specs:
            if spec.name == domain:
                return tuple(SlotRef(domain=domain, slot=s.name) for s in spec.slots)
        return ()

    def all_slots(self) -> Tuple[SlotRef, ...]:
        return tuple(ref for d in self.domain_specs for ref in self.slots_of(d.name))

    def has_domain(self, domain: str) -> bool:
        return any(d.name == domain for d in self.domain_specs)

    def has_slot(self, slot: SlotRef) -> bool:
        return (slot.domain, slot.slot) in self._cardinality

    def cardinality_of(self, slot: SlotRef) -> Optional[Cardinality]:
        return self._cardinality.get((slot.domain, slot.slot))


class RuleKind(str, Enum):
    INCOMPAT_SAME_SLOT = "INCOMPAT_SAME_SLOT"
    DEPENDENCY = "DEPENDENCY"


class KnowledgeRule(Frozen):
    """
    Declarative world-knowledge rule.

    INCOMPAT_SAME_SLOT rules name one slot and a pair of value patterns that
    cannot hold together. DEPENDENCY rules say a source value makes a target
    value untenable; implied_value, when set, is the value the target takes.
    """

    rule_id: str
    kind: RuleKind
    slot: Optional[SlotRef] = None
    value_predicate_pair: Optional[Tuple[str, str]] = None
    source_slot: Optional[SlotRef] = None
    source_pattern: Optional[str] = None
    target_slot: Optional[SlotRef] = None
    target_pattern: Optional[str] = None
    implied_value: Optional[str] = None

    @field_validator("implied_value")
    @classmethod
    def _normalize_implied(cls, v):
        return normalize_value(v) if v is not None else None

    @model_validator(mode="after")
    def _fields_for_kind(self):
        if self.kind == RuleKind.INCOMPAT_SAME_SLOT:
            if self.slot is None or self.value_predicate_pair is None:
                raise ValueError(f"rule {self.rule_id}: INCOMPAT_SAME_SLOT needs slot and value_predicate_pair")
            if self.implied_value is not None:
                raise ValueError(f"rule {self.rule_id}: implied_value only applies to DEPENDENCY rules")
        else:
            missing = [
                name for name in ("source_slot", "source_pattern", "target_slot", "target_pattern")
                if getattr(self, name) is None
            ]
            if missing:
                raise ValueError(f"rule {self.rule_id}: DEPENDENCY rule missing {', '.join(missing)}")
        return self


class Polarity(str, Enum):
    ASSERT = "ASSERT"
    DENY = "DENY"


class Proposition(Frozen):
    attribute: SlotRef
    value: str
    polarity: Polarity = Polarity.ASSERT

    @field_validator("value")
    @classmethod
    def _normalized(cls, v: str) -> str:
        value = normalize_value(v)
        if not value:
            raise ValueError("proposition value must be non-empty")
        return value

    def same_claim(self, other: "Proposition") -> bool:
        """Equal attribute and value, ignoring polarity"""
        return self.attribute == other.attribute and self.value == other.value

    def __str__(self) -> str:
        prefix = "" if self.polarity == Polarity.ASSERT else "not "
        return f"{prefix}{self.value}@{self.attribute.path}"


# ---------------------------------------------------------------------------
# Store
# ---------------------------------------------------------------------------

class ItemStatus(str, Enum):
    ACTIVE = "ACTIVE"
    STALE = "STALE"


class SourceKind(str, Enum):
    DIRECT = "DIRECT"
    INFERRED = "INFERRED"


class Provenance(Frozen):
    session_id: str
    timestamp: datetime
    source_kind: SourceKind = SourceKind.DIRECT


class EvidenceSpan(Frozen):
    session_id: str
    turn_index: int = Field(ge=0)
    text: str
    tagged_slot: Optional[SlotRef] = None


class StaleCause(Frozen):
    session_id: str
    timestamp: datetime
    rationale: str
    rule_id: Optional[str] = None


class MemoryItem(Frozen):
    id: Optional[str] = None
    slot: SlotRef
    proposition: Proposition
    status: ItemStatus = ItemStatus.ACTIVE
    provenance: Provenance
    evidence: Tuple[EvidenceSpan, ...] = ()
    staled_by: Optional[StaleCause] = None

    @model_validator(mode="after")
    def _consistent(self):
        if self.proposition.attribute != self.slot:
            raise ValueError("proposition attribute must equal the item slot")
        if self.status == ItemStatus.ACTIVE and self.staled_by is not None:
            raise ValueError("ACTIVE items cannot carry staled_by")
        if self.status == ItemStatus.STALE:
            if self.staled_by is None:
                raise ValueError("STALE items must carry staled_by")
            if self.staled_by.timestamp <= self.provenance.timestamp:
                raise ValueError("staled_by must be strictly later than provenance")
        return self

    @property
    def timestamp(self) -> datetime:
        return self.provenance.timestamp

    @property
    def is_active(self) -> bool:
        return self.status == ItemStatus.ACTIVE


class MarkerStatus(str, Enum):
    UNKNOWN_CURRENT = "UNKNOWN_CURRENT"


class SlotMarker(Frozen):
    slot: SlotRef
    status: MarkerStatus = MarkerStatus.UNKNOWN_CURRENT
    since: datetime
    cause: str


class StoreSnapshot(Frozen):
    schema_version: str
    items: Tuple[MemoryItem, ...] = ()
    markers: Tuple[SlotMarker, ...] = ()
    clock: Optional[datetime] = None


# ---------------------------------------------------------------------------
# Dialogue sessions
# ---------------------------------------------------------------------------

class TaggedSpan(Frozen):
    """Structured annotation on a turn: which slot it speaks to and how"""

    slot: SlotRef
    value: str
    polarity: Polarity = Polarity.ASSERT
    historical: bool = False
    wrapper: bool = False
    correction: bool = False
    origin: SourceKind = SourceKind.DIRECT
    confidence: float = Field(default=1.0, ge=0.0, le=1.0)

    @field_validator("value")
    @classmethod
    def _normalized(cls, v: str) -> str:
        value = normalize_value(v)
        if not value:
            raise ValueError("span value must be non-empty")
        return value

    def proposition(self) -> Proposition:
        return Proposition(attribute=self.slot, value=self.value, polarity=self.polarity)


class Turn(Frozen):
    speaker: str
    text: str
    spans: Tuple[TaggedSpan, ...] = ()


class SessionKind(str, Enum):
    OLD_EVIDENCE = "OLD_EVIDENCE"
    NEW_EVIDENCE = "NEW_EVIDENCE"
    DISTRACTOR = "DISTRACTOR"
    NEGATION = "NEGATION"


class Session(Frozen):
    session_id: str
    timestamp: Optional[datetime] = None
    turns: Tuple[Turn, ...] = ()
    kind: SessionKind = SessionKind.DISTRACTOR

    @property
    def text(self) -> str:
        return "\n".join(f"{t.speaker}: {t.text}" for t in self.turns)

    def tagged_spans(self) -> List[Tuple[int, Turn, TaggedSpan]]:
        return [(i, turn, span) for i, turn in enumerate(self.turns) for span in turn.spans]


# ---------------------------------------------------------------------------
# Write pipeline
# ---------------------------------------------------------------------------

class UpdateCandidate(Frozen):
    slot: SlotRef
    value: Proposition
    origin: SourceKind = SourceKind.DIRECT
    confidence: float = Field(ge=0.0, le=1.0)
    timestamp: datetime
    evidence: Tuple[EvidenceSpan, ...] = Field(min_length=1)

    @model_validator(mode="after")
    def _slot_matches(self):
        if self.value.attribute != self.slot:
            raise ValueError("candidate value must be a proposition on the candidate slot")
        return self

    @property
    def session_id(self) -> str:
        return self.evidence[0].session_id


class LocalActionKind(str, Enum):
    ADD = "ADD"
    REFINE = "REFINE"
    REPLACE = "REPLACE"
    NO_OP = "NO_OP"
    RETRACT = "RETRACT"


class LocalAction(Frozen):
    kind: LocalActionKind
    target: Optional[str] = None
    written: Optional[str] = None
    value: Optional[Proposition] = None

    @model_validator(mode="after")
    def _target_required(self):
        needs_target = {LocalActionKind.REFINE, LocalActionKind.REPLACE, LocalActionKind.RETRACT}
        if self.kind in needs_target and self.target is None:
            raise ValueError(f"{self.kind.value} requires a target item")
        return self


class CandidateTag(str, Enum):
    DIRECT = "DIRECT"
    AFFECTED = "AFFECTED"
    GLOBAL = "GLOBAL"


class RevisionCandidate(Frozen):
    item_id: str
    tag: CandidateTag


class ConditionKind(str, Enum):
    SINGLE_SLOT = "SINGLE_SLOT"
    INCOMPAT_SAME_SLOT = "INCOMPAT_SAME_SLOT"
    DEPENDENCY = "DEPENDENCY"


class ConflictCondition(Frozen):
    """Why an old belief is incompatible with a set of updates"""

    kind: ConditionKind
    rule_id: Optional[str] = None
    supporting: Tuple[int, ...] = ()
    implied_value: Optional[str] = None


class RevisionProposal(Frozen):
    old_item: str
    supporting_updates: Tuple[UpdateCandidate, ...] = ()
    rationale: str
    confidence: float = Field(ge=0.0, le=1.0)
    triggering_rule: Optional[str] = None
    condition: Optional[ConflictCondition] = None
    tag: Optional[CandidateTag] = None


class Verdict(str, Enum):
    KEEP = "KEEP"
    STALE = "STALE"
    REPLACE = "REPLACE"
    UNKNOWN = "UNKNOWN"


class AdjudicationDecision(Frozen):
    verdict: Verdict
    replacement: Optional[Proposition] = None
    rationale: str

    @model_validator(mode="after")
    def _replacement_iff_replace(self):
        if (self.verdict == Verdict.REPLACE) != (self.replacement is not None):
            raise ValueError("replacement is required for REPLACE and forbidden otherwise")
        return self


class AdjudicationContext(Frozen):
    proposal: RevisionProposal
    old_item: MemoryItem
    session_text: Optional[str] = None
    schema_version: str

    @model_validator(mode="after")
    def _same_item(self):
        if self.old_item.id != self.proposal.old_item:
            raise ValueError("context old_item does not match the proposal")
        return self


class AppliedDecision(Frozen):
    old_item: str
    decision: AdjudicationDecision
    triggering_rule: Optional[str] = None


class IngestReport(Frozen):
    session_id: str
    candidates_extracted: int = Field(ge=0)
    local_actions: Tuple[LocalAction, ...] = ()
    proposals: Tuple[RevisionProposal, ...] = ()
    decisions: Tuple[AppliedDecision, ...] = ()
    items_written: Tuple[str, ...] = ()
    items_staled: Tuple[str, ...] = ()
    markers_set: Tuple[SlotRef, ...] = ()
    notes: Tuple[str, ...] = ()


# ---------------------------------------------------------------------------
# Readout
# ---------------------------------------------------------------------------

class Dimension(str, Enum):
    SR = "SR"
    PR = "PR"
    IPA = "IPA"


class Probe(Frozen):
    probe_id: str
    dimension: Dimension
    text: str
    intent: str = ""
    action: str = ""
    premises: Tuple[Proposition, ...] = ()
    basis_slots: Tuple[SlotRef, ...] = ()


class QueryAnalysis(Frozen):
    intent: str
    presupposed: Tuple[Proposition, ...] = ()
    basis_slots: Tuple[SlotRef, ...] = ()
    action: str = ""
    dimension_hint: Optional[Dimension] = None


class PremiseStatus(str, Enum):
    SUPPORTED = "SUPPORTED"
    OUTDATED = "OUTDATED"
    UNRESOLVED = "UNRESOLVED"


class PremiseVerdict(Frozen):
    premise: Proposition
    verdict: PremiseStatus
    witness: Optional[str] = None


class CurrentBasis(Frozen):
    active_grounding: Tuple[MemoryItem, ...] = ()
    historical_context: Tuple[MemoryItem, ...] = ()
    blocked_premises: Tuple[PremiseVerdict, ...] = ()
    unknown_slots: Tuple[SlotRef, ...] = ()

    @model_validator(mode="after")
    def _no_stale_grounding(self):
        if any(item.status != ItemStatus.ACTIVE for item in self.active_grounding):
            raise ValueError("active_grounding may only hold ACTIVE items")
        return self


class AnswerState(str, Enum):
    STILL_VALID = "STILL_VALID"
    NO_LONGER_VALID = "NO_LONGER_VALID"
    UNRESOLVED = "UNRESOLVED"
    PREMISE_REJECTED = "PREMISE_REJECTED"
    PREMISE_FOLLOWED = "PREMISE_FOLLOWED"


class SlotChoice(Frozen):
    slot: SlotRef
    values: Tuple[str, ...] = ()
    unknown: bool = False


class GroundedAnswer(Frozen):
    probe_id: str
    dimension: Dimension
    verdict_summary: Tuple[PremiseVerdict, ...] = ()
    basis: CurrentBasis = CurrentBasis()
    answer_state: Optional[AnswerState] = None
    choices: Tuple[SlotChoice, ...] = ()


# ---------------------------------------------------------------------------
# Conflict oracle
# ---------------------------------------------------------------------------

class Observation(Frozen):
    session_id: str
    timestamp: Optional[datetime] = None
    assertions: Tuple[Proposition, ...] = ()
    mentioned_slots: Tuple[SlotRef, ...] = ()
    corrected_slots: Tuple[SlotRef, ...] = ()
    explicit_negation_of: Tuple[Proposition, ...] = ()


class WitnessKind(str, Enum):
    NONE = "NONE"
    TYPE_I = "TYPE_I"
    TYPE_II = "TYPE_II"


class ConflictWitness(Frozen):
    kind: WitnessKind
    old_index: int
    new_index: int
    old_session: str
    new_session: str
    belief: Optional[Proposition] = None
    target_slot: Optional[SlotRef] = None
    upstream_slot: Optional[SlotRef] = None
    rule_id: Optional[str] = None


# ---------------------------------------------------------------------------
# Simulator
# ---------------------------------------------------------------------------

class ConflictType(str, Enum):
    TYPE_I = "TYPE_I"
    TYPE_II = "TYPE_II"


class GapSpec(Frozen):
    min_seconds: int = Field(ge=0)
    max_seconds: int = Field(ge=0)


class ScenarioProbes(Frozen):
    sr: Probe
    pr: Probe
    ipa: Probe

    def for_dimension(self, dimension: Dimension) -> Probe:
        return {Dimension.SR: self.sr, Dimension.PR: self.pr, Dimension.IPA: self.ipa}[dimension]


class GroundTruth(Frozen):
    old_invalidated: bool = True
    sr_expected: AnswerState = AnswerState.NO_LONGER_VALID
    pr_expected: AnswerState = AnswerState.PREMISE_REJECTED
    ipa_forbidden: Tuple[Proposition, ...] = ()
    ipa_expected: Optional[Proposition] = None


class Scenario(Frozen):
    id: str
    seed: int
    conflict_type: ConflictType
    target_slot: SlotRef
    old: Proposition
    new: Proposition
    upstream_slot: Optional[SlotRef] = None
    rule_id: Optional[str] = None
    session_o: Session
    session_n: Session
    m_o: Observation
    m_n: Observation
    gap: GapSpec
    probes: ScenarioProbes
    ground_truth: GroundTruth


class Haystack(Frozen):
    scenario_id: str
    sessions: Tuple[Session, ...]
    index_o: int = Field(ge=0)
    index_n: int = Field(ge=0)
    query_time: Optional[datetime] = None

    @property
    def session_o(self) -> Session:
        return self.sessions[self.index_o]

    @property
    def session_n(self) -> Session:
        return self.sessions[self.index_n]


class CellRate(Frozen):
    conflict_type: ConflictType
    dimension: Dimension
    passed: int = Field(ge=0)
    total: int = Field(ge=0)
    rate: Optional[float] = Field(default=None, ge=0.0, le=1.0)


class DiagnosticRow(Frozen):
    """Retrieval diagnostics for one probing dimension. None marks an undefined rate."""

    scope: str
    scenarios: int = Field(ge=0)
    new_evidence_retrieved: int = Field(ge=0)
    old_and_new_both_retrieved: int = Field(ge=0)
    old_top1: int = Field(ge=0)
    new_top1: int = Field(ge=0)
    failure_despite_new_evidence: int = Field(ge=0)
    new_evidence_retrieved_rate: Optional[float] = None
    old_and_new_both_retrieved_rate: Optional[float] = None
    old_top1_rate: Optional[float] = None
    new_top1_rate: Optional[float] = None
    failure_despite_new_evidence_rate: Optional[float] = None


class EvalMetrics(Frozen):
    system: str
    scenarios: int = Field(ge=0)
    faulted: int = Field(ge=0)
    cells: Tuple[CellRate, ...] = ()
    diagnostics: Tuple[DiagnosticRow, ...] = ()

    def rate(self, conflict_type: ConflictType, dimension: Dimension) -> Optional[float]:
        for cell in self.cells:
            if cell.conflict_type == conflict_type and cell.dimension == dimension:
                return cell.rate
        return None


# ---------------------------------------------------------------------------
# Adjudicator wire protocol
# ---------------------------------------------------------------------------

class WireOldItem(BaseModel):
    slot: SlotRef
    value: str
    timestamp: datetime


class WireUpdate(BaseModel):
    slot: SlotRef
    value: str
    timestamp: datetime
    origin: SourceKind = SourceKind.DIRECT


class AdjudicateRequest(BaseModel):
    schema_version: str
    old_item: WireOldItem
    updates: List[WireUpdate] = []
    session_text: Optional[str] = None
    rationale_hint: Optional[str] = None


class WireReplacement(BaseModel):
    value: str


class WireVerdict(BaseModel):
    """Judge response body; an unknown verdict string fails validation"""

    verdict: Verdict
    replacement: Optional[WireReplacement] = None
    rationale: str = ""
