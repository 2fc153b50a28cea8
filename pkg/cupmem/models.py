from datetime import datetime, timezone
from typing import Optional

from sqlalchemy import JSON, Column, DateTime, Index, Integer, String, Text
from sqlalchemy.types import TypeDecorator

from cupmem.database import Base
from cupmem.schemas import (
    EvidenceSpan,
    ItemStatus,
    MemoryItem,
    Polarity,
    Proposition,
    Provenance,
    SlotMarker,
    SlotRef,
    SourceKind,
    StaleCause,
)


class UTCDateTime(TypeDecorator):
    """Stores aware datetimes as naive UTC and hands them back aware"""

    impl = DateTime
    cache_ok = True

    def process_bind_param(self, value: Optional[datetime], dialect):
        if value is None:
            return None
        if value.tzinfo is None:
            raise ValueError("naive datetimes are not accepted; attach a timezone")
        return value.astimezone(timezone.utc).replace(tzinfo=None)

    def process_result_value(self, value: Optional[datetime], dialect):
        if value is None:
            return None
        return value.replace(tzinfo=timezone.utc)


class MemoryItemRow(Base):
    __tablename__ = "memory_items"

    seq = Column(Integer, primary_key=True)
    id = Column(String(32), unique=True, nullable=False, index=True)
    domain = Column(String(128), nullable=False)
    slot = Column(String(128), nullable=False)
    value = Column(Text, nullable=False)
    polarity = Column(String(16), nullable=False, default=Polarity.ASSERT.value)
    status = Column(String(16), nullable=False, index=True)
    session_id = Column(String(255), nullable=False)
    timestamp = Column(UTCDateTime, nullable=False)
    source_kind = Column(String(16), nullable=False)
    evidence = Column(JSON, nullable=False, default=list)
    staled_session_id = Column(String(255))
    staled_at = Column(UTCDateTime)
    staled_rationale = Column(Text)
    staled_rule_id = Column(String(128))

    __table_args__ = (Index("ix_memory_items_slot", "domain", "slot"),)

    def to_domain(self) -> MemoryItem:
        slot = SlotRef(domain=self.domain, slot=self.slot)
        staled_by = None
        if self.status == ItemStatus.STALE.value:
            staled_by = StaleCause(
                session_id=self.staled_session_id,
                timestamp=self.staled_at,
                rationale=self.staled_rationale,
                rule_id=self.staled_rule_id,
            )
        return MemoryItem(
            id=self.id,
            slot=slot,
            proposition=Proposition(attribute=slot, value=self.value, polarity=self.polarity),
            status=self.status,
            provenance=Provenance(
                session_id=self.session_id,
                timestamp=self.timestamp,
                source_kind=SourceKind(self.source_kind),
            ),
            evidence=tuple(EvidenceSpan.model_validate(e) for e in self.evidence or ()),
            staled_by=staled_by,
        )

    @classmethod
    def from_domain(cls, item: MemoryItem, seq: int) -> "MemoryItemRow":
        cause = item.staled_by
        return cls(
            seq=seq,
            id=item.id,
            domain=item.slot.domain,
            slot=item.slot.slot,
            value=item.proposition.value,
            polarity=item.proposition.polarity.value,
            status=item.status.value,
            session_id=item.provenance.session_id,
            timestamp=item.provenance.timestamp,
            source_kind=item.provenance.source_kind.value,
            evidence=[e.model_dump(mode="json") for e in item.evidence],
            staled_session_id=cause.session_id if cause else None,
            staled_at=cause.timestamp if cause else None,
            staled_rationale=cause.rationale if cause else None,
            staled_rule_id=cause.rule_id if cause else None,
        )


class SlotMarkerRow(Base):
    __tablename__ = "slot_markers"

    domain = Column(String(128), primary_key=True)
    slot = Column(String(128), primary_key=True)
    status = Column(String(32), nullable=False)
    since = Column(UTCDateTime, nullable=False)
    cause = Column(Text, nullable=False)

    def to_domain(self) -> SlotMarker:
        return SlotMarker(
            slot=SlotRef(domain=self.domain, slot=self.slot),
            status=self.status,
            since=self.since,
            cause=self.cause,
        )
