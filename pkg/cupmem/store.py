"""
The typed temporal memory store.

Items live in SQLAlchemy tables; the store keeps a write-through mirror of
them for reads. All mutations go through one serialized writer and are
grouped with `transaction()`, which commits or rolls back as a unit.
Nothing is ever deleted: retired items are archived as STALE.
"""
import hashlib
import io
import json
import logging
import os
import re
import threading
from contextlib import contextmanager
from datetime import datetime
from pathlib import Path
from typing import BinaryIO, Dict, Iterable, Iterator, List, Optional, Tuple, Union

from pydantic import ValidationError

from cupmem.database import DEFAULT_DATABASE_URL, make_engine, make_session_factory
from cupmem.errors import (
    ActiveItemPresent,
    AlreadyStale,
    InvalidItemState,
    SchemaVersionMismatch,
    SingleSlotOccupied,
    StoreIoError,
    TemporalCausalityViolation,
    UnknownDomain,
    UnknownItem,
)
from cupmem.lexical import rank_by_overlap
from cupmem.middleware import StoreOperationTimer
from cupmem.models import MemoryItemRow, SlotMarkerRow
from cupmem.schemas import (
    Cardinality,
    ItemStatus,
    MarkerStatus,
    MemoryItem,
    SlotMarker,
    SlotRef,
    StaleCause,
    StateSchema,
    StoreSnapshot,
    item_id_key,
)
from cupmem.state_schema import require_slot, slot_cardinality

logger = logging.getLogger(__name__)

SNAPSHOT_FORMAT = 1
_SEQ_ID = re.compile(r"^m(\d+)$")


def item_sort_key(item: MemoryItem) -> tuple:
    """ACTIVE first, then newest first, then id ascending"""
    return (item.status != ItemStatus.ACTIVE, -item.timestamp.timestamp(), item_id_key(item.id))


def _encode(record: dict) -> bytes:
    return (json.dumps(record, sort_keys=True, separators=(",", ":"), ensure_ascii=False) + "\n").encode("utf-8")


class MemoryStore:
    """Single-writer, multi-reader memory store bound to one schema"""

    def __init__(self, schema: StateSchema, database_url: str = DEFAULT_DATABASE_URL):
        self.schema = schema
        self._engine = make_engine(database_url)
        self._session = make_session_factory(self._engine)()
        self._lock = threading.RLock()
        self._depth = 0
        self._items: Dict[str, MemoryItem] = {}
        self._markers: Dict[Tuple[str, str], SlotMarker] = {}
        self._clock: Optional[datetime] = None
        self._next_seq = 1
        self._reload()

    # ------------------------------------------------------------------
    # lifecycle
    # ------------------------------------------------------------------

    def close(self) -> None:
        with self._lock:
            self._session.close()
            self._engine.dispose()

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.close()

    @property
    def clock(self) -> Optional[datetime]:
        return self._clock

    def _reload(self) -> None:
        """Rebuild the mirror and counters from the database"""
        rows = self._session.query(MemoryItemRow).order_by(MemoryItemRow.seq).all()
        self._items = {row.id: row.to_domain() for row in rows}
        self._markers = {
            (row.domain, row.slot): row.to_domain()
            for row in self._session.query(SlotMarkerRow).all()
        }
        self._next_seq = (max(row.seq for row in rows) + 1) if rows else 1
        instants = [i.timestamp for i in self._items.values()]
        instants += [i.staled_by.timestamp for i in self._items.values() if i.staled_by]
        instants += [m.since for m in self._markers.values()]
        self._clock = max(instants) if instants else None

    @contextmanager
    def transaction(self) -> Iterator["MemoryStore"]:
        """All-or-nothing group of mutations. Nested calls join the outer transaction."""
        with self._lock:
            if self._depth:
                self._depth += 1
                try:
                    yield self
                finally:
                    self._depth -= 1
                return

            saved_clock = self._clock
            self._depth = 1
            try:
                yield self
                self._session.commit()
            except BaseException:
                self._session.rollback()
                self._reload()
                self._clock = saved_clock
                raise
            finally:
                self._depth = 0

    def _advance_clock(self, instant: datetime) -> None:
        if self._clock is None or instant > self._clock:
            self._clock = instant

    def advance_clock(self, instant: datetime) -> None:
        """Record that a session at `instant` was accepted, even if it wrote nothing"""
        with self._lock:
            self._advance_clock(instant)

    # ------------------------------------------------------------------
    # mutations
    # ------------------------------------------------------------------

    def insert_item(self, item: MemoryItem) -> str:
        """Store an ACTIVE item and return its id. Clears any unknown-current marker on the slot."""
        cardinality = slot_cardinality(self.schema, item.slot)
        if item.status != ItemStatus.ACTIVE:
            raise InvalidItemState("only ACTIVE items can be inserted")

        with self.transaction(), StoreOperationTimer("insert", "memory_items"):
            if cardinality == Cardinality.SINGLE:
                occupant = next(iter(self.active_in_slot(item.slot)), None)
                if occupant is not None:
                    raise SingleSlotOccupied(
                        f"slot '{item.slot.path}' already holds ACTIVE item {occupant.id} "
                        f"({occupant.proposition.value})"
                    )
            seq = self._next_seq
            item_id = item.id or f"m{seq:06d}"
            if item_id in self._items:
                raise InvalidItemState(f"item id '{item_id}' already exists")
            stored = item.model_copy(update={"id": item_id})

            self._session.add(MemoryItemRow.from_domain(stored, seq))
            self._next_seq = seq + 1
            self._items[item_id] = stored

            marker_key = (item.slot.domain, item.slot.slot)
            if marker_key in self._markers:
                self._session.query(SlotMarkerRow).filter(
                    SlotMarkerRow.domain == item.slot.domain,
                    SlotMarkerRow.slot == item.slot.slot,
                ).delete()
                del self._markers[marker_key]
                logger.debug(f"Cleared unknown-current marker on {item.slot.path}")

            self._advance_clock(stored.timestamp)
            self._session.flush()
        return item_id

    def mark_stale(self, item_id: str, cause: StaleCause) -> MemoryItem:
        with self.transaction(), StoreOperationTimer("mark_stale", "memory_items", item_id):
            current = self._items.get(item_id)
            if current is None:
                raise UnknownItem(f"unknown item '{item_id}'")
            if current.status == ItemStatus.STALE:
                raise AlreadyStale(f"item '{item_id}' is already STALE")
            if cause.timestamp <= current.timestamp:
                raise TemporalCausalityViolation(
                    f"cannot stale '{item_id}' (t={current.timestamp.isoformat()}) with evidence "
                    f"from {cause.timestamp.isoformat()}: cause must be strictly later"
                )

            row = self._session.query(MemoryItemRow).filter(MemoryItemRow.id == item_id).one()
            row.status = ItemStatus.STALE.value
            row.staled_session_id = cause.session_id
            row.staled_at = cause.timestamp
            row.staled_rationale = cause.rationale
            row.staled_rule_id = cause.rule_id

            updated = current.model_copy(update={"status": ItemStatus.STALE, "staled_by": cause})
            self._items[item_id] = updated
            self._advance_clock(cause.timestamp)
            self._session.flush()
        return updated

    def set_unknown_current(self, slot: SlotRef, since: datetime, cause: str) -> SlotMarker:
        require_slot(self.schema, slot)
        with self.transaction(), StoreOperationTimer("set_marker", "slot_markers"):
            active = self.active_in_slot(slot)
            if active:
                raise ActiveItemPresent(
                    f"slot '{slot.path}' still holds ACTIVE item {active[0].id}; stale it first"
                )
            marker = SlotMarker(slot=slot, status=MarkerStatus.UNKNOWN_CURRENT, since=since, cause=cause)
            self._session.merge(SlotMarkerRow(
                domain=slot.domain,
                slot=slot.slot,
                status=marker.status.value,
                since=since,
                cause=cause,
            ))
            self._markers[(slot.domain, slot.slot)] = marker
            self._advance_clock(since)
            self._session.flush()
        return marker

    # ------------------------------------------------------------------
    # reads
    # ------------------------------------------------------------------

    def get_item(self, item_id: str) -> MemoryItem:
        item = self._items.get(item_id)
        if item is None:
            raise UnknownItem(f"unknown item '{item_id}'")
        return item

    def items(self, status: Optional[ItemStatus] = None) -> List[MemoryItem]:
        """All items in id order, optionally filtered by status"""
        with self._lock:
            chosen = [i for i in self._items.values() if status is None or i.status == status]
        return sorted(chosen, key=lambda i: item_id_key(i.id))

    def active_in_slot(self, slot: SlotRef) -> List[MemoryItem]:
        return [i for i in self.retrieve_same_slot(slot) if i.is_active]

    def retrieve_same_slot(self, slot: SlotRef) -> List[MemoryItem]:
        require_slot(self.schema, slot)
        with self._lock:
            found = [i for i in self._items.values() if i.slot == slot]
        return sorted(found, key=item_sort_key)

    def retrieve_same_domain(self, domain: str) -> List[MemoryItem]:
        if not self.schema.has_domain(domain):
            raise UnknownDomain(f"unknown domain '{domain}'")
        with self._lock:
            found = [i for i in self._items.values() if i.slot.domain == domain]
        return sorted(found, key=item_sort_key)

    def retrieve_lexical(
        self,
        query_terms: Iterable[str],
        k: int,
        active_only: bool = False,
        exclude: Iterable[str] = (),
    ) -> List[Tuple[MemoryItem, float]]:
        """Top-k by token overlap with (score desc, timestamp desc, id asc) ordering"""
        if k < 0:
            raise ValueError("k must be >= 0")
        skip = set(exclude)
        with self._lock:
            pool = [
                i for i in self._items.values()
                if i.id not in skip and (not active_only or i.status == ItemStatus.ACTIVE)
            ]
        return rank_by_overlap(pool, query_terms, k, newest_first=True)

    def markers(self) -> List[SlotMarker]:
        with self._lock:
            return [self._markers[key] for key in sorted(self._markers)]

    def marker_for(self, slot: SlotRef) -> Optional[SlotMarker]:
        return self._markers.get((slot.domain, slot.slot))

    # ------------------------------------------------------------------
    # snapshots and persistence
    # ------------------------------------------------------------------

    def snapshot(self) -> StoreSnapshot:
        with self._lock:
            return StoreSnapshot(
                schema_version=self.schema.version,
                items=tuple(self.items()),
                markers=tuple(self.markers()),
                clock=self._clock,
            )

    def dumps(self) -> bytes:
        return dump_snapshot(self.snapshot())

    def digest(self) -> str:
        return hashlib.sha256(self.dumps()).hexdigest()

    def persist(self, sink: Union[str, Path, BinaryIO]) -> None:
        payload = self.dumps()
        if hasattr(sink, "write"):
            try:
                sink.write(payload)
            except OSError as e:
                raise StoreIoError(f"cannot write snapshot: {e.strerror or e}") from e
            return
        path = Path(sink)
        tmp = path.with_name(path.name + ".tmp")
        try:
            tmp.write_bytes(payload)
            os.replace(tmp, path)
        except OSError as e:
            raise StoreIoError(f"cannot write snapshot {path}: {e.strerror or e}") from e
        logger.debug(f"Persisted {len(self._items)} items to {path}")

    @classmethod
    def load(
        cls,
        source: Union[str, Path, bytes, BinaryIO],
        schema: StateSchema,
        database_url: str = DEFAULT_DATABASE_URL,
    ) -> "MemoryStore":
        if isinstance(source, bytes):
            data = source
        elif hasattr(source, "read"):
            data = source.read()
        else:
            try:
                data = Path(source).read_bytes()
            except OSError as e:
                raise StoreIoError(f"cannot read snapshot {source}: {e.strerror or e}") from e
        return cls.from_snapshot(parse_snapshot(data, schema), schema, database_url)

    @classmethod
    def from_snapshot(
        cls,
        snapshot: StoreSnapshot,
        schema: StateSchema,
        database_url: str = DEFAULT_DATABASE_URL,
    ) -> "MemoryStore":
        if snapshot.schema_version != schema.version:
            raise SchemaVersionMismatch(
                f"snapshot schema version '{snapshot.schema_version}' does not match '{schema.version}'"
            )
        _check_snapshot(snapshot, schema)
        store = cls(schema, database_url)
        with store.transaction():
            for position, item in enumerate(snapshot.items, start=1):
                match = _SEQ_ID.match(item.id or "")
                seq = int(match.group(1)) if match else store._next_seq + position
                store._session.add(MemoryItemRow.from_domain(item, seq))
                store._items[item.id] = item
                store._next_seq = max(store._next_seq, seq + 1)
            for marker in snapshot.markers:
                store._session.add(SlotMarkerRow(
                    domain=marker.slot.domain,
                    slot=marker.slot.slot,
                    status=marker.status.value,
                    since=marker.since,
                    cause=marker.cause,
                ))
                store._markers[(marker.slot.domain, marker.slot.slot)] = marker
            store._session.flush()
        store._clock = snapshot.clock
        return store


def _check_snapshot(snapshot: StoreSnapshot, schema: StateSchema) -> None:
    """A snapshot must satisfy the same invariants the writer enforces"""
    seen = set()
    occupied = set()
    for item in snapshot.items:
        if not schema.has_slot(item.slot):
            raise StoreIoError(f"snapshot item {item.id} names undeclared slot '{item.slot.path}'")
        if not item.id or item.id in seen:
            raise StoreIoError(f"snapshot item id {item.id!r} is missing or repeated")
        seen.add(item.id)
        if item.is_active and slot_cardinality(schema, item.slot) == Cardinality.SINGLE:
            if item.slot in occupied:
                raise StoreIoError(f"snapshot holds two ACTIVE items in SINGLE slot '{item.slot.path}'")
            occupied.add(item.slot)
    active_slots = {item.slot for item in snapshot.items if item.is_active}
    for marker in snapshot.markers:
        if not schema.has_slot(marker.slot):
            raise StoreIoError(f"snapshot marker names undeclared slot '{marker.slot.path}'")
        if marker.slot in active_slots:
            raise StoreIoError(f"snapshot marker on '{marker.slot.path}' shadows an ACTIVE item")


def dump_snapshot(snapshot: StoreSnapshot) -> bytes:
    """Newline-delimited records: one header, then items in id order, then markers"""
    out = io.BytesIO()
    out.write(_encode({
        "kind": "header",
        "format": SNAPSHOT_FORMAT,
        "schema_version": snapshot.schema_version,
        "clock": snapshot.clock.isoformat().replace("+00:00", "Z") if snapshot.clock else None,
        "items": len(snapshot.items),
        "markers": len(snapshot.markers),
    }))
    for item in sorted(snapshot.items, key=lambda i: item_id_key(i.id)):
        out.write(_encode({"kind": "item", **item.model_dump(mode="json")}))
    for marker in snapshot.markers:
        out.write(_encode({"kind": "marker", **marker.model_dump(mode="json")}))
    return out.getvalue()


def parse_snapshot(data: bytes, schema: StateSchema) -> StoreSnapshot:
    header: Optional[dict] = None
    items: List[MemoryItem] = []
    markers: List[SlotMarker] = []
    offset = 0
    parts = data.split(b"\n")
    if parts[-1] != b"":
        # the last record has no terminating newline
        raise StoreIoError("truncated snapshot record", len(data) - len(parts[-1]))
    for raw in parts[:-1]:
        start = offset
        offset += len(raw) + 1
        if not raw.strip():
            continue
        try:
            record = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise StoreIoError(f"malformed snapshot record: {e}", start) from e
        if not isinstance(record, dict):
            raise StoreIoError("snapshot record is not an object", start)
        kind = record.pop("kind", None)
        if header is None:
            if kind != "header":
                raise StoreIoError("snapshot must begin with a header record", start)
            header = record
            continue
        try:
            if kind == "item":
                items.append(MemoryItem.model_validate(record))
            elif kind == "marker":
                markers.append(SlotMarker.model_validate(record))
            else:
                raise StoreIoError(f"unknown record kind {kind!r}", start)
        except ValidationError as e:
            raise StoreIoError(f"invalid {kind} record: {e.errors()[0].get('msg')}", start) from e

    if header is None:
        raise StoreIoError("empty snapshot", 0)
    if header.get("items") != len(items) or header.get("markers") != len(markers):
        raise StoreIoError(
            f"truncated snapshot: header promises {header.get('items')} items and "
            f"{header.get('markers')} markers, found {len(items)} and {len(markers)}",
            len(data),
        )
    if header.get("schema_version") != schema.version:
        raise SchemaVersionMismatch(
            f"snapshot schema version '{header.get('schema_version')}' does not match '{schema.version}'"
        )
    clock = header.get("clock")
    try:
        return StoreSnapshot(
            schema_version=header["schema_version"],
            items=tuple(items),
            markers=tuple(markers),
            clock=clock,
        )
    except ValidationError as e:
        raise StoreIoError(f"invalid snapshot header: {e.errors()[0].get('msg')}", 0) from e
