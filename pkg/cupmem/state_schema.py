"""
Loading and querying the typed state schema and the world-knowledge rule set.

Both live in YAML documents. Field names are fixed; unknown fields are
rejected so that typos surface as validation errors instead of silently
changing behaviour.
"""
import hashlib
import json
import logging
from fnmatch import fnmatchcase
from pathlib import Path
from typing import Any, Dict, List, Optional, Set, Tuple, Union

import yaml
from pydantic import BaseModel, ConfigDict, ValidationError

from cupmem.errors import (
    IoError,
    SchemaParseError,
    SchemaValidationError,
    UnknownDomain,
    UnknownSlot,
)
from cupmem.schemas import (
    Cardinality,
    DependencyEdge,
    DomainSpec,
    KnowledgeRule,
    RuleKind,
    SlotRef,
    SlotSpec,
    StateSchema,
)

logger = logging.getLogger(__name__)

DATA_DIR = Path(__file__).parent / "data"
DEFAULT_SCHEMA_PATH = DATA_DIR / "state_schema.yaml"

Knowledge = Tuple[KnowledgeRule, ...]


class _SlotDoc(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str
    cardinality: str


class _DomainDoc(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str
    slots: List[_SlotDoc]


class _EdgeDoc(BaseModel):
    model_config = ConfigDict(extra="forbid")

    source: str
    target: str


class _SchemaDoc(BaseModel):
    model_config = ConfigDict(extra="forbid")

    version: str
    domains: List[_DomainDoc]
    dependency_edges: List[_EdgeDoc] = []
    knowledge_rules: List[Dict[str, Any]] = []


class _KnowledgeDoc(BaseModel):
    model_config = ConfigDict(extra="forbid")

    version: Optional[str] = None
    knowledge_rules: List[Dict[str, Any]]


def _first_error(exc: ValidationError) -> str:
    err = exc.errors()[0]
    where = ".".join(str(part) for part in err.get("loc", ()))
    return f"{where}: {err.get('msg', 'invalid value')}" if where else err.get("msg", "invalid value")


def _parse_yaml(document: str) -> Dict[str, Any]:
    try:
        data = yaml.safe_load(document)
    except yaml.YAMLError as e:
        raise SchemaParseError(f"malformed schema document: {e}") from e
    if not isinstance(data, dict):
        raise SchemaParseError("schema document must be a mapping at the top level")
    return data


def load_schema(document: str) -> StateSchema:
    """Parse and validate a schema document. Knowledge rules in it are validated too."""
    data = _parse_yaml(document)
    try:
        doc = _SchemaDoc.model_validate(data)
    except ValidationError as e:
        raise SchemaValidationError(_first_error(e)) from e

    if not doc.domains:
        raise SchemaValidationError("schema declares zero domains")

    domain_specs = []
    seen_domains: Set[str] = set()
    for domain in doc.domains:
        if not domain.name:
            raise SchemaValidationError("domain with empty name")
        if domain.name in seen_domains:
            raise SchemaValidationError(f"duplicate domain '{domain.name}'")
        seen_domains.add(domain.name)
        if not domain.slots:
            raise SchemaValidationError(f"domain '{domain.name}' declares no slots")
        seen_slots: Set[str] = set()
        slots = []
        for slot in domain.slots:
            if not slot.name:
                raise SchemaValidationError(f"domain '{domain.name}' has a slot with empty name")
            if slot.name in seen_slots:
                raise SchemaValidationError(f"duplicate slot '{domain.name}/{slot.name}'")
            seen_slots.add(slot.name)
            try:
                slots.append(SlotSpec(name=slot.name, cardinality=slot.cardinality))
            except ValidationError as e:
                raise SchemaValidationError(
                    f"slot '{domain.name}/{slot.name}': cardinality must be single or multi"
                ) from e
        domain_specs.append(DomainSpec(name=domain.name, slots=tuple(slots)))

    edges = []
    seen_edges: Set[Tuple[str, str]] = set()
    for edge in doc.dependency_edges:
        for end in (edge.source, edge.target):
            if end not in seen_domains:
                raise SchemaValidationError(
                    f"dangling dependency edge {edge.source} -> {edge.target}: '{end}' is not declared"
                )
        if (edge.source, edge.target) in seen_edges:
            raise SchemaValidationError(f"duplicate dependency edge {edge.source} -> {edge.target}")
        seen_edges.add((edge.source, edge.target))
        edges.append(DependencyEdge(source=edge.source, target=edge.target))

    schema = StateSchema(
        version=str(doc.version),
        domain_specs=tuple(domain_specs),
        dependency_edges=tuple(edges),
    )
    _validate_rules(doc.knowledge_rules, schema)
    return schema


def load_knowledge(document: str, schema: StateSchema) -> Knowledge:
    """
    Read the knowledge rules from a document.

    Accepts either a full schema document or a rules-only document holding
    just `knowledge_rules` (and optionally `version`).
    """
    data = _parse_yaml(document)
    if "domains" in data:
        try:
            raw_rules = _SchemaDoc.model_validate(data).knowledge_rules
        except ValidationError as e:
            raise SchemaValidationError(_first_error(e)) from e
    else:
        try:
            raw_rules = _KnowledgeDoc.model_validate(data).knowledge_rules
        except ValidationError as e:
            raise SchemaValidationError(_first_error(e)) from e
    return _validate_rules(raw_rules, schema)


def _validate_rules(raw_rules: List[Dict[str, Any]], schema: StateSchema) -> Knowledge:
    rules = []
    seen_ids: Set[str] = set()
    edges = {(e.source, e.target) for e in schema.dependency_edges}
    for index, raw in enumerate(raw_rules):
        try:
            rule = KnowledgeRule.model_validate(raw)
        except ValidationError as e:
            raise SchemaValidationError(f"knowledge_rules.{index}.{_first_error(e)}") from e
        if rule.rule_id in seen_ids:
            raise SchemaValidationError(f"duplicate rule id '{rule.rule_id}'")
        seen_ids.add(rule.rule_id)

        if rule.kind == RuleKind.INCOMPAT_SAME_SLOT:
            _require_slot(schema, rule.slot, rule.rule_id)
            patterns = list(rule.value_predicate_pair)
        else:
            _require_slot(schema, rule.source_slot, rule.rule_id)
            _require_slot(schema, rule.target_slot, rule.rule_id)
            pair = (rule.source_slot.domain, rule.target_slot.domain)
            if pair[0] != pair[1] and pair not in edges:
                raise SchemaValidationError(
                    f"rule '{rule.rule_id}': {pair[0]} -> {pair[1]} is not a declared dependency edge"
                )
            patterns = [rule.source_pattern, rule.target_pattern]
        if any(not p or not p.strip() for p in patterns):
            raise SchemaValidationError(f"rule '{rule.rule_id}': empty value pattern")
        rules.append(rule)
    return tuple(rules)


def _require_slot(schema: StateSchema, slot: SlotRef, rule_id: str) -> None:
    if not schema.has_slot(slot):
        raise SchemaValidationError(f"rule '{rule_id}' references undeclared slot '{slot.path}'")


def read_document(path: Union[str, Path]) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise IoError(f"cannot read {path}: {e.strerror or e}") from e


def load_schema_file(
    path: Union[str, Path, None] = None,
    knowledge_path: Union[str, Path, None] = None,
) -> Tuple[StateSchema, Knowledge]:
    """Load a schema and its rules; a separate knowledge file replaces the embedded rules."""
    schema_doc = read_document(path or DEFAULT_SCHEMA_PATH)
    schema = load_schema(schema_doc)
    knowledge_doc = read_document(knowledge_path) if knowledge_path else schema_doc
    knowledge = load_knowledge(knowledge_doc, schema)
    logger.debug(
        f"Loaded schema {schema.version}: {len(schema.domains)} domains, "
        f"{len(schema.dependency_edges)} edges, {len(knowledge)} rules"
    )
    return schema, knowledge


def dependency_neighbors(schema: StateSchema, domain: str) -> Set[str]:
    if not schema.has_domain(domain):
        raise UnknownDomain(f"unknown domain '{domain}'")
    return {edge.target for edge in schema.dependency_edges if edge.source == domain}


def slot_cardinality(schema: StateSchema, slot: SlotRef) -> Cardinality:
    cardinality = schema.cardinality_of(slot)
    if cardinality is None:
        raise UnknownSlot(f"unknown slot '{slot.path}'")
    return cardinality


def require_slot(schema: StateSchema, slot: SlotRef) -> None:
    if not schema.has_slot(slot):
        raise UnknownSlot(f"unknown slot '{slot.path}'")


def pattern_matches(pattern: str, value: str) -> bool:
    """Glob match with '|' alternatives; total over all values"""
    return any(fnmatchcase(value, alt.strip()) for alt in pattern.split("|") if alt.strip())


def schema_fingerprint(schema: StateSchema, knowledge: Knowledge = ()) -> str:
    """Structural hash used to check that nothing mutated a loaded schema"""
    payload = {
        "schema": schema.model_dump(mode="json"),
        "knowledge": [rule.model_dump(mode="json") for rule in knowledge],
    }
    encoded = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(encoded).hexdigest()
