"""Typer command line interface for cupmem.

Structured output goes to stdout as JSON lines; human summaries follow the
records. Diagnostics go to stderr.

Exit codes
----------
0 - success
1 - domain violation (invalid schema, out-of-order session, malformed probe, ...)
2 - environment or I/O failure
"""
import json
from contextlib import contextmanager
from enum import Enum
from pathlib import Path
from typing import Iterator, List, Optional, Tuple

import typer
from pydantic import ValidationError

from cupmem.adjudicator import build_adjudicator
from cupmem.config import AdjudicatorConfig, AdjudicatorKind, RunConfig, get_settings
from cupmem.errors import ConfigError, CupmemError, IoError, MalformedProbe
from cupmem.logging_config import configure_logging
from cupmem.readout import answer_query
from cupmem.schemas import Dimension, EvalMetrics, ItemStatus, Probe, Session, StateSchema
from cupmem.simulator.evaluation import (
    dump_suite,
    format_summary,
    generate_suite,
    read_suite,
    run_evaluation,
    write_outputs,
    write_suite,
)
from cupmem.simulator.systems import EngineSystem, NaiveRetrievalSystem
from cupmem.state_schema import Knowledge, load_schema_file
from cupmem.store import MemoryStore
from cupmem.write_pipeline import ingest_session

app = typer.Typer(
    name="cupmem",
    help="Current-state user memory: ingest sessions, answer probes, run the scenario harness.",
    no_args_is_help=True,
)
schema_app = typer.Typer(help="State schema utilities.", no_args_is_help=True)
app.add_typer(schema_app, name="schema")


class TypeChoice(str, Enum):
    one = "1"
    two = "2"
    both = "both"


class SystemChoice(str, Enum):
    engine = "engine"
    naive = "naive"
    both = "both"


class AdjudicatorChoice(str, Enum):
    rule_based = "rule_based"
    external = "external"


SchemaOption = typer.Option(None, "--schema", help="State schema YAML (default: packaged schema)")
KnowledgeOption = typer.Option(None, "--knowledge", help="Knowledge rules YAML (default: rules embedded in the schema)")


@contextmanager
def _reported_errors() -> Iterator[None]:
    try:
        yield
    except CupmemError as exc:
        typer.echo(f"error: {exc}", err=True)
        raise typer.Exit(code=exc.exit_code) from None


def _echo_record(record: dict) -> None:
    typer.echo(json.dumps(record, sort_keys=True, separators=(",", ":"), ensure_ascii=False))


def _load(schema_path: Optional[Path], knowledge_path: Optional[Path]) -> Tuple[StateSchema, Knowledge]:
    return load_schema_file(schema_path, knowledge_path)


def _read_records(path: Path, kind: str) -> List[Tuple[int, dict]]:
    """(line number, record) for every record of `kind` (or without a kind) in an NDJSON file"""
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise IoError(f"cannot read {path}: {e.strerror or e}") from e
    records = []
    offset = 0
    for number, line in enumerate(lines, start=1):
        start = offset
        offset += len(line.encode("utf-8")) + 1
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as e:
            raise IoError(f"{path}: malformed record on line {number}: {e.msg}", start) from e
        if not isinstance(record, dict):
            raise IoError(f"{path}: record on line {number} is not an object", start)
        if record.pop("kind", kind) == kind:
            records.append((number, record))
    return records


def _open_store(path: Path, schema: StateSchema) -> MemoryStore:
    database_url = get_settings().database_url
    if path.exists():
        return MemoryStore.load(path, schema, database_url)
    return MemoryStore(schema, database_url)


def _adjudicator_config(kind: AdjudicatorChoice, endpoint: Optional[str], timeout: Optional[float]) -> AdjudicatorConfig:
    settings = get_settings()
    try:
        return AdjudicatorConfig(
            kind=AdjudicatorKind.EXTERNAL if kind == AdjudicatorChoice.external else AdjudicatorKind.RULE_BASED,
            endpoint=endpoint or settings.judge_endpoint,
            timeout=timeout or settings.judge_timeout_s,
            max_retries=settings.judge_max_retries,
            cache_ttl=settings.verdict_cache_ttl if settings.redis_enabled else None,
        )
    except ValidationError as e:
        raise ConfigError(f"invalid adjudicator configuration: {e.errors()[0].get('msg')}") from e


def _run_config(**values) -> RunConfig:
    try:
        config = RunConfig(**values)
    except ValidationError as e:
        error = e.errors()[0]
        location = ".".join(str(part) for part in error.get("loc", ()))
        raise ConfigError(f"invalid option {location}: {error.get('msg')}") from e
    config.ensure_paths()
    return config


def _counts(conflict_type: TypeChoice, count: int) -> dict:
    return {
        "count_type_i": count if conflict_type in (TypeChoice.one, TypeChoice.both) else 0,
        "count_type_ii": count if conflict_type in (TypeChoice.two, TypeChoice.both) else 0,
    }


@app.callback()
def main(
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Debug logging on stderr"),
) -> None:
    """Entry point for the cupmem command group."""
    configure_logging("DEBUG" if verbose else None)


@schema_app.command("validate")
def schema_validate(
    schema_path: Optional[Path] = SchemaOption,
    knowledge_path: Optional[Path] = KnowledgeOption,
) -> None:
    """Validate a schema (and rule set); exit 0 when both are well-formed."""
    with _reported_errors():
        schema, knowledge = _load(schema_path, knowledge_path)
        _echo_record({
            "kind": "schema_report",
            "valid": True,
            "version": schema.version,
            "domains": len(schema.domains),
            "slots": len(schema.all_slots()),
            "dependency_edges": len(schema.dependency_edges),
            "knowledge_rules": len(knowledge),
        })


@app.command()
def ingest(
    store_path: Path = typer.Option(..., "--store", help="Store snapshot; created when missing"),
    sessions_path: Path = typer.Option(..., "--sessions", help="NDJSON session records (suite files work too)"),
    scenario_id: Optional[str] = typer.Option(None, "--scenario", help="Only sessions of this scenario"),
    adjudicator: AdjudicatorChoice = typer.Option(AdjudicatorChoice.rule_based, "--adjudicator"),
    endpoint: Optional[str] = typer.Option(None, "--endpoint", help="External adjudicator URL"),
    global_k: int = typer.Option(5, "--global-k", min=0),
    schema_path: Optional[Path] = SchemaOption,
    knowledge_path: Optional[Path] = KnowledgeOption,
) -> None:
    """Ingest sessions in file order, persisting the store after each one."""
    with _reported_errors():
        schema, knowledge = _load(schema_path, knowledge_path)
        config = _run_config(adjudicator=_adjudicator_config(adjudicator, endpoint, None), global_k=global_k)
        sessions = []
        for number, record in _read_records(sessions_path, "session"):
            owner = record.pop("scenario_id", None)
            if scenario_id is not None and owner != scenario_id:
                continue
            try:
                sessions.append(Session.model_validate(record))
            except ValidationError as e:
                raise IoError(f"{sessions_path}: invalid session on line {number}: {e.errors()[0].get('msg')}") from e

        judge = build_adjudicator(config.adjudicator)
        store = _open_store(store_path, schema)
        try:
            for session in sessions:
                report = ingest_session(store, session, knowledge, config.ingest_config(), judge)
                store.persist(store_path)
                _echo_record({"kind": "ingest_report", **report.model_dump(mode="json")})
        finally:
            judge.close()
            store.close()
        typer.echo(f"ingested {len(sessions)} sessions into {store_path}", err=True)


@app.command()
def query(
    store_path: Path = typer.Option(..., "--store", help="Store snapshot"),
    probes_path: Path = typer.Option(..., "--probes", help="NDJSON probe records (suite files work too)"),
    probe_id: Optional[str] = typer.Option(None, "--probe-id", help="Only this probe"),
    dimension: Optional[Dimension] = typer.Option(None, "--dimension", case_sensitive=False, help="Override the probe's dimension"),
    schema_path: Optional[Path] = SchemaOption,
    knowledge_path: Optional[Path] = KnowledgeOption,
) -> None:
    """Answer probes against a persisted store. The store is not modified."""
    with _reported_errors():
        schema, _ = _load(schema_path, knowledge_path)
        probes = []
        for number, record in _read_records(probes_path, "probe"):
            record.pop("scenario_id", None)
            try:
                probes.append(Probe.model_validate(record))
            except ValidationError as e:
                raise MalformedProbe(f"{probes_path}: invalid probe on line {number}: {e.errors()[0].get('msg')}") from e
        if probe_id is not None:
            probes = [p for p in probes if p.probe_id == probe_id]
            if not probes:
                raise MalformedProbe(f"no probe '{probe_id}' in {probes_path}")

        store = MemoryStore.load(store_path, schema, get_settings().database_url)
        try:
            for probe in probes:
                answer = answer_query(store, probe, dimension)
                _echo_record({"kind": "answer", **answer.model_dump(mode="json")})
        finally:
            store.close()


@app.command()
def simulate(
    seed: int = typer.Option(0, "--seed"),
    conflict_type: TypeChoice = typer.Option(TypeChoice.both, "--type", help="1, 2 or both"),
    count: int = typer.Option(200, "--count", min=0, help="Scenarios per conflict type"),
    sessions: int = typer.Option(10, "--sessions-per-haystack", min=2),
    gap_min_days: int = typer.Option(30, "--gap-min-days", min=0),
    gap_max_days: int = typer.Option(180, "--gap-max-days", min=0),
    target_year: int = typer.Option(2027, "--target-year"),
    negate: bool = typer.Option(False, "--negate", help="Insert an explicit negation between the evidence sessions"),
    out: Optional[Path] = typer.Option(None, "--out", help="Suite file; stdout when omitted"),
    schema_path: Optional[Path] = SchemaOption,
    knowledge_path: Optional[Path] = KnowledgeOption,
) -> None:
    """Generate a seeded scenario suite as NDJSON scenario/probe/session records."""
    with _reported_errors():
        config = _run_config(
            schema_path=schema_path,
            knowledge_path=knowledge_path,
            seed=seed,
            sessions_per_haystack=sessions,
            gap_min_days=gap_min_days,
            gap_max_days=gap_max_days,
            target_year=target_year,
            out=out,
            **_counts(conflict_type, count),
        )
        schema, knowledge = _load(schema_path, knowledge_path)
        suite = generate_suite(config, schema, knowledge, negate=negate)
        if out is None:
            typer.echo(dump_suite(suite).decode("utf-8"), nl=False)
        else:
            write_suite(out, suite)
            typer.echo(f"wrote {len(suite)} scenarios to {out}", err=True)


@app.command()
def evaluate(
    seed: int = typer.Option(0, "--seed"),
    conflict_type: TypeChoice = typer.Option(TypeChoice.both, "--type", help="1, 2 or both"),
    count: int = typer.Option(200, "--count", min=0, help="Scenarios per conflict type"),
    sessions: int = typer.Option(10, "--sessions-per-haystack", min=2),
    system: SystemChoice = typer.Option(SystemChoice.engine, "--system"),
    global_k: int = typer.Option(5, "--global-k", min=0),
    workers: int = typer.Option(1, "--workers", min=1),
    adjudicator: AdjudicatorChoice = typer.Option(AdjudicatorChoice.rule_based, "--adjudicator"),
    endpoint: Optional[str] = typer.Option(None, "--endpoint", help="External adjudicator URL"),
    timeout: Optional[float] = typer.Option(None, "--timeout", help="External adjudicator timeout in seconds"),
    negate: bool = typer.Option(False, "--negate"),
    suite_path: Optional[Path] = typer.Option(None, "--suite", help="Evaluate a suite file instead of generating one"),
    out: Optional[Path] = typer.Option(None, "--out", help="Directory for metrics.json, traces.ndjson, summary.txt"),
    schema_path: Optional[Path] = SchemaOption,
    knowledge_path: Optional[Path] = KnowledgeOption,
) -> None:
    """Run the engine and/or the naive baseline over a scenario suite."""
    with _reported_errors():
        config = _run_config(
            schema_path=schema_path,
            knowledge_path=knowledge_path,
            adjudicator=_adjudicator_config(adjudicator, endpoint, timeout),
            global_k=global_k,
            seed=seed,
            sessions_per_haystack=sessions,
            workers=workers,
            out=out,
            **_counts(conflict_type, count),
        )
        schema, knowledge = _load(schema_path, knowledge_path)
        suite = read_suite(suite_path) if suite_path else generate_suite(config, schema, knowledge, negate=negate)
        ingest_config = config.ingest_config()

        factories = []
        if system in (SystemChoice.engine, SystemChoice.both):
            factories.append(("engine", lambda: EngineSystem(schema, knowledge, ingest_config)))
        if system in (SystemChoice.naive, SystemChoice.both):
            factories.append(("naive", lambda: NaiveRetrievalSystem(schema)))

        runs = [run_evaluation(factory, suite, config.workers, name) for name, factory in factories]
        if out is not None:
            write_outputs(out, runs)
            typer.echo(f"wrote evaluation outputs to {out}", err=True)
        for run in runs:
            _echo_record({"kind": "metrics", **run.metrics.model_dump(mode="json")})
        typer.echo(format_summary([run.metrics for run in runs]), nl=False)


@app.command()
def inspect(
    store_path: Path = typer.Option(..., "--store", help="Store snapshot"),
    status: Optional[ItemStatus] = typer.Option(None, "--status", case_sensitive=False, help="Only items with this status"),
    schema_path: Optional[Path] = SchemaOption,
    knowledge_path: Optional[Path] = KnowledgeOption,
) -> None:
    """Dump store items (id order) and slot markers."""
    with _reported_errors():
        schema, _ = _load(schema_path, knowledge_path)
        store = MemoryStore.load(store_path, schema, get_settings().database_url)
        try:
            for item in store.items(status):
                _echo_record({"kind": "item", **item.model_dump(mode="json")})
            for marker in store.markers():
                _echo_record({"kind": "marker", **marker.model_dump(mode="json")})
        finally:
            store.close()


@app.command()
def report(
    metrics_path: Path = typer.Option(..., "--metrics", help="metrics.json written by evaluate"),
) -> None:
    """Print the plain-text summary of a metrics file."""
    with _reported_errors():
        try:
            document = json.loads(metrics_path.read_text(encoding="utf-8"))
        except OSError as e:
            raise IoError(f"cannot read {metrics_path}: {e.strerror or e}") from e
        except json.JSONDecodeError as e:
            raise IoError(f"{metrics_path}: malformed metrics file: {e.msg}", e.pos) from e
        try:
            runs = [EvalMetrics.model_validate(entry) for entry in document.get("systems", [])]
        except (AttributeError, ValidationError) as e:
            raise IoError(f"{metrics_path}: not a metrics file") from e
        typer.echo(format_summary(runs), nl=False)


if __name__ == "__main__":
    app()
