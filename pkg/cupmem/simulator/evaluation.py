"""
Suite generation, scoring and report emission.

A suite is a list of (scenario, scheduled haystack) pairs. run_evaluation
replays each haystack into a fresh system, asks the three probes against
the frozen memory, scores the answers against ground truth and reduces
everything into EvalMetrics plus per-scenario trace records.
"""
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

from pydantic import ValidationError

from cupmem.config import RunConfig
from cupmem.errors import IoError, SystemFault
from cupmem.logging_config import metrics
from cupmem.monitoring import monitoring
from cupmem.schemas import (
    AnswerState,
    CellRate,
    ConflictType,
    DiagnosticRow,
    Dimension,
    EvalMetrics,
    GapSpec,
    GroundedAnswer,
    Haystack,
    MemoryItem,
    Scenario,
    Session,
    StateSchema,
)
from cupmem.simulator.generator import DAY, generate_scenario
from cupmem.simulator.haystack import build_haystack
from cupmem.simulator.lexicon import Lexicon, load_distractors, load_lexicon
from cupmem.simulator.timeline import insert_explicit_negation, schedule_timestamps
from cupmem.state_schema import Knowledge

logger = logging.getLogger(__name__)

DIMENSIONS = (Dimension.SR, Dimension.PR, Dimension.IPA)
CONFLICT_TYPES = (ConflictType.TYPE_I, ConflictType.TYPE_II)

DIAGNOSTIC_COLUMNS = (
    ("new_evidence_retrieved", "New evidence retrieved"),
    ("old_and_new_both_retrieved", "Old & new both retrieved"),
    ("old_top1", "Old top-1"),
    ("new_top1", "New top-1"),
    ("failure_despite_new_evidence", "Failure despite new evidence"),
)

Suite = List[Tuple[Scenario, Haystack]]


# ---------------------------------------------------------------------------
# Suite generation
# ---------------------------------------------------------------------------

def generate_suite(
    config: RunConfig,
    schema: StateSchema,
    knowledge: Knowledge,
    lexicon: Optional[Lexicon] = None,
    pool: Optional[Sequence[Session]] = None,
    negate: bool = False,
) -> Suite:
    """Scenarios for seeds seed..seed+count-1 of each type, haystacked and scheduled"""
    lexicon = lexicon or load_lexicon(schema=schema)
    pool = load_distractors() if pool is None else pool
    gap = GapSpec(min_seconds=config.gap_min_days * DAY, max_seconds=config.gap_max_days * DAY)

    suite: Suite = []
    for conflict_type, count in ((ConflictType.TYPE_I, config.count_type_i), (ConflictType.TYPE_II, config.count_type_ii)):
        for seed in range(config.seed, config.seed + count):
            scenario = generate_scenario(seed, schema, knowledge, conflict_type, lexicon, gap=gap)
            haystack = build_haystack(
                scenario, pool, config.sessions_per_haystack, seed, knowledge, schema, strict=False,
            )
            haystack = schedule_timestamps(haystack, gap, config.target_year, seed)
            if negate:
                haystack = insert_explicit_negation(haystack, scenario, lexicon)
            suite.append((scenario, haystack))

    logger.info(f"Generated suite of {len(suite)} scenarios (seed={config.seed}, negate={negate})")
    return suite


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------

def score_answer(scenario: Scenario, answer: GroundedAnswer, dimension: Dimension) -> bool:
    truth = scenario.ground_truth
    if dimension == Dimension.SR:
        return answer.answer_state == truth.sr_expected
    if dimension == Dimension.PR:
        return answer.answer_state == AnswerState.PREMISE_REJECTED

    def chosen(proposition) -> bool:
        return any(
            c.slot == proposition.attribute and proposition.value in c.values
            for c in answer.choices
        )

    if any(chosen(p) for p in truth.ipa_forbidden):
        return False
    if truth.ipa_expected is not None:
        return chosen(truth.ipa_expected)
    return True


@dataclass
class ProbeOutcome:
    dimension: Dimension
    probe_id: str
    passed: bool = False
    answer_state: Optional[str] = None
    choices: List[dict] = field(default_factory=list)
    trace: List[Tuple[str, str]] = field(default_factory=list)
    new_retrieved: bool = False
    old_retrieved: bool = False
    old_top1: bool = False
    new_top1: bool = False


@dataclass
class ScenarioOutcome:
    scenario_id: str
    conflict_type: ConflictType
    probes: Dict[Dimension, ProbeOutcome]
    fault: Optional[str] = None

    def record(self, system: str) -> dict:
        return {
            "kind": "trace",
            "system": system,
            "scenario_id": self.scenario_id,
            "conflict_type": self.conflict_type.value,
            "fault": self.fault,
            "probes": [
                {
                    "dimension": outcome.dimension.value,
                    "probe_id": outcome.probe_id,
                    "passed": outcome.passed,
                    "answer_state": outcome.answer_state,
                    "choices": outcome.choices,
                    "trace": [{"item": item_id, "session": session_id} for item_id, session_id in outcome.trace],
                }
                for outcome in (self.probes[d] for d in DIMENSIONS)
            ],
        }


def _trace_outcome(outcome: ProbeOutcome, trace: List[MemoryItem], scenario: Scenario, haystack: Haystack) -> None:
    o_id = haystack.session_o.session_id
    n_id = haystack.session_n.session_id

    def is_old(item: MemoryItem) -> bool:
        return item.provenance.session_id == o_id and item.proposition.same_claim(scenario.old)

    def is_new(item: MemoryItem) -> bool:
        return item.provenance.session_id == n_id

    outcome.trace = [(item.id, item.provenance.session_id) for item in trace]
    outcome.new_retrieved = any(is_new(item) for item in trace)
    outcome.old_retrieved = any(is_old(item) for item in trace)
    if trace:
        outcome.old_top1 = is_old(trace[0])
        outcome.new_top1 = is_new(trace[0])


def evaluate_scenario(system, scenario: Scenario, haystack: Haystack) -> ScenarioOutcome:
    """Ingest one haystack into `system` and answer the three probes without touching memory"""
    outcome = ScenarioOutcome(
        scenario_id=scenario.id,
        conflict_type=scenario.conflict_type,
        probes={d: ProbeOutcome(dimension=d, probe_id=scenario.probes.for_dimension(d).probe_id) for d in DIMENSIONS},
    )
    try:
        for session in haystack.sessions:
            system.ingest(session)
        frozen = system.memory_digest()
        for dimension in DIMENSIONS:
            answer = system.answer(scenario.probes.for_dimension(dimension), dimension)
            probe_outcome = outcome.probes[dimension]
            probe_outcome.passed = score_answer(scenario, answer, dimension)
            probe_outcome.answer_state = answer.answer_state.value if answer.answer_state else None
            probe_outcome.choices = [c.model_dump(mode="json") for c in answer.choices]
            _trace_outcome(probe_outcome, system.last_retrieval_trace(), scenario, haystack)
        if system.memory_digest() != frozen:
            raise SystemFault(scenario.id, "memory changed while probing")
    except Exception as e:
        fault = e if isinstance(e, SystemFault) else SystemFault(scenario.id, f"{e.__class__.__name__}: {e}")
        metrics.log_error("system_fault", str(fault), exc_info=True, scenario_id=scenario.id)
        for probe_outcome in outcome.probes.values():
            probe_outcome.passed = False
        outcome.fault = str(fault)
    return outcome


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------

def _rate(numerator: int, denominator: int) -> Optional[float]:
    return numerator / denominator if denominator else None


def _diagnostic_row(scope: str, outcomes: List[ProbeOutcome]) -> DiagnosticRow:
    new = [o for o in outcomes if o.new_retrieved]
    counts = {
        "new_evidence_retrieved": len(new),
        "old_and_new_both_retrieved": sum(1 for o in outcomes if o.new_retrieved and o.old_retrieved),
        "old_top1": sum(1 for o in outcomes if o.old_top1),
        "new_top1": sum(1 for o in outcomes if o.new_top1),
        "failure_despite_new_evidence": sum(1 for o in new if not o.passed),
    }
    rates = {f"{name}_rate": _rate(count, len(outcomes)) for name, count in counts.items()}
    rates["failure_despite_new_evidence_rate"] = _rate(counts["failure_despite_new_evidence"], len(new))
    return DiagnosticRow(scope=scope, scenarios=len(outcomes), **counts, **rates)


def aggregate(system_name: str, outcomes: Sequence[ScenarioOutcome]) -> EvalMetrics:
    """Order-independent reduction: counts first, then rates"""
    cells = []
    for conflict_type in CONFLICT_TYPES:
        of_type = [o for o in outcomes if o.conflict_type == conflict_type]
        for dimension in DIMENSIONS:
            passed = sum(1 for o in of_type if o.probes[dimension].passed)
            cells.append(CellRate(
                conflict_type=conflict_type,
                dimension=dimension,
                passed=passed,
                total=len(of_type),
                rate=_rate(passed, len(of_type)),
            ))

    rows = [_diagnostic_row(d.value, [o.probes[d] for o in outcomes]) for d in DIMENSIONS]
    for conflict_type in CONFLICT_TYPES:
        for dimension in DIMENSIONS:
            rows.append(_diagnostic_row(
                f"{conflict_type.value}/{dimension.value}",
                [o.probes[dimension] for o in outcomes if o.conflict_type == conflict_type],
            ))

    return EvalMetrics(
        system=system_name,
        scenarios=len(outcomes),
        faulted=sum(1 for o in outcomes if o.fault),
        cells=tuple(cells),
        diagnostics=tuple(rows),
    )


@dataclass
class EvaluationRun:
    metrics: EvalMetrics
    outcomes: List[ScenarioOutcome]

    def records(self) -> List[dict]:
        return [o.record(self.metrics.system) for o in self.outcomes]


def run_evaluation(
    system_factory: Callable[[], object],
    suite: Suite,
    workers: int = 1,
    system_name: Optional[str] = None,
) -> EvaluationRun:
    """
    Evaluate a fresh system per scenario. A scenario whose system raises is
    marked failed on all three dimensions and the run continues.
    """
    def one(pair: Tuple[Scenario, Haystack]) -> ScenarioOutcome:
        scenario, haystack = pair
        system = system_factory()
        try:
            return evaluate_scenario(system, scenario, haystack)
        finally:
            system.close()

    if workers > 1 and len(suite) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(one, suite))
    else:
        outcomes = [one(pair) for pair in suite]
    outcomes.sort(key=lambda o: o.scenario_id)

    name = system_name or getattr(system_factory, "name", "system")
    result = aggregate(name, outcomes)
    metrics.log_business_event(
        "evaluation_finished",
        system=name,
        scenarios=result.scenarios,
        faulted=result.faulted,
        rates={f"{c.conflict_type.value}/{c.dimension.value}": c.rate for c in result.cells},
    )
    if monitoring:
        for cell in result.cells:
            if cell.rate is not None:
                monitoring.record_pass_rate(name, cell.conflict_type.value, cell.dimension.value, cell.rate)
    return EvaluationRun(metrics=result, outcomes=outcomes)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def _json_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"), ensure_ascii=False) + "\n"


def _percent(count: int, rate: Optional[float], denominator: Optional[int] = None) -> str:
    if rate is None:
        return "n/a"
    suffix = f" ({count}/{denominator})" if denominator is not None else ""
    return f"{rate * 100:.1f}%{suffix}"


def format_summary(runs: Sequence[EvalMetrics]) -> str:
    out = io.StringIO()
    for result in runs:
        out.write(f"system: {result.system}  scenarios: {result.scenarios}  faulted: {result.faulted}\n")
        out.write("pass rates\n")
        out.write(f"  {'type':<8} " + " ".join(f"{d.value:>16}" for d in DIMENSIONS) + "\n")
        for conflict_type in CONFLICT_TYPES:
            row = []
            for dimension in DIMENSIONS:
                cell = next(c for c in result.cells if c.conflict_type == conflict_type and c.dimension == dimension)
                row.append(f"{_percent(cell.passed, cell.rate, cell.total):>16}")
            out.write(f"  {conflict_type.value:<8} " + " ".join(row) + "\n")
        out.write("retrieval diagnostics (top-20)\n")
        out.write("  " + " | ".join(["Scope"] + [title for _, title in DIAGNOSTIC_COLUMNS]) + "\n")
        for row in result.diagnostics:
            cells = [row.scope]
            for name, _ in DIAGNOSTIC_COLUMNS:
                denominator = row.new_evidence_retrieved if name == "failure_despite_new_evidence" else row.scenarios
                cells.append(_percent(getattr(row, name), getattr(row, f"{name}_rate"), denominator))
            out.write("  " + " | ".join(cells) + "\n")
        out.write("\n")
    return out.getvalue()


def write_outputs(out_dir: Union[str, Path], runs: Sequence[EvaluationRun]) -> Dict[str, Path]:
    """metrics.json, traces.ndjson and summary.txt; byte-identical for identical runs"""
    out = Path(out_dir)
    paths = {
        "metrics": out / "metrics.json",
        "traces": out / "traces.ndjson",
        "summary": out / "summary.txt",
    }
    document = {"systems": [run.metrics.model_dump(mode="json") for run in runs]}
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths["metrics"].write_text(json.dumps(document, sort_keys=True, indent=2) + "\n", encoding="utf-8")
        paths["traces"].write_text(
            "".join(_json_line(record) for run in runs for record in run.records()), encoding="utf-8",
        )
        paths["summary"].write_text(format_summary([run.metrics for run in runs]), encoding="utf-8")
    except OSError as e:
        raise IoError(f"cannot write evaluation outputs to {out}: {e.strerror or e}") from e
    return paths


# ---------------------------------------------------------------------------
# Suite files
# ---------------------------------------------------------------------------

def suite_records(suite: Suite) -> Iterable[dict]:
    """Scenario record, then its probes, then its haystack sessions in order"""
    for scenario, haystack in suite:
        yield {
            "kind": "scenario",
            **scenario.model_dump(mode="json", exclude={"probes"}),
            "haystack": {
                "index_o": haystack.index_o,
                "index_n": haystack.index_n,
                "query_time": haystack.query_time.isoformat() if haystack.query_time else None,
                "sessions": len(haystack.sessions),
            },
        }
        for dimension in DIMENSIONS:
            yield {"kind": "probe", "scenario_id": scenario.id, **scenario.probes.for_dimension(dimension).model_dump(mode="json")}
        for session in haystack.sessions:
            yield {"kind": "session", "scenario_id": scenario.id, **session.model_dump(mode="json")}


def dump_suite(suite: Suite) -> bytes:
    return "".join(_json_line(record) for record in suite_records(suite)).encode("utf-8")


def write_suite(path: Union[str, Path], suite: Suite) -> None:
    try:
        Path(path).write_bytes(dump_suite(suite))
    except OSError as e:
        raise IoError(f"cannot write suite {path}: {e.strerror or e}") from e


class _PendingScenario:
    def __init__(self, record: dict, offset: int):
        self.offset = offset
        self.meta = record.pop("haystack", None) or {}
        self.record = record
        self.probes: Dict[str, dict] = {}
        self.sessions: List[dict] = []

    def build(self) -> Tuple[Scenario, Haystack]:
        missing = [d.value for d in DIMENSIONS if d.value not in self.probes]
        if missing:
            raise IoError(f"scenario {self.record.get('id')} lacks probes {missing}", self.offset)
        expected = self.meta.get("sessions")
        if expected is not None and expected != len(self.sessions):
            raise IoError(
                f"scenario {self.record.get('id')} promises {expected} sessions, found {len(self.sessions)}",
                self.offset,
            )
        try:
            scenario = Scenario.model_validate({
                **self.record,
                "probes": {d.value.lower(): self.probes[d.value] for d in DIMENSIONS},
            })
            haystack = Haystack(
                scenario_id=scenario.id,
                sessions=tuple(Session.model_validate(s) for s in self.sessions),
                index_o=self.meta.get("index_o", 0),
                index_n=self.meta.get("index_n", 0),
                query_time=self.meta.get("query_time"),
            )
        except ValidationError as e:
            raise IoError(f"invalid scenario {self.record.get('id')}: {e.errors()[0].get('msg')}", self.offset) from e
        return scenario, haystack


def parse_suite(data: bytes) -> Suite:
    suite: Suite = []
    pending: Optional[_PendingScenario] = None
    offset = 0
    for raw in data.splitlines(keepends=True):
        start = offset
        offset += len(raw)
        if not raw.strip():
            continue
        try:
            record = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise IoError(f"malformed suite record: {e}", start) from e
        if not isinstance(record, dict):
            raise IoError("suite record is not an object", start)

        kind = record.pop("kind", None)
        if kind == "scenario":
            if pending is not None:
                suite.append(pending.build())
            pending = _PendingScenario(record, start)
            continue
        if pending is None:
            raise IoError(f"{kind} record before any scenario record", start)
        if record.pop("scenario_id", None) != pending.record.get("id"):
            raise IoError(f"{kind} record does not belong to scenario {pending.record.get('id')}", start)
        if kind == "probe":
            pending.probes[record.get("dimension")] = record
        elif kind == "session":
            pending.sessions.append(record)
        else:
            raise IoError(f"unknown record kind {kind!r}", start)

    if pending is not None:
        suite.append(pending.build())
    return suite


def read_suite(path: Union[str, Path]) -> Suite:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise IoError(f"cannot read suite {path}: {e.strerror or e}") from e
    return parse_suite(data)
