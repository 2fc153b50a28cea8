import json
import time

import httpx
import pytest

from cupmem.adjudicator import ExternalAdjudicator
from cupmem.config import AdjudicatorConfig, AdjudicatorKind, IngestConfig, RunConfig
from cupmem.conflict import classify_conflict, observation_from_session
from cupmem.errors import IoError
from cupmem.schemas import ConflictType, Dimension, ItemStatus, SessionKind, Verdict, WitnessKind
from cupmem.simulator.evaluation import (
    aggregate,
    dump_suite,
    evaluate_scenario,
    format_summary,
    generate_suite,
    parse_suite,
    read_suite,
    run_evaluation,
    write_outputs,
    write_suite,
)
from cupmem.simulator.systems import EngineSystem, NaiveRetrievalSystem
from cupmem.state_schema import schema_fingerprint


def rates(run):
    return {(c.conflict_type, c.dimension): c.rate for c in run.metrics.cells}


@pytest.fixture(scope="module")
def small_suite(schema, knowledge):
    return generate_suite(RunConfig(seed=100, count_type_i=15, count_type_ii=15), schema, knowledge)


def engine_factory(schema, knowledge, **kwargs):
    def build():
        return EngineSystem(schema, knowledge, **kwargs)
    build.name = "engine"
    return build


def naive_factory(schema):
    def build():
        return NaiveRetrievalSystem(schema)
    build.name = "naive"
    return build


def test_suite_shape(small_suite):
    assert len(small_suite) == 30
    ids = [scenario.id for scenario, _ in small_suite]
    assert ids[0] == "t1-000100" and ids[-1] == "t2-000114"
    for scenario, haystack in small_suite:
        assert haystack.scenario_id == scenario.id
        assert len(haystack.sessions) == 10
        assert haystack.query_time > haystack.sessions[-1].timestamp


def test_engine_resolves_every_conflict(small_suite, schema, knowledge):
    before = schema_fingerprint(schema, knowledge)
    run = run_evaluation(engine_factory(schema, knowledge), small_suite)
    assert schema_fingerprint(schema, knowledge) == before
    assert run.metrics.faulted == 0
    assert set(rates(run).values()) == {1.0}


def test_naive_reader_follows_outdated_premises(small_suite, schema):
    run = run_evaluation(naive_factory(schema), small_suite)
    by_cell = rates(run)
    for conflict_type in ConflictType:
        assert by_cell[(conflict_type, Dimension.PR)] == 0.0
        assert by_cell[(conflict_type, Dimension.IPA)] < 0.2


def test_workers_do_not_change_the_result(small_suite, schema, knowledge):
    serial = run_evaluation(engine_factory(schema, knowledge), small_suite)
    parallel = run_evaluation(engine_factory(schema, knowledge), small_suite, workers=4)
    assert serial.metrics == parallel.metrics
    assert serial.records() == parallel.records()


def test_outputs_are_byte_identical(small_suite, schema, knowledge, tmp_path):
    produced = []
    for attempt in ("a", "b"):
        runs = [
            run_evaluation(engine_factory(schema, knowledge), small_suite),
            run_evaluation(naive_factory(schema), small_suite),
        ]
        paths = write_outputs(tmp_path / attempt, runs)
        produced.append({name: path.read_bytes() for name, path in paths.items()})
    assert produced[0] == produced[1]

    metrics = json.loads(produced[0]["metrics"])
    assert [s["system"] for s in metrics["systems"]] == ["engine", "naive"]
    traces = produced[0]["traces"].decode().splitlines()
    assert len(traces) == 60
    assert json.loads(traces[0])["kind"] == "trace"
    assert "Failure despite new evidence" in produced[0]["summary"].decode()


def test_write_outputs_reports_unwritable_directory(small_suite, schema, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("occupied")
    run = run_evaluation(naive_factory(schema), small_suite[:1])
    with pytest.raises(IoError):
        write_outputs(blocker / "out", [run])


def test_external_timeouts_fall_back_to_unknown(small_suite, schema, knowledge):
    def handler(request):
        raise httpx.ReadTimeout("judge unavailable", request=request)

    config = AdjudicatorConfig(kind=AdjudicatorKind.EXTERNAL, endpoint="http://judge.test/api/adjudicate", max_retries=0)
    judge = ExternalAdjudicator(config, client=httpx.Client(transport=httpx.MockTransport(handler)))
    type_ii = [pair for pair in small_suite if pair[0].conflict_type == ConflictType.TYPE_II]

    for scenario, haystack in type_ii:
        system = EngineSystem(schema, knowledge, IngestConfig(adjudicator=config), adjudicator=judge)
        outcome = evaluate_scenario(system, scenario, haystack)
        assert outcome.fault is None
        assert outcome.probes[Dimension.PR].passed
        verdicts = [d.decision.verdict for r in system.reports for d in r.decisions]
        assert verdicts and set(verdicts) == {Verdict.UNKNOWN}
        assert system.store.marker_for(scenario.target_slot) is not None
        system.close()
    judge.close()


def test_negation_suite(schema, knowledge):
    config = RunConfig(seed=500, count_type_i=25, count_type_ii=25)
    suite = generate_suite(config, schema, knowledge, negate=True)
    assert len(suite) == 50
    for scenario, haystack in suite:
        assert sum(1 for s in haystack.sessions if s.kind == SessionKind.NEGATION) == 1
        history = [observation_from_session(s) for s in haystack.sessions]
        witness = classify_conflict(history, haystack.index_o, haystack.index_n, knowledge, schema)
        assert witness.kind == WitnessKind.NONE

    run = run_evaluation(engine_factory(schema, knowledge), suite)
    assert run.metrics.faulted == 0
    by_cell = rates(run)
    for conflict_type in ConflictType:
        assert by_cell[(conflict_type, Dimension.SR)] == 1.0
        assert by_cell[(conflict_type, Dimension.PR)] == 1.0

    # the negation session retires the old belief, so the later evidence has nothing left to act on
    for scenario, haystack in suite:
        system = EngineSystem(schema, knowledge)
        for s in haystack.sessions:
            system.ingest(s)
        session_n = haystack.session_n
        retired = [i for i in system.store.items(ItemStatus.STALE) if i.proposition.same_claim(scenario.old)]
        assert [i.staled_by.session_id for i in retired] == [f"{scenario.id}/neg"], scenario.id
        marker = system.store.marker_for(scenario.target_slot)
        assert marker is None or marker.since != session_n.timestamp, scenario.id
        system.close()


def test_faulting_system_is_recorded_and_the_run_continues(small_suite, schema):
    class Broken(NaiveRetrievalSystem):
        def ingest(self, session):
            raise RuntimeError("disk on fire")

    run = run_evaluation(lambda: Broken(schema), small_suite[:3], system_name="broken")
    assert run.metrics.faulted == 3
    assert all("disk on fire" in o.fault for o in run.outcomes)
    assert all(not p.passed for o in run.outcomes for p in o.probes.values())


def test_probing_must_not_change_memory(small_suite, schema):
    class Leaky(NaiveRetrievalSystem):
        def answer(self, probe, dimension=None):
            self.items = self.items[1:]
            return super().answer(probe, dimension)

    scenario, haystack = small_suite[0]
    outcome = evaluate_scenario(Leaky(schema), scenario, haystack)
    assert "memory changed" in outcome.fault


def test_empty_suite_has_no_rates():
    result = aggregate("engine", [])
    assert result.scenarios == 0
    assert all(c.rate is None for c in result.cells)
    assert all(r.new_evidence_retrieved_rate is None for r in result.diagnostics)
    assert "n/a" in format_summary([result])


def test_diagnostic_rows(small_suite, schema, knowledge):
    run = run_evaluation(engine_factory(schema, knowledge), small_suite)
    scopes = [row.scope for row in run.metrics.diagnostics]
    assert scopes[:3] == ["SR", "PR", "IPA"]
    assert "TYPE_II/IPA" in scopes
    sr = run.metrics.diagnostics[0]
    assert sr.scenarios == 30
    assert sr.failure_despite_new_evidence == 0


def test_suite_file_round_trip(small_suite, tmp_path):
    path = tmp_path / "suite.ndjson"
    write_suite(path, small_suite[:4])
    assert read_suite(path) == small_suite[:4]


def test_suite_parse_errors(small_suite):
    data = dump_suite(small_suite[:2])
    lines = data.splitlines(keepends=True)

    with pytest.raises(IoError) as err:
        parse_suite(lines[1] + lines[0])
    assert err.value.offset == 0

    corrupt = lines[0] + b"{oops\n"
    with pytest.raises(IoError) as err:
        parse_suite(corrupt)
    assert err.value.offset == len(lines[0])

    without_probe = b"".join(line for line in lines if b'"dimension":"IPA"' not in line)
    with pytest.raises(IoError, match="lacks probes"):
        parse_suite(without_probe)


@pytest.mark.slow
def test_full_suite(schema, knowledge):
    suite = generate_suite(RunConfig(), schema, knowledge)
    assert len(suite) == 400
    started = time.perf_counter()
    engine = run_evaluation(engine_factory(schema, knowledge), suite, workers=4)
    assert time.perf_counter() - started < 30.0
    naive = run_evaluation(naive_factory(schema), suite, workers=4)
    assert set(rates(engine).values()) == {1.0}
    naive_rates = rates(naive)
    for conflict_type in ConflictType:
        assert naive_rates[(conflict_type, Dimension.PR)] == 0.0
        assert naive_rates[(conflict_type, Dimension.IPA)] < 0.2
