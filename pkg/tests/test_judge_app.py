import pytest
from fastapi.testclient import TestClient

from cupmem.adjudicator import ExternalAdjudicator, RuleBasedAdjudicator
from cupmem.config import AdjudicatorConfig, AdjudicatorKind
from cupmem.judge_app import app
from cupmem.schemas import Verdict
from cupmem.store import MemoryStore
from cupmem.write_pipeline import ingest_session

from tests.helpers import CITY, COMMUTE, LIMITATION, WEATHER, WORK_CHANGE, session, span


@pytest.fixture(scope="module")
def client():
    with TestClient(app) as test_client:
        yield test_client


def request_body(old_slot, old_value, updates, version="cupmem-schema-1"):
    return {
        "schema_version": version,
        "old_item": {"slot": old_slot, "value": old_value, "timestamp": "2027-01-02T00:00:00+00:00"},
        "updates": [
            {"slot": slot, "value": value, "timestamp": "2027-03-01T00:00:00+00:00"}
            for slot, value in updates
        ],
        "session_text": "things changed",
    }


@pytest.mark.parametrize("old, updates, verdict, replacement", [
    ((COMMUTE, "bicycle"), [(LIMITATION, "knee_sprain")], "UNKNOWN", None),
    ((COMMUTE, "driving"), [(WORK_CHANGE, "remote_job")], "REPLACE", "no_commute"),
    ((CITY, "seattle"), [(CITY, "phoenix")], "REPLACE", "phoenix"),
    ((CITY, "seattle"), [(WEATHER, "rainy_and_mild")], "KEEP", None),
])
def test_adjudicate(client, old, updates, verdict, replacement):
    response = client.post("/api/adjudicate", json=request_body(*old, updates))
    assert response.status_code == 200
    body = response.json()
    assert body["verdict"] == verdict
    assert (body["replacement"] or {}).get("value") == replacement


def test_item_header_is_echoed(client):
    response = client.post(
        "/api/adjudicate",
        json=request_body(CITY, "seattle", [(CITY, "phoenix")]),
        headers={"X-Cupmem-Item": "m000007"},
    )
    assert response.headers["X-Cupmem-Item"] == "m000007"
    assert response.headers["X-Response-Time"].endswith("ms")
    assert "X-Response-Time" not in client.get("/api/health").headers


def test_schema_version_mismatch_is_409(client):
    response = client.post("/api/adjudicate", json=request_body(CITY, "seattle", [(CITY, "phoenix")], "other"))
    assert response.status_code == 409
    assert "other" in response.json()["detail"]


def test_undeclared_slot_is_400(client):
    response = client.post("/api/adjudicate", json=request_body("location_and_living/moon_base", "crater", []))
    assert response.status_code == 400
    assert "moon_base" in response.json()["detail"]


def test_malformed_body_is_400(client):
    response = client.post("/api/adjudicate", json={"schema_version": "cupmem-schema-1"})
    assert response.status_code == 400
    assert response.json()["error"] == "Validation error"


def test_health_and_root(client):
    health = client.get("/api/health").json()
    assert health["status"] == "ok"
    assert health["schema_version"] == "cupmem-schema-1"
    assert health["rules"] == "8 rules loaded"
    assert client.get("/").json()["health"] == "/api/health"


def test_external_against_the_judge_matches_rule_based(client, schema, knowledge):
    config = AdjudicatorConfig(kind=AdjudicatorKind.EXTERNAL, endpoint="http://testserver/api/adjudicate", max_in_flight=1)
    sessions = [
        session("s1", 1, span(COMMUTE, "driving"), span(CITY, "seattle")),
        session("s2", 40, span(WORK_CHANGE, "remote_job"), span(WEATHER, "dry_heat")),
    ]
    digests = []
    for judge in (RuleBasedAdjudicator(), ExternalAdjudicator(config, client=client)):
        with MemoryStore(schema) as store:
            reports = [ingest_session(store, s, knowledge, adjudicator=judge) for s in sessions]
            digests.append(store.digest())
        assert {d.decision.verdict for d in reports[1].decisions} == {Verdict.UNKNOWN, Verdict.REPLACE}
    assert digests[0] == digests[1]


def test_blank_value_is_400(client):
    response = client.post("/api/adjudicate", json=request_body(CITY, "   ", [(CITY, "phoenix")]))
    assert response.status_code == 400
    body = response.json()
    assert body["error"] == "Invalid request"
    assert "non-empty" in body["detail"]
