import pytest

from cupmem.adjudicator import RuleBasedAdjudicator
from cupmem.config import IngestConfig
from cupmem.state_schema import load_schema_file
from cupmem.store import MemoryStore
from cupmem.write_pipeline import ingest_session


@pytest.fixture(scope="session")
def rules():
    return load_schema_file()


@pytest.fixture(scope="session")
def schema(rules):
    return rules[0]


@pytest.fixture(scope="session")
def knowledge(rules):
    return rules[1]


@pytest.fixture
def store(schema):
    memory = MemoryStore(schema)
    yield memory
    memory.close()


@pytest.fixture
def ingest(store, knowledge):
    """Ingest sessions into the test store with the rule-based adjudicator"""
    adjudicator = RuleBasedAdjudicator()
    config = IngestConfig()

    def run(*sessions):
        return [ingest_session(store, s, knowledge, config, adjudicator) for s in sessions]

    return run
