import pytest

from cupmem import cache


class FakeRedis:
    def __init__(self):
        self.data = {}
        self.ttls = {}

    def get(self, key):
        return self.data.get(key)

    def setex(self, key, ttl, value):
        self.data[key] = value
        self.ttls[key] = ttl


@pytest.fixture(autouse=True)
def fresh_client():
    cache.reset_client()
    yield
    cache.reset_client()


def test_disabled_cache_is_a_no_op(monkeypatch):
    monkeypatch.delenv("CUPMEM_REDIS_ENABLED", raising=False)
    assert cache.set_cached("verdict:x", {"verdict": "KEEP"}) is False
    assert cache.get_cached("verdict:x") is None


def test_round_trip_through_client(monkeypatch):
    fake = FakeRedis()
    monkeypatch.setattr(cache, "get_redis_client", lambda: fake)
    assert cache.set_cached("verdict:x", {"verdict": "STALE"}, ttl=60)
    assert fake.ttls["verdict:x"] == 60
    assert cache.get_cached("verdict:x") == {"verdict": "STALE"}


def test_body_digest_ignores_key_order():
    a = cache.body_digest({"old_item": {"value": "seattle"}, "updates": []})
    b = cache.body_digest({"updates": [], "old_item": {"value": "seattle"}})
    assert a == b
    assert cache.cache_key("verdict", a) == f"verdict:{a}"
    assert a != cache.body_digest({"old_item": {"value": "portland"}, "updates": []})
