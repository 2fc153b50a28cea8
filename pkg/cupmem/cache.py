"""
Redis cache for external adjudicator verdicts.
"""
import hashlib
import json
import logging
from typing import Any, Optional

from cupmem.config import get_settings

logger = logging.getLogger(__name__)

# Try to import redis, but make it optional
try:
    import redis
    REDIS_AVAILABLE = True
except ImportError:
    REDIS_AVAILABLE = False
    logger.debug("Redis not installed. Verdict caching will be disabled.")

# Redis connection pool (singleton)
_redis_client: Optional[Any] = None
_connect_attempted = False


def get_redis_client():
    """Get or create the Redis client; None when caching is off or unreachable"""
    global _redis_client, _connect_attempted

    if not REDIS_AVAILABLE:
        return None

    if _redis_client is None and not _connect_attempted:
        _connect_attempted = True
        settings = get_settings()
        if not settings.redis_enabled or not settings.redis_url:
            logger.debug("Redis caching is disabled")
            return None
        try:
            _redis_client = redis.Redis.from_url(
                settings.redis_url,
                decode_responses=True,
                socket_connect_timeout=2,
                socket_timeout=2,
                retry_on_timeout=True,
                health_check_interval=30,
            )
            _redis_client.ping()
            logger.info(f"Redis connected: {settings.redis_url}")
        except Exception as e:
            logger.warning(f"Failed to connect to Redis: {e}. Caching disabled.")
            _redis_client = None

    return _redis_client


def reset_client() -> None:
    global _redis_client, _connect_attempted
    _redis_client = None
    _connect_attempted = False


def cache_key(prefix: str, *args) -> str:
    """Generate cache key from prefix and arguments"""
    return ":".join([prefix, *(str(arg) for arg in args)])


def body_digest(payload: dict) -> str:
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def get_cached(key: str) -> Optional[Any]:
    client = get_redis_client()
    if not client:
        return None

    try:
        value = client.get(key)
        if value:
            return json.loads(value)
    except Exception as e:
        logger.warning(f"Error getting from cache: {e}")
    return None


def set_cached(key: str, value: Any, ttl: int = 3600) -> bool:
    """Set value in cache with TTL (time to live in seconds)"""
    client = get_redis_client()
    if not client:
        return False

    try:
        client.setex(key, ttl, json.dumps(value, default=str))
        return True
    except Exception as e:
        logger.warning(f"Error setting cache: {e}")
    return False
