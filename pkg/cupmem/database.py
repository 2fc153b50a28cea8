"""
Engine and session factory for memory stores.

Each MemoryStore owns one engine. The default URL is a private in-memory
SQLite database; any SQLAlchemy URL may be configured instead.
"""
import logging
import os
import time

from dotenv import load_dotenv
from sqlalchemy import create_engine, event
from sqlalchemy.engine import Engine
from sqlalchemy.orm import declarative_base, sessionmaker
from sqlalchemy.pool import StaticPool

logger = logging.getLogger(__name__)

DEFAULT_DATABASE_URL = "sqlite://"

Base = declarative_base()


def load_environment() -> None:
    """Load the environment-specific .env file, falling back to .env"""
    env = os.getenv('ENVIRONMENT', 'development')
    env_file = f'.env.{env}'
    if os.path.exists(env_file):
        load_dotenv(env_file)
        logger.debug(f"Loaded environment file: {env_file}")
    else:
        load_dotenv()


def make_engine(url: str = DEFAULT_DATABASE_URL, echo: bool = False) -> Engine:
    if url.startswith("sqlite"):
        # one connection shared by the store; memory databases vanish otherwise
        engine = create_engine(
            url,
            poolclass=StaticPool,
            connect_args={"check_same_thread": False},
            echo=echo,
        )
    else:
        engine = create_engine(url, pool_pre_ping=True, pool_recycle=3600, echo=echo)

    if logger.isEnabledFor(logging.DEBUG):
        _attach_query_timing(engine)

    # registers the tables on Base.metadata
    from cupmem import models  # noqa: F401
    Base.metadata.create_all(engine)
    return engine


def make_session_factory(engine: Engine) -> sessionmaker:
    return sessionmaker(autocommit=False, autoflush=False, bind=engine, expire_on_commit=False)


def _attach_query_timing(engine: Engine) -> None:
    @event.listens_for(engine, "before_cursor_execute")
    def receive_before_cursor_execute(conn, cursor, statement, parameters, context, executemany):
        conn.info.setdefault('query_start_time', []).append(time.time())
        logger.debug(f"Query: {statement[:100]}...")

    @event.listens_for(engine, "after_cursor_execute")
    def receive_after_cursor_execute(conn, cursor, statement, parameters, context, executemany):
        if conn.info.get('query_start_time'):
            total = time.time() - conn.info['query_start_time'].pop(-1)
            logger.debug(f"Query time: {total*1000:.2f}ms")
