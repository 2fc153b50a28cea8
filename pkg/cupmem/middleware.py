"""
Request timing for the judge app and operation timing for the memory store
"""
import logging
import time
from typing import Optional

from fastapi import Request
from starlette.middleware.base import BaseHTTPMiddleware

from cupmem.logging_config import metrics
from cupmem.monitoring import monitoring

logger = logging.getLogger(__name__)

# Set by ExternalAdjudicator so judge logs can be joined with ingest reports
ITEM_HEADER = "X-Cupmem-Item"

UNTIMED_PATHS = frozenset({'/api/health', '/docs', '/openapi.json', '/redoc'})


class MetricsMiddleware(BaseHTTPMiddleware):
    """Logs each judge request with its timing and the memory item it concerns"""

    async def dispatch(self, request: Request, call_next):
        if request.url.path in UNTIMED_PATHS:
            return await call_next(request)

        item_id = request.headers.get(ITEM_HEADER)
        start = time.perf_counter()
        try:
            response = await call_next(request)
        except Exception as e:
            metrics.log_api_request(
                method=request.method,
                path=request.url.path,
                status_code=500,
                duration_ms=(time.perf_counter() - start) * 1000,
                item_id=item_id,
                error=str(e),
            )
            raise

        duration_ms = (time.perf_counter() - start) * 1000
        metrics.log_api_request(
            method=request.method,
            path=request.url.path,
            status_code=response.status_code,
            duration_ms=duration_ms,
            item_id=item_id,
        )
        if monitoring:
            monitoring.record_api_request(request.method, request.url.path, response.status_code, duration_ms)

        response.headers["X-Response-Time"] = f"{duration_ms:.2f}ms"
        if item_id:
            response.headers[ITEM_HEADER] = item_id
        return response

class StoreOperationTimer:
    """Context manager timing one store mutation"""

    def __init__(self, operation: str, table: str, item_id: Optional[str] = None):
        self.operation = operation
        self.table = table
        self.item_id = item_id
        self.start = None

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        if self.start is not None:
            duration_ms = (time.perf_counter() - self.start) * 1000
            metrics.log_store_op(
                operation=self.operation,
                table=self.table,
                duration_ms=duration_ms,
                item_id=self.item_id,
                error=str(exc_val) if exc_val else None,
            )
            if monitoring:
                monitoring.record_store_op(
                    operation=self.operation,
                    table=self.table,
                    duration_ms=duration_ms,
                )
