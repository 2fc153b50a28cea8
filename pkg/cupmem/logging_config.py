"""
Logging configuration for cupmem
Structured logging with optional Google Cloud Logging integration.

Console output goes to stderr: stdout carries the CLI's structured records.
"""
import json
import logging
import os
import sys
from datetime import datetime, timezone
from typing import Any, Optional

# Try to import Google Cloud Logging
try:
    import google.cloud.logging
    from google.cloud.logging.handlers import CloudLoggingHandler
    GCP_LOGGING_AVAILABLE = True
except ImportError:
    GCP_LOGGING_AVAILABLE = False
    CloudLoggingHandler = None

# Try to import Google Cloud Error Reporting
try:
    from google.cloud import error_reporting
    GCP_ERROR_REPORTING_AVAILABLE = True
except ImportError:
    GCP_ERROR_REPORTING_AVAILABLE = False
    error_reporting = None

# Initialized by configure_logging when GCP logging is enabled
error_client: Optional[Any] = None

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def configure_logging(level: Optional[str] = None, settings=None) -> None:
    """Configure the root logger. Safe to call more than once."""
    global error_client

    if settings is None:
        from cupmem.config import get_settings
        settings = get_settings()

    environment = settings.environment
    log_level = (level or settings.log_level or ('INFO' if environment == 'production' else 'WARNING')).upper()

    root_logger = logging.getLogger()
    root_logger.setLevel(getattr(logging, log_level, logging.INFO))
    root_logger.handlers = []

    formatter = logging.Formatter(LOG_FORMAT)

    # Console handler (always enabled)
    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setLevel(root_logger.level)
    console_handler.setFormatter(formatter)
    root_logger.addHandler(console_handler)

    # File handler for local development
    if environment == 'development' and settings.log_dir:
        os.makedirs(settings.log_dir, exist_ok=True)
        file_handler = logging.FileHandler(
            os.path.join(settings.log_dir, f'cupmem_{environment}.log'), encoding='utf-8'
        )
        file_handler.setLevel(root_logger.level)
        file_handler.setFormatter(formatter)
        root_logger.addHandler(file_handler)

    if settings.use_gcp_logging and GCP_LOGGING_AVAILABLE:
        try:
            client = google.cloud.logging.Client(project=settings.gcp_project_id)
            cloud_handler = CloudLoggingHandler(client, name=settings.gcp_service_name)
            cloud_handler.setLevel(logging.INFO)  # Only send INFO and above to Cloud Logging
            root_logger.addHandler(cloud_handler)
            logging.getLogger(__name__).info("Google Cloud Logging enabled")
        except Exception as e:
            logging.getLogger(__name__).warning(
                f"Failed to initialize Google Cloud Logging: {e}. Using local logging only."
            )

    if settings.use_gcp_logging and GCP_ERROR_REPORTING_AVAILABLE:
        try:
            error_client = error_reporting.Client(project=settings.gcp_project_id)
        except Exception as e:
            logging.getLogger(__name__).warning(f"Failed to initialize GCP Error Reporting: {e}")
            error_client = None

    # Suppress noisy loggers
    logging.getLogger('uvicorn.access').setLevel(logging.WARNING)
    logging.getLogger('sqlalchemy.engine').setLevel(logging.WARNING)
    logging.getLogger('httpx').setLevel(logging.WARNING)
    logging.getLogger('google').setLevel(logging.WARNING)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


class MetricsLogger:
    """Structured metrics logger for judge requests, store operations and engine events"""

    def __init__(self, logger_name: str = 'cupmem.metrics'):
        self.logger = logging.getLogger(logger_name)

    def log_api_request(
        self,
        method: str,
        path: str,
        status_code: int,
        duration_ms: float,
        **kwargs
    ):
        """Log judge API request with metrics"""
        metrics = {
            'type': 'api_request',
            'method': method,
            'path': path,
            'status_code': status_code,
            'duration_ms': round(duration_ms, 2),
            'timestamp': _now(),
        }
        metrics.update(kwargs)

        if status_code >= 500:
            self.logger.error(f"API Request: {json.dumps(metrics)}")
            if error_client:
                try:
                    error_client.report(f"API Error {status_code}: {method} {path}")
                except Exception:
                    pass
        elif status_code >= 400:
            self.logger.warning(f"API Request: {json.dumps(metrics)}")
        else:
            self.logger.info(f"API Request: {json.dumps(metrics)}")

    def log_store_op(
        self,
        operation: str,
        table: str,
        duration_ms: float,
        rows_affected: Optional[int] = None,
        **kwargs
    ):
        """Log a store mutation with timing"""
        # Slow operations are always reported
        if duration_ms <= 1000 and not self.logger.isEnabledFor(logging.DEBUG):
            return
        metrics = {
            'type': 'store_op',
            'operation': operation,
            'table': table,
            'duration_ms': round(duration_ms, 2),
            'timestamp': _now(),
        }
        if rows_affected is not None:
            metrics['rows_affected'] = rows_affected
        metrics.update({k: v for k, v in kwargs.items() if v is not None})

        if duration_ms > 1000:
            self.logger.warning(f"Slow Store Operation: {json.dumps(metrics)}")
        else:
            self.logger.debug(f"Store Operation: {json.dumps(metrics)}")

    def log_business_event(self, event_type: str, **kwargs):
        """Log engine events (ingests, adjudications, evaluation runs)"""
        if not self.logger.isEnabledFor(logging.INFO):
            return
        metrics = {
            'type': 'business_event',
            'event_type': event_type,
            'timestamp': _now(),
        }
        metrics.update(kwargs)
        self.logger.info(f"Business Event: {json.dumps(metrics, default=str)}")

    def log_ingest(self, report, adjudicator: Optional[str] = None):
        """Log one session's ingest report"""
        self.log_business_event(
            "session_ingested",
            session_id=report.session_id,
            candidates=report.candidates_extracted,
            proposals=len(report.proposals),
            items_written=len(report.items_written),
            items_staled=len(report.items_staled),
            markers_set=len(report.markers_set),
            adjudicator=adjudicator,
        )

    def log_adjudication(self, item_id: str, verdict: str, adjudicator: str, rule_id: Optional[str] = None):
        if not self.logger.isEnabledFor(logging.DEBUG):
            return
        metrics = {
            'type': 'adjudication',
            'item_id': item_id,
            'verdict': verdict,
            'adjudicator': adjudicator,
            'rule_id': rule_id,
            'timestamp': _now(),
        }
        self.logger.debug(f"Adjudication: {json.dumps(metrics)}")

    def log_error(
        self,
        error_type: str,
        error_message: str,
        exc_info: bool = False,
        **kwargs
    ):
        """Log errors with context and report to GCP Error Reporting"""
        metrics = {
            'type': 'error',
            'error_type': error_type,
            'error_message': error_message,
            'timestamp': _now(),
        }
        metrics.update(kwargs)

        self.logger.error(f"Error: {json.dumps(metrics, default=str)}", exc_info=exc_info)

        if error_client:
            try:
                error_client.report(f"{error_type}: {error_message}")
            except Exception:
                # Don't fail if error reporting fails
                pass


# Global metrics logger instance
metrics = MetricsLogger()
