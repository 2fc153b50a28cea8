"""
Google Cloud Monitoring integration
Exports engine counters (ingests, verdicts, evaluation pass rates) when configured.
"""
import logging
from datetime import datetime, timezone
from typing import Dict, Optional

# Try to import Google Cloud Monitoring
try:
    from google.cloud import monitoring_v3
    from google.cloud.monitoring_v3 import MetricServiceClient
    GCP_MONITORING_AVAILABLE = True
except ImportError:
    GCP_MONITORING_AVAILABLE = False
    monitoring_v3 = None
    MetricServiceClient = None

from cupmem.config import get_settings

logger = logging.getLogger(__name__)

METRIC_PREFIX = 'custom.googleapis.com/cupmem'


class CloudMonitoringExporter:
    """Export metrics to Google Cloud Monitoring"""

    def __init__(self, project_id: str, service_name: str = 'cupmem'):
        self.project_id = project_id
        self.service_name = service_name
        self.client = None
        self.project_name: Optional[str] = None
        try:
            self.client = MetricServiceClient()
            self.project_name = f"projects/{project_id}"
        except Exception as e:
            logger.warning(f"Failed to initialize Cloud Monitoring: {e}")

    def write_time_series(
        self,
        metric_type: str,
        value: float,
        labels: Optional[Dict[str, str]] = None
    ):
        """Write a time series data point to Cloud Monitoring"""
        if not self.client or not self.project_name:
            return

        try:
            series = monitoring_v3.TimeSeries()
            series.metric.type = f"{METRIC_PREFIX}/{metric_type}"
            series.resource.type = "global"
            series.resource.labels["project_id"] = self.project_id

            if labels:
                for key, label_value in labels.items():
                    series.metric.labels[key] = str(label_value)

            now = datetime.now(timezone.utc)
            point = monitoring_v3.Point()
            point.value.double_value = float(value)
            point.interval.end_time.seconds = int(now.timestamp())
            point.interval.end_time.nanos = int((now.timestamp() % 1) * 1e9)
            series.points = [point]

            self.client.create_time_series(name=self.project_name, time_series=[series])
        except Exception as e:
            logger.debug(f"Failed to write metric to Cloud Monitoring: {e}")

    def record_api_request(self, method: str, path: str, status_code: int, duration_ms: float):
        labels = {'method': method, 'path': path, 'status_code': str(status_code)}
        self.write_time_series('judge/request_duration', duration_ms, labels)
        self.write_time_series('judge/request_count', 1, labels)

    def record_store_op(self, operation: str, table: str, duration_ms: float):
        labels = {'operation': operation, 'table': table}
        self.write_time_series('store/op_duration', duration_ms, labels)

    def record_ingest(self, items_written: int, items_staled: int, markers_set: int):
        self.write_time_series('ingest/session_count', 1)
        self.write_time_series('ingest/items_written', items_written)
        self.write_time_series('ingest/items_staled', items_staled)
        self.write_time_series('ingest/markers_set', markers_set)

    def record_verdict(self, verdict: str, adjudicator: str):
        self.write_time_series('adjudication/verdict_count', 1, {'verdict': verdict, 'adjudicator': adjudicator})

    def record_pass_rate(self, system: str, conflict_type: str, dimension: str, rate: float):
        labels = {'system': system, 'conflict_type': conflict_type, 'dimension': dimension}
        self.write_time_series('evaluation/pass_rate', rate, labels)


def _build_exporter() -> Optional[CloudMonitoringExporter]:
    settings = get_settings()
    if settings.use_gcp_monitoring and GCP_MONITORING_AVAILABLE and settings.gcp_project_id:
        return CloudMonitoringExporter(settings.gcp_project_id, settings.gcp_service_name)
    return None


# Global monitoring exporter instance (None unless configured)
monitoring = _build_exporter()
