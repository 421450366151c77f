"""Prometheus run telemetry, written as a textfile at the end of a run."""

import logging
from pathlib import Path
from typing import Sequence

from prometheus_client import CollectorRegistry, Counter, Gauge, write_to_textfile

from core.utils import safe_makedirs

logger = logging.getLogger(__name__)


class Telemetry:
    """Prometheus counters and gauges for one run, in a private registry."""

    def __init__(self):
        self.registry = CollectorRegistry()

        # Traffic
        self.events_total = Counter(
            "dco_events_total", "Logged events", ["bucket", "kind"], registry=self.registry
        )
        self.spend_total = Counter("dco_spend_total", "Click spend", ["bucket"], registry=self.registry)

        # Training
        self.training_examples_total = Counter(
            "dco_training_examples_total", "Training examples by label", ["label"], registry=self.registry
        )
        self.skipped_events_total = Counter(
            "dco_skipped_events_total", "Events skipped for non-finite gradients", registry=self.registry
        )
        self.training_periods_total = Counter(
            "dco_training_periods_total", "Training periods run", registry=self.registry
        )
        self.model_vectors = Gauge("dco_model_vectors", "Feature-value vectors in the model", registry=self.registry)

        # Tables
        self.tables_generated_total = Counter(
            "dco_tables_generated_total", "Distribution tables generated", ["policy"], registry=self.registry
        )
        self.table_entries = Gauge(
            "dco_table_entries", "Entries in the current table", ["policy"], registry=self.registry
        )

    def record_event(self, event) -> None:
        """Count one logged event."""
        bucket = event.bucket or "none"
        self.events_total.labels(bucket=bucket, kind=event.kind.value).inc()
        if event.price_paid is not None:
            self.spend_total.labels(bucket=bucket).inc(event.price_paid)

    def record_training(self, examples: Sequence, skipped: int, n_vectors: int) -> None:
        """Count one training period."""
        positives = sum(1 for ex in examples if ex.label == 1)
        self.training_examples_total.labels(label="1").inc(positives)
        self.training_examples_total.labels(label="0").inc(len(examples) - positives)
        self.skipped_events_total.inc(skipped)
        self.training_periods_total.inc()
        self.model_vectors.set(n_vectors)

    def record_table(self, policy: str, n_entries: int) -> None:
        """Count one generated table."""
        self.tables_generated_total.labels(policy=policy).inc()
        self.table_entries.labels(policy=policy).set(n_entries)

    def write(self, path: str | Path) -> Path:
        """Dump the registry in the text exposition format."""
        path = Path(path)
        safe_makedirs(path.parent)
        write_to_textfile(str(path), self.registry)
        logger.info(f"Telemetry written to {path}")
        return path
