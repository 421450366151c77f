"""Marketplace event records and the line-delimited event log."""

import json
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Tuple

from core.utils import read_jsonl, safe_makedirs

logger = logging.getLogger(__name__)


class EventKind(str, Enum):
    """Logged event types."""

    IMPRESSION = "impression"
    CLICK = "click"
    CONVERSION = "conversion"


@dataclass(slots=True)
class Event:
    """One logged event.

    Conversions carry the timestamp of the impression they stem from plus the reporting
    delay; they become visible at report_tick. rendered_assets is empty for non-DCO ads.
    """

    timestamp: int
    kind: EventKind
    user_segment_keys: Dict[str, str]
    ad_id: str
    rendered_assets: Tuple[str, ...] = ()
    price_paid: float | None = None
    conversion_delay: int | None = None
    bucket: str = ""
    impression_id: int = -1

    @property
    def report_tick(self) -> int:
        return self.timestamp + (self.conversion_delay or 0)

    @property
    def is_dco(self) -> bool:
        return bool(self.rendered_assets)

    def to_record(self) -> dict:
        record = {
            "timestamp": self.timestamp,
            "kind": self.kind.value,
            "user_segment_keys": dict(self.user_segment_keys),
            "ad_id": self.ad_id,
            "rendered_assets": list(self.rendered_assets),
            "bucket": self.bucket,
            "impression_id": self.impression_id,
        }
        if self.price_paid is not None:
            record["price_paid"] = self.price_paid
        if self.conversion_delay is not None:
            record["conversion_delay"] = self.conversion_delay
        return record

    @classmethod
    def from_record(cls, record: dict) -> "Event":
        """Build from a log record; unknown extra fields are ignored."""
        return cls(
            timestamp=int(record["timestamp"]),
            kind=EventKind(record["kind"]),
            user_segment_keys={str(k): str(v) for k, v in record.get("user_segment_keys", {}).items()},
            ad_id=str(record["ad_id"]),
            rendered_assets=tuple(str(a) for a in record.get("rendered_assets", [])),
            price_paid=record.get("price_paid"),
            conversion_delay=record.get("conversion_delay"),
            bucket=str(record.get("bucket", "")),
            impression_id=int(record.get("impression_id", -1)),
        )


class EventLog:
    """Append-only event log, kept in memory and optionally mirrored to a file."""

    def __init__(self, path: str | Path | None = None):
        self.events: List[Event] = []
        self.path = Path(path) if path is not None else None
        self._fh = None
        if self.path is not None:
            safe_makedirs(self.path.parent)
            self._fh = open(self.path, "w")

    def append(self, event: Event) -> None:
        self.events.append(event)
        if self._fh is not None:
            self._fh.write(json.dumps(event.to_record(), sort_keys=True))
            self._fh.write("\n")

    def extend(self, events: Iterable[Event]) -> None:
        for event in events:
            self.append(event)

    @property
    def closed(self) -> bool:
        return self._fh is None

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None
            logger.info(f"Event log written: {self.path} ({len(self.events)} events)")

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self) -> Iterator[Event]:
        return iter(self.events)


def read_events(path: str | Path) -> List[Event]:
    """Load an event log file."""
    events = [Event.from_record(r) for r in read_jsonl(path)]
    logger.info(f"Read {len(events)} events from {path}")
    return events
