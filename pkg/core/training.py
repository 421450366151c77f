"""Auxiliary CVR model training stream: labeling, downsampling and periodic training.

Impressions are negatives, conversions positives. Conversions are not joined to their
impressions, so a converting impression also stays in the negative stream. Negatives are
kept with probability 1/r_ds; positives are never dropped. Clicks are not used.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Iterable, Iterator, List, Sequence

import numpy as np

from core.catalog import Catalog, assets_feature
from core.events import Event, EventKind
from core.offset import AdFeature, ModelState
from core.utils import keyed_rng

logger = logging.getLogger(__name__)


@dataclass(slots=True)
class TrainingExample:
    """One labeled event; timestamp is the tick the event became visible."""

    timestamp: int
    user_features: Dict[str, str]
    ad_features: List[AdFeature]
    label: int
    ad_id: str


def label_and_sample(
    events: Iterable[Event],
    r_ds: float,
    rng: np.random.Generator,
    catalog: Catalog | None = None,
) -> Iterator[TrainingExample]:
    """Turn events into training examples, Bernoulli(1/r_ds) downsampling impressions."""
    if r_ds < 1:
        raise ValueError(f"downsampling factor must be >= 1, got {r_ds}")
    keep = 1.0 / r_ds
    for event in events:
        if event.kind == EventKind.CLICK:
            continue
        if event.kind == EventKind.IMPRESSION:
            if rng.random() >= keep:
                continue
            label = 0
        else:
            label = 1
        if catalog is not None:
            ad_features = catalog.ad_features(event.ad_id, event.rendered_assets)
        else:
            ad_features = [("ad", [event.ad_id], [1.0]), assets_feature(event.rendered_assets)]
        yield TrainingExample(
            timestamp=event.report_tick,
            user_features=dict(event.user_segment_keys),
            ad_features=ad_features,
            label=label,
            ad_id=event.ad_id,
        )


def train_period(model: ModelState, examples: Sequence[TrainingExample]) -> ModelState:
    """Train on a batch in timestamp order and return a frozen snapshot."""
    if not examples:
        return model.snapshot()

    skipped_before = model.diagnostics["skipped_events"]
    ordered = sorted(examples, key=lambda ex: ex.timestamp)
    user_features = model.structure.user_features
    positives = 0
    for example in ordered:
        user = {name: example.user_features.get(name) for name in user_features}
        if model.train_event(user, example.ad_features, float(example.label)) and example.label == 1:
            model.record_conversion(example.ad_id)
            positives += 1

    model.version += 1
    skipped = model.diagnostics["skipped_events"] - skipped_before
    if skipped:
        logger.warning(f"Period {model.version}: skipped {skipped} events with non-finite gradients")
    logger.debug(f"Period {model.version}: trained {len(ordered)} examples ({positives} positives)")
    return model.snapshot()


class AuxiliaryTrainer:
    """Periodic trainer of the auxiliary combination CVR model."""

    def __init__(self, config, catalog: Catalog, model: ModelState | None = None, telemetry=None):
        self.config = config
        self.catalog = catalog
        self.model = model if model is not None else ModelState.from_config(config)
        self.period_ticks = config.training.period_ticks
        self.r_ds = config.training.downsample_factor
        self.buckets = set(config.training.buckets)
        self.rng = keyed_rng(config.seed, "downsample")
        self.telemetry = telemetry
        self.snapshot = self.model.snapshot()

    def accepts(self, event: Event) -> bool:
        """Events from the configured training buckets (untagged events always)."""
        return not event.bucket or event.bucket in self.buckets

    def train_batch(self, events: Sequence[Event]) -> ModelState:
        """Train one period's released events and refresh the snapshot."""
        selected = [e for e in events if self.accepts(e)]
        examples = list(label_and_sample(selected, self.r_ds, self.rng, self.catalog))
        skipped_before = self.model.diagnostics["skipped_events"]
        self.snapshot = train_period(self.model, examples)
        if self.telemetry is not None:
            self.telemetry.record_training(
                examples, self.model.diagnostics["skipped_events"] - skipped_before, len(self.model.vectors)
            )
        return self.snapshot

    def train_log(self, events: Sequence[Event], until_tick: int) -> ModelState:
        """Replay a log period by period over report ticks [0, until_tick)."""
        batches: Dict[int, List[Event]] = {}
        for event in events:
            tick = event.report_tick
            if 0 <= tick < until_tick:
                batches.setdefault(tick // self.period_ticks, []).append(event)
        n_periods = -(-until_tick // self.period_ticks)
        for period in range(n_periods):
            self.train_batch(batches.get(period, []))
        logger.info(f"Trained {n_periods} periods up to tick {until_tick} (model v{self.model.version})")
        return self.snapshot
