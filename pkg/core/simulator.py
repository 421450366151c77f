"""A/B marketplace simulator: serve, log, train and regenerate tables tick by tick.

Every bucket ranks with the same shared ranking model; buckets differ only in where the
combination distribution of a winning DCO ad comes from.
"""

import heapq
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from core.catalog import Ad, DcoAd, save_catalog
from core.events import Event, EventKind, EventLog
from core.metrics import ExperimentReport, compute_reports, filter_scope
from core.p2d import DistributionTable, P2DGenerator, softmax_distribution, uniform_distribution
from core.sampling import AliasSampler
from core.serving import TableHolder, eligible_listings, serve
from core.snapshot import save_model
from core.training import AuxiliaryTrainer
from core.utils import keyed_rng, safe_makedirs
from core.world import WorldModel

logger = logging.getLogger(__name__)

CONVERSION_DCO = "conversion-dco"
UNIFORM = "uniform"
CTR_COUNTING = "ctr-counting"


def uniform_policy(ad: Ad) -> np.ndarray:
    """Uniform distribution over the ad's combinations."""
    n = ad.n_combinations if isinstance(ad, DcoAd) else 1
    return uniform_distribution(n)


def ctr_counting_policy(
    clicks: Sequence[float],
    impressions: Sequence[float],
    beta: float,
    lambda_mix: float,
    prior_clicks: float = 1.0,
    prior_impressions: float = 2.0,
) -> np.ndarray:
    """Simplified CTR baseline: smoothed counting CTR per combination through the SoftMax."""
    clicks = np.asarray(clicks, dtype=float)
    impressions = np.asarray(impressions, dtype=float)
    if np.any(clicks < 0) or np.any(impressions < 0):
        raise ValueError("counters must be non-negative")
    estimates = (clicks + prior_clicks) / (impressions + prior_impressions)
    return softmax_distribution(estimates, beta, lambda_mix)


@dataclass
class Bucket:
    """A/B bucket: traffic share and the table its DCO winners are rendered from."""

    name: str
    share: float
    holder: TableHolder = field(default_factory=TableHolder)


class DelayQueue:
    """Pending conversions keyed by report tick."""

    def __init__(self):
        self._pending: Dict[int, List[Event]] = {}
        self._ticks: List[int] = []

    def push(self, event: Event) -> None:
        tick = event.report_tick
        if tick not in self._pending:
            self._pending[tick] = []
            heapq.heappush(self._ticks, tick)
        self._pending[tick].append(event)

    def release(self, tick: int) -> List[Event]:
        """Pop every conversion reported at or before tick, in report order."""
        due: List[Event] = []
        while self._ticks and self._ticks[0] <= tick:
            due.extend(self._pending.pop(heapq.heappop(self._ticks)))
        return due

    def __len__(self) -> int:
        return sum(len(events) for events in self._pending.values())


class RankingModel:
    """Shared pCTR / pCONV estimates per (ad, segment): traffic counts smoothed toward world priors."""

    def __init__(self, world: WorldModel, prior_strength: float):
        self.ad_ids = [listing.ad_id for listing in world.listings]
        self.ad_index = {ad_id: i for i, ad_id in enumerate(self.ad_ids)}
        shape = (len(world.segments), len(self.ad_ids))
        self.prior_ctr = np.zeros(shape)
        self.prior_cvr = np.zeros(shape)
        for a, ad_id in enumerate(self.ad_ids):
            for s in range(len(world.segments)):
                self.prior_ctr[s, a], self.prior_cvr[s, a] = world.mean_rates(ad_id, s)
        self.strength = prior_strength
        self.impressions = np.zeros(shape)
        self.clicks = np.zeros(shape)
        self.conversions = np.zeros(shape)
        self.pctr = self.prior_ctr.copy()
        self.pconv = np.zeros(shape)
        self.refresh()

    def observe(self, kind: EventKind, ad_id: str, seg_idx: int) -> None:
        a = self.ad_index[ad_id]
        if kind == EventKind.IMPRESSION:
            self.impressions[seg_idx, a] += 1
        elif kind == EventKind.CLICK:
            self.clicks[seg_idx, a] += 1
        else:
            self.conversions[seg_idx, a] += 1

    def refresh(self) -> None:
        k = self.strength
        self.pctr = (self.clicks + k * self.prior_ctr) / (self.impressions + k)
        prior_clicks = k * self.prior_ctr
        with np.errstate(divide="ignore", invalid="ignore"):
            prior_pconv = np.where(self.prior_ctr > 0, self.prior_cvr / self.prior_ctr, 0.0)
            pconv = (self.conversions + prior_clicks * prior_pconv) / (self.clicks + prior_clicks)
        # conversion-given-click is a probability even with post-view conversions
        self.pconv = np.clip(np.nan_to_num(pconv), 0.0, 1.0)

    def estimates(self, seg_idx: int) -> Tuple[np.ndarray, np.ndarray]:
        return self.pctr[seg_idx], self.pconv[seg_idx]


@dataclass
class ExperimentResult:
    """Everything a finished run produced."""

    config: object
    world: WorldModel
    events: List[Event]
    tables: Dict[str, DistributionTable]
    model: object
    expected_cvr: Dict[int, float]
    ticks: int
    report: ExperimentReport | None = None


class MarketplaceSimulator:
    """Runs the serve / log / train / P2D loop over all buckets."""

    def __init__(self, config, world: WorldModel | None = None, out_dir: str | Path | None = None, telemetry=None):
        self.config = config
        self.world = world if world is not None else WorldModel.from_config(config)
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.telemetry = telemetry
        self.segment_keys = list(config.segments.keys)
        self.period_ticks = config.training.period_ticks
        self.score_noise = config.score_noise

        self.buckets = [Bucket(b.name, b.share) for b in config.buckets]
        self.bucket_sampler = AliasSampler([b.share for b in self.buckets])
        self.bucket_by_name = {b.name: b for b in self.buckets}

        self.arrival_rng = keyed_rng(config.seed, "arrivals")
        self.noise_rng = keyed_rng(config.seed, "score-noise")
        self.render_rng = keyed_rng(config.seed, "render")
        self.outcome_rng = keyed_rng(config.seed, "outcomes")

        self.queue = DelayQueue()
        self.trainer = AuxiliaryTrainer(config, self.world.catalog, telemetry=telemetry)
        self.p2d = P2DGenerator(config)
        self.ranking = RankingModel(self.world, config.ranking.prior_strength)

        self.ctr_counts: Dict[Tuple[str, int], Tuple[np.ndarray, np.ndarray]] = {
            (ad.ad_id, s): (np.zeros(ad.n_combinations), np.zeros(ad.n_combinations))
            for ad in self.world.catalog.dco_ads()
            for s in range(len(self.world.segments))
        }
        self.combination_lookup = {
            ad_id: {combo: i for i, combo in enumerate(combos)} for ad_id, combos in self.world.combinations.items()
        }

        self.expected_cvr: Dict[int, float] = {}
        self.spend_today: Dict[str, float] = {}
        self.exhausted: set = set()
        self.next_impression_id = 0
        self.period_start = 0
        self.periods_trained = 0

        self._install_initial_tables()
        self.log = EventLog(self.out_dir / "events.jsonl" if self.out_dir is not None else None)

    def _install_initial_tables(self) -> None:
        if UNIFORM in self.bucket_by_name:
            table = DistributionTable(params={"policy": UNIFORM})
            for ad in self.world.catalog.dco_ads():
                combos = self.world.combinations[ad.ad_id]
                for segment in self.world.segments:
                    table.set(ad.ad_id, segment, combos, uniform_policy(ad))
            self.bucket_by_name[UNIFORM].holder.swap(table)
        if CTR_COUNTING in self.bucket_by_name:
            self.bucket_by_name[CTR_COUNTING].holder.swap(self.ctr_table())
        if CONVERSION_DCO in self.bucket_by_name:
            self.bucket_by_name[CONVERSION_DCO].holder.swap(self.p2d.generate(self.trainer.snapshot, self.world.catalog))

    def ctr_table(self) -> DistributionTable:
        """Current simplified CTR-counting table from the ctr-counting bucket's counters."""
        cfg = self.config.ctr_counting
        table = DistributionTable(
            params={"policy": CTR_COUNTING, "beta": cfg.beta, "lambda_mix": cfg.lambda_mix}
        )
        for (ad_id, s), (clicks, impressions) in self.ctr_counts.items():
            probs = ctr_counting_policy(
                clicks, impressions, cfg.beta, cfg.lambda_mix, cfg.prior_clicks, cfg.prior_impressions
            )
            table.set(ad_id, self.world.segments[s], self.world.combinations[ad_id], probs)
        return table

    # -- one tick --------------------------------------------------------------------

    def _budget_day(self, tick: int) -> None:
        if self.world.daily_budget is not None and tick % self.world.ticks_per_day == 0:
            self.spend_today.clear()
            self.exhausted.clear()

    def _charge(self, ad_id: str, price: float) -> None:
        if self.world.daily_budget is None:
            return
        spent = self.spend_today.get(ad_id, 0.0) + price
        self.spend_today[ad_id] = spent
        if spent >= self.world.daily_budget:
            self.exhausted.add(ad_id)
            logger.debug(f"{ad_id}: daily budget exhausted")

    def _emit(self, event: Event, seg_idx: int) -> None:
        self.log.append(event)
        self.ranking.observe(event.kind, event.ad_id, seg_idx)
        if self.telemetry is not None:
            self.telemetry.record_event(event)

    def step(self, tick: int) -> List[Event]:
        """Serve one tick of arrivals, then release the conversions due at this tick."""
        self._budget_day(tick)
        first = len(self.log)
        world = self.world
        n_listings = len(world.listings)
        sigma = self.score_noise

        for _ in range(int(self.arrival_rng.poisson(self.config.arrivals_per_tick))):
            seg_idx, user = world.sample_user(self.arrival_rng)
            bucket = self.buckets[self.bucket_sampler.draw(self.arrival_rng)]
            pctr, pconv = self.ranking.estimates(seg_idx)
            if sigma > 0:
                noise = self.noise_rng.lognormal(-0.5 * sigma * sigma, sigma, size=n_listings)
            else:
                noise = np.ones(n_listings)
            candidates = []
            for listing in eligible_listings(world.listings, self.exhausted):
                i = self.ranking.ad_index[listing.ad_id]
                candidates.append((listing, float(pctr[i] * noise[i]), float(pconv[i])))
            table = bucket.holder.current()
            outcome = serve(candidates, user, self.segment_keys, table, self.render_rng, world.catalog)
            if outcome is None:
                continue
            self._record_impression(tick, bucket, seg_idx, outcome, table)

        for conversion in self.queue.release(tick):
            self._emit(conversion, world.segment_index[tuple(conversion.user_segment_keys[k] for k in self.segment_keys)])
        return self.log.events[first:]

    def _record_impression(self, tick: int, bucket: Bucket, seg_idx: int, outcome, table: DistributionTable) -> None:
        world = self.world
        ad_id = outcome.winner
        combination = outcome.rendered_combination or ()
        c_idx = self.combination_lookup[ad_id].get(combination, 0)
        truth = world.truth[ad_id]
        impression_id = self.next_impression_id
        self.next_impression_id += 1

        segment_keys = dict(zip(self.segment_keys, outcome.segment))
        base = dict(
            timestamp=tick,
            user_segment_keys=segment_keys,
            ad_id=ad_id,
            rendered_assets=tuple(combination),
            bucket=bucket.name,
            impression_id=impression_id,
        )
        self._emit(Event(kind=EventKind.IMPRESSION, **base), seg_idx)
        distribution = table.distribution(ad_id, outcome.segment) if combination else None
        self.expected_cvr[impression_id] = world.expected_cvr(ad_id, seg_idx, distribution)

        clicked = self.outcome_rng.random() < truth.true_ctr[seg_idx, c_idx]
        converted = self.outcome_rng.random() < truth.true_cvr[seg_idx, c_idx]
        if clicked:
            self._emit(Event(kind=EventKind.CLICK, price_paid=outcome.price, **base), seg_idx)
            self._charge(ad_id, outcome.price)
        if converted:
            delay = world.sample_delay(self.outcome_rng)
            self.queue.push(Event(kind=EventKind.CONVERSION, conversion_delay=delay, **base))

        if bucket.name == CTR_COUNTING and combination:
            clicks, impressions = self.ctr_counts[(ad_id, seg_idx)]
            impressions[c_idx] += 1
            if clicked:
                clicks[c_idx] += 1

    # -- training periods --------------------------------------------------------------

    def end_period(self) -> None:
        """Train on the period's visible events and swap in regenerated tables."""
        batch = self.log.events[self.period_start:]
        self.period_start = len(self.log)
        snapshot = self.trainer.train_batch(batch)
        self.periods_trained += 1

        if CONVERSION_DCO in self.bucket_by_name:
            table = self.p2d.generate(snapshot, self.world.catalog)
            self.bucket_by_name[CONVERSION_DCO].holder.swap(table)
            if self.telemetry is not None:
                self.telemetry.record_table(CONVERSION_DCO, len(table))
        if CTR_COUNTING in self.bucket_by_name:
            table = self.ctr_table()
            self.bucket_by_name[CTR_COUNTING].holder.swap(table)
            if self.telemetry is not None:
                self.telemetry.record_table(CTR_COUNTING, len(table))
        if self.config.ranking.refresh_with_traffic:
            self.ranking.refresh()

        every = self.config.output.snapshot_every
        if self.out_dir is not None and every and self.periods_trained % every == 0:
            save_model(snapshot, self.out_dir / "snapshots" / f"model-v{snapshot.version:06d}.jsonl")

    def run(self) -> ExperimentResult:
        ticks = self.config.ticks
        logger.info(
            f"Simulating {ticks} ticks, {self.config.arrivals_per_tick} arrivals/tick, "
            f"buckets {[(b.name, b.share) for b in self.buckets]}"
        )
        try:
            for tick in range(ticks):
                self.step(tick)
                if (tick + 1) % self.period_ticks == 0:
                    self.end_period()
                if (tick + 1) % (self.period_ticks * 100) == 0:
                    logger.info(f"Tick {tick + 1}/{ticks}: {len(self.log)} events, model v{self.trainer.model.version}")
            if ticks % self.period_ticks:
                self.end_period()
        finally:
            self.log.close()
        logger.info(f"Simulation done: {len(self.log)} events, {len(self.queue)} conversions still pending")

        tables = {b.name: b.holder.current() for b in self.buckets}
        result = ExperimentResult(
            config=self.config,
            world=self.world,
            events=self.log.events,
            tables=tables,
            model=self.trainer.snapshot,
            expected_cvr=self.expected_cvr,
            ticks=ticks,
        )
        if self.out_dir is not None:
            self.save_artifacts(result)
        return result

    def save_artifacts(self, result: ExperimentResult) -> None:
        safe_makedirs(self.out_dir)
        save_model(result.model, self.out_dir / "model.jsonl")
        catalog = self.world.catalog
        catalog.model_version = result.model.version
        save_catalog(catalog, self.out_dir / "catalog.jsonl")
        for name, table in result.tables.items():
            table.save(self.out_dir / f"table-{name}.jsonl")


def oracle_cvr(
    world: WorldModel,
    impressions: Sequence[Event],
    table: DistributionTable | None,
) -> float | None:
    """Expected CVR of the impressions' (ad, segment) mix rendered from a frozen table.

    table=None renders uniformly. None when there are no impressions.
    """
    if not impressions:
        return None
    total = 0.0
    for event in impressions:
        segment = tuple(event.user_segment_keys[k] for k in world.segment_keys)
        seg_idx = world.segment_index[segment]
        distribution = table.distribution(event.ad_id, segment) if table is not None else None
        total += world.expected_cvr(event.ad_id, seg_idx, distribution)
    return total / len(impressions)


def served_oracle_cvr(expected_cvr: Dict[int, float], impressions: Sequence[Event]) -> float | None:
    """Expected CVR of the impressions under the distributions that actually served them."""
    if not impressions:
        return None
    return sum(expected_cvr[e.impression_id] for e in impressions) / len(impressions)


def build_report(
    result: ExperimentResult,
    window: Tuple[int | None, int | None] | None = None,
    treatment: str | None = None,
) -> ExperimentReport:
    """Bucket reports and lifts of a finished run, with final-table oracle CVRs."""
    config = result.config
    window = window if window is not None else config.report_window()
    treatment = treatment or config.report.treatment
    scoped = filter_scope(result.events, *window)
    oracles = {}
    for name, table in result.tables.items():
        impressions = [e for e in scoped if e.bucket == name and e.kind == EventKind.IMPRESSION]
        oracles[name] = oracle_cvr(result.world, impressions, table)
    return compute_reports(result.events, config.bucket_shares(), window, treatment, oracles)


def run_experiment(config, out_dir: str | Path | None = None, telemetry=None) -> ExperimentResult:
    """Build the world from the config, simulate every tick and report per bucket."""
    simulator = MarketplaceSimulator(config, out_dir=out_dir, telemetry=telemetry)
    result = simulator.run()
    result.report = build_report(result)
    return result
