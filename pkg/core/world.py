"""Synthetic marketplace: ads, traffic segments and ground-truth event rates."""

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from core.catalog import Ad, Catalog, DcoAd, enumerate_combinations, make_ad
from core.p2d import Segment, enumerate_segments
from core.sampling import AliasSampler
from core.serving import AdListing
from core.utils import keyed_rng

logger = logging.getLogger(__name__)

ATTRIBUTE_PREFIXES = ("Ti", "Im", "De", "Ct", "Lo")


@dataclass
class AdTruth:
    """Ground truth of one ad: segments x combinations rate matrices (one column for non-DCO)."""

    true_cvr: np.ndarray
    true_ctr: np.ndarray
    dominant_cvr: np.ndarray  # dominant combination index per segment
    dominant_ctr: np.ndarray


class WorldModel:
    """Generated marketplace with known CTR/CVR per (ad, combination, segment)."""

    def __init__(self, world_config, segment_keys: Sequence[str], segment_domains: Sequence[Sequence[str]]):
        self.config = world_config
        self.segment_keys = list(segment_keys)
        self.segments: List[Segment] = enumerate_segments(segment_domains)
        self.segment_index: Dict[Segment, int] = {seg: i for i, seg in enumerate(self.segments)}
        self.ticks_per_day = world_config.ticks_per_day
        self.daily_budget = world_config.pricing.daily_budget
        self.extra_user_features = {k: list(v) for k, v in world_config.extra_user_features.items()}

        rng = keyed_rng(world_config.seed, "world")
        self.arrival_probs = self._arrival_probs(rng)
        self.arrival_sampler = AliasSampler(self.arrival_probs)

        ads = self._generate_ads(rng)
        self.catalog = Catalog(ads, user_features=self.segment_keys)
        self.combinations: Dict[str, List[Tuple[str, ...]]] = {
            ad.ad_id: enumerate_combinations(ad) if isinstance(ad, DcoAd) else [()] for ad in ads
        }
        self.truth: Dict[str, AdTruth] = {ad.ad_id: self._generate_truth(ad, rng) for ad in ads}
        self.listings: List[AdListing] = sorted(
            (self._generate_listing(ad, rng) for ad in ads), key=lambda listing: listing.ad_id
        )
        logger.info(
            f"World: {len(self.catalog.dco_ads())} DCO ads, {len(ads) - len(self.catalog.dco_ads())} "
            f"non-DCO ads, {len(self.segments)} segments"
        )

    @classmethod
    def from_config(cls, config) -> "WorldModel":
        """World for an ExperimentConfig."""
        return cls(config.world, config.segments.keys, config.segments.key_domains())

    def _arrival_probs(self, rng: np.random.Generator) -> np.ndarray:
        n = len(self.segments)
        if self.config.segment_weights == "random":
            return rng.dirichlet(np.full(n, 2.0))
        return np.full(n, 1.0 / n)

    def _generate_ads(self, rng: np.random.Generator) -> List[Ad]:
        cfg = self.config
        ads: List[Ad] = []
        for i in range(cfg.dco_ads + cfg.non_dco_ads):
            is_dco = i < cfg.dco_ads
            ad_id = f"dco-{i}" if is_dco else f"ad-{i - cfg.dco_ads}"
            n_categories = min(len(cfg.categories), 1 + int(rng.integers(2)))
            categories = sorted(rng.choice(cfg.categories, size=n_categories, replace=False).tolist())
            standard = {
                "campaign": [f"camp-{i % cfg.campaigns}"],
                "advertiser": [f"adv-{i % cfg.advertisers}"],
                "category": categories,
            }
            attributes = []
            if is_dco:
                for k, size in enumerate(cfg.attribute_sizes):
                    prefix = ATTRIBUTE_PREFIXES[k] if k < len(ATTRIBUTE_PREFIXES) else f"At{k}"
                    attributes.append([f"{ad_id}:{prefix}{j}" for j in range(size)])
            ads.append(make_ad(ad_id, standard, attributes))
        return ads

    def _rates(self, rng, base: float, dominance: float, n_combinations: int) -> Tuple[np.ndarray, np.ndarray]:
        n_segments = len(self.segments)
        sigma = self.config.segment_effect
        multipliers = rng.lognormal(-0.5 * sigma * sigma, sigma, size=n_segments) if sigma > 0 else np.ones(n_segments)
        if self.config.dominant_per_segment:
            dominant = rng.integers(n_combinations, size=n_segments)
        else:
            dominant = np.full(n_segments, int(rng.integers(n_combinations)))
        rates = np.repeat((base * multipliers)[:, None], n_combinations, axis=1)
        if n_combinations > 1:
            rates[np.arange(n_segments), dominant] *= dominance
        return np.clip(rates, 0.0, 1.0), dominant

    def _generate_truth(self, ad: Ad, rng: np.random.Generator) -> AdTruth:
        cfg = self.config
        n = len(self.combinations[ad.ad_id])
        base_cvr = rng.uniform(cfg.base_cvr.low, cfg.base_cvr.high)
        base_ctr = rng.uniform(cfg.base_ctr.low, cfg.base_ctr.high)
        true_cvr, dominant_cvr = self._rates(rng, base_cvr, cfg.cvr_dominance, n)
        true_ctr, dominant_ctr = self._rates(rng, base_ctr, cfg.ctr_dominance, n)
        return AdTruth(true_cvr, true_ctr, dominant_cvr, dominant_ctr)

    def _generate_listing(self, ad: Ad, rng: np.random.Generator) -> AdListing:
        pricing = self.config.pricing
        if rng.random() < pricing.ocpc_share:
            return AdListing(ad.ad_id, "oCPC", float(rng.uniform(pricing.tcpa_low, pricing.tcpa_high)), ad)
        return AdListing(ad.ad_id, "mCPC", float(rng.uniform(pricing.bid.low, pricing.bid.high)), ad)

    # -- sampling ------------------------------------------------------------------

    def sample_user(self, rng: np.random.Generator) -> Tuple[int, Dict[str, str]]:
        """Segment index and full user features of one arrival."""
        seg_idx = self.arrival_sampler.draw(rng)
        features = dict(zip(self.segment_keys, self.segments[seg_idx]))
        for name, values in self.extra_user_features.items():
            features[name] = values[int(rng.integers(len(values)))]
        return seg_idx, features

    def sample_delay(self, rng: np.random.Generator) -> int:
        """Reporting delay in ticks, capped at the horizon."""
        delay = self.config.delay
        if delay.kind == "constant" or delay.mean_ticks <= 0:
            ticks = int(round(delay.mean_ticks))
        else:
            # geometric on {0, 1, ...} with the configured mean
            ticks = int(rng.geometric(1.0 / (1.0 + delay.mean_ticks))) - 1
        return min(ticks, delay.horizon_ticks)

    # -- oracle quantities -----------------------------------------------------------

    def mean_rates(self, ad_id: str, seg_idx: int) -> Tuple[float, float]:
        """Uniform-rendering (CTR, CVR) of an ad in a segment."""
        truth = self.truth[ad_id]
        return float(truth.true_ctr[seg_idx].mean()), float(truth.true_cvr[seg_idx].mean())

    def expected_cvr(self, ad_id: str, seg_idx: int, distribution: Sequence[float] | None) -> float:
        """Expected CVR of an impression rendered with the distribution (uniform if None)."""
        cvr = self.truth[ad_id].true_cvr[seg_idx]
        if distribution is None:
            return float(cvr.mean())
        return float(math.fsum(q * c for q, c in zip(distribution, cvr)))
