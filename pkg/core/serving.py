"""Post-auction serving: score, first-price auction, then draw the DCO combination."""

import logging
import threading
from dataclasses import dataclass
from typing import List, Literal, Mapping, Sequence, Tuple

import numpy as np

from core.catalog import Ad, Catalog, DcoAd, enumerate_combinations
from core.errors import ServingError
from core.p2d import Combination, DistributionTable, Segment
from core.utils import UNKNOWN

logger = logging.getLogger(__name__)

Pricing = Literal["mCPC", "oCPC"]


@dataclass(frozen=True)
class AdListing:
    """An ad in the auction with its pricing: mCPC bid or oCPC target CPA."""

    ad_id: str
    pricing: Pricing
    amount: float
    ad: Ad | None = None

    def __post_init__(self):
        if self.pricing not in ("mCPC", "oCPC"):
            raise ValueError(f"{self.ad_id}: unknown pricing {self.pricing}")
        if not self.amount > 0:
            raise ValueError(f"{self.ad_id}: bid / tCPA must be positive")

    @property
    def is_dco(self) -> bool:
        return isinstance(self.ad, DcoAd)

    @property
    def dco(self) -> DcoAd | None:
        return self.ad if isinstance(self.ad, DcoAd) else None

    def bid(self, pconv: float) -> float:
        """Cost-per-click bid: the manual bid, or pCONV * tCPA for oCPC."""
        if self.pricing == "mCPC":
            return self.amount
        return pconv * self.amount


@dataclass(frozen=True)
class AuctionOutcome:
    """Auction result; rendered_combination is set iff the winner is a DCO ad."""

    winner: str
    score: float
    price: float
    segment: Segment
    rendered_combination: Combination | None = None


def score_ad(ad: AdListing, pctr: float, pconv: float) -> float:
    """bid * pCTR."""
    return ad.bid(pconv) * pctr


def run_auction(eligible: Sequence[Tuple[AdListing, float]]) -> Tuple[AdListing, float] | None:
    """Highest score wins; ties go to the smallest ad_id. None on an empty list (no fill)."""
    best = None
    for listing, score in eligible:
        if best is None or score > best[1] or (score == best[1] and listing.ad_id < best[0].ad_id):
            best = (listing, score)
    return best


def extract_segment(user_features: Mapping[str, str], segment_keys: Sequence[str]) -> Segment:
    """Project user features onto the segment keys, unknown where absent."""
    return tuple(str(user_features.get(key) or UNKNOWN) for key in segment_keys)


def draw_combination(
    table: DistributionTable,
    ad_id: str,
    segment: Segment,
    rng: np.random.Generator,
    catalog: Catalog | None = None,
) -> Combination:
    """Sample the ad's combination for the segment; uniform when the entry is missing."""
    entry = table.get(ad_id, segment)
    if entry is not None:
        return table.combinations[ad_id][entry.sampler.draw(rng)]

    combinations = table.combinations.get(ad_id)
    if combinations is None and catalog is not None:
        ad = catalog.get(ad_id)
        if isinstance(ad, DcoAd):
            combinations = enumerate_combinations(ad)
    if not combinations:
        raise ServingError(f"ad {ad_id} is unknown to the distribution table and the catalog")
    logger.debug(f"No distribution for ({ad_id}, {segment}); drawing uniformly")
    return combinations[int(rng.integers(len(combinations)))]


class TableHolder:
    """Current distribution table; swaps are atomic for readers."""

    def __init__(self, table: DistributionTable | None = None):
        self._lock = threading.Lock()
        self._table = table if table is not None else DistributionTable()

    def current(self) -> DistributionTable:
        with self._lock:
            return self._table

    def swap(self, table: DistributionTable) -> DistributionTable:
        with self._lock:
            previous, self._table = self._table, table
        return previous


def serve(
    candidates: Sequence[Tuple[AdListing, float, float]],
    user_features: Mapping[str, str],
    segment_keys: Sequence[str],
    table: DistributionTable | None,
    rng: np.random.Generator,
    catalog: Catalog | None = None,
) -> AuctionOutcome | None:
    """Full serving path for one request.

    candidates are (listing, pCTR, pCONV). The table is consulted only after the winner
    is fixed; table=None renders DCO winners uniformly.
    """
    scored = [(listing, score_ad(listing, pctr, pconv)) for listing, pctr, pconv in candidates]
    best = run_auction(scored)
    if best is None:
        return None
    winner, score = best
    pconv = next(pc for listing, _, pc in candidates if listing is winner)
    segment = extract_segment(user_features, segment_keys)
    combination = None
    if winner.is_dco:
        table = table if table is not None else DistributionTable()
        catalog = catalog if catalog is not None else Catalog([winner.ad])
        combination = draw_combination(table, winner.ad_id, segment, rng, catalog)
    return AuctionOutcome(
        winner=winner.ad_id,
        score=score,
        price=winner.bid(pconv),
        segment=segment,
        rendered_combination=combination,
    )


def eligible_listings(listings: Sequence[AdListing], exhausted: set) -> List[AdListing]:
    """Listings whose daily budget is not exhausted."""
    return [listing for listing in listings if listing.ad_id not in exhausted]
