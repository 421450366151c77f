"""Ad catalog: standard ad features and DCO asset attributes."""

import logging
from dataclasses import dataclass
from itertools import product
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

from core.errors import StructuralError
from core.offset import AdFeature
from core.utils import read_jsonl, write_jsonl

logger = logging.getLogger(__name__)

NONDCO = "NONDCO"
ASSETS_FEATURE = "assets"
MAX_ASSETS_PER_ATTRIBUTE = 3


def assets_feature(rendered_assets: Sequence[str]) -> AdFeature:
    """Weighted multi-value feature of the rendered assets, unit weights.

    Non-DCO renders (no assets) get the single value NONDCO.
    """
    values = list(rendered_assets) or [NONDCO]
    return (ASSETS_FEATURE, values, [1.0] * len(values))


@dataclass(frozen=True)
class Ad:
    """Ad with its standard features (feature name -> values, unit weights)."""

    ad_id: str
    standard_features: Tuple[Tuple[str, Tuple[str, ...]], ...]

    @property
    def is_dco(self) -> bool:
        return False

    def features(self) -> List[AdFeature]:
        """The ad id plus standard features, as model ad features."""
        feats: List[AdFeature] = [("ad", [self.ad_id], [1.0])]
        for name, values in self.standard_features:
            if values:
                feats.append((name, list(values), [1.0] * len(values)))
        return feats

    def to_record(self) -> dict:
        return {
            "ad_id": self.ad_id,
            "standard_features": {name: list(values) for name, values in self.standard_features},
            "attributes": [],
        }


@dataclass(frozen=True)
class DcoAd(Ad):
    """DCO ad: M attributes with 1..3 assets each; combinations are their Cartesian product."""

    attributes: Tuple[Tuple[str, ...], ...] = ()

    def __post_init__(self):
        if not self.attributes:
            raise StructuralError(f"DCO ad {self.ad_id} needs at least one attribute")
        for attribute in self.attributes:
            if not 1 <= len(attribute) <= MAX_ASSETS_PER_ATTRIBUTE:
                raise StructuralError(
                    f"DCO ad {self.ad_id}: attribute sizes must be 1..{MAX_ASSETS_PER_ATTRIBUTE}"
                )

    @property
    def is_dco(self) -> bool:
        return True

    @property
    def n_combinations(self) -> int:
        n = 1
        for attribute in self.attributes:
            n *= len(attribute)
        return n

    def to_record(self) -> dict:
        record = super().to_record()
        record["attributes"] = [list(a) for a in self.attributes]
        return record


def make_ad(ad_id: str, standard_features: Dict[str, Sequence[str]], attributes: Sequence[Sequence[str]] = ()) -> Ad:
    """Build a DcoAd when attributes are given, a plain Ad otherwise. Standard features are kept sorted by name."""
    std = tuple((name, tuple(values)) for name, values in sorted(standard_features.items()))
    if attributes:
        return DcoAd(ad_id=ad_id, standard_features=std, attributes=tuple(tuple(a) for a in attributes))
    return Ad(ad_id=ad_id, standard_features=std)


def enumerate_combinations(ad: DcoAd) -> List[Tuple[str, ...]]:
    """All N asset tuples, lexicographic in attribute order."""
    return list(product(*ad.attributes))


class Catalog:
    """Ads by id, plus the model schema the catalog was exported for."""

    def __init__(self, ads: Sequence[Ad], user_features: Sequence[str] = (), model_version: int | None = None):
        self.ads: Dict[str, Ad] = {}
        for ad in ads:
            if ad.ad_id in self.ads:
                raise StructuralError(f"duplicate ad id {ad.ad_id}")
            self.ads[ad.ad_id] = ad
        self.user_features = tuple(user_features)
        self.model_version = model_version

    def dco_ads(self) -> List[DcoAd]:
        return [ad for ad in self.ads.values() if isinstance(ad, DcoAd)]

    def get(self, ad_id: str) -> Ad | None:
        return self.ads.get(ad_id)

    def ad_features(self, ad_id: str, rendered_assets: Sequence[str] = ()) -> List[AdFeature]:
        """Model ad features of an event: standard features plus the assets feature."""
        ad = self.ads.get(ad_id)
        base = ad.features() if ad is not None else [("ad", [ad_id], [1.0])]
        return base + [assets_feature(rendered_assets)]

    def __len__(self) -> int:
        return len(self.ads)


def save_catalog(catalog: Catalog, path: str | Path) -> Path:
    """Header record then one record per ad."""
    header = {
        "record": "header",
        "user_features": list(catalog.user_features),
        "model_version": catalog.model_version,
    }
    records = [header] + [dict(record="ad", **ad.to_record()) for ad in catalog.ads.values()]
    path = write_jsonl(path, records)
    logger.info(f"Saved catalog with {len(catalog)} ads to {path}")
    return path


def load_catalog(path: str | Path) -> Catalog:
    """Read a catalog file."""
    user_features: Sequence[str] = ()
    model_version = None
    ads = []
    for record in read_jsonl(path):
        if record.get("record") == "header":
            user_features = record.get("user_features", [])
            model_version = record.get("model_version")
            continue
        ads.append(make_ad(record["ad_id"], record.get("standard_features", {}), record.get("attributes", [])))
    return Catalog(ads, user_features=user_features, model_version=model_version)
