# Copyright 2024 The sector-ensemble authors
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
"""
Synthetic quarterly cross-sections in the ingestion CSV format.

Every sector gets its own planted set of informative columns and a linear
labelling rule over their latent values, with every planted column
weighted equally up to sign. Records sit at least `margin` away from the
rule's boundary, so noise-free labels are recoverable from a small
sample. `noise` is the probability that a label is flipped. From
`shift_quarter` on the rule is negated, which gives frozen models a known
distribution shift to trip over.
"""
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from utils.dataset import (
    FEATURE_SCHEMA, NEGATIVE, POSITIVE, Dataset, Quarter, Sector, concatenate, write_csv
)

logger = logging.getLogger(__name__)

# Columns with positive, heavy-tailed values (dollar amounts, share counts, prices).
LOGNORMAL_COLUMNS = frozenset({
    "ACTQ", "CHEQ", "ICAPTQ", "LCTQ", "LTQ", "REVTQ", "XOPRQ", "REVTY", "XOPRY",
    "CSHTRQ", "MKVALTQ", "PRCCQ", "PRCHQ", "PRCLQ",
})
PRICE_DRIFT = 0.02
DEFAULT_MARGIN = 3.0


@dataclass(frozen=True)
class SyntheticSpec:
    sectors: int = 4
    records_per_sector: int = 300
    informative: int = 5
    # Probability of flipping each label.
    noise: float = 0.0
    # Minimum distance of every record from the labelling hyperplane, in latent units.
    margin: float = DEFAULT_MARGIN
    quarters: int = 1
    start_quarter: Quarter = Quarter(2009, 1)
    shift_quarter: Optional[Quarter] = None
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.sectors <= len(self.sector_codes_available()):
            raise ValueError(f"sectors must lie in 1..{len(self.sector_codes_available())}")
        if self.records_per_sector < 1 or self.quarters < 1:
            raise ValueError("records_per_sector and quarters must be positive")
        if not 1 <= self.informative <= len(FEATURE_SCHEMA):
            raise ValueError(f"informative must lie in 1..{len(FEATURE_SCHEMA)}")
        if not 0 <= self.noise <= 0.5:
            raise ValueError("noise is a flip probability and must lie in [0, 0.5]")
        if self.margin < 0:
            raise ValueError("margin must be non-negative")

    @staticmethod
    def sector_codes_available() -> tuple:
        return tuple(s for s in Sector if s is not Sector.AGGREGATED)

    @property
    def sector_codes(self) -> tuple:
        return self.sector_codes_available()[:self.sectors]

    @property
    def quarter_range(self) -> list:
        quarters = [self.start_quarter]
        for _ in range(self.quarters - 1):
            quarters.append(quarters[-1].next())
        return quarters


@dataclass(frozen=True)
class SyntheticData:
    dataset: Dataset
    prices: np.ndarray
    planted: dict
    coefficients: dict


def _sector_rng(spec: SyntheticSpec, sector: Sector, *extra) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([spec.seed, int(sector), *extra]))


def _column_maps(rng: np.random.Generator) -> tuple:
    """ Per-column location and scale turning latent values into raw units """
    locations = rng.uniform(-1.0, 3.0, size=len(FEATURE_SCHEMA))
    scales = rng.uniform(0.2, 2.0, size=len(FEATURE_SCHEMA))
    return locations, scales


def _to_raw(latent: np.ndarray, informative: np.ndarray, locations, scales) -> np.ndarray:
    raw = locations + scales * latent
    for j, column in enumerate(FEATURE_SCHEMA):
        # Informative columns stay affine so the labelling rule remains linear.
        if column in LOGNORMAL_COLUMNS and j not in informative:
            raw[:, j] = np.exp(0.5 * raw[:, j])
    return raw


def generate_synthetic(spec: SyntheticSpec) -> SyntheticData:
    parts, prices, planted, coefficients = [], [], {}, {}
    for sector in spec.sector_codes:
        rng = _sector_rng(spec, sector)
        informative = np.sort(rng.choice(len(FEATURE_SCHEMA), size=spec.informative, replace=False))
        direction = rng.choice((-1.0, 1.0), size=spec.informative) / np.sqrt(spec.informative)
        locations, scales = _column_maps(rng)
        planted[sector] = tuple(FEATURE_SCHEMA[j] for j in informative)
        coefficients[sector] = direction

        for quarter in spec.quarter_range:
            quarter_rng = _sector_rng(spec, sector, quarter.year, quarter.index)
            n = spec.records_per_sector
            latent = quarter_rng.normal(size=(n, len(FEATURE_SCHEMA)))
            score = latent[:, informative] @ direction
            if spec.margin > 0:
                push = np.where(score >= 0, spec.margin, -spec.margin)
                latent[:, informative] += np.outer(push, direction)
                score = score + push
            labels = np.where(score > 0, POSITIVE, NEGATIVE)
            flipped = quarter_rng.random(n) < spec.noise
            labels = np.where(flipped, -labels, labels)
            if spec.shift_quarter is not None and quarter >= spec.shift_quarter:
                labels = -labels

            features = _to_raw(latent, informative, locations, scales)
            initial = np.round(np.exp(quarter_rng.normal(3.0, 0.5, size=n)), 4)
            subsequent = np.round(initial * np.exp(PRICE_DRIFT * labels), 4)
            parts.append(Dataset(
                features=features,
                labels=labels,
                sectors=np.full(n, int(sector)),
                years=np.full(n, quarter.year),
                quarter_indices=np.full(n, quarter.index),
                stock_ids=[f"{int(sector)}-{i:05d}" for i in range(n)],
                schema=FEATURE_SCHEMA,
            ))
            prices.append(np.column_stack([initial, subsequent]))

    logger.info("Generated %d synthetic records over %d sectors and %d quarters",
                sum(len(p) for p in parts), spec.sectors, spec.quarters)
    return SyntheticData(concatenate(parts), np.vstack(prices), planted, coefficients)


def write_synthetic(spec: SyntheticSpec, path, with_prices: bool = False) -> SyntheticData:
    """ Generates a dataset and writes it as CSV, with price columns instead of labels if asked """
    data = generate_synthetic(spec)
    write_csv(data.dataset, path, prices=data.prices if with_prices else None)
    return data
