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
Quarterly cross-sections of technical variables, labelled by the sign of
the following price move and tagged with their GICS sector.
"""
import logging
import math
import re
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, Optional, Sequence

import numpy as np
import pandas as pd

from utils.errors import (
    DegenerateSplit, EmptyFile, MalformedRow, MissingColumn, NonPositivePrice
)

logger = logging.getLogger(__name__)

POSITIVE = 1
NEGATIVE = -1

# Compustat mnemonics, in the order the models see them.
FEATURE_DESCRIPTIONS = {
    "ACTQ": "Current assets (total)",
    "CHEQ": "Cash and short-term investments",
    "DLCQ": "Debt in current liabilities",
    "DLTTQ": "Long-term debt (total)",
    "EPSPXQ": "Earnings per share (basic, excluding extraordinary items)",
    "EPSX12": "Earnings per share in 12 months (basic, excluding extraordinary items)",
    "ICAPTQ": "Quarterly invested capital (total)",
    "LCTQ": "Current liabilities (total)",
    "LTQ": "Liabilities (total)",
    "NIQ": "Net income (loss)",
    "OEPS12": "Earnings per share from operations (12 months moving)",
    "OIADPQ": "Operating income after depreciation (quarterly)",
    "REVTQ": "Revenue (total, quarterly)",
    "SPCE12": "S&P core earnings (12MM)",
    "SPCEQ": "S&P core earnings",
    "WCAPQ": "Working capital (balance sheet)",
    "XOPRQ": "Operating expense (total, quarterly)",
    "CAPXY": "Capital expenditures",
    "EPSFIY": "Earnings per share (diluted, including extraordinary items)",
    "IVCHY": "Increase in investments",
    "REVTY": "Revenue (total, yearly)",
    "SPCEDY": "S&P core earnings EPS diluted",
    "SPCEEPSPY": "S&P core earnings EPS basic (preliminary)",
    "SPCEPY": "S&P core earnings (preliminary)",
    "XOPRY": "Operating expense (total, yearly)",
    "CSHTRQ": "Common shares traded (quarterly)",
    "MKVALTQ": "Market value (total)",
    "PRCCQ": "Price close (quarter)",
    "PRCHQ": "Price high (quarter)",
    "PRCLQ": "Price low (quarter)",
}
FEATURE_SCHEMA = tuple(FEATURE_DESCRIPTIONS)

ID_COLUMN = "stock_id"
SECTOR_COLUMNS = ("gics_sector", "sector")
YEAR_COLUMN = "year"
QUARTER_COLUMN = "quarter"
LABEL_COLUMN = "label"
PRICE_COLUMNS = ("price_initial", "price_subsequent")

DEFAULT_CRITICAL_MASS = 40


class Sector(IntEnum):
    """ GICS sector codes, plus a pseudo-sector for the full market """
    AGGREGATED = 0
    ENERGY = 10
    MATERIALS = 15
    INDUSTRIALS = 20
    CONSUMER_DISCRETIONARY = 25
    CONSUMER_STAPLES = 30
    HEALTH_CARE = 35
    FINANCIALS = 40
    INFORMATION_TECHNOLOGY = 45
    TELECOMMUNICATION_SERVICES = 50
    UTILITIES = 55

    @property
    def canonical_name(self) -> str:
        return self.name.replace("_", " ").title()

    @classmethod
    def parse(cls, value) -> "Sector":
        """ Accepts an integer code ("45") or a name ("Information Technology") """
        text = str(value).strip()
        if re.fullmatch(r"[+-]?\d+(\.0+)?", text):
            return cls(int(float(text)))
        key = re.sub(r"[\s\-]+", "_", text).upper()
        try:
            return cls[key]
        except KeyError:
            raise ValueError(f"Unknown GICS sector: {value!r}") from None


@dataclass(frozen=True, order=True)
class Quarter:
    year: int
    index: int

    def __post_init__(self):
        if self.index not in (1, 2, 3, 4):
            raise ValueError(f"Quarter index must be 1-4, got {self.index}")

    def next(self) -> "Quarter":
        if self.index == 4:
            return Quarter(self.year + 1, 1)
        return Quarter(self.year, self.index + 1)

    @property
    def ordinal(self) -> int:
        """ Number of quarters since year 0, so consecutive quarters differ by one """
        return self.year * 4 + self.index - 1

    @classmethod
    def parse(cls, text: str) -> "Quarter":
        """ Parses "2009Q1" or "2009-1" """
        match = re.fullmatch(r"\s*(\d{4})\s*[Qq\-:/ ]\s*([1-4])\s*", str(text))
        if match is None:
            raise ValueError(f"Cannot parse quarter: {text!r}")
        return cls(int(match.group(1)), int(match.group(2)))

    def __str__(self):
        return f"{self.year}Q{self.index}"


@dataclass(frozen=True)
class StockRecord:
    stock_id: str
    sector: Sector
    quarter: Quarter
    features: tuple
    label: int


@dataclass(frozen=True, eq=False)
class Standardization:
    """ Per-feature z-score parameters fitted on a training set """
    means: np.ndarray
    scales: np.ndarray
    constant: np.ndarray

    def apply(self, features: np.ndarray) -> np.ndarray:
        scaled = (features - self.means) / self.scales
        scaled[:, self.constant] = 0.0
        return scaled


def _frozen(array, dtype) -> np.ndarray:
    array = np.array(array, dtype=dtype, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class Dataset:
    """ An immutable set of labelled stock records sharing one feature schema

    Rows are stored column-wise as numpy arrays; `records` rebuilds the
    per-stock view when it is needed.
    """
    features: np.ndarray
    labels: np.ndarray
    sectors: np.ndarray
    years: np.ndarray
    quarter_indices: np.ndarray
    stock_ids: tuple
    schema: tuple
    standardization: Optional[Standardization] = None
    rejected_rows: tuple = field(default=())

    def __post_init__(self):
        n = len(self.stock_ids)
        features = np.asarray(self.features, dtype=float)
        if features.size == 0:
            features = features.reshape(n, len(self.schema))
        if features.shape != (n, len(self.schema)):
            raise ValueError(
                f"Feature matrix shape {features.shape} does not match {n} records "
                f"and {len(self.schema)} schema columns"
            )
        object.__setattr__(self, "features", _frozen(features, float))
        object.__setattr__(self, "labels", _frozen(self.labels, np.int64))
        object.__setattr__(self, "sectors", _frozen(self.sectors, np.int64))
        object.__setattr__(self, "years", _frozen(self.years, np.int64))
        object.__setattr__(self, "quarter_indices", _frozen(self.quarter_indices, np.int64))
        object.__setattr__(self, "stock_ids", tuple(self.stock_ids))
        object.__setattr__(self, "schema", tuple(self.schema))
        for name in ("labels", "sectors", "years", "quarter_indices"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"Column {name} does not have {n} entries")
        if n and not np.all(np.isin(self.labels, (POSITIVE, NEGATIVE))):
            raise ValueError("Labels must be +1 or -1")

    @classmethod
    def from_records(cls, records: Iterable[StockRecord], schema: Sequence[str]) -> "Dataset":
        records = list(records)
        return cls(
            features=np.array([r.features for r in records], dtype=float).reshape(len(records), len(schema)),
            labels=[r.label for r in records],
            sectors=[int(r.sector) for r in records],
            years=[r.quarter.year for r in records],
            quarter_indices=[r.quarter.index for r in records],
            stock_ids=[r.stock_id for r in records],
            schema=schema,
        )

    @classmethod
    def from_arrays(cls, features, labels, sector=Sector.AGGREGATED,
                    quarter=Quarter(2009, 1), schema=None) -> "Dataset":
        """ Builds a single-sector, single-quarter dataset from a matrix and labels """
        features = np.asarray(features, dtype=float)
        if features.ndim == 1:
            features = features.reshape(-1, 1)
        n, d = features.shape
        if schema is None:
            schema = tuple(f"x{j}" for j in range(d))
        return cls(
            features=features,
            labels=labels,
            sectors=np.full(n, int(sector)),
            years=np.full(n, quarter.year),
            quarter_indices=np.full(n, quarter.index),
            stock_ids=[f"r{i}" for i in range(n)],
            schema=schema,
        )

    def __len__(self):
        return len(self.stock_ids)

    @property
    def dimension(self) -> int:
        return len(self.schema)

    @property
    def records(self) -> list:
        return [
            StockRecord(
                self.stock_ids[i],
                Sector(int(self.sectors[i])),
                Quarter(int(self.years[i]), int(self.quarter_indices[i])),
                tuple(float(v) for v in self.features[i]),
                int(self.labels[i]),
            )
            for i in range(len(self))
        ]

    def class_counts(self) -> dict:
        return {
            POSITIVE: int(np.sum(self.labels == POSITIVE)),
            NEGATIVE: int(np.sum(self.labels == NEGATIVE)),
        }

    def has_both_classes(self) -> bool:
        counts = self.class_counts()
        return counts[POSITIVE] > 0 and counts[NEGATIVE] > 0

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(
            features=self.features[indices],
            labels=self.labels[indices],
            sectors=self.sectors[indices],
            years=self.years[indices],
            quarter_indices=self.quarter_indices[indices],
            stock_ids=[self.stock_ids[i] for i in indices],
            schema=self.schema,
            standardization=self.standardization,
        )

    def select_features(self, indices) -> "Dataset":
        """ Restricts the dataset, and its standardization, to the given feature columns """
        indices = np.asarray(sorted(indices), dtype=np.int64)
        standardization = None
        if self.standardization is not None:
            standardization = Standardization(
                self.standardization.means[indices],
                self.standardization.scales[indices],
                self.standardization.constant[indices],
            )
        return Dataset(
            features=self.features[:, indices],
            labels=self.labels,
            sectors=self.sectors,
            years=self.years,
            quarter_indices=self.quarter_indices,
            stock_ids=self.stock_ids,
            schema=[self.schema[j] for j in indices],
            standardization=standardization,
        )

    def quarters(self) -> list:
        """ Distinct quarters present, in chronological order """
        pairs = sorted(set(zip(self.years.tolist(), self.quarter_indices.tolist())))
        return [Quarter(year, index) for year, index in pairs]

    def by_quarter(self, quarter: Quarter) -> "Dataset":
        mask = (self.years == quarter.year) & (self.quarter_indices == quarter.index)
        return self.subset(np.flatnonzero(mask))

    def with_standardization(self, features: np.ndarray, standardization: Standardization) -> "Dataset":
        return Dataset(
            features=features,
            labels=self.labels,
            sectors=self.sectors,
            years=self.years,
            quarter_indices=self.quarter_indices,
            stock_ids=self.stock_ids,
            schema=self.schema,
            standardization=standardization,
        )


def label_from_prices(initial_price: float, subsequent_price: float) -> int:
    """ +1 for a strictly positive price move, -1 otherwise (a flat move is -1) """
    for price in (initial_price, subsequent_price):
        if not math.isfinite(price) or price <= 0:
            raise NonPositivePrice(f"Prices must be positive, got {price!r}")
    return POSITIVE if subsequent_price > initial_price else NEGATIVE


def _parse_label(text: str) -> int:
    value = float(text)
    if value == 1:
        return POSITIVE
    if value == -1:
        return NEGATIVE
    raise ValueError(f"label must be +1 or -1, got {text!r}")


def load_csv(path, schema: Sequence[str] = FEATURE_SCHEMA) -> Dataset:
    """ Reads a quarterly cross-section CSV file into a Dataset

    Rows with an unusable sector, year, quarter or label are skipped and
    reported in `Dataset.rejected_rows` as (line number, reason). Blank
    feature cells take the median of their column over the accepted rows.
    """
    schema = tuple(schema)
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError:
        raise EmptyFile(f"{path} is empty") from None
    frame.columns = [str(c).strip() for c in frame.columns]

    sector_column = next((c for c in SECTOR_COLUMNS if c in frame.columns), None)
    required = [ID_COLUMN, YEAR_COLUMN, QUARTER_COLUMN, *schema]
    missing = [c for c in required if c not in frame.columns]
    if sector_column is None:
        missing.insert(1, SECTOR_COLUMNS[0])
    if missing:
        raise MissingColumn(f"{path} is missing columns: {', '.join(missing)}")

    has_label = LABEL_COLUMN in frame.columns
    has_prices = all(c in frame.columns for c in PRICE_COLUMNS)
    if not has_label and not has_prices:
        raise MissingColumn(f"{path} needs a '{LABEL_COLUMN}' column or both {', '.join(PRICE_COLUMNS)}")

    known = set(required) | {sector_column, LABEL_COLUMN, *PRICE_COLUMNS}
    extra = [c for c in frame.columns if c not in known]
    if extra:
        logger.warning("Ignoring unknown columns in %s: %s", path, ", ".join(extra))

    if len(frame) == 0:
        raise EmptyFile(f"{path} has a header but no data rows")

    accepted, rejected = [], []
    sectors, years, quarters, labels = [], [], [], []
    for position, row in enumerate(frame.to_dict("records")):
        # The header is line 1.
        line = position + 2
        try:
            sector = Sector.parse(row[sector_column])
            quarter = Quarter(int(row[YEAR_COLUMN].strip()), int(row[QUARTER_COLUMN].strip()))
            if has_label and row[LABEL_COLUMN].strip() != "":
                label = _parse_label(row[LABEL_COLUMN].strip())
            elif has_prices:
                label = label_from_prices(float(row[PRICE_COLUMNS[0]]), float(row[PRICE_COLUMNS[1]]))
            else:
                raise ValueError("no label and no prices")
        except (ValueError, TypeError) as e:
            rejected.append((line, str(e)))
            logger.warning("Rejecting %s line %d: %s", path, line, e)
            continue
        accepted.append(position)
        sectors.append(int(sector))
        years.append(quarter.year)
        quarters.append(quarter.index)
        labels.append(label)

    if not accepted:
        raise EmptyFile(f"{path} has no usable data rows")

    kept = frame.iloc[accepted]
    features = np.empty((len(kept), len(schema)))
    for j, column in enumerate(schema):
        cells = kept[column].str.strip()
        blank = cells.isin(("", "NA", "NaN", "nan", "null"))
        values = pd.to_numeric(cells.where(~blank), errors="coerce").to_numpy(dtype=float)
        bad = (np.isnan(values) & ~blank.to_numpy()) | np.isinf(values)
        if bad.any():
            line = accepted[int(np.argmax(bad))] + 2
            raise MalformedRow(f"{path} line {line}: non-numeric value in column {column}")
        if blank.any():
            present = values[~np.isnan(values)]
            if present.size == 0:
                raise MalformedRow(f"{path}: column {column} has no values to impute from")
            values[np.isnan(values)] = np.median(present)
        features[:, j] = values

    return Dataset(
        features=features,
        labels=labels,
        sectors=sectors,
        years=years,
        quarter_indices=quarters,
        stock_ids=kept[ID_COLUMN].str.strip().tolist(),
        schema=schema,
        rejected_rows=tuple(rejected),
    )


def write_csv(data: Dataset, path, prices: Optional[np.ndarray] = None) -> None:
    """ Writes a Dataset in the format `load_csv` reads

    When `prices` (n x 2, initial and subsequent) is given the price
    columns are written instead of the label column.
    """
    frame = pd.DataFrame({
        ID_COLUMN: list(data.stock_ids),
        SECTOR_COLUMNS[0]: data.sectors,
        YEAR_COLUMN: data.years,
        QUARTER_COLUMN: data.quarter_indices,
    })
    for j, column in enumerate(data.schema):
        frame[column] = data.features[:, j]
    if prices is None:
        frame[LABEL_COLUMN] = data.labels
    else:
        frame[PRICE_COLUMNS[0]] = prices[:, 0]
        frame[PRICE_COLUMNS[1]] = prices[:, 1]
    frame.to_csv(path, index=False, float_format="%.10g", lineterminator="\n")


def concatenate(parts: Sequence[Dataset]) -> Dataset:
    parts = list(parts)
    if not parts:
        raise ValueError("Nothing to concatenate")
    schema = parts[0].schema
    if any(p.schema != schema for p in parts):
        raise ValueError("Datasets do not share a schema")
    return Dataset(
        features=np.vstack([p.features for p in parts]),
        labels=np.concatenate([p.labels for p in parts]),
        sectors=np.concatenate([p.sectors for p in parts]),
        years=np.concatenate([p.years for p in parts]),
        quarter_indices=np.concatenate([p.quarter_indices for p in parts]),
        stock_ids=[s for p in parts for s in p.stock_ids],
        schema=schema,
    )


def partition_by_sector(data: Dataset) -> dict:
    """ Splits a dataset by GICS sector, in ascending sector-code order """
    return {
        Sector(int(code)): data.subset(np.flatnonzero(data.sectors == code))
        for code in np.unique(data.sectors)
    }


def as_aggregated(data: Dataset) -> Dataset:
    """ Relabels every record with the full-market pseudo-sector """
    return Dataset(
        features=data.features,
        labels=data.labels,
        sectors=np.full(len(data), int(Sector.AGGREGATED)),
        years=data.years,
        quarter_indices=data.quarter_indices,
        stock_ids=data.stock_ids,
        schema=data.schema,
        standardization=data.standardization,
    )


def below_critical_mass(data: Dataset, minimum: int = DEFAULT_CRITICAL_MASS) -> bool:
    return len(data) < minimum


def split_train_test(data: Dataset, train_fraction: float, seed: int) -> tuple:
    """ Random train/test split with round(fraction * n) training records (at least one) """
    if not 0 < train_fraction < 1:
        raise DegenerateSplit(f"train_fraction must lie in (0, 1), got {train_fraction}")
    n = len(data)
    train_size = max(1, math.floor(train_fraction * n + 0.5))
    if n < 2 or train_size >= n:
        raise DegenerateSplit(f"Cannot split {n} records with fraction {train_fraction}")
    permutation = np.random.default_rng(seed).permutation(n)
    train = np.sort(permutation[:train_size])
    test = np.sort(permutation[train_size:])
    return data.subset(train), data.subset(test)


def standardize(train: Dataset, test: Dataset, ddof: int = 1) -> tuple:
    """ Z-scores both sets with the training set's mean and standard deviation

    Columns that are constant on the training set become 0 everywhere.
    """
    if len(train) == 0:
        raise ValueError("Cannot standardize with an empty training set")
    means = train.features.mean(axis=0)
    if len(train) > ddof:
        scales = train.features.std(axis=0, ddof=ddof)
    else:
        scales = np.zeros(train.dimension)
    constant = ~(scales > 0) | (np.ptp(train.features, axis=0) == 0)
    scales = np.where(constant, 1.0, scales)
    standardization = Standardization(_frozen(means, float), _frozen(scales, float), _frozen(constant, bool))
    return (
        train.with_standardization(standardization.apply(train.features), standardization),
        test.with_standardization(standardization.apply(test.features), standardization),
    )
