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
Run reports: one JSON document per run, plus CSV extracts of the curves
and weights it carries.
"""
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import pandas as pd

from learners.forest import export_oob_csv
from learners.knn import KSelection, export_k_curve_csv
from utils.modelsel import GridResult, export_grid_csv
from utils.relief import ReliefWeights, export_weights_csv

logger = logging.getLogger(__name__)

REPORT_FORMAT = "sector-ensemble-report"
REPORT_VERSION = 1
LEARNER_ORDER = ("forest", "svm", "rvm", "knn")


@dataclass
class LearnerReport:
    name: str
    train_error: float
    test_error: float
    # Error the committee weight was computed from, and the weight itself.
    epsilon: float
    alpha: float
    positive_rate: float
    gamma: Optional[float] = None


@dataclass
class SectorReport:
    sector: int
    sector_name: str
    status: str
    skip_reason: Optional[str] = None
    n_records: int = 0
    n_train: int = 0
    n_test: int = 0
    selected_features: list = field(default_factory=list)
    relief_weights: list = field(default_factory=list)
    learners: list = field(default_factory=list)
    committee_train_error: Optional[float] = None
    committee_test_error: Optional[float] = None
    naive_committee_test_error: Optional[float] = None
    majority_class_test_error: Optional[float] = None
    committee_mean_margin: Optional[float] = None
    rvm_mean_probability: Optional[float] = None
    rvm_threshold: Optional[float] = None
    svm_gamma_grid: dict = field(default_factory=dict)
    rvm_gamma_grid: dict = field(default_factory=dict)
    gamma_frequency: dict = field(default_factory=dict)
    k_star: Optional[int] = None
    k_curve: list = field(default_factory=list)
    tree_count: Optional[int] = None
    oob_curve: list = field(default_factory=list)
    test_error_curve: list = field(default_factory=list)
    overfit_warning: bool = False
    wall_clock_seconds: float = 0.0
    model_fingerprint: Optional[str] = None

    @property
    def trained(self) -> bool:
        return self.status == "trained"

    @classmethod
    def skipped(cls, sector: int, sector_name: str, reason: str, n_records: int = 0) -> "SectorReport":
        return cls(sector, sector_name, "skipped", skip_reason=reason, n_records=n_records)

    @classmethod
    def from_dict(cls, document: dict) -> "SectorReport":
        document = dict(document)
        document["learners"] = [LearnerReport(**entry) for entry in document.get("learners", [])]
        return cls(**document)


@dataclass
class ForwardPoint:
    year: int
    quarter: int
    status: str
    error_rate: Optional[float] = None
    n_records: int = 0


@dataclass
class ForwardSeries:
    sector: int
    sector_name: str
    train_quarter: str
    horizon_end: str
    points: list = field(default_factory=list)
    fingerprint_before: Optional[str] = None
    fingerprint_after: Optional[str] = None
    skip_reason: Optional[str] = None

    @property
    def errors(self) -> list:
        return [p.error_rate for p in self.points]

    @classmethod
    def from_dict(cls, document: dict) -> "ForwardSeries":
        document = dict(document)
        document["points"] = [ForwardPoint(**p) for p in document.get("points", [])]
        return cls(**document)


@dataclass
class EvaluationReport:
    mode: str
    config: dict
    sectors: list = field(default_factory=list)
    forward: list = field(default_factory=list)
    total_seconds: float = 0.0

    @property
    def trained_sectors(self) -> list:
        return [s for s in self.sectors if s.trained]

    @property
    def mean_sector_seconds(self) -> float:
        trained = self.trained_sectors
        if not trained:
            return 0.0
        return float(np.mean([s.wall_clock_seconds for s in trained]))

    def sector(self, code: int) -> SectorReport:
        for entry in self.sectors:
            if entry.sector == int(code):
                return entry
        raise KeyError(f"No sector {code} in the report")

    def to_dict(self) -> dict:
        document = {
            "format": REPORT_FORMAT,
            "version": REPORT_VERSION,
            **asdict(self),
            "mean_sector_seconds": self.mean_sector_seconds,
        }
        return _plain(document)

    @classmethod
    def from_dict(cls, document: dict) -> "EvaluationReport":
        return cls(
            mode=document["mode"],
            config=document["config"],
            sectors=[SectorReport.from_dict(s) for s in document.get("sectors", [])],
            forward=[ForwardSeries.from_dict(f) for f in document.get("forward", [])],
            total_seconds=document.get("total_seconds", 0.0),
        )

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True, allow_nan=False)

    @classmethod
    def read(cls, path) -> "EvaluationReport":
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


def _plain(value):
    """ Converts numpy scalars and arrays, and non-string dict keys, into JSON types """
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_plain(v) for v in value.tolist()]
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    return value


def _check_error(problems: list, where: str, value, optional: bool = False):
    if value is None and optional:
        return
    if not isinstance(value, (int, float)) or isinstance(value, bool) or not 0 <= value <= 1:
        problems.append(f"{where}: expected an error rate in [0, 1], got {value!r}")


def _check_fields(problems: list, where: str, document: dict, fields: dict):
    for name, kinds in fields.items():
        if name not in document:
            problems.append(f"{where}: missing field '{name}'")
        elif not isinstance(document[name], kinds):
            problems.append(f"{where}: field '{name}' has type {type(document[name]).__name__}")


def validate_report(document) -> list:
    """ Structural check of a report document; returns a list of problems, empty when valid """
    problems = []
    if not isinstance(document, dict):
        return ["report: not a JSON object"]
    if document.get("format") != REPORT_FORMAT:
        problems.append(f"report: format is not '{REPORT_FORMAT}'")
    if document.get("version") != REPORT_VERSION:
        problems.append(f"report: unsupported version {document.get('version')!r}")
    _check_fields(problems, "report", document, {
        "mode": str, "config": dict, "sectors": list, "forward": list,
        "total_seconds": (int, float), "mean_sector_seconds": (int, float),
    })
    if document.get("mode") not in ("per_sector", "aggregated"):
        problems.append(f"report: unknown mode {document.get('mode')!r}")

    for i, sector in enumerate(document.get("sectors") or []):
        where = f"sectors[{i}]"
        if not isinstance(sector, dict):
            problems.append(f"{where}: not an object")
            continue
        _check_fields(problems, where, sector, {"sector": int, "sector_name": str, "status": str})
        if sector.get("status") == "skipped":
            if not sector.get("skip_reason"):
                problems.append(f"{where}: skipped without a reason")
            continue
        if sector.get("status") != "trained":
            problems.append(f"{where}: unknown status {sector.get('status')!r}")
            continue
        _check_fields(problems, where, sector, {
            "learners": list, "selected_features": list, "relief_weights": list, "oob_curve": list,
            "k_curve": list, "k_star": int, "tree_count": int, "overfit_warning": bool,
            "wall_clock_seconds": (int, float),
        })
        names = [entry.get("name") for entry in sector.get("learners", []) if isinstance(entry, dict)]
        if tuple(names) != LEARNER_ORDER:
            problems.append(f"{where}: learners must be {', '.join(LEARNER_ORDER)}, got {names}")
        for entry in sector.get("learners", []):
            if not isinstance(entry, dict):
                continue
            for key in ("train_error", "test_error", "epsilon", "positive_rate"):
                _check_error(problems, f"{where}.{entry.get('name')}.{key}", entry.get(key))
            alpha = entry.get("alpha")
            if not isinstance(alpha, (int, float)) or isinstance(alpha, bool) or not np.isfinite(alpha):
                problems.append(f"{where}.{entry.get('name')}.alpha: expected a finite number")
        for key in ("committee_train_error", "committee_test_error", "naive_committee_test_error",
                    "majority_class_test_error"):
            _check_error(problems, f"{where}.{key}", sector.get(key))
        for j, value in enumerate(sector.get("oob_curve", [])):
            _check_error(problems, f"{where}.oob_curve[{j}]", value)

    for i, series in enumerate(document.get("forward") or []):
        where = f"forward[{i}]"
        if not isinstance(series, dict):
            problems.append(f"{where}: not an object")
            continue
        _check_fields(problems, where, series, {"sector": int, "points": list})
        ordinals = []
        for j, point in enumerate(series.get("points", [])):
            _check_fields(problems, f"{where}.points[{j}]", point, {"year": int, "quarter": int, "status": str})
            _check_error(problems, f"{where}.points[{j}].error_rate", point.get("error_rate"),
                         optional=point.get("status") == "missing")
            ordinals.append(point.get("year", 0) * 4 + point.get("quarter", 0))
        if any(b <= a for a, b in zip(ordinals, ordinals[1:])):
            problems.append(f"{where}: quarters are not strictly increasing")
    return problems


def write_extracts(report: EvaluationReport, directory) -> list:
    """ Writes the CSV extracts of every trained sector and forward series; returns the paths """
    os.makedirs(directory, exist_ok=True)
    written = []

    def target(name):
        path = os.path.join(directory, name)
        written.append(path)
        return path

    for sector in report.trained_sectors:
        code = sector.sector
        weights = sector.relief_weights
        export_weights_csv(ReliefWeights(
            np.array([w["raw_weight"] for w in weights]),
            np.array([w["normalized_weight"] for w in weights]),
            tuple(w["feature"] for w in weights),
        ), target(f"relief_{code}.csv"))
        export_oob_csv(sector.oob_curve, target(f"oob_{code}.csv"))
        export_k_curve_csv(KSelection(sector.k_star, np.asarray(sector.k_curve), 0, 0), target(f"k_curve_{code}.csv"))
        for learner, grid in (("svm", sector.svm_gamma_grid), ("rvm", sector.rvm_gamma_grid)):
            export_grid_csv(
                GridResult(tuple(grid["grid"]), tuple(grid["mean_errors"]), grid["chosen"]),
                target(f"gamma_{learner}_{code}.csv"),
            )

    for series in report.forward:
        pd.DataFrame(
            [asdict(p) for p in series.points],
            columns=["year", "quarter", "status", "error_rate", "n_records"],
        ).to_csv(target(f"forward_{series.sector}.csv"), index=False)

    logger.info("Wrote %d extract files to %s", len(written), directory)
    return written
