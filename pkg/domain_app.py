from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import jsonschema
import numpy as np
import pandas as pd

log = logging.getLogger(__name__)

OBSERVATIONAL = "observational"
RCT = "rct"
PROVENANCES = (OBSERVATIONAL, RCT)

DEFAULT_LEVELS = (0.0, 1.0, 2.0, 3.0, 5.0)

# Fixed feature layout shared by every dataset
FEATURE_NAMES = (
    "activity",
    "distance",
    "origin_x",
    "origin_y",
    "dest_x",
    "dest_y",
    "hour_sin",
    "hour_cos",
    "weekend",
)
CORE_FEATURES = len(FEATURE_NAMES)
ACTIVITY, DISTANCE = 0, 1


class SubsidyError(Exception):
    kind = "SubsidyError"

    def __str__(self):
        return super().__str__() or self.kind


class NotOnGrid(SubsidyError):
    kind = "NotOnGrid"


class ConfigError(SubsidyError):
    kind = "ConfigError"


class DataError(SubsidyError):
    kind = "DataError"


class ShapeError(SubsidyError):
    kind = "ShapeError"


class TapeError(SubsidyError):
    kind = "TapeError"


class EmptyBatch(SubsidyError):
    kind = "EmptyBatch"


class DegenerateLabels(SubsidyError):
    kind = "DegenerateLabels"


class EmptyInput(SubsidyError):
    kind = "EmptyInput"


class Infeasible(SubsidyError):
    kind = "Infeasible"


class InstanceTooLarge(SubsidyError):
    kind = "InstanceTooLarge"


class DictionaryError(SubsidyError):
    kind = "DictionaryError"


def check_schema(doc, schema, what):
    """Validate a JSON document, re-raising as ConfigError."""
    try:
        jsonschema.validate(doc, schema)
    except jsonschema.ValidationError as e:
        path = "/".join(str(p) for p in e.absolute_path)
        raise ConfigError(f"{what}: {path or '<root>'}: {e.message}") from None


@dataclass(frozen=True)
class TreatmentGrid:
    levels: tuple[float, ...] = DEFAULT_LEVELS

    def __post_init__(self):
        levels = tuple(float(v) for v in self.levels)
        object.__setattr__(self, "levels", levels)
        if len(levels) < 2:
            raise ConfigError("treatment grid needs at least two levels")
        if levels[0] != 0.0:
            raise ConfigError("treatment grid level 0 must be the control amount 0")
        if any(b <= a for a, b in zip(levels, levels[1:])):
            raise ConfigError(f"treatment levels must be strictly increasing: {levels}")

    @property
    def J(self) -> int:
        return len(self.levels)

    def index(self, amount: float) -> int:
        return treatment_index(self, amount)


def treatment_index(grid: TreatmentGrid, amount: float) -> int:
    for j, level in enumerate(grid.levels):
        if level == amount:
            return j
    raise NotOnGrid(f"amount {amount} is not on grid {grid.levels}")


@dataclass(frozen=True)
class ServiceClass:
    k: int
    gamma: float

    def to_dict(self):
        return {"k": self.k, "gamma": self.gamma}


@dataclass(frozen=True, order=True)
class ClusterKey:
    origin_zone: int
    dest_zone: int
    time_bucket: int

    def as_tuple(self):
        return (self.origin_zone, self.dest_zone, self.time_bucket)


@dataclass(frozen=True)
class Query:
    id: int
    origin_zone: int
    dest_zone: int
    time_bucket: int
    feature_vector: tuple[float, ...]
    service_class: int

    @property
    def key(self) -> ClusterKey:
        return ClusterKey(self.origin_zone, self.dest_zone, self.time_bucket)

    @property
    def activity(self) -> float:
        return self.feature_vector[ACTIVITY]


@dataclass(frozen=True)
class OutcomeRecord:
    query: Query
    treatment_idx: int
    converted: int
    revenue_if_converted: float


@dataclass(frozen=True)
class ElasticityCurve:
    p: tuple[float, ...]

    def __post_init__(self):
        p = tuple(float(v) for v in self.p)
        object.__setattr__(self, "p", p)
        if any(not (0.0 <= v <= 1.0) for v in p):
            raise DataError(f"conversion probabilities out of [0,1]: {p}")
        if any(b < a for a, b in zip(p, p[1:])):
            raise DataError(f"elasticity curve is not monotone: {p}")

    @property
    def J(self):
        return len(self.p)

    def uplift(self) -> np.ndarray:
        """Probability-space uplift p[j] - p[0] for every level."""
        arr = np.asarray(self.p)
        return arr - arr[0]


def curves_from_matrix(P: np.ndarray) -> list[ElasticityCurve]:
    return [ElasticityCurve(tuple(row)) for row in np.asarray(P, dtype=np.float64)]


def curves_to_matrix(curves: Iterable[ElasticityCurve]) -> np.ndarray:
    rows = [c.p for c in curves]
    if not rows:
        return np.zeros((0, 0))
    return np.asarray(rows, dtype=np.float64)


@dataclass(frozen=True)
class Dataset:
    grid: TreatmentGrid
    services: tuple[ServiceClass, ...]
    records: tuple[OutcomeRecord, ...]
    provenance: str
    feature_dim: int

    def __post_init__(self):
        object.__setattr__(self, "services", tuple(self.services))
        object.__setattr__(self, "records", tuple(self.records))
        if self.provenance not in PROVENANCES:
            raise ConfigError(f"unknown provenance {self.provenance!r}")

    def __len__(self):
        return len(self.records)

    @property
    def queries(self) -> list[Query]:
        return [r.query for r in self.records]

    def features(self) -> np.ndarray:
        if not self.records:
            return np.zeros((0, self.feature_dim))
        return np.asarray([r.query.feature_vector for r in self.records], dtype=np.float64)

    def treatments(self) -> np.ndarray:
        return np.asarray([r.treatment_idx for r in self.records], dtype=np.int64)

    def outcomes(self) -> np.ndarray:
        return np.asarray([r.converted for r in self.records], dtype=np.float64)

    def gamma_of(self, k: int) -> float:
        for s in self.services:
            if s.k == k:
                return s.gamma
        raise DataError(f"service class {k} not declared in dataset")

    def arm_counts(self) -> np.ndarray:
        return np.bincount(self.treatments(), minlength=self.grid.J)[: self.grid.J]

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for r in self.records:
            q = r.query
            row = {
                "id": q.id,
                "origin_zone": q.origin_zone,
                "dest_zone": q.dest_zone,
                "time_bucket": q.time_bucket,
                "service_class": q.service_class,
                "treatment_idx": r.treatment_idx,
                "amount": self.grid.levels[r.treatment_idx]
                if 0 <= r.treatment_idx < self.grid.J
                else np.nan,
                "converted": r.converted,
                "revenue": r.revenue_if_converted,
            }
            for i, v in enumerate(q.feature_vector):
                row[f"f{i}"] = v
            rows.append(row)
        return pd.DataFrame(rows)


# ---
# Validation


@dataclass(frozen=True)
class Violation:
    kind: str
    message: str
    record: int | None = None


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self):
        return not self.violations

    def kinds(self) -> list[str]:
        return [v.kind for v in self.violations]

    def add(self, kind, message, record=None):
        self.violations.append(Violation(kind, message, record))


def validate_dataset(d: Dataset) -> ValidationReport:
    report = ValidationReport()
    if not d.records:
        report.add("EmptyDataset", "dataset has no records")
        return report

    for s in d.services:
        if not (0.0 <= s.gamma <= 1.0):
            report.add("ProbabilityRange", f"service {s.k} gamma {s.gamma} outside [0,1]")

    counts = np.zeros(d.grid.J, dtype=np.int64)
    for i, r in enumerate(d.records):
        if not (0 <= r.treatment_idx < d.grid.J):
            report.add("IndexOutOfRange", f"treatment_idx {r.treatment_idx} outside [0,{d.grid.J})", i)
        else:
            counts[r.treatment_idx] += 1
        if len(r.query.feature_vector) != d.feature_dim:
            report.add(
                "FeatureLength",
                f"feature length {len(r.query.feature_vector)} != {d.feature_dim}",
                i,
            )
        if r.converted not in (0, 1):
            report.add("BadOutcome", f"converted={r.converted!r} is not 0/1", i)
        if r.revenue_if_converted < 0:
            report.add("NegativeRevenue", f"revenue {r.revenue_if_converted} < 0", i)

    for j, n in enumerate(counts):
        if n == 0:
            report.add("EmptyArm", f"no records at treatment level {j} ({d.grid.levels[j]})")
    return report


# ---
# Dataset file: one JSON header line, then one JSON record per line

FORMAT_VERSION = 1

HEADER_SCHEMA = {
    "type": "object",
    "required": ["format", "version", "grid", "services", "feature_dim", "provenance"],
    "additionalProperties": False,
    "properties": {
        "format": {"const": "subsidy-dataset"},
        "version": {"const": FORMAT_VERSION},
        "grid": {"type": "array", "items": {"type": "number"}, "minItems": 2},
        "services": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["k", "gamma"],
                "properties": {"k": {"type": "integer"}, "gamma": {"type": "number"}},
            },
        },
        "feature_dim": {"type": "integer", "minimum": 1},
        "feature_names": {"type": "array", "items": {"type": "string"}},
        "provenance": {"enum": list(PROVENANCES)},
    },
}


def feature_names(feature_dim: int) -> list[str]:
    names = list(FEATURE_NAMES[:feature_dim])
    names += [f"noise_{i}" for i in range(feature_dim - len(names))]
    return names


def _header(d: Dataset) -> dict:
    return {
        "format": "subsidy-dataset",
        "version": FORMAT_VERSION,
        "grid": list(d.grid.levels),
        "services": [s.to_dict() for s in d.services],
        "feature_dim": d.feature_dim,
        "feature_names": feature_names(d.feature_dim),
        "provenance": d.provenance,
    }


def _record_dict(r: OutcomeRecord) -> dict:
    q = r.query
    return {
        "id": q.id,
        "o": q.origin_zone,
        "d": q.dest_zone,
        "t": q.time_bucket,
        "k": q.service_class,
        "x": list(q.feature_vector),
        "j": r.treatment_idx,
        "y": r.converted,
        "rev": r.revenue_if_converted,
    }


def dataset_lines(d: Dataset) -> Iterator[str]:
    # json uses repr() for floats, which round-trips exactly
    yield json.dumps(_header(d), sort_keys=True)
    for r in d.records:
        yield json.dumps(_record_dict(r), sort_keys=True)


def write_dataset(path: str | Path, d: Dataset) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        for line in dataset_lines(d):
            f.write(line + "\n")
    log.info("wrote %d records (%s) to %s", len(d), d.provenance, path)
    return path


def parse_dataset(lines: Iterable[str]) -> Dataset:
    it = iter(line for line in lines if line.strip())
    try:
        header = json.loads(next(it))
    except StopIteration:
        raise DataError("dataset file is empty") from None
    except json.JSONDecodeError as e:
        raise DataError(f"bad dataset header: {e}") from None
    check_schema(header, HEADER_SCHEMA, "dataset header")

    records = []
    for n, line in enumerate(it, start=2):
        try:
            raw = json.loads(line)
            q = Query(
                id=int(raw["id"]),
                origin_zone=int(raw["o"]),
                dest_zone=int(raw["d"]),
                time_bucket=int(raw["t"]),
                feature_vector=tuple(float(v) for v in raw["x"]),
                service_class=int(raw["k"]),
            )
            records.append(OutcomeRecord(q, int(raw["j"]), int(raw["y"]), float(raw["rev"])))
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"line {n}: malformed record ({e})") from None

    return Dataset(
        grid=TreatmentGrid(tuple(header["grid"])),
        services=tuple(ServiceClass(int(s["k"]), float(s["gamma"])) for s in header["services"]),
        records=tuple(records),
        provenance=header["provenance"],
        feature_dim=int(header["feature_dim"]),
    )


def read_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"dataset file not found: {path}")
    with path.open("r", encoding="utf-8") as f:
        d = parse_dataset(f)
    log.info("read %d records (%s) from %s", len(d), d.provenance, path)
    return d
