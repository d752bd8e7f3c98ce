"""Fleet telemetry data model and the canonical JSONL/CSV record formats.

A record is one (SSD or memory component, checkpoint) observation holding the
activation count of every error-management (EM) step. Records are validated
on construction, so a :class:`FleetDataset` never holds an invalid one.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from emfleet.errors import DataShapeError

FORMATS = ("jsonl", "csv")
META_FIELDS = (
    "sample_id",
    "generation",
    "workload_class",
    "workload_id",
    "checkpoint",
    "component_count",
)
_INT64_MAX = 2**63 - 1


def _check_count(value, where: str) -> int:
    # bool is an int subclass; reject it explicitly.
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
        raise DataShapeError(f"{where}: count {value!r} is not an integer")
    value = int(value)
    if value < 0:
        raise DataShapeError(f"{where}: count {value} is negative")
    if value > _INT64_MAX:
        raise DataShapeError(f"{where}: count {value} exceeds the 64-bit range")
    return value


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    generation: str
    workload_class: str
    workload_id: str
    checkpoint: int
    component_count: int
    steps: tuple[int, ...]

    def __post_init__(self):
        if not isinstance(self.sample_id, str) or not self.sample_id:
            raise DataShapeError("sample_id must be a non-empty string")
        for name in ("generation", "workload_class", "workload_id"):
            if not isinstance(getattr(self, name), str):
                raise DataShapeError(f"{self.sample_id}: {name} must be a string")
        if isinstance(self.checkpoint, bool) or not isinstance(self.checkpoint, (int, np.integer)) or self.checkpoint < 0:
            raise DataShapeError(f"{self.sample_id}: checkpoint must be an integer >= 0")
        if (
            isinstance(self.component_count, bool)
            or not isinstance(self.component_count, (int, np.integer))
            or self.component_count < 1
        ):
            raise DataShapeError(f"{self.sample_id}: component_count must be an integer >= 1")
        steps = tuple(
            _check_count(v, f"{self.sample_id} step {j}") for j, v in enumerate(self.steps)
        )
        object.__setattr__(self, "steps", steps)
        object.__setattr__(self, "checkpoint", int(self.checkpoint))
        object.__setattr__(self, "component_count", int(self.component_count))

    @property
    def d(self) -> int:
        return len(self.steps)

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "generation": self.generation,
            "workload_class": self.workload_class,
            "workload_id": self.workload_id,
            "checkpoint": self.checkpoint,
            "component_count": self.component_count,
            "steps": list(self.steps),
        }


@dataclass(frozen=True)
class FleetDataset:
    """An immutable, validated collection of records sharing one step count ``d``."""

    records: tuple[SampleRecord, ...]
    d: int
    provenance: Mapping = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        if self.d < 0:
            raise DataShapeError("d must be >= 0")
        seen = set()
        for i, rec in enumerate(self.records):
            if rec.d != self.d:
                raise DataShapeError(
                    f"row {i} ({rec.sample_id}): expected {self.d} steps, got {rec.d}"
                )
            key = (rec.sample_id, rec.checkpoint)
            if key in seen:
                raise DataShapeError(
                    f"row {i}: duplicate (sample_id, checkpoint) = {key}"
                )
            seen.add(key)

    @classmethod
    def from_records(cls, records: Iterable[SampleRecord], d: int | None = None, provenance=None):
        records = tuple(records)
        if d is None:
            if not records:
                raise DataShapeError("cannot infer d from an empty record list")
            d = records[0].d
        return cls(records=records, d=d, provenance=dict(provenance or {}))

    @property
    def n(self) -> int:
        return len(self.records)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @cached_property
    def counts(self) -> np.ndarray:
        """The n x d int64 count matrix (read-only view)."""
        m = np.array([r.steps for r in self.records], dtype=np.int64).reshape(self.n, self.d)
        m.setflags(write=False)
        return m

    @cached_property
    def sample_ids(self) -> tuple[str, ...]:
        return tuple(r.sample_id for r in self.records)

    def subset(self, records: Sequence[SampleRecord]) -> FleetDataset:
        return FleetDataset(records=tuple(records), d=self.d, provenance=self.provenance)

    def checkpoints(self) -> list[int]:
        return sorted({r.checkpoint for r in self.records})

    def filter(self, **criteria) -> FleetDataset:
        """Records whose attributes equal every given keyword, order preserved."""
        keep = [
            r for r in self.records if all(getattr(r, k) == v for k, v in criteria.items())
        ]
        return self.subset(keep)


def partition_by_class(dataset: FleetDataset) -> dict[str, FleetDataset]:
    """Split a dataset by ``workload_class``; classes appear in first-seen order."""
    groups: dict[str, list[SampleRecord]] = {}
    for rec in dataset.records:
        groups.setdefault(rec.workload_class, []).append(rec)
    return {name: dataset.subset(recs) for name, recs in groups.items()}


def partition_by(dataset: FleetDataset, *keys: str) -> dict[tuple, FleetDataset]:
    groups: dict[tuple, list[SampleRecord]] = {}
    for rec in dataset.records:
        groups.setdefault(tuple(getattr(rec, k) for k in keys), []).append(rec)
    return {k: dataset.subset(v) for k, v in groups.items()}


# --- serialization -----------------------------------------------------------


def _csv_header(d: int) -> list[str]:
    return list(META_FIELDS) + [f"step_{j}" for j in range(d)]


def dumps_dataset(dataset: FleetDataset, format: str = "jsonl") -> str:
    if format == "jsonl":
        return "".join(
            json.dumps(r.to_dict(), separators=(",", ":")) + "\n" for r in dataset.records
        )
    if format == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(_csv_header(dataset.d))
        for r in dataset.records:
            writer.writerow(
                [r.sample_id, r.generation, r.workload_class, r.workload_id,
                 r.checkpoint, r.component_count, *r.steps]
            )
        return buf.getvalue()
    raise DataShapeError(f"unknown format {format!r}; expected one of {FORMATS}")


def save_dataset(dataset: FleetDataset, path, format: str = "jsonl") -> None:
    text = dumps_dataset(dataset, format)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _parse_int(text: str, where: str) -> int:
    t = text.strip()
    if not t or not (t.isdigit() or (t[0] in "+-" and t[1:].isdigit())):
        raise DataShapeError(f"{where}: {text!r} is not an integer")
    return int(t)


def _load_jsonl(lines: list[str], path) -> tuple[list[SampleRecord], int | None]:
    records = []
    d = None
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataShapeError(f"{path}:{lineno}: JSON parse error: {exc.msg}") from None
        if not isinstance(obj, dict):
            raise DataShapeError(f"{path}:{lineno}: expected a JSON object")
        expected = set(META_FIELDS) | {"steps"}
        if set(obj) != expected:
            missing = sorted(expected - set(obj))
            extra = sorted(set(obj) - expected)
            raise DataShapeError(f"{path}:{lineno}: bad keys (missing={missing}, unexpected={extra})")
        if not isinstance(obj["steps"], list):
            raise DataShapeError(f"{path}:{lineno}: steps must be a JSON array")
        rec = _make_record(obj, f"{path}:{lineno}")
        if d is None:
            d = rec.d
        elif rec.d != d:
            raise DataShapeError(
                f"{path}:{lineno}: row {rec.sample_id!r} has {rec.d} steps, expected {d}"
            )
        records.append(rec)
    return records, d


def _make_record(obj: dict, where: str) -> SampleRecord:
    try:
        return SampleRecord(
            sample_id=obj["sample_id"],
            generation=obj["generation"],
            workload_class=obj["workload_class"],
            workload_id=obj["workload_id"],
            checkpoint=obj["checkpoint"],
            component_count=obj["component_count"],
            steps=tuple(obj["steps"]),
        )
    except DataShapeError as exc:
        raise DataShapeError(f"{where}: {exc}") from None


def _load_csv(text: str, path) -> tuple[list[SampleRecord], int]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if tuple(header[: len(META_FIELDS)]) != META_FIELDS:
        raise DataShapeError(f"{path}:1: header must start with {','.join(META_FIELDS)}")
    d = len(header) - len(META_FIELDS)
    if header[len(META_FIELDS):] != [f"step_{j}" for j in range(d)]:
        raise DataShapeError(f"{path}:1: step columns must be step_0..step_{d - 1}")
    records = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        where = f"{path}:{lineno}"
        if len(row) != len(header):
            raise DataShapeError(
                f"{where}: row {row[0] if row else ''!r} has {len(row) - len(META_FIELDS)} steps, expected {d}"
            )
        obj = dict(zip(META_FIELDS, row))
        obj["checkpoint"] = _parse_int(obj["checkpoint"], f"{where} checkpoint")
        obj["component_count"] = _parse_int(obj["component_count"], f"{where} component_count")
        obj["steps"] = [_parse_int(v, f"{where} step_{j}") for j, v in enumerate(row[len(META_FIELDS):])]
        records.append(_make_record(obj, where))
    return records, d


def load_dataset(path, format: str | None = None) -> FleetDataset:
    """Read and validate a JSONL or CSV telemetry file.

    ``format`` defaults to the file suffix. Raises :class:`DataShapeError` with
    the offending line number for parse failures, invalid counts and rows whose
    step count differs from the first row.
    """
    path = Path(path)
    if format is None:
        format = path.suffix.lstrip(".").lower()
    if format not in FORMATS:
        raise DataShapeError(f"unknown format {format!r}; expected one of {FORMATS}")
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise DataShapeError(f"{path}: no such file") from None
    if not text.strip():
        raise DataShapeError(f"{path}: file is empty")
    if format == "jsonl":
        records, d = _load_jsonl(text.splitlines(), path)
        if d is None:
            raise DataShapeError(f"{path}: file is empty")
    else:
        records, d = _load_csv(text, path)
    try:
        return FleetDataset(records=tuple(records), d=d, provenance={"source": str(path), "format": format})
    except DataShapeError as exc:
        raise DataShapeError(f"{path}: {exc}") from None
