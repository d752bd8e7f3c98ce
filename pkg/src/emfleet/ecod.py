"""Empirical-CDF outlier scoring (ECOD) with per-dimension decomposition.

For every dimension the model keeps a sorted copy of the fit population. A query
value ``x`` on dimension ``j`` gets two tail probabilities::

    p_left  = #{i : X_ij <= x} / n
    p_right = #{i : X_ij >= x} / n

each turned into a score ``-log(max(p, 1/(2n)))``. The "auto" score follows the
sign of the dimension's sample skewness (left tail when negative, right tail
otherwise). A sample's aggregate score is the largest of the three column sums.
Left and right scores depend on ranks only, so a strictly increasing transform
of a dimension leaves them unchanged; the auto choice also follows skewness,
which such a transform can flip.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterator, Sequence

import numpy as np

from emfleet.errors import ConstraintError, DataShapeError

MODEL_FORMAT_VERSION = 1


class InsufficientPopulationError(ConstraintError):
    pass


def _as_matrix(rows) -> np.ndarray:
    if hasattr(rows, "counts"):
        rows = rows.counts
    X = np.asarray(rows)
    if X.ndim == 1:
        X = X.reshape(-1, 1) if X.size else X.reshape(0, 0)
    if X.ndim != 2:
        raise DataShapeError(f"expected a 2-D matrix, got shape {X.shape}")
    if X.dtype.kind in "iub":
        return X.astype(np.int64, copy=False)
    if X.dtype.kind != "f":
        try:
            X = X.astype(np.float64)
        except (TypeError, ValueError):
            raise DataShapeError("matrix entries must be numeric") from None
    if not np.all(np.isfinite(X)):
        raise DataShapeError("matrix contains non-finite values")
    return X.astype(np.float64, copy=False)


def skewness(X: np.ndarray) -> np.ndarray:
    """Fisher-Pearson sample skewness per column (biased, ``n`` in the denominator).

    Zero-variance columns get 0. For integer columns whose float estimate is
    within rounding noise of zero, the sign is settled with exact integer
    arithmetic so that symmetric data routes deterministically.
    """
    X = np.asarray(X)
    n = X.shape[0]
    Xf = X.astype(np.float64)
    dev = Xf - Xf.mean(axis=0)
    m2 = (dev**2).mean(axis=0)
    m3 = (dev**3).mean(axis=0)
    out = np.zeros(X.shape[1])
    nz = m2 > 0
    out[nz] = m3[nz] / m2[nz] ** 1.5
    if X.dtype.kind in "iu":
        for j in np.flatnonzero(nz & (np.abs(out) < 1e-8)):
            col = [int(v) for v in X[:, j]]
            total = sum(col)
            if len(set(col)) == 1:
                out[j] = 0.0
                continue
            num = sum((n * v - total) ** 3 for v in col)
            if num == 0:
                out[j] = 0.0
            else:
                out[j] = math.copysign(max(abs(out[j]), np.finfo(float).tiny), num)
    return out


@dataclass(frozen=True, eq=False)
class EcodModel:
    """Fitted per-dimension empirical CDFs. Immutable once built.

    Attributes:
        sorted_values: d x n array, row ``j`` is dimension ``j`` sorted ascending.
        skewness: length-d sample skewness, used to route the auto score.
    """

    sorted_values: np.ndarray
    skewness: np.ndarray

    @property
    def d(self) -> int:
        return self.sorted_values.shape[0]

    @property
    def n(self) -> int:
        return self.sorted_values.shape[1]

    @property
    def floor(self) -> float:
        return 1.0 / (2 * self.n)

    def to_json(self) -> str:
        doc = {
            "format_version": MODEL_FORMAT_VERSION,
            "n": self.n,
            "d": self.d,
            "dtype": "int64" if self.sorted_values.dtype.kind == "i" else "float64",
            "skewness": [float(g) for g in self.skewness],
            "sorted_values": self.sorted_values.tolist(),
        }
        return json.dumps(doc, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str, expected_d: int | None = None) -> EcodModel:
        doc = json.loads(text)
        if doc.get("format_version") != MODEL_FORMAT_VERSION:
            raise DataShapeError(f"unsupported model format_version {doc.get('format_version')!r}")
        dtype = np.int64 if doc["dtype"] == "int64" else np.float64
        values = np.asarray(doc["sorted_values"], dtype=dtype).reshape(doc["d"], doc["n"])
        gamma = np.asarray(doc["skewness"], dtype=np.float64)
        if gamma.shape != (doc["d"],):
            raise DataShapeError("skewness length does not match d")
        if expected_d is not None and doc["d"] != expected_d:
            raise DataShapeError(f"model has d={doc['d']} but data has d={expected_d}")
        values.setflags(write=False)
        gamma.setflags(write=False)
        return cls(values, gamma)


def fit(rows) -> EcodModel:
    """Fit the model on an n x d matrix (or a :class:`FleetDataset`)."""
    X = _as_matrix(rows)
    n, d = X.shape
    if n < 2:
        raise InsufficientPopulationError(f"need at least 2 samples to fit, got {n}")
    if d < 1:
        raise DataShapeError("need at least one dimension")
    sorted_values = np.sort(X.T, axis=1)
    gamma = skewness(X)
    sorted_values.setflags(write=False)
    gamma.setflags(write=False)
    return EcodModel(sorted_values, gamma)


def tail_probs(model: EcodModel, j: int, x) -> tuple[float, float]:
    if not isinstance(model, EcodModel):
        raise TypeError("tail_probs needs a fitted EcodModel")
    if not 0 <= j < model.d:
        raise IndexError(f"step {j} out of range for d={model.d}")
    col = model.sorted_values[j]
    n = model.n
    le = int(np.searchsorted(col, x, side="right"))
    lt = int(np.searchsorted(col, x, side="left"))
    return le / n, (n - lt) / n


def _neglog(p: np.ndarray, floor: float) -> np.ndarray:
    # + 0.0 turns -0.0 (from -log 1) into +0.0
    return -np.log(np.maximum(p, floor)) + 0.0


def _score_matrix(model: EcodModel, X: np.ndarray):
    n = model.n
    m = X.shape[0]
    left = np.empty((m, model.d))
    right = np.empty((m, model.d))
    for j in range(model.d):
        col = model.sorted_values[j]
        le = np.searchsorted(col, X[:, j], side="right")
        lt = np.searchsorted(col, X[:, j], side="left")
        left[:, j] = _neglog(le / n, model.floor)
        right[:, j] = _neglog((n - lt) / n, model.floor)
    auto = np.where(model.skewness < 0, left, right)
    aggregate = np.maximum(np.maximum(left.sum(axis=1), right.sum(axis=1)), auto.sum(axis=1))
    return left, right, auto, aggregate


@dataclass(frozen=True)
class DimensionScore:
    step_index: int
    left: float
    right: float
    auto: float


@dataclass(frozen=True)
class SampleScore:
    sample_id: str
    aggregate: float
    dims: tuple[DimensionScore, ...]

    def top_contributors(self, k: int = 3) -> list[DimensionScore]:
        return sorted(self.dims, key=lambda s: (-s.auto, s.step_index))[:k]


@dataclass(frozen=True, eq=False)
class ScoreTable(Sequence[SampleScore]):
    """Scores for a population, stored column-wise.

    Behaves as a sequence of :class:`SampleScore`; the arrays are exposed for
    vectorised consumers.
    """

    sample_ids: tuple[str, ...]
    left: np.ndarray
    right: np.ndarray
    auto: np.ndarray
    aggregate: np.ndarray

    def __len__(self) -> int:
        return len(self.sample_ids)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[k] for k in range(*i.indices(len(self)))]
        if i < 0:
            i += len(self)
        if not 0 <= i < len(self):
            raise IndexError(i)
        dims = tuple(
            DimensionScore(j, float(self.left[i, j]), float(self.right[i, j]), float(self.auto[i, j]))
            for j in range(self.left.shape[1])
        )
        return SampleScore(self.sample_ids[i], float(self.aggregate[i]), dims)

    def __iter__(self) -> Iterator[SampleScore]:
        for i in range(len(self)):
            yield self[i]

    def index_of(self, sample_id: str) -> int:
        try:
            return self.sample_ids.index(sample_id)
        except ValueError:
            raise KeyError(sample_id) from None


def score_sample(model: EcodModel, steps, sample_id: str = "") -> SampleScore:
    x = np.asarray(getattr(steps, "steps", steps))
    if x.ndim != 1 or x.shape[0] != model.d:
        raise DataShapeError(f"sample has {x.size} steps, model expects {model.d}")
    return score_population(model, x.reshape(1, -1), sample_ids=[sample_id])[0]


def score_population(model: EcodModel, dataset, sample_ids=None) -> ScoreTable:
    """Score every row of ``dataset`` against ``model``.

    Row ``i`` of the result equals ``score_sample(model, row i)``; the work is
    vectorised per dimension, so output order always follows input order.
    """
    if hasattr(dataset, "records"):
        ids = dataset.sample_ids
        X = dataset.counts.reshape(dataset.n, dataset.d)
    else:
        X = np.asarray(dataset)
        if X.size == 0:
            X = X.reshape(0, model.d)
        ids = tuple(sample_ids) if sample_ids is not None else tuple(str(i) for i in range(X.shape[0]))
    X = _as_matrix(X) if X.shape[0] else X
    if X.shape[1] != model.d:
        raise DataShapeError(f"data has d={X.shape[1]}, model expects {model.d}")
    if len(ids) != X.shape[0]:
        raise DataShapeError("sample_ids length does not match row count")
    left, right, auto, agg = _score_matrix(model, X)
    return ScoreTable(tuple(ids), left, right, auto, agg)


def fit_score(dataset) -> tuple[EcodModel, ScoreTable]:
    """Transductive scoring: fit on the population, then score the same rows."""
    model = fit(dataset)
    return model, score_population(model, dataset)


# --- thresholds --------------------------------------------------------------


@dataclass(frozen=True)
class Threshold:
    """Either ``contamination`` (fraction flagged) or ``absolute`` (score cut-off)."""

    mode: str
    value: float

    def __post_init__(self):
        if self.mode == "contamination":
            if not 0 < self.value <= 0.5:
                raise ValueError(f"contamination must be in (0, 0.5], got {self.value}")
        elif self.mode == "absolute":
            if not self.value >= 0:
                raise ValueError(f"absolute threshold must be >= 0, got {self.value}")
        else:
            raise ValueError(f"unknown threshold mode {self.mode!r}")

    @classmethod
    def contamination(cls, fraction: float) -> Threshold:
        return cls("contamination", fraction)

    @classmethod
    def absolute(cls, score: float) -> Threshold:
        return cls("absolute", score)

    def flag_count(self, n: int) -> int:
        # Fraction(repr) avoids 0.07 * 100 -> 7.000000000000001 -> 8
        return math.ceil(Fraction(repr(float(self.value))) * n)

    def to_dict(self) -> dict:
        return {"mode": self.mode, "value": self.value}


def _ids_and_aggregates(scores) -> tuple[list[str], np.ndarray]:
    if isinstance(scores, ScoreTable):
        return list(scores.sample_ids), np.asarray(scores.aggregate)
    scores = list(scores)
    return [s.sample_id for s in scores], np.array([s.aggregate for s in scores], dtype=float)


def flag_mask(scores, threshold: Threshold) -> np.ndarray:
    ids, agg = _ids_and_aggregates(scores)
    mask = np.zeros(len(ids), dtype=bool)
    if threshold.mode == "absolute":
        mask[:] = agg >= threshold.value
        return mask
    k = min(threshold.flag_count(len(ids)), len(ids))
    order = sorted(range(len(ids)), key=lambda i: (-agg[i], ids[i]))
    mask[order[:k]] = True
    return mask


def flag(scores, threshold: Threshold) -> list[tuple[str, bool]]:
    """Pair each sample id with its flag, in input order.

    Contamination mode flags the ``ceil(c * n)`` highest aggregates, ties broken
    by ascending sample id; absolute mode flags ``aggregate >= value``.
    """
    ids, _ = _ids_and_aggregates(scores)
    return list(zip(ids, (bool(f) for f in flag_mask(scores, threshold))))
