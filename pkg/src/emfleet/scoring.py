"""Per-workload-class scoring and the extrinsic-sample diagnostics built on it.

Each (workload class, checkpoint) population is fitted and scored on its own
(transductively), then flagged with one threshold and summarised by a per-step
percentile table of auto scores. Percentiles use the nearest-rank definition:
the p-quantile of n values is the ``ceil(p * n)``-th smallest.
"""

from __future__ import annotations

import csv
import io
import json
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from emfleet import ecod
from emfleet.ecod import DimensionScore, ScoreTable, Threshold
from emfleet.errors import ConstraintError, DataShapeError, SampleLookupError
from emfleet.telemetry import FleetDataset, partition_by

DEFAULT_PERCENTILES = (0.99, 0.999)
CAUSAL_PERCENTILE = 0.999
SCORED_FORMAT_VERSION = 1


def nearest_rank(values, p: float) -> float:
    """The ``ceil(p * n)``-th smallest value (1-based), clamped to rank >= 1."""
    v = np.sort(np.asarray(values, dtype=float))
    if v.size == 0:
        raise ValueError("nearest_rank of an empty sequence")
    if not 0 < p <= 1:
        raise ValueError(f"percentile must be in (0, 1], got {p}")
    k = max(1, math.ceil(Fraction(repr(float(p))) * v.size))
    return float(v[k - 1])


def percentile_table(auto: np.ndarray, percentiles: Sequence[float]) -> np.ndarray:
    """len(percentiles) x d table of nearest-rank quantiles of each step's auto scores."""
    auto = np.asarray(auto, dtype=float)
    n = auto.shape[0]
    if n == 0:
        raise ValueError("percentile table of an empty population")
    srt = np.sort(auto, axis=0)
    rows = []
    for p in percentiles:
        if not 0 < p <= 1:
            raise ValueError(f"percentile must be in (0, 1], got {p}")
        k = max(1, math.ceil(Fraction(repr(float(p))) * n))
        rows.append(srt[k - 1])
    return np.array(rows).reshape(len(percentiles), auto.shape[1])


@dataclass(eq=False)
class ScoredPopulation:
    workload_class: str
    checkpoint: int
    scores: ScoreTable
    flags: np.ndarray
    threshold: Threshold
    percentiles: tuple[float, ...]
    table: np.ndarray
    generations: tuple[str, ...] = ()
    workload_ids: tuple[str, ...] = ()
    percentile_scope: str = "class"

    @property
    def n(self) -> int:
        return len(self.scores)

    @property
    def d(self) -> int:
        return self.scores.auto.shape[1]

    @property
    def sample_ids(self) -> tuple[str, ...]:
        return self.scores.sample_ids

    def flagged_ids(self) -> list[str]:
        return [sid for sid, f in zip(self.sample_ids, self.flags) if f]

    def rank_order(self) -> list[int]:
        """Row indices by aggregate descending, sample id ascending on ties."""
        agg = self.scores.aggregate
        ids = self.sample_ids
        return sorted(range(self.n), key=lambda i: (-agg[i], ids[i]))

    def ranks(self) -> dict[str, int]:
        return {self.sample_ids[i]: r for r, i in enumerate(self.rank_order(), start=1)}

    def percentile_row(self, p: float) -> np.ndarray:
        for k, q in enumerate(self.percentiles):
            if q == p:
                return self.table[k]
        return percentile_table(self.scores.auto, [p])[0]

    def contains(self, sample_id: str) -> bool:
        return sample_id in self._index

    @property
    def _index(self) -> dict[str, int]:
        idx = self.__dict__.get("_idx")
        if idx is None:
            idx = {sid: i for i, sid in enumerate(self.sample_ids)}
            self.__dict__["_idx"] = idx
        return idx

    def index_of(self, sample_id: str) -> int:
        try:
            return self._index[sample_id]
        except KeyError:
            raise SampleLookupError(
                f"sample {sample_id!r} not in population {self.workload_class!r} checkpoint {self.checkpoint}"
            ) from None

    # --- persistence -------------------------------------------------------

    def to_dict(self) -> dict:
        ranks = self.ranks()
        samples = []
        for i, sid in enumerate(self.sample_ids):
            samples.append({
                "sample_id": sid,
                "generation": self.generations[i] if self.generations else "",
                "workload_id": self.workload_ids[i] if self.workload_ids else "",
                "aggregate": float(self.scores.aggregate[i]),
                "rank": ranks[sid],
                "flagged": bool(self.flags[i]),
                "left": self.scores.left[i].tolist(),
                "right": self.scores.right[i].tolist(),
                "auto": self.scores.auto[i].tolist(),
            })
        return {
            "format_version": SCORED_FORMAT_VERSION,
            "workload_class": self.workload_class,
            "checkpoint": self.checkpoint,
            "n": self.n,
            "d": self.d,
            "threshold": self.threshold.to_dict(),
            "percentile_scope": self.percentile_scope,
            "percentiles": list(self.percentiles),
            "percentile_table": self.table.tolist(),
            "samples": samples,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":")) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> ScoredPopulation:
        if doc.get("format_version") != SCORED_FORMAT_VERSION:
            raise DataShapeError(f"unsupported scored-population format {doc.get('format_version')!r}")
        s = doc["samples"]
        d = doc["d"]

        def mat(key):
            return np.array([row[key] for row in s], dtype=float).reshape(len(s), d)

        left, right, auto = mat("left"), mat("right"), mat("auto")
        scores = ScoreTable(
            tuple(row["sample_id"] for row in s), left, right, auto,
            np.array([row["aggregate"] for row in s], dtype=float),
        )
        return cls(
            workload_class=doc["workload_class"],
            checkpoint=doc["checkpoint"],
            scores=scores,
            flags=np.array([row["flagged"] for row in s], dtype=bool),
            threshold=Threshold(**doc["threshold"]),
            percentiles=tuple(doc["percentiles"]),
            table=np.array(doc["percentile_table"], dtype=float).reshape(len(doc["percentiles"]), d),
            generations=tuple(row["generation"] for row in s),
            workload_ids=tuple(row["workload_id"] for row in s),
            percentile_scope=doc.get("percentile_scope", "class"),
        )


def score_class(
    dataset: FleetDataset,
    checkpoint: int | None = None,
    threshold: Threshold = Threshold.contamination(0.005),
    percentiles: Sequence[float] = DEFAULT_PERCENTILES,
    model: ecod.EcodModel | None = None,
) -> ScoredPopulation:
    """Score one class population and tabulate its flags and percentiles.

    The model is fitted on the population itself unless a frozen ``model`` is given.
    """
    if dataset.n < 2:
        raise ConstraintError(f"a class population needs at least 2 records, got {dataset.n}")
    classes = {r.workload_class for r in dataset.records}
    cps = {r.checkpoint for r in dataset.records}
    if len(classes) != 1 or len(cps) != 1:
        raise DataShapeError(
            f"population mixes classes {sorted(classes)} / checkpoints {sorted(cps)}"
        )
    cp = cps.pop()
    if checkpoint is not None and checkpoint != cp:
        raise DataShapeError(f"records are from checkpoint {cp}, not {checkpoint}")
    if model is None:
        model = ecod.fit(dataset)
    elif model.d != dataset.d:
        raise DataShapeError(f"frozen model has d={model.d}, dataset has d={dataset.d}")
    scores = ecod.score_population(model, dataset)
    return ScoredPopulation(
        workload_class=classes.pop(),
        checkpoint=cp,
        scores=scores,
        flags=ecod.flag_mask(scores, threshold),
        threshold=threshold,
        percentiles=tuple(percentiles),
        table=percentile_table(scores.auto, percentiles),
        generations=tuple(r.generation for r in dataset.records),
        workload_ids=tuple(r.workload_id for r in dataset.records),
    )


def score_fleet(
    dataset: FleetDataset,
    threshold: Threshold = Threshold.contamination(0.005),
    percentiles: Sequence[float] = DEFAULT_PERCENTILES,
    percentile_scope: str = "class",
    model: ecod.EcodModel | None = None,
    workers: int = 1,
) -> list[ScoredPopulation]:
    """Score every (class, checkpoint) population independently.

    Output is sorted by (checkpoint, class) whatever ``workers`` is. With
    ``percentile_scope="pooled"`` the percentile tables are recomputed over all
    classes at the same checkpoint.
    """
    if percentile_scope not in ("class", "pooled"):
        raise ValueError(f"percentile_scope must be 'class' or 'pooled', got {percentile_scope!r}")
    parts = sorted(partition_by(dataset, "checkpoint", "workload_class").items())

    def run(item):
        (_, _), part = item
        return score_class(part, threshold=threshold, percentiles=percentiles, model=model)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            pops = list(pool.map(run, parts))
    else:
        pops = [run(p) for p in parts]
    if percentile_scope == "pooled":
        for cp in sorted({p.checkpoint for p in pops}):
            group = [p for p in pops if p.checkpoint == cp]
            table = percentile_table(np.vstack([p.scores.auto for p in group]), percentiles)
            for p in group:
                p.table = table
                p.percentile_scope = "pooled"
    return pops


# --- extrinsic reports -------------------------------------------------------


@dataclass(frozen=True)
class ExtrinsicReport:
    sample_id: str
    workload_class: str
    checkpoint: int
    aggregate: float
    rank: int
    n: int
    flagged: bool
    dims: tuple[DimensionScore, ...]
    percentiles: tuple[float, ...]
    percentile_rows: tuple[tuple[float, ...], ...]
    causal_steps: tuple[int, ...]

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "workload_class": self.workload_class,
            "checkpoint": self.checkpoint,
            "aggregate": self.aggregate,
            "rank": self.rank,
            "n": self.n,
            "flagged": self.flagged,
            "causal_percentile": CAUSAL_PERCENTILE,
            "causal_steps": list(self.causal_steps),
            "percentiles": list(self.percentiles),
            "steps": [
                {
                    "step": ds.step_index,
                    "left": ds.left,
                    "right": ds.right,
                    "auto": ds.auto,
                    **{_pct_label(p): row[ds.step_index] for p, row in zip(self.percentiles, self.percentile_rows)},
                    "causal": ds.step_index in self.causal_steps,
                }
                for ds in self.dims
            ],
        }

    def to_text(self) -> str:
        head = (
            f"sample {self.sample_id}  class {self.workload_class}  checkpoint {self.checkpoint}\n"
            f"aggregate {self.aggregate:.6f}  rank {self.rank}/{self.n}  flagged {self.flagged}\n"
            f"causal steps (auto > p{_pct_label(CAUSAL_PERCENTILE)[1:]}): "
            f"{', '.join(map(str, self.causal_steps)) or 'none'}\n"
        )
        cols = ["step", "left", "right", "auto"] + [_pct_label(p) for p in self.percentiles] + ["causal"]
        rows = []
        for ds in self.dims:
            rows.append(
                [str(ds.step_index), f"{ds.left:.6f}", f"{ds.right:.6f}", f"{ds.auto:.6f}"]
                + [f"{row[ds.step_index]:.6f}" for row in self.percentile_rows]
                + ["*" if ds.step_index in self.causal_steps else ""]
            )
        return head + format_table(cols, rows)


def _pct_label(p: float) -> str:
    return "p" + format(p * 100, "g")


def format_table(columns: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(c), *(len(r[k]) for r in rows)) if rows else len(c) for k, c in enumerate(columns)]
    lines = ["  ".join(c.rjust(w) for c, w in zip(columns, widths)).rstrip()]
    lines += ["  ".join(v.rjust(w) for v, w in zip(r, widths)).rstrip() for r in rows]
    return "\n".join(lines) + "\n"


def explain(scored: ScoredPopulation, sample_id: str, rank: int | None = None) -> ExtrinsicReport:
    """Per-step decomposition of one sample against the population percentile rows."""
    i = scored.index_of(sample_id)
    causal_row = scored.percentile_row(CAUSAL_PERCENTILE)
    auto = scored.scores.auto[i]
    causal = tuple(int(j) for j in np.flatnonzero(auto > causal_row))
    return ExtrinsicReport(
        sample_id=sample_id,
        workload_class=scored.workload_class,
        checkpoint=scored.checkpoint,
        aggregate=float(scored.scores.aggregate[i]),
        rank=rank if rank is not None else scored.ranks()[sample_id],
        n=scored.n,
        flagged=bool(scored.flags[i]),
        dims=scored.scores[i].dims,
        percentiles=scored.percentiles,
        percentile_rows=tuple(tuple(float(v) for v in row) for row in scored.table),
        causal_steps=causal,
    )


def rank_extrinsic(scored: ScoredPopulation, k: int) -> list[ExtrinsicReport]:
    """The top-``k`` samples by aggregate score (``k > n`` returns all n)."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    order = scored.rank_order()[:k]
    return [explain(scored, scored.sample_ids[i], rank=r) for r, i in enumerate(order, start=1)]


# --- checkpoint consistency --------------------------------------------------


@dataclass(frozen=True)
class CheckpointEntry:
    checkpoint: int
    score: float
    rank: int
    flagged: bool


@dataclass(frozen=True)
class ConsistencyReport:
    sample_id: str
    entries: tuple[CheckpointEntry, ...]

    @property
    def consistent(self) -> bool:
        return all(e.flagged for e in self.entries)

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "consistent": self.consistent,
            "checkpoints": [
                {"checkpoint": e.checkpoint, "score": e.score, "rank": e.rank, "flagged": e.flagged}
                for e in self.entries
            ],
        }

    def to_text(self) -> str:
        rows = [[str(e.checkpoint), f"{e.score:.6f}", str(e.rank), str(e.flagged)] for e in self.entries]
        return (
            f"sample {self.sample_id}  consistent {self.consistent}\n"
            + format_table(["checkpoint", "score", "rank", "flagged"], rows)
        )


def checkpoint_consistency(populations: Iterable[ScoredPopulation], sample_id: str) -> ConsistencyReport:
    """Track one sample across every checkpoint present in ``populations``.

    The sample must belong to one population at each checkpoint.
    """
    by_cp: dict[int, list[ScoredPopulation]] = {}
    for pop in populations:
        by_cp.setdefault(pop.checkpoint, []).append(pop)
    if not by_cp:
        raise SampleLookupError("no scored populations supplied")
    entries = []
    for cp in sorted(by_cp):
        hits = [p for p in by_cp[cp] if p.contains(sample_id)]
        if not hits:
            raise SampleLookupError(f"sample {sample_id!r} missing from checkpoint {cp}")
        pop = hits[0]
        i = pop.index_of(sample_id)
        entries.append(CheckpointEntry(cp, float(pop.scores.aggregate[i]), pop.ranks()[sample_id], bool(pop.flags[i])))
    return ConsistencyReport(sample_id, tuple(entries))


# --- histograms --------------------------------------------------------------


@dataclass(frozen=True)
class Histogram:
    edges: np.ndarray
    percent: np.ndarray

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin", "lo", "hi", "percent"])
        for k, pct in enumerate(self.percent):
            w.writerow([k, repr(float(self.edges[k])), repr(float(self.edges[k + 1])), repr(float(pct))])
        return buf.getvalue()


def score_histogram(scored, bin_count: int = 50) -> Histogram:
    """Equal-width histogram of aggregate scores over ``[0, max]`` as percentages.

    Accepts a :class:`ScoredPopulation` or a plain array of scores. When every
    score is 0 the span defaults to ``[0, 1]``.
    """
    agg = np.asarray(scored.scores.aggregate if isinstance(scored, ScoredPopulation) else scored, dtype=float)
    if bin_count < 1:
        raise ValueError(f"bin_count must be >= 1, got {bin_count}")
    if agg.size == 0:
        raise ConstraintError("cannot build a histogram of an empty population")
    hi = float(agg.max()) or 1.0
    counts, edges = np.histogram(agg, bins=bin_count, range=(0.0, hi))
    return Histogram(edges, counts * (100.0 / agg.size))


# --- output layout -----------------------------------------------------------


def slug(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "_", name).strip("_") or "class"


def population_stem(pop: ScoredPopulation) -> str:
    return f"{slug(pop.workload_class)}_cp{pop.checkpoint}"


def percentile_csv(pop: ScoredPopulation) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step"] + [_pct_label(p) for p in pop.percentiles])
    for j in range(pop.d):
        w.writerow([j] + [repr(float(pop.table[k, j])) for k in range(len(pop.percentiles))])
    return buf.getvalue()


def load_scored_dir(*paths) -> list[ScoredPopulation]:
    """Load ``scored_*.json`` files from directories (or the files themselves)."""
    files = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            files.extend(sorted(p.glob("scored_*.json")))
        elif p.is_file():
            files.append(p)
        else:
            raise SampleLookupError(f"{p}: no such scored file or directory")
    if not files:
        raise SampleLookupError(f"no scored_*.json files under {', '.join(map(str, paths))}")
    return [ScoredPopulation.from_dict(json.loads(f.read_text(encoding="utf-8"))) for f in files]
