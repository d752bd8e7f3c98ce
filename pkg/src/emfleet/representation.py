"""Workload representation learning from per-step outlier scores.

Pipeline: univariate ECOD scores per EM step within each workload class ->
median per (workload group, step) -> PCA of the resulting feature matrix ->
low-dimensional embedding whose axes can be checked against known stress
intensities.
"""

from __future__ import annotations

import csv
import io
import itertools
import logging
from dataclasses import dataclass
from typing import Hashable, Mapping, Sequence

import numpy as np

from emfleet import ecod
from emfleet.errors import ConstraintError, DataShapeError
from emfleet.telemetry import FleetDataset, partition_by_class

logger = logging.getLogger(__name__)

GROUPINGS = {
    "workload": ("workload_id",),
    "workload-generation": ("workload_id", "generation"),
    "class": ("workload_class",),
}

JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100


def per_step_scores(dataset) -> np.ndarray:
    """n x d matrix whose column j is the auto score of a univariate fit on step j alone."""
    X = dataset.counts if hasattr(dataset, "counts") else np.asarray(dataset)
    if X.ndim != 2:
        raise DataShapeError(f"expected an n x d matrix, got shape {X.shape}")
    n, d = X.shape
    if n < 2:
        raise ConstraintError(f"per-step scoring needs at least 2 samples, got {n}")
    out = np.empty((n, d))
    for j in range(d):
        col = X[:, j : j + 1]
        out[:, j] = ecod.score_population(ecod.fit(col), col).auto[:, 0]
    return out


@dataclass(frozen=True, eq=False)
class WorkloadFeatureMatrix:
    """Rows are workload groups, columns EM steps, entries median per-step scores."""

    row_keys: tuple[tuple, ...]
    values: np.ndarray
    group_sizes: tuple[int, ...]
    generations: tuple[str, ...] = ()
    workload_classes: tuple[str, ...] = ()
    latent: np.ndarray | None = None

    @property
    def shape(self):
        return self.values.shape

    def labels(self) -> list[str]:
        return ["/".join(map(str, k)) for k in self.row_keys]

    def select(self, rows: Sequence[int]) -> WorkloadFeatureMatrix:
        rows = list(rows)
        return WorkloadFeatureMatrix(
            tuple(self.row_keys[i] for i in rows),
            self.values[rows],
            tuple(self.group_sizes[i] for i in rows),
            tuple(self.generations[i] for i in rows) if self.generations else (),
            tuple(self.workload_classes[i] for i in rows) if self.workload_classes else (),
            None if self.latent is None else self.latent[rows],
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["group_key", "size"] + [f"step_{j}" for j in range(self.values.shape[1])])
        for label, size, row in zip(self.labels(), self.group_sizes, self.values):
            w.writerow([label, size] + [repr(float(v)) for v in row])
        return buf.getvalue()


def compress_medians(scores: np.ndarray, groups: Sequence[Hashable]) -> WorkloadFeatureMatrix:
    """Median of each step's scores within each group; groups keep first-seen order."""
    scores = np.asarray(scores, dtype=float)
    if scores.ndim != 2 or scores.shape[0] != len(groups):
        raise DataShapeError("scores must be n x d with one group label per row")
    members: dict = {}
    for i, g in enumerate(groups):
        members.setdefault(g, []).append(i)
    for g, rows in members.items():
        if len(rows) < 2:
            raise ConstraintError(f"group {g!r} has {len(rows)} sample(s); at least 2 are required")
    keys = tuple(g if isinstance(g, tuple) else (g,) for g in members)
    values = np.array([np.median(scores[rows], axis=0) for rows in members.values()])
    return WorkloadFeatureMatrix(keys, values.reshape(len(keys), scores.shape[1]), tuple(len(r) for r in members.values()))


def _single_or_mixed(values) -> str:
    values = set(values)
    return values.pop() if len(values) == 1 else "mixed"


def build_feature_matrix(
    dataset: FleetDataset,
    group_by: str | Sequence[str] = "workload-generation",
    checkpoint: int | None = None,
    latent: Mapping[str, Sequence[float]] | None = None,
) -> WorkloadFeatureMatrix:
    """Run per-step scoring per workload class, then median-compress per group.

    Only one checkpoint is used (default: the latest). ``latent`` maps
    workload_id to ground-truth stress intensities; a group's latent vector is
    the mean over its samples.
    """
    keys = GROUPINGS[group_by] if isinstance(group_by, str) else tuple(group_by)
    if checkpoint is None:
        checkpoint = max(dataset.checkpoints())
    snap = dataset.filter(checkpoint=checkpoint)
    if snap.n == 0:
        raise DataShapeError(f"no records at checkpoint {checkpoint}")
    records, blocks = [], []
    for _, part in partition_by_class(snap).items():
        if part.n < 2:
            raise ConstraintError(f"class {part.records[0].workload_class!r} has fewer than 2 samples")
        blocks.append(per_step_scores(part))
        records.extend(part.records)
    scores = np.vstack(blocks)
    groups = [tuple(getattr(r, k) for k in keys) for r in records]
    fm = compress_medians(scores, groups)

    members: dict = {}
    for r, g in zip(records, groups):
        members.setdefault(g, []).append(r)
    gens = tuple(_single_or_mixed(r.generation for r in members[k]) for k in fm.row_keys)
    classes = tuple(_single_or_mixed(r.workload_class for r in members[k]) for k in fm.row_keys)
    lat = None
    if latent is not None:
        lat = np.array([np.mean([latent[r.workload_id] for r in members[k]], axis=0) for k in fm.row_keys])
    return WorkloadFeatureMatrix(fm.row_keys, fm.values, fm.group_sizes, gens, classes, lat)


# --- eigen-decomposition -----------------------------------------------------


def jacobi_eigh(A: np.ndarray, tol: float = JACOBI_TOL, max_sweeps: int = JACOBI_MAX_SWEEPS):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns ``(eigenvalues, eigenvectors)`` unsorted; column k of the vector
    matrix pairs with eigenvalue k. Stops once every off-diagonal magnitude is
    below ``tol``.
    """
    A = np.array(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DataShapeError("jacobi_eigh needs a square matrix")
    if not np.allclose(A, A.T, rtol=0, atol=1e-12 * max(1.0, np.abs(A).max(initial=0))):
        raise DataShapeError("jacobi_eigh needs a symmetric matrix")
    A = (A + A.T) / 2
    d = A.shape[0]
    V = np.eye(d)
    for sweep in range(max_sweeps):
        off = np.abs(A[np.triu_indices(d, 1)]).max(initial=0.0)
        if off < tol:
            break
        for p in range(d - 1):
            for q in range(p + 1, d):
                apq = A[p, q]
                if apq == 0.0:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                t = np.copysign(1.0, theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                cp, cq = A[:, p].copy(), A[:, q].copy()
                A[:, p] = c * cp - s * cq
                A[:, q] = s * cp + c * cq
                rp, rq = A[p, :].copy(), A[q, :].copy()
                A[p, :] = c * rp - s * rq
                A[q, :] = s * rp + c * rq
                A[p, q] = A[q, p] = 0.0
                vp, vq = V[:, p].copy(), V[:, q].copy()
                V[:, p] = c * vp - s * vq
                V[:, q] = s * vp + c * vq
    else:
        off = np.abs(A[np.triu_indices(d, 1)]).max(initial=0.0)
        if off >= tol:
            logger.warning("Jacobi did not converge in %d sweeps (max off-diagonal %.3g)", max_sweeps, off)
    return np.diag(A).copy(), V


# --- PCA ---------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PcaModel:
    """Principal axes of a feature matrix.

    ``components`` is d x d with orthonormal columns sorted by decreasing
    eigenvalue; each column's largest-magnitude entry is positive.
    """

    mean: np.ndarray
    scale: np.ndarray
    components: np.ndarray
    eigenvalues: np.ndarray
    ratios: np.ndarray
    covariance: np.ndarray

    @property
    def n_components(self) -> int:
        return self.components.shape[1]

    def transform(self, values: np.ndarray, k: int | None = None) -> np.ndarray:
        k = self.n_components if k is None else k
        Z = (np.asarray(values, dtype=float) - self.mean) / self.scale
        return Z @ self.components[:, :k]

    def reconstruction_error(self, values: np.ndarray, k: int) -> np.ndarray:
        Z = (np.asarray(values, dtype=float) - self.mean) / self.scale
        W = self.components[:, :k]
        return np.linalg.norm(Z - (Z @ W) @ W.T, axis=1)


def pca_fit(matrix, scale: bool = True) -> PcaModel:
    """Centre (and optionally unit-variance scale) the rows, then eigendecompose the covariance."""
    X = np.asarray(getattr(matrix, "values", matrix), dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ConstraintError(f"PCA needs at least 2 rows, got shape {X.shape}")
    if X.shape[1] < 1:
        raise DataShapeError("PCA needs at least 1 column")
    mean = X.mean(axis=0)
    Z = X - mean
    if scale:
        sd = Z.std(axis=0, ddof=1)
        sd = np.where(sd > 0, sd, 1.0)
    else:
        sd = np.ones(X.shape[1])
    Z = Z / sd
    cov = Z.T @ Z / (X.shape[0] - 1)
    vals, vecs = jacobi_eigh(cov)
    order = sorted(range(len(vals)), key=lambda k: -vals[k])
    vals = vals[order]
    vecs = vecs[:, order]
    vals = np.where(np.abs(vals) < 1e-12 * max(1.0, np.trace(cov)), 0.0, vals)
    if np.any(vals < 0):
        raise ConstraintError(f"covariance has a negative eigenvalue {vals.min():.3g}")
    for k in range(vecs.shape[1]):
        if vecs[np.argmax(np.abs(vecs[:, k])), k] < 0:
            vecs[:, k] = -vecs[:, k]
    total = vals.sum()
    if total <= 0:
        raise ConstraintError("feature matrix has zero variance; PCA is undefined")
    return PcaModel(mean, sd, vecs, vals, vals / total, cov)


def scree(pca: PcaModel) -> list[tuple[int, float, float]]:
    cum = np.cumsum(pca.ratios)
    return [(k + 1, float(r), float(c)) for k, (r, c) in enumerate(zip(pca.ratios, cum))]


def scree_csv(pca: PcaModel) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["component", "ratio", "cumulative"])
    for k, r, c in scree(pca):
        w.writerow([k, repr(r), repr(c)])
    return buf.getvalue()


def embed(pca: PcaModel, matrix, k: int = 3) -> np.ndarray:
    """Project (centred, scaled as fitted) rows onto the top-``k`` components."""
    if not 1 <= k <= pca.n_components:
        raise ConstraintError(f"k={k} exceeds the {pca.n_components} available components")
    return pca.transform(getattr(matrix, "values", matrix), k)


def embedding_csv(pca: PcaModel, fm: WorkloadFeatureMatrix, k: int = 3) -> str:
    coords = embed(pca, fm, k)
    err = pca.reconstruction_error(fm.values, k)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["group_key", "generation", "workload_class"] + [f"pc{i + 1}" for i in range(k)] + ["recon_error"])
    for r, label in enumerate(fm.labels()):
        gen = fm.generations[r] if fm.generations else ""
        cls = fm.workload_classes[r] if fm.workload_classes else ""
        w.writerow([label, gen, cls] + [repr(float(v)) for v in coords[r]] + [repr(float(err[r]))])
    return buf.getvalue()


# --- validation against latent stimulus --------------------------------------


@dataclass(frozen=True)
class AxisMatch:
    axis: str
    best_pc: int | None
    best_abs_r: float | None
    assigned_pc: int | None
    assigned_abs_r: float | None


def _pearson(x: np.ndarray, y: np.ndarray) -> float | None:
    x = x - x.mean()
    y = y - y.mean()
    sx, sy = np.sqrt((x * x).sum()), np.sqrt((y * y).sum())
    if sx == 0 or sy == 0:
        return None
    return float((x * y).sum() / (sx * sy))


def axis_correlation(embedding: np.ndarray, latent: np.ndarray, axes: Sequence[str]) -> list[AxisMatch]:
    """Match each latent stress axis to principal components by |Pearson r|.

    ``best_pc`` is each axis's individually best PC (1-based). ``assigned_pc``
    comes from the one-to-one assignment of axes to distinct PCs maximising the
    summed |r|. Constant axes get ``None``.
    """
    E = np.asarray(embedding, dtype=float)
    L = np.asarray(latent, dtype=float)
    if E.shape[0] != L.shape[0]:
        raise DataShapeError(f"embedding has {E.shape[0]} rows, latent labels have {L.shape[0]}")
    if L.shape[1] != len(axes):
        raise DataShapeError("one axis name per latent column is required")
    k = E.shape[1]
    R = np.full((len(axes), k), np.nan)
    for a in range(len(axes)):
        for c in range(k):
            r = _pearson(L[:, a], E[:, c])
            if r is not None:
                R[a, c] = abs(r)
    defined = [a for a in range(len(axes)) if not np.all(np.isnan(R[a]))]
    assignment: dict[int, int] = {}
    if defined and len(defined) <= k:
        best, best_sum = None, -1.0
        for perm in itertools.permutations(range(k), len(defined)):
            total = sum(np.nan_to_num(R[a, c]) for a, c in zip(defined, perm))
            if total > best_sum + 1e-15:
                best, best_sum = perm, total
        assignment = dict(zip(defined, best))
    out = []
    for a, name in enumerate(axes):
        if a not in defined:
            out.append(AxisMatch(name, None, None, None, None))
            continue
        c = int(np.nanargmax(R[a]))
        ac = assignment.get(a)
        out.append(AxisMatch(
            name, c + 1, float(R[a, c]),
            None if ac is None else ac + 1, None if ac is None else float(R[a, ac]),
        ))
    return out


def axis_table(matches: Sequence[AxisMatch]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["axis", "best_pc", "best_abs_r", "assigned_pc", "assigned_abs_r"])
    for m in matches:
        w.writerow([
            m.axis,
            "" if m.best_pc is None else m.best_pc,
            "undefined" if m.best_abs_r is None else repr(m.best_abs_r),
            "" if m.assigned_pc is None else m.assigned_pc,
            "undefined" if m.assigned_abs_r is None else repr(m.assigned_abs_r),
        ])
    return buf.getvalue()
