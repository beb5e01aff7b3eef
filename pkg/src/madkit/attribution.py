"""Coupling measures over loss traces and the detection scorers.

Score polarity is uniform everywhere: higher = more normal. Degenerate
(zero-variance) traces get a neutral score of 0 with a warning instead of
failing the batch; the scalar ops themselves raise so the policy stays at
the matrix level.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateTraceError, InputError, ParameterError
from .sgld import TraceMatrix

__all__ = [
    "covariance",
    "pearson",
    "ccc",
    "CouplingMatrix",
    "coupling_matrix",
    "offline_coupling_matrix",
    "agg_mean",
    "agg_clc",
    "DetectionScore",
    "detect",
    "offline_knn_score",
    "write_scores_csv",
    "read_scores_csv",
    "METHODS",
]

VAR_TOL = 1e-12

# method name -> (coupling measure, aggregation)
METHODS = {
    "mean": ("pearson", "mean"),
    "clc": ("pearson", "clc"),
    "cccc": ("ccc", "clc"),
    "cov-mean": ("cov", "mean"),
    "knn_offline": ("pearson", "knn"),
}


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise InputError(f"traces must be equal-length vectors, got {a.shape} vs {b.shape}")
    if a.size < 2:
        raise InputError("traces need at least 2 draws")
    return a, b


def covariance(a, b) -> float:
    """Sample covariance with divisor n-1."""
    a, b = _check_pair(a, b)
    return float((a - a.mean()) @ (b - b.mean()) / (a.size - 1))


def pearson(a, b) -> float:
    a, b = _check_pair(a, b)
    va = a.var()
    vb = b.var()
    if va < VAR_TOL or vb < VAR_TOL:
        raise DegenerateTraceError("trace variance below tolerance; correlation undefined")
    r = float((a - a.mean()) @ (b - b.mean()) / (a.size * np.sqrt(va * vb)))
    return min(1.0, max(-1.0, r))


def ccc(a, b) -> float:
    """Concordance correlation: 2*cov / (var1 + var2 + (mean gap)^2).

    Population (1/n) moments, after Lin's original definition.
    """
    a, b = _check_pair(a, b)
    va, vb = a.var(), b.var()
    if va < VAR_TOL or vb < VAR_TOL:
        raise DegenerateTraceError("trace variance below tolerance; concordance undefined")
    cov0 = float((a - a.mean()) @ (b - b.mean()) / a.size)
    val = 2.0 * cov0 / (va + vb + (a.mean() - b.mean()) ** 2)
    return min(1.0, max(-1.0, float(val)))


_MEASURES = {"cov": covariance, "pearson": pearson, "ccc": ccc}


@dataclass
class CouplingMatrix:
    """Pairwise couplings; rows = test samples, columns = trusted samples
    (online) or a symmetric all-vs-all matrix (offline)."""

    values: np.ndarray
    measure: str
    row_ids: list[str]
    col_ids: list[str]
    row_labels: list[int]
    col_labels: list[int]
    excluded_rows: list[str]
    excluded_cols: list[str]


def _measure_matrix(A: np.ndarray, B: np.ndarray, measure: str) -> np.ndarray:
    """Vectorized coupling of every A-row against every B-row."""
    n = A.shape[1]
    Ac = A - A.mean(axis=1, keepdims=True)
    Bc = B - B.mean(axis=1, keepdims=True)
    cov1 = Ac @ Bc.T / (n - 1)  # divisor n-1
    if measure == "cov":
        return cov1
    va = Ac.var(axis=1)
    vb = Bc.var(axis=1)
    dega = va < VAR_TOL
    degb = vb < VAR_TOL
    if measure == "pearson":
        denom = np.sqrt(np.outer(np.where(dega, 1.0, va), np.where(degb, 1.0, vb)))
        out = (Ac @ Bc.T / n) / denom
    else:  # ccc
        cov0 = Ac @ Bc.T / n
        gap = (A.mean(axis=1)[:, None] - B.mean(axis=1)[None, :]) ** 2
        out = 2.0 * cov0 / (va[:, None] + vb[None, :] + gap)
    out = np.clip(out, -1.0, 1.0)
    if dega.any() or degb.any():
        warnings.warn("degenerate (zero-variance) traces scored 0", stacklevel=2)
        out[dega, :] = 0.0
        out[:, degb] = 0.0
    return out


def coupling_matrix(test_traces: TraceMatrix, trusted_traces: TraceMatrix,
                    measure: str = "pearson") -> CouplingMatrix:
    """Dense |test| x |trusted| coupling matrix; invalid rows are dropped
    (and reported on the result) before any measure is evaluated."""
    if measure not in _MEASURES:
        raise InputError(f"unknown measure {measure!r}")
    if test_traces.draws != trusted_traces.draws:
        raise InputError("trace matrices disagree on draw count")
    rkeep = [i for i in range(len(test_traces)) if test_traces.valid[i]]
    ckeep = [j for j in range(len(trusted_traces)) if trusted_traces.valid[j]]
    rdrop = [test_traces.sample_id[i] for i in range(len(test_traces)) if i not in set(rkeep)]
    cdrop = [trusted_traces.sample_id[j] for j in range(len(trusted_traces)) if j not in set(ckeep)]
    if rdrop or cdrop:
        warnings.warn(f"excluded invalid traces: {len(rdrop)} test, {len(cdrop)} trusted",
                      stacklevel=2)
    A = test_traces.values[rkeep]
    B = trusted_traces.values[ckeep]
    vals = _measure_matrix(A, B, measure)
    return CouplingMatrix(
        vals, measure,
        [test_traces.sample_id[i] for i in rkeep],
        [trusted_traces.sample_id[j] for j in ckeep],
        [test_traces.label[i] for i in rkeep],
        [trusted_traces.label[j] for j in ckeep],
        rdrop, cdrop,
    )


def offline_coupling_matrix(all_traces: TraceMatrix, measure: str = "pearson") -> CouplingMatrix:
    """Symmetric all-vs-all coupling over one trace matrix."""
    return coupling_matrix(all_traces, all_traces, measure)


@dataclass
class DetectionScore:
    sample_id: str
    score: float
    method: str  # mean | clc | cccc | knn_offline | ...


def agg_mean(row) -> float:
    row = np.asarray(row, dtype=np.float64)
    if row.size == 0:
        raise InputError("empty coupling row")
    return float(row.mean())


def agg_clc(row, trusted_labels) -> float:
    """Max over classes of the within-class mean coupling."""
    row = np.asarray(row, dtype=np.float64)
    labels = np.asarray(trusted_labels)
    if row.size == 0 or row.size != labels.size:
        raise InputError("coupling row and trusted labels must align")
    return max(float(row[labels == c].mean()) for c in np.unique(labels))


def detect(test_traces: TraceMatrix, trusted_traces: TraceMatrix,
           measure: str = "pearson", agg: str = "mean",
           method_name: str | None = None) -> list[DetectionScore]:
    """One score per (valid) test sample; higher = more normal."""
    if agg not in ("mean", "clc"):
        raise InputError(f"unknown aggregation {agg!r}")
    cm = coupling_matrix(test_traces, trusted_traces, measure)
    canonical = {("pearson", "mean"): "mean", ("pearson", "clc"): "clc",
                 ("ccc", "clc"): "cccc"}
    name = method_name or canonical.get((measure, agg), f"{measure}-{agg}")
    labels = np.asarray(cm.col_labels)
    out = []
    for i, sid in enumerate(cm.row_ids):
        if agg == "mean":
            score = agg_mean(cm.values[i])
        else:
            score = agg_clc(cm.values[i], labels)
        out.append(DetectionScore(sid, score, name))
    return out


def offline_knn_score(all_traces: TraceMatrix, predicted_labels, k: int = 10,
                      measure: str = "pearson") -> list[DetectionScore]:
    """Offline scorer on the masked correlation-distance matrix.

    d_ij = 1 - coupling; distances between samples sharing a predicted
    class are masked to +inf; each test sample scores the negated mean
    distance to its k nearest *trusted* samples (0 is maximal).
    """
    if k < 1:
        raise ParameterError("k must be >= 1")
    preds = np.asarray(predicted_labels)
    if preds.size != len(all_traces):
        raise InputError("predicted labels must align with the trace matrix")
    cm = offline_coupling_matrix(all_traces, measure)
    keep_rows = [all_traces.row_index(sid) for sid in cm.row_ids]
    preds = preds[keep_rows]
    splits = [all_traces.split[i] for i in keep_rows]
    dist = 1.0 - cm.values
    same = preds[:, None] == preds[None, :]
    dist = np.where(same, np.inf, dist)
    trusted_cols = np.array([s == "trusted" for s in splits])
    out = []
    for i, sid in enumerate(cm.row_ids):
        if splits[i] == "trusted":
            continue
        cand = np.where(trusted_cols & np.isfinite(dist[i]))[0]
        if cand.size < k:
            raise ParameterError(
                f"sample {sid}: only {cand.size} eligible trusted neighbours, need {k}")
        nearest = np.sort(dist[i, cand])[:k]
        out.append(DetectionScore(sid, -float(nearest.mean()), "knn_offline"))
    return out


# ---------------------------------------------------------------------------
# Score CSV: sample_id, provenance, method, score (+ label, predicted so the
# evaluator can reconstruct correctness and target hits from the same rows)
# ---------------------------------------------------------------------------

def write_scores_csv(path, rows) -> None:
    """rows: iterables of (sample_id, provenance, method, score, label, predicted)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "provenance", "method", "score", "label", "predicted"])
        for sid, prov, method, score, label, predicted in rows:
            writer.writerow([sid, prov, method, f"{score:.17g}", label, predicted])


def read_scores_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = [dict(sample_id=r["sample_id"], provenance=r["provenance"],
                     method=r["method"], score=float(r["score"]),
                     label=int(r["label"]), predicted=int(r["predicted"]))
                for r in reader]
    return rows
