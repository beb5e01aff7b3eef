"""Metrics (AUROC, DER, Mahalanobis baseline) and experiment runners.

Runners operate on a DetectionBundle of recorded traces; anything that only
re-reads traces (contamination row swaps, draw truncation, trusted-set
subsampling) reuses the shared chain, while gamma/nbeta points come from a
caller-supplied chain factory since they change the dynamics.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import attribution
from .attribution import DetectionScore, METHODS
from .data import ContaminationSpec
from .errors import InputError, ParameterError
from .sgld import TraceMatrix

__all__ = [
    "RocResult",
    "auroc",
    "DerResult",
    "der",
    "mahalanobis_baseline",
    "DetectionBundle",
    "detection_scores",
    "detection_auroc",
    "run_contamination_study",
    "run_sensitivity_sweep",
    "run_multipathology",
]


@dataclass
class RocResult:
    auroc: float
    points: list[tuple[float, float]]  # (FPR, TPR) per threshold, sweep high->low
    positive: str = "normal"  # higher scores = normal; normal is the positive class


def auroc(scores_normal, scores_anomalous) -> RocResult:
    """Mann-Whitney AUROC: P(normal > anomalous) + 0.5 P(tie)."""
    a = np.asarray(scores_normal, dtype=np.float64)
    b = np.asarray(scores_anomalous, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise InputError("both score lists must be non-empty")
    wins = (a[:, None] > b[None, :]).sum()
    ties = (a[:, None] == b[None, :]).sum()
    value = float((wins + 0.5 * ties) / (a.size * b.size))
    points = [(0.0, 0.0)]
    for t in np.unique(np.concatenate([a, b]))[::-1]:
        points.append((float((b >= t).mean()), float((a >= t).mean())))
    if points[-1] != (1.0, 1.0):
        points.append((1.0, 1.0))
    return RocResult(value, points)


@dataclass
class DerResult:
    baseline_cacc: float
    baseline_asr: float
    post_cacc: float
    post_asr: float
    delta_cacc: float
    delta_asr: float
    der: float
    threshold: float


def der(clean_eval, bd_eval, baseline_cacc: float, baseline_asr: float) -> DerResult:
    """Defense Effectiveness Rating with the max-DER threshold sweep.

    clean_eval: (score, correct?) pairs; bd_eval: (score, hits_target?)
    pairs. A sample is accepted iff score >= threshold; rejected samples
    count as mishandled (clean: incorrect, backdoor: attack failed), so
    rejection can only lower post C-Acc and post ASR.
    """
    if not 0 <= baseline_cacc <= 1 or not 0 <= baseline_asr <= 1:
        raise InputError("baselines must lie in [0, 1]")
    if not clean_eval or not bd_eval:
        raise InputError("both evaluation lists must be non-empty")
    cs = np.array([s for s, _ in clean_eval], dtype=np.float64)
    cok = np.array([bool(c) for _, c in clean_eval])
    bs = np.array([s for s, _ in bd_eval], dtype=np.float64)
    bhit = np.array([bool(h) for _, h in bd_eval])
    all_scores = np.unique(np.concatenate([cs, bs]))
    # decision boundaries realizing every distinct accept set
    taus = [-np.inf]
    taus += [(all_scores[i] + all_scores[i + 1]) / 2 for i in range(all_scores.size - 1)]
    taus.append(np.inf)
    best = None
    for tau in taus:
        post_cacc = float((cok & (cs >= tau)).mean())
        post_asr = float((bhit & (bs >= tau)).mean())
        d_asr = baseline_asr - post_asr
        d_cacc = baseline_cacc - post_cacc
        value = (max(0.0, d_asr) - max(0.0, d_cacc) + 1.0) / 2.0
        if best is None or value > best.der + 1e-15:
            best = DerResult(baseline_cacc, baseline_asr, post_cacc, post_asr,
                             d_cacc, d_asr, value, float(tau))
    return best


def mahalanobis_baseline(trusted_activations, trusted_labels, test_activations,
                         shrinkage: float = 0.05, test_ids=None) -> list[DetectionScore]:
    """Latent-space baseline: negated Mahalanobis distance to the nearest
    class-conditional Gaussian under a shared shrunk covariance."""
    X = np.asarray(trusted_activations, dtype=np.float64)
    y = np.asarray(trusted_labels)
    T = np.asarray(test_activations, dtype=np.float64)
    n, p = X.shape
    if p > n and shrinkage <= 0:
        raise ParameterError(f"activation dim {p} exceeds sample count {n}; need shrinkage > 0")
    classes = np.unique(y)
    means = {c: X[y == c].mean(axis=0) for c in classes}
    centered = np.concatenate([X[y == c] - means[c] for c in classes])
    cov = centered.T @ centered / n
    if shrinkage > 0:
        cov = (1 - shrinkage) * cov + shrinkage * (np.trace(cov) / p) * np.eye(p)
    prec = np.linalg.inv(cov)
    ids = test_ids if test_ids is not None else [str(i) for i in range(T.shape[0])]
    out = []
    for i in range(T.shape[0]):
        best = np.inf
        for c in classes:
            diff = T[i] - means[c]
            best = min(best, float(diff @ prec @ diff))
        out.append(DetectionScore(ids[i], -float(np.sqrt(max(best, 0.0))), "mahalanobis"))
    return out


# ---------------------------------------------------------------------------
# Study runners over recorded traces
# ---------------------------------------------------------------------------

@dataclass
class DetectionBundle:
    """Traces of one chain, split by role.

    contaminant_rows maps a contamination mode to traces of the altered
    trusted samples, row-aligned with the prefix (poisoning modes) or the
    whole (gaussian mode) of `trusted`.
    """

    trusted: TraceMatrix
    test: TraceMatrix
    contaminant_rows: dict[str, TraceMatrix] = field(default_factory=dict)

    def contaminated_trusted(self, spec: ContaminationSpec) -> TraceMatrix:
        n = len(self.trusted)
        if spec.mode == "gaussian_noise":
            rows = self.contaminant_rows.get("gaussian_noise")
            if rows is None or len(rows) != n:
                raise InputError("gaussian contaminant traces missing or misaligned")
            return rows
        k = int(spec.rate * n)
        if k == 0:
            return self.trusted
        rows = self.contaminant_rows.get(spec.mode)
        if rows is None or len(rows) < k:
            raise InputError(f"{spec.mode} contaminant traces missing or too few")
        swapped = self.trusted.select(range(n))
        head = rows.select(range(k))
        values = swapped.values.copy()
        values[:k] = head.values
        return TraceMatrix(values,
                           head.sample_id + swapped.sample_id[k:],
                           ["trusted"] * n,
                           head.provenance + swapped.provenance[k:],
                           head.label + swapped.label[k:],
                           head.target_label + swapped.target_label[k:])


def detection_scores(trusted: TraceMatrix, test: TraceMatrix, method: str) -> list[DetectionScore]:
    if method not in METHODS:
        raise InputError(f"unknown method {method!r}; have {sorted(METHODS)}")
    measure, agg = METHODS[method]
    if agg == "knn":
        combined = _concat_traces(trusted, test)
        preds = combined.target_label  # frozen predictions at w*
        return attribution.offline_knn_score(combined, preds)
    return attribution.detect(test, trusted, measure, agg, method_name=method)


def _concat_traces(a: TraceMatrix, b: TraceMatrix) -> TraceMatrix:
    if a.draws != b.draws:
        raise InputError("trace matrices disagree on draw count")
    return TraceMatrix(np.vstack([a.values, b.values]), a.sample_id + b.sample_id,
                       a.split + b.split, a.provenance + b.provenance,
                       a.label + b.label, a.target_label + b.target_label)


def detection_auroc(trusted: TraceMatrix, test: TraceMatrix, method: str) -> float:
    """AUROC of clean-vs-anomalous test provenance under one method."""
    scores = detection_scores(trusted, test, method)
    prov = {sid: p for sid, p in zip(test.sample_id, test.provenance)}
    normal = [s.score for s in scores if prov[s.sample_id] == "clean"]
    anomalous = [s.score for s in scores if prov[s.sample_id] != "clean"]
    return auroc(normal, anomalous).auroc


def run_contamination_study(bundle: DetectionBundle, specs, methods) -> list[dict]:
    """AUROC per (mode, rate, method); rate-0 rows reuse the clean trusted
    set exactly. Chain reuse is valid throughout because contamination
    never touches the sampling set."""
    rows = []
    for spec in specs:
        trusted = bundle.contaminated_trusted(spec)
        for method in methods:
            rows.append({
                "mode": spec.mode,
                "rate": spec.rate if spec.mode != "gaussian_noise" else spec.noise_sigma,
                "method": method,
                "auroc": detection_auroc(trusted, bundle.test, method),
            })
    return rows


def _balanced_subsample(trusted: TraceMatrix, size: int, seed: int) -> TraceMatrix:
    labels = np.asarray(trusted.label)
    classes = np.unique(labels)
    rng = np.random.default_rng(seed)
    per, rem = divmod(size, classes.size)
    idx = []
    for j, c in enumerate(classes):
        pool = np.flatnonzero(labels == c)
        want = per + (1 if j < rem else 0)
        if pool.size < want:
            raise ParameterError(f"class {c} has {pool.size} trusted rows, need {want}")
        idx.extend(rng.choice(pool, size=want, replace=False).tolist())
    return trusted.select(sorted(idx))


def run_sensitivity_sweep(bundle: DetectionBundle, methods,
                          draws: list[int] | None = None,
                          trusted_sizes: list[int] | None = None,
                          chain_points: list[tuple[float, float]] | None = None,
                          chain_factory=None, subsamples: int = 5,
                          seed: int = 0) -> list[dict]:
    """AUROC grid over draw counts, trusted-set sizes (class-balanced,
    averaged over independent subsamples) and (gamma, nbeta) chain points.

    Draw truncation uses the leading draws of the recorded chain (identical
    to a shorter run); (gamma, nbeta) points need chain_factory(gamma,
    nbeta) -> DetectionBundle since they alter the dynamics.
    """
    rows = []
    for k in draws or []:
        for method in methods:
            rows.append({"knob": "draws", "value": k, "method": method,
                         "auroc": detection_auroc(bundle.trusted.first_draws(k),
                                                  bundle.test.first_draws(k), method)})
    for size in trusted_sizes or []:
        for method in methods:
            vals = [detection_auroc(_balanced_subsample(bundle.trusted, size, seed + 1000 * j),
                                    bundle.test, method)
                    for j in range(subsamples)]
            rows.append({"knob": "trusted_size", "value": size, "method": method,
                         "auroc": float(np.mean(vals))})
    for gamma, nbeta in chain_points or []:
        if chain_factory is None:
            raise InputError("chain_points require a chain_factory")
        b = chain_factory(gamma, nbeta)
        for method in methods:
            rows.append({"knob": "gamma_nbeta", "value": (gamma, nbeta), "method": method,
                         "auroc": detection_auroc(b.trusted, b.test, method)})
    return rows


def run_multipathology(bundle: DetectionBundle, methods, knn_k: int = 10):
    """Per-population score summaries plus the full offline coupling matrix."""
    summaries = []
    all_scores: list[DetectionScore] = []
    prov = {sid: p for sid, p in zip(bundle.test.sample_id, bundle.test.provenance)}
    for method in methods:
        scores = detection_scores(bundle.trusted, bundle.test, method)
        all_scores.extend(scores)
        by_pop: dict[str, list[float]] = {}
        for s in scores:
            by_pop.setdefault(prov[s.sample_id], []).append(s.score)
        for pop, vals in sorted(by_pop.items()):
            summaries.append({"method": method, "provenance": pop,
                              "median": float(np.median(vals)), "count": len(vals)})
    offline = attribution.offline_coupling_matrix(
        _concat_traces(bundle.trusted, bundle.test))
    return {"summaries": summaries, "scores": all_scores, "offline": offline}
