"""Hessian eigenspectrum analysis and the spectral detection condition.

Quantities, in eigenbasis order (eigenvalues descending, sharp -> flat):

  probe weights     sigma_i = 1 / (beta * lambda_i + gamma)
  energy profile    mu_i    = (v_i . g)^2 / |g|^2
  self-energy       S(mu)   = sum_i sigma_i mu_i
  alignment         alpha_i = sign(g_i * g'_i)
  overlap           B(mu, mu'; alpha) = sum_i sigma_i alpha_i sqrt(mu_i mu'_i)
  overlap ratio     R = B(mu_T, mu_clean) / B(mu_T, mu_anom)
  amplification     A = S(mu_anom) / S(mu_clean)

Detection requires R^2 * A > 1 under the positive-alignment assumption; the
report also carries an empirical-alignment variant when mean alignment
vectors are supplied.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg
import scipy.sparse.linalg

from .errors import DegenerateGradientError, FormatError, InputError

__all__ = [
    "Spectrum",
    "eigendecompose",
    "lanczos_topk",
    "probe_weights",
    "EnergyProfile",
    "energy_distribution",
    "population_energy",
    "weighted_self_energy",
    "alignment",
    "mean_alignment",
    "bhattacharyya_weighted",
    "DetectionConditionReport",
    "detection_condition",
    "laplace_covariance",
    "k_at_energy",
    "weight_delta_energy",
    "save_spectrum",
    "load_spectrum",
    "spectrum_summary_csv",
]

SYM_TOL = 1e-5
GRAD_TOL = 1e-12


@dataclass
class Spectrum:
    """Eigenvalues (descending) and orthonormal eigenvectors (columns)."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    source: str = "dense"  # or "lanczos_topk(k)"
    beta: float | None = None
    gamma: float | None = None

    @property
    def dim(self) -> int:
        return self.eigenvectors.shape[0]

    @property
    def count(self) -> int:
        return self.eigenvalues.size

    def project(self, g: np.ndarray) -> np.ndarray:
        """Coordinates of g in the eigenbasis (one per retained eigenpair)."""
        return self.eigenvectors.T @ np.asarray(g, dtype=np.float64)


def eigendecompose(H: np.ndarray) -> Spectrum:
    """Full spectrum of a symmetric matrix, eigenvalues descending."""
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2 or H.shape[0] != H.shape[1]:
        raise InputError(f"need a square matrix, got {H.shape}")
    asym = float(np.abs(H - H.T).max())
    if asym > SYM_TOL:
        raise InputError(f"matrix asymmetry {asym:.3g} exceeds tolerance {SYM_TOL}")
    Hs = (H + H.T) / 2.0
    vals, vecs = scipy.linalg.eigh(Hs, driver="evr")
    order = np.argsort(vals)[::-1]
    return Spectrum(vals[order], vecs[:, order], source="dense")


def lanczos_topk(hvp_fn, d: int, k: int, iters: int, seed: int = 0,
                 residual_tol: float = 1e-3) -> Spectrum:
    """Top-k eigenpairs via implicitly restarted Lanczos on an operator.

    hvp_fn(v) -> H v. Start vector is seeded, so results are deterministic.
    Each accepted Ritz pair must satisfy |Hv - lambda v| / |lambda| below
    residual_tol.
    """
    if not 1 <= k <= iters <= d:
        raise InputError(f"need 1 <= k <= iters <= d, got k={k}, iters={iters}, d={d}")
    op = scipy.sparse.linalg.LinearOperator((d, d), matvec=hvp_fn, dtype=np.float64)
    v0 = np.random.default_rng(seed).standard_normal(d)
    ncv = min(d, max(2 * k + 1, min(iters, d)))
    vals, vecs = scipy.sparse.linalg.eigsh(op, k=k, which="LA", v0=v0, ncv=ncv)
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    for i in range(k):
        resid = np.linalg.norm(hvp_fn(vecs[:, i]) - vals[i] * vecs[:, i])
        scale = max(abs(vals[i]), 1e-30)
        if resid / scale > residual_tol:
            raise InputError(
                f"Ritz pair {i} residual {resid / scale:.3g} exceeds {residual_tol}")
    return Spectrum(vals, vecs, source=f"lanczos_topk({k})")


def probe_weights(spectrum: Spectrum, beta: float, gamma: float) -> np.ndarray:
    """Posterior covariance eigenvalues sigma_i = 1/(beta*lambda_i + gamma).

    gamma > 0 guards zero (and slightly negative numerical) eigenvalues.
    """
    if beta <= 0 or gamma <= 0:
        raise InputError("beta and gamma must be > 0")
    return 1.0 / (beta * spectrum.eigenvalues + gamma)


@dataclass
class EnergyProfile:
    """Normalized squared projections onto eigendirections plus the
    gradient norm (population profiles carry the mean norm)."""

    mu: np.ndarray
    grad_norm: float

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)


def energy_distribution(g: np.ndarray, spectrum: Spectrum) -> EnergyProfile:
    g = np.asarray(g, dtype=np.float64)
    norm = float(np.linalg.norm(g))
    if norm <= GRAD_TOL:
        raise DegenerateGradientError("gradient norm below tolerance; no energy profile")
    proj = spectrum.project(g)
    return EnergyProfile(proj ** 2 / (norm * norm), norm)


def population_energy(gradients, spectrum: Spectrum) -> EnergyProfile:
    """Mean per-sample energy profile of a gradient population."""
    profiles = [energy_distribution(g, spectrum) for g in gradients]
    mu = np.mean([p.mu for p in profiles], axis=0)
    return EnergyProfile(mu, float(np.mean([p.grad_norm for p in profiles])))


def weighted_self_energy(mu, sigma) -> float:
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    return float(sigma @ mu)


def alignment(g: np.ndarray, g_other: np.ndarray, spectrum: Spectrum) -> np.ndarray:
    """Per-direction sign agreement of two gradients in the eigenbasis."""
    a = spectrum.project(g)
    b = spectrum.project(g_other)
    return np.sign(a * b)


def mean_alignment(gradients_a, gradients_b, spectrum: Spectrum) -> np.ndarray:
    """Mean alignment over all cross pairs of two gradient populations.

    Sign products factorize over the pair average, so this is the
    elementwise product of the two populations' mean sign vectors.
    """
    a = np.mean([np.sign(spectrum.project(g)) for g in gradients_a], axis=0)
    b = np.mean([np.sign(spectrum.project(g)) for g in gradients_b], axis=0)
    return a * b


def bhattacharyya_weighted(mu, mu_other, sigma, alpha=1.0) -> float:
    """Probe-weighted, sign-carrying Bhattacharyya overlap."""
    mu = np.asarray(mu, dtype=np.float64)
    mu_other = np.asarray(mu_other, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    alpha = np.broadcast_to(np.asarray(alpha, dtype=np.float64), mu.shape)
    return float(np.sum(sigma * alpha * np.sqrt(np.clip(mu, 0, None) *
                                                np.clip(mu_other, 0, None))))


@dataclass
class DetectionConditionReport:
    """All scalars of the spectral detection condition at one (beta, gamma)."""

    beta: float
    gamma: float
    s_trusted: float
    s_clean: float
    s_anomalous: float
    b_trusted_clean: float
    b_trusted_anomalous: float
    overlap_ratio: float        # R
    amplification: float        # A
    condition_value: float      # R^2 * A
    condition_holds: bool
    empirical_overlap_ratio: float | None = None
    empirical_condition_value: float | None = None
    empirical_condition_holds: bool | None = None

    def to_json(self) -> str:
        def fmt(v):
            if isinstance(v, float):
                return float(f"{v:.17g}")
            return v
        doc = {k: fmt(v) for k, v in self.__dict__.items()}
        return json.dumps(doc, sort_keys=True, indent=2)


def detection_condition(mu_trusted, mu_clean, mu_anomalous, sigma,
                        beta: float = float("nan"), gamma: float = float("nan"),
                        alpha_trusted_clean=None, alpha_trusted_anomalous=None
                        ) -> DetectionConditionReport:
    """Evaluate R, A and R^2*A under positive alignment; optionally also
    under measured mean alignment vectors."""
    s_t = weighted_self_energy(mu_trusted, sigma)
    s_c = weighted_self_energy(mu_clean, sigma)
    s_b = weighted_self_energy(mu_anomalous, sigma)
    b_c = bhattacharyya_weighted(mu_trusted, mu_clean, sigma)
    b_b = bhattacharyya_weighted(mu_trusted, mu_anomalous, sigma)
    r = b_c / b_b if b_b > 0 else float("inf")
    a = s_b / s_c
    value = r * r * a if np.isfinite(r) else float("inf")
    report = DetectionConditionReport(
        beta=beta, gamma=gamma, s_trusted=s_t, s_clean=s_c, s_anomalous=s_b,
        b_trusted_clean=b_c, b_trusted_anomalous=b_b,
        overlap_ratio=r, amplification=a, condition_value=value,
        condition_holds=bool(value > 1.0),
    )
    if alpha_trusted_clean is not None and alpha_trusted_anomalous is not None:
        b_c_e = bhattacharyya_weighted(mu_trusted, mu_clean, sigma, alpha_trusted_clean)
        b_b_e = bhattacharyya_weighted(mu_trusted, mu_anomalous, sigma, alpha_trusted_anomalous)
        r_e = b_c_e / b_b_e if b_b_e > 0 else float("inf")
        v_e = r_e * r_e * a if np.isfinite(r_e) else float("inf")
        report.empirical_overlap_ratio = r_e
        report.empirical_condition_value = v_e
        report.empirical_condition_holds = bool(v_e > 1.0)
    return report


def laplace_covariance(g, g_other, spectrum: Spectrum, beta: float, gamma: float) -> float:
    """Analytic probe covariance: sum_i sigma_i g_i g'_i in the eigenbasis."""
    sigma = probe_weights(spectrum, beta, gamma)
    return float(np.sum(sigma * spectrum.project(g) * spectrum.project(g_other)))


def k_at_energy(mu, threshold: float) -> int:
    """Smallest k (1-based) whose cumulative energy reaches the threshold."""
    mu = np.asarray(mu, dtype=np.float64)
    if not 0 < threshold <= 1:
        raise InputError("threshold must be in (0, 1]")
    cum = np.cumsum(mu)
    hits = np.nonzero(cum >= threshold - 1e-12)[0]
    if hits.size == 0:
        return mu.size
    return int(hits[0]) + 1


def weight_delta_energy(delta_w: np.ndarray, spectrum: Spectrum) -> np.ndarray:
    """Cumulative squared-projection fraction of delta_w, sharp -> flat."""
    profile = energy_distribution(delta_w, spectrum)
    return np.cumsum(profile.mu)


# ---------------------------------------------------------------------------
# Spectrum files: b"MADS" | u32 version | u64 d | u64 k | k eigenvalues |
# d*k eigenvector matrix (column-major by eigenpair), little-endian float64.
# ---------------------------------------------------------------------------

def save_spectrum(path, spectrum: Spectrum) -> None:
    blob = bytearray(b"MADS")
    blob += struct.pack("<I", 1)
    blob += struct.pack("<QQ", spectrum.dim, spectrum.count)
    blob += spectrum.eigenvalues.astype("<f8").tobytes()
    blob += np.asfortranarray(spectrum.eigenvectors).astype("<f8").tobytes(order="F")
    Path(path).write_bytes(bytes(blob))


def load_spectrum(path) -> Spectrum:
    raw = Path(path).read_bytes()
    if raw[:4] != b"MADS":
        raise FormatError(f"bad spectrum magic {raw[:4]!r}", offset=0)
    d, k = struct.unpack_from("<QQ", raw, 8)
    off = 24
    vals = np.frombuffer(raw, dtype="<f8", count=k, offset=off).copy()
    off += k * 8
    vecs = np.frombuffer(raw, dtype="<f8", count=d * k, offset=off).reshape((d, k), order="F").copy()
    return Spectrum(vals, vecs)


def spectrum_summary_csv(path, spectrum: Spectrum, beta: float, gamma: float) -> None:
    """CSV: index, eigenvalue, probe weight, cumulative eigenvalue mass."""
    sigma = probe_weights(spectrum, beta, gamma)
    total = float(np.sum(np.abs(spectrum.eigenvalues)))
    cum = np.cumsum(np.abs(spectrum.eigenvalues)) / (total if total > 0 else 1.0)
    with open(path, "w", newline="") as fh:
        fh.write("index,eigenvalue,probe_weight,cumulative_mass\n")
        for i in range(spectrum.count):
            fh.write(f"{i},{spectrum.eigenvalues[i]:.17g},{sigma[i]:.17g},{cum[i]:.17g}\n")
