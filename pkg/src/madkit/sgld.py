"""SGLD sampling from the localized posterior around trained weights, with
per-draw observable traces.

The update is

    w' = w - (eps/2) * [ (nbeta/m) * grad L_B(w) + gamma * (w - w*) ]
         + sqrt(eps) * eta,   eta ~ N(0, I)

with L_B the summed minibatch loss, i.e. the data drift equals nbeta times
the mean minibatch gradient. The optional RMSprop preconditioner rescales
both the bracketed drift and the noise elementwise by G = 1/(sqrt(V) +
damping), where V tracks squared mean minibatch gradients.

Observable target labels are frozen from the model's own predictions at w*
before the chain starts and never recomputed.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import engine
from .errors import ChainDivergenceError, FormatError, InputError

__all__ = [
    "SgldConfig",
    "ChainState",
    "TraceMatrix",
    "sgld_step",
    "run_chain",
    "kl_observable_trace",
    "run_chain_generic",
]


@dataclass(frozen=True)
class SgldConfig:
    step_size: float = 1e-6
    nbeta: float = 100.0
    gamma: float = 10000.0
    minibatch: int = 256
    steps: int = 2000
    burn_in: int = 250
    seed: int = 0
    preconditioner: str = "none"
    rmsprop_decay: float = 0.99
    rmsprop_damping: float = 1e-8

    def __post_init__(self):
        if self.step_size < 0:
            raise InputError("step size must be >= 0")
        if self.nbeta < 0 or self.gamma < 0:
            raise InputError("nbeta and gamma must be >= 0")
        if self.minibatch < 1:
            raise InputError("minibatch size must be >= 1")
        if not 0 <= self.burn_in < self.steps:
            raise InputError(f"need 0 <= burn_in < steps, got {self.burn_in}/{self.steps}")
        if self.preconditioner not in ("none", "rmsprop"):
            raise InputError(f"unknown preconditioner {self.preconditioner!r}")


@dataclass
class ChainState:
    w: np.ndarray
    t: int
    accum: np.ndarray
    rng: np.random.Generator

    @classmethod
    def initial(cls, w_star: np.ndarray, cfg: SgldConfig) -> "ChainState":
        return cls(w=w_star.copy(), t=0, accum=np.zeros_like(w_star),
                   rng=np.random.default_rng([cfg.seed]))


def _index_batch(d_s, idx):
    if isinstance(d_s, tuple):
        inputs, labels = d_s
        return inputs[idx], labels[idx]
    picked = [d_s[int(i)] for i in idx]
    return np.stack([s.input for s in picked]), np.array([s.label for s in picked])


def sgld_step(state: ChainState, w_star, d_s, cfg: SgldConfig,
              noise_scale: float = 1.0, grad_fn=None) -> ChainState:
    """One chain update; returns the successor state.

    grad_fn(w, rng) -> mean data gradient overrides the default minibatch
    cross-entropy gradient (used for synthetic posteriors); noise_scale=0
    suppresses diffusion for deterministic checks.
    """
    w = state.w
    center = w_star.values if hasattr(w_star, "values") else np.asarray(w_star)
    d = w.size
    gbar = np.zeros(d)
    if cfg.nbeta != 0.0:
        if grad_fn is not None:
            gbar = grad_fn(w, state.rng)
        else:
            if not hasattr(w_star, "arch"):
                raise InputError("default minibatch gradient needs a ParamVector center")
            n = len(d_s[1]) if isinstance(d_s, tuple) else len(d_s)
            idx = state.rng.integers(0, n, size=cfg.minibatch)
            pv = engine.ParamVector(w, w_star.arch, "sampling")
            gbar = engine.grad(pv, _index_batch(d_s, idx), reduction="mean")
    drift = cfg.nbeta * gbar + cfg.gamma * (w - center)
    if cfg.preconditioner == "rmsprop":
        accum = cfg.rmsprop_decay * state.accum + (1 - cfg.rmsprop_decay) * gbar * gbar
        g_pre = 1.0 / (np.sqrt(accum) + cfg.rmsprop_damping)
    else:
        accum = state.accum
        g_pre = 1.0
    eta = state.rng.standard_normal(d)
    w_new = (w - 0.5 * cfg.step_size * g_pre * drift
             + np.sqrt(cfg.step_size * g_pre) * noise_scale * eta)
    if not np.all(np.isfinite(w_new)):
        raise ChainDivergenceError("chain parameter vector went non-finite", step=state.t + 1)
    return ChainState(w=w_new, t=state.t + 1, accum=accum, rng=state.rng)


@dataclass
class TraceMatrix:
    """Per-sample observable traces over the post-burn-in draws.

    Rows follow the observable sample list; `valid` flags rows whose trace
    stayed finite. `target_label` is the frozen prediction at w*.
    """

    values: np.ndarray
    sample_id: list[str]
    split: list[str]
    provenance: list[str]
    label: list[int]
    target_label: list[int]
    valid: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.valid is None:
            self.valid = np.all(np.isfinite(self.values), axis=1)

    def __len__(self):
        return self.values.shape[0]

    @property
    def draws(self) -> int:
        return self.values.shape[1]

    def row_index(self, sample_id: str) -> int:
        return self.sample_id.index(sample_id)

    def select(self, indices) -> "TraceMatrix":
        idx = list(indices)
        return TraceMatrix(self.values[idx], [self.sample_id[i] for i in idx],
                           [self.split[i] for i in idx], [self.provenance[i] for i in idx],
                           [self.label[i] for i in idx], [self.target_label[i] for i in idx],
                           self.valid[idx])

    def where(self, **conditions) -> "TraceMatrix":
        """Rows matching all metadata equality conditions, e.g. split='trusted'."""
        idx = [i for i in range(len(self))
               if all(getattr(self, key)[i] == val for key, val in conditions.items())]
        return self.select(idx)

    def first_draws(self, k: int) -> "TraceMatrix":
        """Truncate to the first k post-burn-in draws (a shorter chain)."""
        if not 1 <= k <= self.draws:
            raise InputError(f"k={k} out of range for {self.draws} draws")
        return TraceMatrix(self.values[:, :k], self.sample_id, self.split,
                           self.provenance, self.label, self.target_label)

    # -- export ------------------------------------------------------------

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["sample_id", "split", "provenance", "label", "target_label"]
                            + [f"t{j}" for j in range(self.draws)])
            for i in range(len(self)):
                writer.writerow([self.sample_id[i], self.split[i], self.provenance[i],
                                 self.label[i], self.target_label[i]]
                                + [f"{v:.17g}" for v in self.values[i]])

    @classmethod
    def from_csv(cls, path) -> "TraceMatrix":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0][:5] != ["sample_id", "split", "provenance", "label", "target_label"]:
            raise FormatError(f"{path}: not a trace CSV")
        header, body = rows[0], rows[1:]
        ncol = len(header) - 5
        values = np.empty((len(body), ncol))
        ids, splits, provs, labels, targets = [], [], [], [], []
        for i, row in enumerate(body):
            ids.append(row[0]); splits.append(row[1]); provs.append(row[2])
            labels.append(int(row[3])); targets.append(int(row[4]))
            values[i] = [float(v) for v in row[5:]]
        return cls(values, ids, splits, provs, labels, targets)

    def to_binary(self, path) -> None:
        """Binary trace file: b"MADT" | u32 version | u32 jlen | metadata JSON
        | u64 rows | u64 cols | row-major little-endian float64."""
        meta = json.dumps({"sample_id": self.sample_id, "split": self.split,
                           "provenance": self.provenance, "label": self.label,
                           "target_label": self.target_label},
                          sort_keys=True, separators=(",", ":")).encode("utf-8")
        blob = bytearray(b"MADT")
        blob += struct.pack("<I", 1)
        blob += struct.pack("<I", len(meta))
        blob += meta
        blob += struct.pack("<QQ", *self.values.shape)
        blob += self.values.astype("<f8").tobytes()
        Path(path).write_bytes(bytes(blob))

    @classmethod
    def from_binary(cls, path) -> "TraceMatrix":
        raw = Path(path).read_bytes()
        if raw[:4] != b"MADT":
            raise FormatError(f"bad trace magic {raw[:4]!r}", offset=0)
        (jlen,) = struct.unpack_from("<I", raw, 8)
        meta = json.loads(raw[12:12 + jlen].decode("utf-8"))
        off = 12 + jlen
        rows, cols = struct.unpack_from("<QQ", raw, off)
        values = np.frombuffer(raw, dtype="<f8", count=rows * cols,
                               offset=off + 16).reshape(rows, cols).copy()
        return cls(values, meta["sample_id"], meta["split"], meta["provenance"],
                   meta["label"], meta["target_label"])


def _observable_closure(w_star, observables, kind: str):
    arch = w_star.arch
    inputs = np.stack([s.input for s in observables])
    x_t = engine._as_input_batch(arch, inputs)
    logits0 = engine._forward_t(torch.from_numpy(w_star.values), arch, x_t).numpy()
    targets = np.argmax(logits0, axis=1)
    p_star = engine.softmax_np(logits0)
    log_p_star = np.log(np.clip(p_star, 1e-300, None))

    def observe(w: np.ndarray) -> np.ndarray:
        logits = engine._forward_t(torch.from_numpy(w), arch, x_t).numpy()
        if kind == "ce":
            return engine.cross_entropy_np(logits, targets)
        # KL(p(.|x; w*) || p(.|x; w)) per sample
        m = logits.max(axis=1, keepdims=True)
        log_p = logits - m - np.log(np.exp(logits - m).sum(axis=1, keepdims=True))
        return np.sum(p_star * (log_p_star - log_p), axis=1)

    return observe, targets


def run_chain_generic(w_center: np.ndarray, cfg: SgldConfig, grad_fn, observe_fn,
                      noise_scale: float = 1.0) -> np.ndarray:
    """Drive a chain with injected gradient/observable callables.

    Returns the raw (n_observables, steps - burn_in) trace array. This is
    the extension point for synthetic posteriors (e.g. quadratic losses).
    """
    if grad_fn is None and cfg.nbeta != 0.0:
        raise InputError("run_chain_generic needs grad_fn when nbeta != 0")
    center = np.asarray(w_center, dtype=np.float64)
    state = ChainState.initial(center, cfg)
    cols = []
    for _ in range(cfg.steps):
        state = sgld_step(state, center, None, cfg, noise_scale=noise_scale, grad_fn=grad_fn)
        if state.t > cfg.burn_in:
            cols.append(observe_fn(state.w))
    return np.asarray(cols).T


def run_chain(w_star, d_s, observables, cfg: SgldConfig,
              observable: str = "ce") -> TraceMatrix:
    """Single SGLD chain from w*; records every observable at every kept draw.

    Per-sample non-finite traces are flagged invalid rather than aborting;
    only a non-finite parameter vector aborts the chain.
    """
    if not observables:
        raise InputError("observable sample list is empty")
    if isinstance(d_s, list) and len(d_s) > 0:
        d_s = (np.stack([s.input for s in d_s]), np.array([s.label for s in d_s]))
    observe, targets = _observable_closure(w_star, observables, observable)
    state = ChainState.initial(w_star.values, cfg)
    cols = []
    for _ in range(cfg.steps):
        state = sgld_step(state, w_star, d_s, cfg)
        if state.t > cfg.burn_in:
            cols.append(observe(state.w))
    values = np.asarray(cols).T
    return TraceMatrix(
        values,
        [s.sample_id for s in observables],
        [s.split for s in observables],
        [s.provenance for s in observables],
        [s.label for s in observables],
        [int(t) for t in targets],
    )


def kl_observable_trace(w_star, samples, cfg: SgldConfig, d_s) -> TraceMatrix:
    """run_chain with the KL-to-initial-distribution observable."""
    return run_chain(w_star, d_s, samples, cfg, observable="kl")
