"""Differentiable classifier engine over flat parameter vectors.

All public entry points speak numpy float64: a model is a flat vector plus
an ArchDescriptor. torch (CPU, float64) supplies reverse-mode gradients and
exact double-backprop Hessian-vector products behind this interface.

Layout contract: images are (H, W, C) in [0, 1] at the interface and are
transposed to channel-first internally; Flatten therefore runs in
channel-major order, and dense weights are stored (out, in) row-major,
biases after weights, layers in descriptor order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .arch import ArchDescriptor, Conv2d, Dense, Flatten, MaxPool, Relu, arch_from_json, arch_to_json
from .errors import CapacityError, FormatError, InputError, TrainingError

__all__ = [
    "ParamVector",
    "TrainConfig",
    "init_model",
    "forward",
    "forward_batch",
    "loss",
    "losses_batch",
    "predict",
    "predict_batch",
    "grad",
    "hvp",
    "dense_hessian",
    "input_grad_batch",
    "penultimate_batch",
    "train_stage",
    "train_two_stage",
    "save_checkpoint",
    "load_checkpoint",
]

DENSE_HESSIAN_CAP = 15000
DENSE_HESSIAN_BYTES = 2.8e9  # H alone must fit comfortably in sandbox RAM

torch.set_grad_enabled(False)  # grads are requested explicitly where needed


@dataclass
class ParamVector:
    """Flat float64 parameter vector bound to an architecture.

    origin is one of {"initialized", "pretrained", "backdoored"}.
    """

    values: np.ndarray
    arch: ArchDescriptor
    origin: str = "initialized"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1 or self.values.size != self.arch.param_count:
            raise InputError(
                f"parameter vector has {self.values.size} entries, "
                f"arch needs {self.arch.param_count}"
            )
        if not np.all(np.isfinite(self.values)):
            raise InputError("parameter vector contains non-finite entries")

    def replace(self, values: np.ndarray, origin: str | None = None) -> "ParamVector":
        return ParamVector(values, self.arch, origin or self.origin)


@dataclass
class TrainConfig:
    """One SGD stage: lr/momentum/weight-decay/epochs/batch/seed."""

    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    epochs: int = 1
    batch_size: int = 2048
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise InputError(f"learning rate must be > 0, got {self.learning_rate}")
        if self.epochs < 0:
            raise InputError(f"epochs must be >= 0, got {self.epochs}")


@lru_cache(maxsize=64)
def _slots(arch: ArchDescriptor):
    """(layer index, tensor shape, flat slice) for every parameter tensor."""
    slots = []
    offset = 0
    for i, layer in enumerate(arch.layers):
        if isinstance(layer, Conv2d):
            shapes = [(layer.out_ch, layer.in_ch, layer.kernel, layer.kernel), (layer.out_ch,)]
        elif isinstance(layer, Dense):
            shapes = [(layer.out_dim, layer.in_dim), (layer.out_dim,)]
        else:
            continue
        for shape in shapes:
            n = int(np.prod(shape))
            slots.append((i, shape, slice(offset, offset + n)))
            offset += n
    return tuple(slots)


def _layer_params(flat: torch.Tensor, arch: ArchDescriptor) -> dict[int, list[torch.Tensor]]:
    out: dict[int, list[torch.Tensor]] = {}
    for i, shape, sl in _slots(arch):
        out.setdefault(i, []).append(flat[sl].reshape(shape))
    return out


def _forward_t(flat: torch.Tensor, arch: ArchDescriptor, x: torch.Tensor,
               stop_before: int | None = None) -> torch.Tensor:
    """Run the network on a channel-first batch; optionally stop early."""
    params = _layer_params(flat, arch)
    h = x
    for i, layer in enumerate(arch.layers):
        if stop_before is not None and i >= stop_before:
            break
        if isinstance(layer, Conv2d):
            w, b = params[i]
            h = F.conv2d(h, w, b, stride=layer.stride)
        elif isinstance(layer, Relu):
            h = torch.relu(h)
        elif isinstance(layer, MaxPool):
            h = F.max_pool2d(h, layer.k)
        elif isinstance(layer, Flatten):
            h = h.reshape(h.shape[0], -1)
        elif isinstance(layer, Dense):
            w, b = params[i]
            h = F.linear(h, w, b)
    return h


def _as_input_batch(arch: ArchDescriptor, inputs: np.ndarray) -> torch.Tensor:
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim == 3:
        inputs = inputs[None]
    if inputs.shape[1:] != arch.input_shape:
        raise InputError(
            f"input shape {inputs.shape[1:]} does not match arch {arch.input_shape}"
        )
    # (N, H, W, C) -> (N, C, H, W)
    return torch.from_numpy(np.ascontiguousarray(inputs.transpose(0, 3, 1, 2)))


def _stack_batch(batch) -> tuple[np.ndarray, np.ndarray]:
    """Accept a list of LabeledSample-likes or an (inputs, labels) pair."""
    if isinstance(batch, tuple) and len(batch) == 2:
        inputs, labels = batch
        return np.asarray(inputs, dtype=np.float64), np.asarray(labels, dtype=np.int64)
    if len(batch) == 0:
        raise InputError("empty batch")
    inputs = np.stack([np.asarray(s.input, dtype=np.float64) for s in batch])
    labels = np.array([s.label for s in batch], dtype=np.int64)
    return inputs, labels


def init_model(arch: ArchDescriptor, seed: int) -> ParamVector:
    """He-style fan-in scaled uniform weights, zero biases; deterministic."""
    rng = np.random.default_rng(seed)
    values = np.zeros(arch.param_count, dtype=np.float64)
    for i, shape, sl in _slots(arch):
        if len(shape) == 1:
            continue  # bias stays zero
        fan_in = int(np.prod(shape[1:]))
        bound = np.sqrt(6.0 / fan_in)
        values[sl] = rng.uniform(-bound, bound, sl.stop - sl.start)
    return ParamVector(values, arch, "initialized")


def forward_batch(params: ParamVector, inputs: np.ndarray) -> np.ndarray:
    x = _as_input_batch(params.arch, inputs)
    w = torch.from_numpy(params.values)
    return _forward_t(w, params.arch, x).numpy()


def forward(params: ParamVector, input: np.ndarray) -> np.ndarray:
    """Logit vector (length K) for a single (H, W, C) input."""
    return forward_batch(params, np.asarray(input)[None])[0]


def losses_batch(params: ParamVector, inputs: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Per-sample cross-entropy toward the given targets."""
    logits = forward_batch(params, inputs)
    return cross_entropy_np(logits, np.asarray(targets, dtype=np.int64))


def cross_entropy_np(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Stable -log softmax(logits)[target], vectorized over rows."""
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    return lse - logits[np.arange(len(targets)), targets]


def softmax_np(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=-1, keepdims=True)


def loss(params: ParamVector, input: np.ndarray, target: int) -> float:
    if not 0 <= target < params.arch.classes:
        raise InputError(f"target {target} out of range for K={params.arch.classes}")
    return float(losses_batch(params, np.asarray(input)[None], np.array([target]))[0])


def predict_batch(params: ParamVector, inputs: np.ndarray) -> np.ndarray:
    # np.argmax resolves ties to the lowest index, which is the contract
    return np.argmax(forward_batch(params, inputs), axis=1)


def predict(params: ParamVector, input: np.ndarray) -> int:
    return int(predict_batch(params, np.asarray(input)[None])[0])


def _loss_graph(params: ParamVector, batch, reduction: str):
    inputs, labels = _stack_batch(batch)
    if inputs.shape[0] == 0:
        raise InputError("empty batch")
    if reduction not in ("sum", "mean"):
        raise InputError(f"reduction must be 'sum' or 'mean', got {reduction!r}")
    x = _as_input_batch(params.arch, inputs)
    y = torch.from_numpy(labels)
    w = torch.from_numpy(params.values.copy()).requires_grad_(True)
    with torch.enable_grad():
        logits = _forward_t(w, params.arch, x)
        total = F.cross_entropy(logits, y, reduction=reduction)
    return w, total


def grad(params: ParamVector, batch, reduction: str = "mean") -> np.ndarray:
    """Exact reverse-mode gradient of the reduced cross-entropy."""
    w, total = _loss_graph(params, batch, reduction)
    with torch.enable_grad():
        (g,) = torch.autograd.grad(total, w)
    return g.numpy()


def hvp(params: ParamVector, batch, v: np.ndarray, reduction: str = "mean") -> np.ndarray:
    """Hessian-vector product via double backprop (exact)."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (params.arch.param_count,):
        raise InputError(f"v has shape {v.shape}, need ({params.arch.param_count},)")
    w, total = _loss_graph(params, batch, reduction)
    with torch.enable_grad():
        (g,) = torch.autograd.grad(total, w, create_graph=True)
        (hv,) = torch.autograd.grad(g, w, grad_outputs=torch.from_numpy(v))
    return hv.numpy()


def dense_hessian(params: ParamVector, dataset, reduction: str = "mean",
                  cap: int = DENSE_HESSIAN_CAP, data_chunk: int = 1024,
                  return_asymmetry: bool = False):
    """Dense d x d Hessian of the reduced loss, symmetrized as (H + H^T)/2.

    Rows are exact double-backprop products H e_j, accumulated over data
    chunks. Refuses to run above the parameter cap or the memory budget.
    """
    d = params.arch.param_count
    if d > cap:
        raise CapacityError(f"d={d} exceeds dense-Hessian cap {cap}")
    if d * d * 8 > DENSE_HESSIAN_BYTES:
        raise CapacityError(f"d={d} needs {d * d * 8 / 1e9:.1f} GB, over budget")
    inputs, labels = _stack_batch(dataset)
    n = inputs.shape[0]
    if n == 0:
        raise InputError("empty dataset")
    H = np.zeros((d, d), dtype=np.float64)
    basis = torch.eye(1, dtype=torch.float64)  # placeholder, rebuilt below
    for start in range(0, n, data_chunk):
        stop = min(start + data_chunk, n)
        chunk = (inputs[start:stop], labels[start:stop])
        w, total = _loss_graph(params, chunk, "sum")
        with torch.enable_grad():
            (g,) = torch.autograd.grad(total, w, create_graph=True)
            for j in range(d):
                basis = torch.zeros(d, dtype=torch.float64)
                basis[j] = 1.0
                (row,) = torch.autograd.grad(g, w, grad_outputs=basis, retain_graph=j < d - 1)
                H[j] += row.numpy()
    if reduction == "mean":
        H /= n
    asym = float(np.abs(H - H.T).max())
    H = (H + H.T) / 2.0
    if return_asymmetry:
        return H, asym
    return H


def input_grad_batch(params: ParamVector, inputs: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Gradient of per-sample cross-entropy w.r.t. the inputs, (N, H, W, C)."""
    x = _as_input_batch(params.arch, np.asarray(inputs, dtype=np.float64))
    x.requires_grad_(True)
    y = torch.from_numpy(np.asarray(targets, dtype=np.int64))
    w = torch.from_numpy(params.values)
    with torch.enable_grad():
        logits = _forward_t(w, params.arch, x)
        total = F.cross_entropy(logits, y, reduction="sum")
        (gx,) = torch.autograd.grad(total, x)
    return gx.numpy().transpose(0, 2, 3, 1)


def penultimate_batch(params: ParamVector, inputs: np.ndarray) -> np.ndarray:
    """Activations entering the final dense layer (the latent tap)."""
    last_dense = max(i for i, layer in enumerate(params.arch.layers) if isinstance(layer, Dense))
    x = _as_input_batch(params.arch, inputs)
    w = torch.from_numpy(params.values)
    return _forward_t(w, params.arch, x, stop_before=last_dense).numpy()


def train_stage(w0: ParamVector, data, cfg: TrainConfig, origin: str = "pretrained"):
    """Minibatch SGD with momentum and (coupled) weight decay.

    Returns (trained ParamVector, history) where history records the mean
    cross-entropy of every minibatch and every epoch.
    """
    inputs, labels = _stack_batch(data)
    n = inputs.shape[0]
    if n == 0:
        raise InputError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    w = w0.values.copy()
    buf = np.zeros_like(w)
    step_loss: list[float] = []
    epoch_loss: list[float] = []
    pv = w0
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        batch_losses = []
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            pv = ParamVector(w, w0.arch, origin)
            batch = (inputs[idx], labels[idx])
            wt, total = _loss_graph(pv, batch, "mean")
            with torch.enable_grad():
                (g,) = torch.autograd.grad(total, wt)
            loss_val = float(total.detach())
            if not np.isfinite(loss_val):
                raise TrainingError("training loss went non-finite", epoch=epoch)
            g = g.numpy()
            if cfg.weight_decay:
                g = g + cfg.weight_decay * w
            buf = cfg.momentum * buf + g
            w = w - cfg.learning_rate * buf
            if not np.all(np.isfinite(w)):
                raise TrainingError("parameter vector went non-finite", epoch=epoch)
            step_loss.append(loss_val)
            batch_losses.append(loss_val)
        epoch_loss.append(float(np.mean(batch_losses)))
    return ParamVector(w, w0.arch, origin), {"step_loss": step_loss, "epoch_loss": epoch_loss}


def train_two_stage(arch: ArchDescriptor, clean_data, poisoned_data,
                    cfg_clean: TrainConfig, cfg_bd: TrainConfig):
    """Clean pretraining then poisoned finetuning; returns both checkpoints."""
    w_init = init_model(arch, cfg_clean.seed)
    w_clean, _ = train_stage(w_init, clean_data, cfg_clean, origin="pretrained")
    w_bd, _ = train_stage(w_clean, poisoned_data, cfg_bd, origin="backdoored")
    return w_clean, w_bd


# ---------------------------------------------------------------------------
# Checkpoint file: b"MADW" | u32 version | u32 json-length | arch+origin JSON
# | u64 d | d little-endian float64. Integers little-endian.
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"MADW"
_CKPT_VERSION = 1


def save_checkpoint(path, params: ParamVector) -> None:
    header = arch_to_json(params.arch, extra={"origin": params.origin}).encode("utf-8")
    blob = bytearray()
    blob += _CKPT_MAGIC
    blob += struct.pack("<I", _CKPT_VERSION)
    blob += struct.pack("<I", len(header))
    blob += header
    blob += struct.pack("<Q", params.values.size)
    blob += params.values.astype("<f8").tobytes()
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path) -> ParamVector:
    raw = Path(path).read_bytes()
    if raw[:4] != _CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {raw[:4]!r}", offset=0)
    version = struct.unpack_from("<I", raw, 4)[0]
    if version != _CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    (hlen,) = struct.unpack_from("<I", raw, 8)
    header = raw[12:12 + hlen].decode("utf-8")
    arch, extra = arch_from_json(header)
    off = 12 + hlen
    (d,) = struct.unpack_from("<Q", raw, off)
    off += 8
    if len(raw) - off != d * 8:
        raise FormatError(f"expected {d * 8} payload bytes, have {len(raw) - off}", offset=off)
    values = np.frombuffer(raw, dtype="<f8", count=d, offset=off).copy()
    return ParamVector(values, arch, extra.get("origin", "pretrained"))
