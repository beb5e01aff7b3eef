"""Sample populations: digit data, blended triggers, splits, adversarial
and OOD generation, and trusted-set contamination.

Real data enters as IDX image/label files (28x28, big-endian, standard
magic numbers) and is downsampled to 14x14 by 2x2 average pooling. The
synthetic generator draws jittered seven-segment stroke digits through the
same 28x28 -> 14x14 path so the suite runs with zero downloads.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import engine
from .errors import CapacityError, FormatError, InputError

__all__ = [
    "LabeledSample",
    "TriggerSpec",
    "SplitSpec",
    "ContaminationSpec",
    "IdxSource",
    "SyntheticSource",
    "read_idx_images",
    "read_idx_labels",
    "write_idx_images",
    "write_idx_labels",
    "load_digits",
    "downsample_2x2",
    "apply_trigger",
    "poison_training_set",
    "make_splits",
    "gen_adversarial_pgd",
    "gen_adversarial_pgd_batch",
    "gen_ood",
    "contaminate_trusted",
    "write_manifest",
]

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass
class LabeledSample:
    """One input with label, provenance and split tags.

    input: (H, W, C) float64 in [0, 1]
    provenance: clean | backdoor | adversarial | ood
    split: train | trusted | sampling | test (| unsplit before assignment)
    """

    input: np.ndarray
    label: int
    provenance: str = "clean"
    split: str = "unsplit"
    sample_id: str = ""
    source_index: int = -1


@dataclass(frozen=True)
class TriggerSpec:
    """Blended trigger pattern.

    kind "random_noise" covers the full input; "checkerboard_patch" places
    a cell-pattern patch of size (patch_h, patch_w) at (patch_y, patch_x).
    """

    kind: str = "random_noise"
    seed: int = 0
    opacity: float = 0.2
    patch_y: int = 0
    patch_x: int = 0
    patch_h: int = 6
    patch_w: int = 6
    cell: int = 2

    def __post_init__(self):
        if self.kind not in ("random_noise", "checkerboard_patch"):
            raise InputError(f"unknown trigger kind {self.kind!r}")
        if not 0.0 <= self.opacity <= 1.0:
            raise InputError(f"opacity must be in [0, 1], got {self.opacity}")

    def render(self, shape: tuple[int, int, int]) -> tuple[np.ndarray, np.ndarray]:
        """Trigger tensor and blend mask, both shaped like the input."""
        h, w, c = shape
        if self.kind == "random_noise":
            rng = np.random.default_rng(self.seed)
            return rng.uniform(0.0, 1.0, size=shape), np.ones(shape)
        if self.patch_y + self.patch_h > h or self.patch_x + self.patch_w > w:
            raise InputError(f"patch {self.patch_h}x{self.patch_w} at "
                             f"({self.patch_y},{self.patch_x}) does not fit in {shape}")
        trig = np.zeros(shape)
        mask = np.zeros(shape)
        ys = np.arange(self.patch_h)[:, None] // self.cell
        xs = np.arange(self.patch_w)[None, :] // self.cell
        checker = ((ys + xs) % 2).astype(np.float64)
        trig[self.patch_y:self.patch_y + self.patch_h,
             self.patch_x:self.patch_x + self.patch_w, :] = checker[:, :, None]
        mask[self.patch_y:self.patch_y + self.patch_h,
             self.patch_x:self.patch_x + self.patch_w, :] = 1.0
        return trig, mask


@dataclass(frozen=True)
class SplitSpec:
    """Sizes of the disjoint splits plus seed and balance flag."""

    train: int
    trusted: int
    sampling: int
    test_clean: int
    test_backdoor: int
    seed: int = 0
    class_balance: bool = True


@dataclass(frozen=True)
class ContaminationSpec:
    """Trusted-set contamination: poisoning modes or additive noise."""

    mode: str
    rate: float = 0.0
    noise_sigma: float = 0.0

    def __post_init__(self):
        if self.mode not in ("same_type", "wrong_type", "gaussian_noise"):
            raise InputError(f"unknown contamination mode {self.mode!r}")
        if self.rate > 0.5:
            raise InputError(f"contamination rate {self.rate} exceeds 0.5")
        if self.rate < 0.0:
            raise InputError("contamination rate must be >= 0")


@dataclass(frozen=True)
class IdxSource:
    images: str
    labels: str


@dataclass(frozen=True)
class SyntheticSource:
    seed: int
    count: int


# ---------------------------------------------------------------------------
# IDX files
# ---------------------------------------------------------------------------

def read_idx_images(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise FormatError("IDX image file shorter than its header", offset=len(raw))
    magic, n, h, w = struct.unpack_from(">IIII", raw, 0)
    if magic != IDX_IMAGE_MAGIC:
        raise FormatError(f"bad IDX image magic 0x{magic:08x}", offset=0)
    need = 16 + n * h * w
    if len(raw) < need:
        raise FormatError(f"IDX image payload truncated, need {need} bytes", offset=len(raw))
    return np.frombuffer(raw, dtype=np.uint8, count=n * h * w, offset=16).reshape(n, h, w)


def read_idx_labels(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise FormatError("IDX label file shorter than its header", offset=len(raw))
    magic, n = struct.unpack_from(">II", raw, 0)
    if magic != IDX_LABEL_MAGIC:
        raise FormatError(f"bad IDX label magic 0x{magic:08x}", offset=0)
    if len(raw) < 8 + n:
        raise FormatError(f"IDX label payload truncated, need {8 + n} bytes", offset=len(raw))
    return np.frombuffer(raw, dtype=np.uint8, count=n, offset=8).copy()


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    n, h, w = images.shape
    Path(path).write_bytes(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, h, w) + images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    Path(path).write_bytes(struct.pack(">II", IDX_LABEL_MAGIC, labels.size) + labels.tobytes())


def downsample_2x2(images: np.ndarray) -> np.ndarray:
    """2x2 average pooling; (N, 2H, 2W) float -> (N, H, W)."""
    n, h, w = images.shape
    return images.reshape(n, h // 2, 2, w // 2, 2).mean(axis=(2, 4))


# ---------------------------------------------------------------------------
# Synthetic stroke digits (seven-segment glyphs with per-sample jitter)
# ---------------------------------------------------------------------------

_SEGS = {
    "A": ((0.30, 0.18), (0.70, 0.18)),
    "B": ((0.70, 0.18), (0.70, 0.50)),
    "C": ((0.70, 0.50), (0.70, 0.82)),
    "D": ((0.30, 0.82), (0.70, 0.82)),
    "E": ((0.30, 0.50), (0.30, 0.82)),
    "F": ((0.30, 0.18), (0.30, 0.50)),
    "G": ((0.30, 0.50), (0.70, 0.50)),
}

_GLYPHS = {
    0: "ABCDEF", 1: "BC", 2: "ABGED", 3: "ABGCD", 4: "FGBC",
    5: "AFGCD", 6: "AFGECD", 7: "ABC", 8: "ABCDEFG", 9: "ABCDFG",
}

# Blocky 3x5 bitmap font for the structurally different OOD digit style.
_BLOCK_FONT = {
    0: ["111", "101", "101", "101", "111"],
    1: ["010", "110", "010", "010", "111"],
    2: ["111", "001", "111", "100", "111"],
    3: ["111", "001", "111", "001", "111"],
    4: ["101", "101", "111", "001", "001"],
    5: ["111", "100", "111", "001", "111"],
    6: ["111", "100", "111", "101", "111"],
    7: ["111", "001", "010", "010", "010"],
    8: ["111", "101", "111", "101", "111"],
    9: ["111", "101", "111", "001", "111"],
}

_PIX28 = np.stack(np.meshgrid(np.arange(28) + 0.5, np.arange(28) + 0.5, indexing="xy"),
                  axis=-1).reshape(-1, 2) / 28.0  # pixel centers in unit coords


def _render_segments(segments, rng) -> np.ndarray:
    """Rasterize jittered stroke segments onto a 28x28 canvas.

    Jitter, contrast and noise levels are tuned so a small CNN lands in the
    low-to-mid 90s on clean accuracy, comparable to the real downsampled
    digits; near-saturated accuracy starves the poisoning and adversarial
    experiments of gradient signal.
    """
    angle = rng.uniform(-0.35, 0.35)
    scale = rng.uniform(0.65, 1.20)
    shear = rng.uniform(-0.30, 0.30)
    shift = rng.uniform(-0.12, 0.12, size=2)
    width = rng.uniform(0.038, 0.100)  # stroke half-profile in unit coords
    intensity = rng.uniform(0.40, 1.0)
    rot = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
    rot = rot @ np.array([[1.0, shear], [0.0, 1.0]])
    canvas = np.zeros(784)
    for p0, p1 in segments:
        a = np.asarray(p0) + rng.uniform(-0.045, 0.045, size=2)
        b = np.asarray(p1) + rng.uniform(-0.045, 0.045, size=2)
        a = (rot @ (a - 0.5)) * scale + 0.5 + shift
        b = (rot @ (b - 0.5)) * scale + 0.5 + shift
        if rng.uniform() < 0.06:  # occasional dropped stroke fragment
            mid = (a + b) / 2.0
            b = mid + (b - mid) * rng.uniform(0.3, 0.8)
        ab = b - a
        denom = float(ab @ ab)
        if denom < 1e-12:
            t = np.zeros(len(_PIX28))
        else:
            t = np.clip((_PIX28 - a) @ ab / denom, 0.0, 1.0)
        closest = a + t[:, None] * ab
        dist = np.linalg.norm(_PIX28 - closest, axis=1)
        stroke = np.clip((width - dist) / 0.035 + 0.5, 0.0, 1.0) * intensity
        canvas = np.maximum(canvas, stroke)
    # distractor clutter: a short random stroke somewhere on the canvas
    if rng.uniform() < 0.5:
        a = rng.uniform(0.05, 0.95, size=2)
        b = np.clip(a + rng.uniform(-0.25, 0.25, size=2), 0.0, 1.0)
        ab = b - a
        denom = max(float(ab @ ab), 1e-12)
        t = np.clip((_PIX28 - a) @ ab / denom, 0.0, 1.0)
        dist = np.linalg.norm(_PIX28 - (a + t[:, None] * ab), axis=1)
        clutter = np.clip((0.04 - dist) / 0.035 + 0.5, 0.0, 1.0) * rng.uniform(0.2, 0.5)
        canvas = np.maximum(canvas, clutter)
    # keep the background mostly dark (like real digit scans): a noisy
    # background would mask blended full-image triggers
    canvas += rng.normal(0.0, 0.025, size=784)
    return np.clip(canvas, 0.0, 1.0).reshape(28, 28)


def _synthetic_28(seed: int, index: int, digit: int) -> np.ndarray:
    rng = np.random.default_rng([seed, index])
    return _render_segments([_SEGS[s] for s in _GLYPHS[digit]], rng)


def _blocky_28(seed: int, index: int, digit: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 7919, index])
    cell = 4
    glyph = np.array([[int(ch) for ch in row] for row in _BLOCK_FONT[digit]], dtype=np.float64)
    big = np.kron(glyph, np.ones((cell, cell)))  # 20x12
    canvas = np.zeros((28, 28))
    oy = 4 + rng.integers(-2, 3)
    ox = 8 + rng.integers(-3, 4)
    canvas[oy:oy + big.shape[0], ox:ox + big.shape[1]] = big * rng.uniform(0.8, 1.0)
    canvas += rng.normal(0.0, 0.03, size=(28, 28))
    return np.clip(canvas, 0.0, 1.0)


def load_digits(source) -> list[LabeledSample]:
    """Load 14x14 digit samples from IDX files or the synthetic generator."""
    if isinstance(source, IdxSource):
        images = read_idx_images(source.images)
        labels = read_idx_labels(source.labels)
        if images.shape[0] != labels.shape[0]:
            raise FormatError(f"{images.shape[0]} images vs {labels.shape[0]} labels")
        if images.shape[1:] != (28, 28):
            raise FormatError(f"expected 28x28 images, got {images.shape[1:]}")
        pooled = downsample_2x2(images.astype(np.float64)) / 255.0
        return [
            LabeledSample(pooled[i][:, :, None], int(labels[i]),
                          sample_id=f"idx-{i:05d}", source_index=i)
            for i in range(pooled.shape[0])
        ]
    if isinstance(source, SyntheticSource):
        if source.count < 1:
            raise InputError("synthetic count must be >= 1")
        out = []
        for i in range(source.count):
            digit = i % 10
            img28 = _synthetic_28(source.seed, i, digit)
            img14 = downsample_2x2(img28[None])[0]
            out.append(LabeledSample(img14[:, :, None], digit,
                                     sample_id=f"syn-{i:05d}", source_index=i))
        return out
    raise InputError(f"unknown digit source {source!r}")


# ---------------------------------------------------------------------------
# Poisoning, splits, pathologies
# ---------------------------------------------------------------------------

def apply_trigger(sample: LabeledSample, trigger: TriggerSpec, target: int) -> LabeledSample:
    """Blend the trigger in, retarget the label, tag provenance backdoor."""
    trig, mask = trigger.render(sample.input.shape)
    a = trigger.opacity
    blended = sample.input * (1.0 - a * mask) + a * mask * trig
    return replace(sample, input=np.clip(blended, 0.0, 1.0), label=target,
                   provenance="backdoor", sample_id=sample.sample_id + "-bd")


def poison_training_set(samples: list[LabeledSample], trigger: TriggerSpec,
                        target: int, rate: float, seed: int) -> list[LabeledSample]:
    """Replace a `rate` fraction (rounded down) with triggered versions."""
    n = len(samples)
    k = int(rate * n)
    rng = np.random.default_rng(seed)
    chosen = set(rng.choice(n, size=k, replace=False).tolist()) if k else set()
    return [apply_trigger(s, trigger, target) if i in chosen else s
            for i, s in enumerate(samples)]


def _take_balanced(pools: dict[int, list[int]], size: int, classes: list[int]) -> list[int]:
    taken = []
    per, rem = divmod(size, len(classes))
    for j, c in enumerate(classes):
        want = per + (1 if j < rem else 0)
        if len(pools[c]) < want:
            raise CapacityError(f"class {c} has {len(pools[c])} samples left, need {want}")
        taken.extend(pools[c][:want])
        pools[c] = pools[c][want:]
    return taken


def make_splits(samples: list[LabeledSample], spec: SplitSpec,
                target_class: int = 0) -> dict[str, list[LabeledSample]]:
    """Disjoint train / trusted / sampling / test splits.

    test_backdoor members are drawn from non-target classes only; they stay
    clean here (the trigger is applied downstream). Identical spec =>
    identical membership.
    """
    n = len(samples)
    total = spec.train + spec.trusted + spec.sampling + spec.test_clean + spec.test_backdoor
    if total > n:
        raise CapacityError(f"splits need {total} samples, only {n} available")
    rng = np.random.default_rng(spec.seed)
    order = rng.permutation(n).tolist()
    labels = [samples[i].label for i in order]
    classes = sorted(set(labels))
    pools: dict[int, list[int]] = {c: [] for c in classes}
    for i, lab in zip(order, labels):
        pools[lab].append(i)

    used: set[int] = set()

    def take_sequential(size, exclude_class=None):
        taken = []
        for i in order:
            if len(taken) == size:
                break
            if i in used:
                continue
            if exclude_class is not None and samples[i].label == exclude_class:
                continue
            taken.append(i)
            used.add(i)
        if len(taken) < size:
            raise CapacityError(f"not enough eligible samples for split of size {size}")
        return taken

    def take(size, balanced, exclude_class=None):
        if not balanced:
            return take_sequential(size, exclude_class)
        cls = [c for c in classes if c != exclude_class]
        idx = _take_balanced(pools, size, cls)
        used.update(idx)
        return idx

    if spec.class_balance:
        trusted_idx = take(spec.trusted, True)
        sampling_idx = take(spec.sampling, True)
        test_clean_idx = take(spec.test_clean, True)
        test_bd_idx = take(spec.test_backdoor, True, exclude_class=target_class)
        # remove balanced picks from the sequential view before train
        train_idx = take_sequential(spec.train)
    else:
        trusted_idx = take_sequential(spec.trusted)
        sampling_idx = take_sequential(spec.sampling)
        test_clean_idx = take_sequential(spec.test_clean)
        test_bd_idx = take_sequential(spec.test_backdoor, exclude_class=target_class)
        train_idx = take_sequential(spec.train)

    def tag(indices, split):
        return [replace(samples[i], split=split) for i in indices]

    return {
        "train": tag(train_idx, "train"),
        "trusted": tag(trusted_idx, "trusted"),
        "sampling": tag(sampling_idx, "sampling"),
        "test_clean": tag(test_clean_idx, "test"),
        "test_backdoor": tag(test_bd_idx, "test"),
    }


def gen_adversarial_pgd_batch(params, samples: list[LabeledSample], eps: float,
                              step: float, iters: int, targets: list[int]) -> list[LabeledSample]:
    """Targeted PGD on a whole batch (sign-of-gradient, per-step projection)."""
    if eps < 0:
        raise InputError("eps must be >= 0")
    x0 = np.stack([s.input for s in samples])
    t = np.asarray(targets, dtype=np.int64)
    x = x0.copy()
    for _ in range(iters):
        g = engine.input_grad_batch(params, x, t)
        x = x - step * np.sign(g)
        x = np.clip(x, x0 - eps, x0 + eps)
        x = np.clip(x, 0.0, 1.0)
    return [replace(s, input=x[i], provenance="adversarial",
                    sample_id=s.sample_id + "-adv")
            for i, s in enumerate(samples)]


def gen_adversarial_pgd(params, sample: LabeledSample, eps: float, step: float,
                        iters: int, target: int) -> LabeledSample:
    return gen_adversarial_pgd_batch(params, [sample], eps, step, iters, [target])[0]


def gen_ood(kind: str, count: int, seed: int = 0,
            shape: tuple[int, int, int] = (14, 14, 1)) -> list[LabeledSample]:
    """Out-of-distribution populations: uniform noise or a blocky digit style."""
    if count < 1:
        raise InputError("count must be >= 1")
    out = []
    if kind == "uniform_noise":
        for i in range(count):
            rng = np.random.default_rng([seed, 104729, i])
            img = rng.uniform(0.0, 1.0, size=shape)
            out.append(LabeledSample(img, 0, provenance="ood", split="test",
                                     sample_id=f"ood-noise-{i:05d}"))
    elif kind == "shifted_digits":
        for i in range(count):
            digit = i % 10
            img14 = downsample_2x2(_blocky_28(seed, i, digit)[None])[0]
            out.append(LabeledSample(img14[:, :, None], digit, provenance="ood",
                                     split="test", sample_id=f"ood-block-{i:05d}"))
    else:
        raise InputError(f"unknown OOD kind {kind!r}")
    return out


def contaminate_trusted(d_t: list[LabeledSample], spec: ContaminationSpec,
                        trigger_same: TriggerSpec | None = None,
                        trigger_other: TriggerSpec | None = None,
                        target: int = 0, seed: int = 0) -> list[LabeledSample]:
    """Contaminated copy of the trusted set.

    Poisoning modes replace exactly floor(rate * n) samples (the first ones
    in list order) with triggered versions; gaussian mode perturbs every
    input with clipped additive noise.
    """
    n = len(d_t)
    if spec.mode == "gaussian_noise":
        out = []
        for i, s in enumerate(d_t):
            rng = np.random.default_rng([seed, 15485863, i])
            noisy = np.clip(s.input + rng.normal(0.0, spec.noise_sigma, s.input.shape), 0.0, 1.0)
            out.append(replace(s, input=noisy, sample_id=s.sample_id + "-noise"))
        return out
    k = int(spec.rate * n)
    if k < 1:
        return list(d_t)
    trigger = trigger_same if spec.mode == "same_type" else trigger_other
    if trigger is None:
        raise InputError(f"mode {spec.mode!r} needs its trigger spec")
    out = list(d_t)
    for i in range(k):
        out[i] = replace(apply_trigger(d_t[i], trigger, target), split="trusted")
    return out


def write_manifest(path, samples: list[LabeledSample]) -> None:
    """Dataset manifest CSV: sample_id, split, provenance, label, file_offset."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "split", "provenance", "label", "file_offset"])
        for s in samples:
            offset = 16 + s.source_index * 784 if s.sample_id.startswith("idx-") else -1
            writer.writerow([s.sample_id, s.split, s.provenance, s.label, offset])
