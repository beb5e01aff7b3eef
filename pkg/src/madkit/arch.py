"""Architecture descriptors for the small flat-parameter classifiers.

A descriptor is a plain, hashable value: a tuple of layer specs plus the
input shape (H, W, C) and the class count K. Shape composition and the
total parameter count are deterministic functions of the descriptor.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .errors import DescriptorError

__all__ = [
    "Conv2d",
    "Dense",
    "Relu",
    "MaxPool",
    "Flatten",
    "ArchDescriptor",
    "arch_to_json",
    "arch_from_json",
    "parse_layer_string",
    "PRESETS",
]


@dataclass(frozen=True)
class Conv2d:
    in_ch: int
    out_ch: int
    kernel: int
    stride: int = 1

    def param_count(self) -> int:
        return self.out_ch * self.in_ch * self.kernel * self.kernel + self.out_ch


@dataclass(frozen=True)
class Dense:
    in_dim: int
    out_dim: int

    def param_count(self) -> int:
        return self.out_dim * self.in_dim + self.out_dim


@dataclass(frozen=True)
class Relu:
    def param_count(self) -> int:
        return 0


@dataclass(frozen=True)
class MaxPool:
    k: int

    def param_count(self) -> int:
        return 0


@dataclass(frozen=True)
class Flatten:
    def param_count(self) -> int:
        return 0


Layer = Conv2d | Dense | Relu | MaxPool | Flatten


@dataclass(frozen=True)
class ArchDescriptor:
    """Layer list plus input shape (H, W, C) and class count K.

    Validation walks the layer list once, composing shapes; any mismatch
    raises DescriptorError. `feature_shapes()` returns the shape after
    every layer, `param_count` the total flat-vector length.
    """

    layers: tuple[Layer, ...]
    input_shape: tuple[int, int, int]
    classes: int

    def __post_init__(self):
        if self.classes < 2:
            raise DescriptorError(f"need at least 2 classes, got {self.classes}")
        self.feature_shapes()  # composes, raises on mismatch
        final = self.feature_shapes()[-1]
        if final != (self.classes,):
            raise DescriptorError(
                f"final layer emits shape {final}, expected ({self.classes},)"
            )

    def feature_shapes(self) -> list[tuple]:
        """Shape after each layer, starting from the input shape."""
        shape: tuple = self.input_shape
        shapes = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv2d):
                if len(shape) != 3:
                    raise DescriptorError(f"layer {i}: conv2d needs an image, got {shape}")
                h, w, c = shape
                if c != layer.in_ch:
                    raise DescriptorError(
                        f"layer {i}: conv2d expects {layer.in_ch} channels, got {c}"
                    )
                ho = (h - layer.kernel) // layer.stride + 1
                wo = (w - layer.kernel) // layer.stride + 1
                if ho < 1 or wo < 1:
                    raise DescriptorError(f"layer {i}: kernel {layer.kernel} too large for {shape}")
                shape = (ho, wo, layer.out_ch)
            elif isinstance(layer, MaxPool):
                if len(shape) != 3:
                    raise DescriptorError(f"layer {i}: maxpool needs an image, got {shape}")
                h, w, c = shape
                if h < layer.k or w < layer.k:
                    raise DescriptorError(f"layer {i}: pool {layer.k} too large for {shape}")
                shape = (h // layer.k, w // layer.k, c)
            elif isinstance(layer, Flatten):
                n = 1
                for s in shape:
                    n *= s
                shape = (n,)
            elif isinstance(layer, Dense):
                if len(shape) != 1:
                    raise DescriptorError(f"layer {i}: dense needs a flat input, got {shape}")
                if shape[0] != layer.in_dim:
                    raise DescriptorError(
                        f"layer {i}: dense expects {layer.in_dim} features, got {shape[0]}"
                    )
                shape = (layer.out_dim,)
            elif isinstance(layer, Relu):
                pass
            else:  # pragma: no cover
                raise DescriptorError(f"layer {i}: unknown layer {layer!r}")
            shapes.append(shape)
        if not shapes:
            raise DescriptorError("empty layer list")
        return shapes

    @property
    def param_count(self) -> int:
        return sum(layer.param_count() for layer in self.layers)


def arch_to_json(arch: ArchDescriptor, extra: dict | None = None) -> str:
    """Serialize to a canonical (sorted-key, compact) JSON string."""
    layers = []
    for layer in arch.layers:
        if isinstance(layer, Conv2d):
            layers.append({"type": "conv2d", "in_ch": layer.in_ch, "out_ch": layer.out_ch,
                           "kernel": layer.kernel, "stride": layer.stride})
        elif isinstance(layer, Dense):
            layers.append({"type": "dense", "in": layer.in_dim, "out": layer.out_dim})
        elif isinstance(layer, Relu):
            layers.append({"type": "relu"})
        elif isinstance(layer, MaxPool):
            layers.append({"type": "maxpool", "k": layer.k})
        elif isinstance(layer, Flatten):
            layers.append({"type": "flatten"})
    doc = {"layers": layers, "input": list(arch.input_shape), "classes": arch.classes}
    if extra:
        doc.update(extra)
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def arch_from_json(text: str) -> tuple[ArchDescriptor, dict]:
    """Parse a descriptor; returns (arch, leftover fields)."""
    doc = json.loads(text)
    layers: list[Layer] = []
    for entry in doc["layers"]:
        kind = entry["type"]
        if kind == "conv2d":
            layers.append(Conv2d(entry["in_ch"], entry["out_ch"], entry["kernel"],
                                 entry.get("stride", 1)))
        elif kind == "dense":
            layers.append(Dense(entry["in"], entry["out"]))
        elif kind == "relu":
            layers.append(Relu())
        elif kind == "maxpool":
            layers.append(MaxPool(entry["k"]))
        elif kind == "flatten":
            layers.append(Flatten())
        else:
            raise DescriptorError(f"unknown layer type {kind!r}")
    arch = ArchDescriptor(tuple(layers), tuple(doc["input"]), doc["classes"])
    extra = {k: v for k, v in doc.items() if k not in ("layers", "input", "classes")}
    return arch, extra


def parse_layer_string(text: str, input_shape: tuple[int, int, int], classes: int) -> ArchDescriptor:
    """Parse the compact config syntax, e.g.

        conv:1:6:3:1, relu, maxpool:2, flatten, dense:48:32, relu, dense:32:10
    """
    layers: list[Layer] = []
    for token in text.split(","):
        parts = [p.strip() for p in token.strip().split(":")]
        name = parts[0]
        try:
            if name == "conv":
                stride = int(parts[4]) if len(parts) > 4 else 1
                layers.append(Conv2d(int(parts[1]), int(parts[2]), int(parts[3]), stride))
            elif name == "dense":
                layers.append(Dense(int(parts[1]), int(parts[2])))
            elif name == "relu":
                layers.append(Relu())
            elif name == "maxpool":
                layers.append(MaxPool(int(parts[1])))
            elif name == "flatten":
                layers.append(Flatten())
            else:
                raise DescriptorError(f"unknown layer token {token.strip()!r}")
        except (IndexError, ValueError) as exc:
            raise DescriptorError(f"malformed layer token {token.strip()!r}") from exc
    return ArchDescriptor(tuple(layers), input_shape, classes)


# Built-in presets for 14x14 single-channel digit inputs. `toy-paper` is the
# ~12.5k-parameter model; `toy-small` is the desk-scale default whose dense
# Hessian and full eigendecomposition stay cheap on one core.
PRESETS = {
    "toy-small": "conv:1:6:3, relu, maxpool:2, conv:6:12:3, relu, maxpool:2, "
                 "flatten, dense:48:32, relu, dense:32:10",
    "toy-paper": "conv:1:8:3, relu, maxpool:2, conv:8:16:3, relu, maxpool:2, "
                 "flatten, dense:64:150, relu, dense:150:10",
}


def preset_arch(name: str) -> ArchDescriptor:
    if name not in PRESETS:
        raise DescriptorError(f"unknown preset {name!r}; have {sorted(PRESETS)}")
    return parse_layer_string(PRESETS[name], (14, 14, 1), 10)
