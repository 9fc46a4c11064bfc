"""Layer-graph description of a plain feed-forward CNN.

Tensors are channels-first: an input spec ``(channels, height, width)`` and a
batch ``(n, c, h, w)``. Convolutions use zero padding.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Union


class DescriptorError(ValueError):
    """Architecture descriptor is inconsistent (bad shapes, bad ordering)."""


@dataclass(frozen=True)
class Conv2D:
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0
    bias: bool = False


@dataclass(frozen=True)
class BatchNorm:
    channels: int
    eps: float = 1e-5


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class MaxPool:
    kernel: int
    stride: int


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class FullyConnected:
    out_features: int
    bias: bool = True


Layer = Union[Conv2D, BatchNorm, ReLU, MaxPool, Flatten, FullyConnected]

_LAYER_TYPES = {
    "conv2d": Conv2D,
    "batchnorm": BatchNorm,
    "relu": ReLU,
    "maxpool": MaxPool,
    "flatten": Flatten,
    "fc": FullyConnected,
}
_TYPE_NAMES = {cls: name for name, cls in _LAYER_TYPES.items()}

# learnable and state tensors per layer type
PARAM_ROLES = {
    Conv2D: ("conv_weight", "conv_bias"),
    BatchNorm: ("bn_gamma", "bn_beta", "bn_running_mean", "bn_running_var"),
    FullyConnected: ("fc_weight", "fc_bias"),
}
TRAINABLE_ROLES = frozenset(
    {"conv_weight", "conv_bias", "bn_gamma", "bn_beta", "fc_weight", "fc_bias"}
)


def _conv_out(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


@dataclass(frozen=True)
class ArchDescriptor:
    layers: tuple[Layer, ...]
    input_shape: tuple[int, int, int] = (1, 96, 160)
    name: str = "custom"
    output_dim: int = field(default=4)

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        self.validate()

    def validate(self) -> None:
        shapes = self.shapes()
        for i, layer in enumerate(self.layers):
            if isinstance(layer, BatchNorm):
                if i == 0 or not isinstance(self.layers[i - 1], Conv2D):
                    raise DescriptorError(f"layer {i}: BatchNorm must follow a Conv2D")
        if self.layers and shapes[-1] != (self.output_dim,):
            raise DescriptorError(
                f"final output shape {shapes[-1]} != ({self.output_dim},)"
            )

    def shapes(self) -> list[tuple[int, ...]]:
        """Per-sample output shape of every layer, preceded by the input shape."""
        shape: tuple[int, ...] = self.input_shape
        out = [shape]
        for i, layer in enumerate(self.layers):
            shape = self._next_shape(i, layer, shape)
            out.append(shape)
        return out

    @staticmethod
    def _next_shape(i: int, layer: Layer, shape: tuple[int, ...]) -> tuple[int, ...]:
        if isinstance(layer, (Conv2D, MaxPool)):
            if len(shape) != 3:
                raise DescriptorError(f"layer {i}: expects a (c, h, w) input, got {shape}")
            c, h, w = shape
            if isinstance(layer, Conv2D):
                ho = _conv_out(h, layer.kernel, layer.stride, layer.padding)
                wo = _conv_out(w, layer.kernel, layer.stride, layer.padding)
                c = layer.out_channels
            else:
                ho = _conv_out(h, layer.kernel, layer.stride, 0)
                wo = _conv_out(w, layer.kernel, layer.stride, 0)
            if ho < 1 or wo < 1:
                raise DescriptorError(f"layer {i}: spatial size collapses to {(ho, wo)}")
            return (c, ho, wo)
        if isinstance(layer, BatchNorm):
            if len(shape) != 3 or shape[0] != layer.channels:
                raise DescriptorError(
                    f"layer {i}: BatchNorm({layer.channels}) on input {shape}"
                )
            return shape
        if isinstance(layer, ReLU):
            return shape
        if isinstance(layer, Flatten):
            n = 1
            for d in shape:
                n *= d
            return (n,)
        if isinstance(layer, FullyConnected):
            if len(shape) != 1:
                raise DescriptorError(f"layer {i}: fc expects a flat input, got {shape}")
            return (layer.out_features,)
        raise DescriptorError(f"layer {i}: unknown layer {layer!r}")

    def param_shapes(self) -> dict[tuple[int, str], tuple[int, ...]]:
        shapes = self.shapes()
        out: dict[tuple[int, str], tuple[int, ...]] = {}
        for i, layer in enumerate(self.layers):
            in_shape = shapes[i]
            if isinstance(layer, Conv2D):
                out[(i, "conv_weight")] = (layer.out_channels, in_shape[0], layer.kernel, layer.kernel)
                if layer.bias:
                    out[(i, "conv_bias")] = (layer.out_channels,)
            elif isinstance(layer, BatchNorm):
                for role in PARAM_ROLES[BatchNorm]:
                    out[(i, role)] = (layer.channels,)
            elif isinstance(layer, FullyConnected):
                out[(i, "fc_weight")] = (layer.out_features, in_shape[0])
                if layer.bias:
                    out[(i, "fc_bias")] = (layer.out_features,)
        return out

    # -- serialisation ------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "output_dim": self.output_dim,
            "layers": [{"type": _TYPE_NAMES[type(l)], **asdict(l)} for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> ArchDescriptor:
        layers = []
        for i, entry in enumerate(d["layers"]):
            entry = dict(entry)
            kind = entry.pop("type", None)
            if kind not in _LAYER_TYPES:
                raise DescriptorError(f"layer {i}: unknown type {kind!r}")
            try:
                layers.append(_LAYER_TYPES[kind](**entry))
            except TypeError as exc:
                raise DescriptorError(f"layer {i}: {exc}") from None
        return cls(
            layers=tuple(layers),
            input_shape=tuple(d.get("input_shape", (1, 96, 160))),
            name=d.get("name", "custom"),
            output_dim=d.get("output_dim", 4),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> ArchDescriptor:
        return cls.from_dict(json.loads(text))


def conv_block(out_channels: int, kernel: int, stride: int) -> list[Layer]:
    return [
        Conv2D(out_channels, kernel, stride=stride, padding=kernel // 2),
        BatchNorm(out_channels),
        ReLU(),
    ]


def frontnet(
    input_shape: tuple[int, int, int] = (1, 96, 160),
    widths: tuple[int, int, int, int] = (32, 32, 64, 128),
    name: str = "frontnet",
) -> ArchDescriptor:
    """PULP-Frontnet-style network.

    A 5x5/2 stem with max-pooling, then three stages of two 3x3 convolutions
    (the first strided), each followed by batch norm and ReLU, and a single
    fully connected head. Convolutions carry no bias since batch norm follows.
    """
    stem, s1, s2, s3 = widths
    layers: list[Layer] = [*conv_block(stem, 5, 2), MaxPool(2, 2)]
    for w in (s1, s2, s3):
        layers += conv_block(w, 3, 2)
        layers += conv_block(w, 3, 1)
    layers += [Flatten(), FullyConnected(4)]
    return ArchDescriptor(tuple(layers), input_shape=input_shape, name=name)


def reference_descriptor() -> ArchDescriptor:
    """Full-size network on 160x96 grayscale frames (~304 k parameters)."""
    return frontnet()


def desk_descriptor() -> ArchDescriptor:
    """Scaled-down sibling used for laptop-scale training on 80x48 frames."""
    return frontnet(input_shape=(1, 48, 80), widths=(8, 16, 16, 32), name="frontnet-desk")
