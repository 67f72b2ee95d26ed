"""DNN layer descriptors and the built-in layer tables."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable

import yaml


class LayerKind(Enum):
    CONVOLUTION = "Convolution"
    INNER_PRODUCT = "InnerProduct"
    POOLING = "Pooling"
    CONCAT = "Concat"


class InvalidLayer(ValueError):
    pass


class UnknownModel(KeyError):
    pass


class InvalidConfig(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    """A DNN primitive at batch 1, int8.

    Spatial sizes are the unpadded input plane; ``pad`` is applied on every
    border. Inner products use ``vec_inputs`` and ``out_channels`` only.
    Concat copies ``sources`` (channel counts) into one output tensor.
    """

    kind: LayerKind
    name: str = ""
    in_channels: int = 1
    out_channels: int = 1
    in_h: int = 1
    in_w: int = 1
    kernel_h: int = 1
    kernel_w: int = 1
    stride: int = 1
    pad: int = 0
    vec_inputs: int = 1
    fused_relu: bool = False
    sources: tuple[int, ...] = ()

    def __post_init__(self):
        if isinstance(self.kind, str):
            object.__setattr__(self, "kind", LayerKind(self.kind))
        object.__setattr__(self, "sources", tuple(self.sources))

    @property
    def out_h(self) -> int:
        if self.kind in (LayerKind.INNER_PRODUCT,):
            return 1
        if self.kind is LayerKind.CONCAT:
            return self.in_h
        return (self.in_h + 2 * self.pad - self.kernel_h) // self.stride + 1

    @property
    def out_w(self) -> int:
        if self.kind in (LayerKind.INNER_PRODUCT,):
            return 1
        if self.kind is LayerKind.CONCAT:
            return self.in_w
        return (self.in_w + 2 * self.pad - self.kernel_w) // self.stride + 1

    @property
    def padded_h(self) -> int:
        return self.in_h + 2 * self.pad

    @property
    def padded_w(self) -> int:
        return self.in_w + 2 * self.pad

    @property
    def macs(self) -> int:
        if self.kind is LayerKind.CONVOLUTION:
            return (self.out_h * self.out_w * self.out_channels * self.in_channels
                    * self.kernel_h * self.kernel_w)
        if self.kind is LayerKind.INNER_PRODUCT:
            return self.vec_inputs * self.out_channels
        return 0

    def validate(self) -> "LayerSpec":
        if self.kind is LayerKind.INNER_PRODUCT:
            dims = (self.vec_inputs, self.out_channels)
        elif self.kind is LayerKind.CONCAT:
            if len(self.sources) < 2:
                raise InvalidLayer(f"{self.name}: concat needs at least two sources")
            dims = (self.in_h, self.in_w) + self.sources
        else:
            dims = (self.in_channels, self.out_channels, self.in_h, self.in_w,
                    self.kernel_h, self.kernel_w, self.stride)
        if any(d < 1 for d in dims) or self.pad < 0:
            raise InvalidLayer(f"{self.name}: all dimensions must be >= 1, got {dims}")
        if self.kind in (LayerKind.CONVOLUTION, LayerKind.POOLING) and (
                self.out_h < 1 or self.out_w < 1):
            raise InvalidLayer(f"{self.name}: layer has no output elements")
        return self

    def scaled(self, factor: float) -> "LayerSpec":
        """Shrink the spatial plane area by ``factor`` (0 < factor <= 1).

        Inner products have no plane and are returned unchanged.
        """
        if factor >= 1 or self.kind is LayerKind.INNER_PRODUCT:
            return self
        lin = factor ** 0.5

        def shrink(x, k):
            return max(k, round(x * lin))

        h = shrink(self.in_h, max(1, self.kernel_h - 2 * self.pad))
        w = shrink(self.in_w, max(1, self.kernel_w - 2 * self.pad))
        if self.kind is LayerKind.POOLING and self.kernel_h == self.in_h:
            # global pooling stays global
            return LayerSpec(**{**asdict(self), "kind": self.kind, "in_h": h, "in_w": w,
                                "kernel_h": h, "kernel_w": w})
        return LayerSpec(**{**asdict(self), "kind": self.kind, "in_h": h, "in_w": w})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        d["sources"] = list(self.sources)
        return d


def _conv(name, cin, cout, hw, k, stride=1):
    return LayerSpec(LayerKind.CONVOLUTION, name, cin, cout, hw, hw, k, k, stride,
                     pad=k // 2, fused_relu=True)


def resnet50_conv() -> list[LayerSpec]:
    """The 53 convolution layers of ResNet-50 (stride on the first 1x1 of a stage)."""
    layers = [_conv("conv1", 3, 64, 224, 7, 2)]
    stages = [("res2", 3, 64, 256, 56, 1), ("res3", 4, 128, 512, 56, 2),
              ("res4", 6, 256, 1024, 28, 2), ("res5", 3, 512, 2048, 14, 2)]
    cin = 64
    for stage, blocks, mid, out, hw, stride in stages:
        for b in range(blocks):
            tag = f"{stage}{chr(ord('a') + b)}"
            s = stride if b == 0 else 1
            plane = hw if b == 0 else hw // stride
            if b == 0:
                layers.append(_conv(f"{tag}_branch1", cin, out, plane, 1, s))
            layers.append(_conv(f"{tag}_branch2a", cin, mid, plane, 1, s))
            layers.append(_conv(f"{tag}_branch2b", mid, mid, plane // s, 3))
            layers.append(_conv(f"{tag}_branch2c", mid, out, plane // s, 1))
            cin = out
    return layers


def transformer_ip() -> list[LayerSpec]:
    """106 inner-product layers of a big Transformer (d_model 1024, FFN 4096).

    6 encoder layers x 6 (Q, K, V, O, FFN1, FFN2), 6 decoder layers x 10
    (self-attention Q/K/V/O, cross-attention Q/K/V/O, FFN1, FFN2) and the
    33708-way vocabulary projection split into 10 column slices.
    """
    d, ff, vocab = 1024, 4096, 33708

    def ip(name, n_in, n_out):
        return LayerSpec(LayerKind.INNER_PRODUCT, name, vec_inputs=n_in, out_channels=n_out,
                         in_channels=n_in)

    layers = []
    for e in range(6):
        layers += [ip(f"enc{e}_{p}", d, d) for p in ("q", "k", "v", "o")]
        layers += [ip(f"enc{e}_ffn1", d, ff), ip(f"enc{e}_ffn2", ff, d)]
    for e in range(6):
        layers += [ip(f"dec{e}_self_{p}", d, d) for p in ("q", "k", "v", "o")]
        layers += [ip(f"dec{e}_cross_{p}", d, d) for p in ("q", "k", "v", "o")]
        layers += [ip(f"dec{e}_ffn1", d, ff), ip(f"dec{e}_ffn2", ff, d)]
    per_slice = -(-vocab // 10)
    for s in range(10):
        layers.append(ip(f"vocab{s}", d, min(per_slice, vocab - s * per_slice)))
    return layers


def resnet50_pool_res5c() -> list[LayerSpec]:
    return [LayerSpec(LayerKind.POOLING, "pool5", 2048, 2048, 7, 7, 7, 7, 1)]


def densenet_concat_sample() -> list[LayerSpec]:
    """Representative DenseNet-169 concat points (growth rate 32)."""
    out = []
    for block, (hw, c0, n) in enumerate([(56, 64, 6), (28, 128, 12), (14, 256, 32), (7, 640, 32)]):
        for i in (1, n // 2, n - 1):
            out.append(LayerSpec(LayerKind.CONCAT, f"dense{block + 1}_concat{i}", in_h=hw, in_w=hw,
                                 sources=(c0 + 32 * (i - 1), 32)))
    return out


BUILTIN_MODELS = {
    "resnet50_conv": resnet50_conv,
    "transformer_ip": transformer_ip,
    "resnet50_pool_res5c": resnet50_pool_res5c,
    "densenet_concat_sample": densenet_concat_sample,
}


def builtin_model(name: str) -> list[LayerSpec]:
    try:
        return BUILTIN_MODELS[name]()
    except KeyError:
        raise UnknownModel(f"unknown model {name!r}; known: {', '.join(BUILTIN_MODELS)}") from None


def load_layers(path: str | Path) -> list[LayerSpec]:
    """Read a layer table: ``{"layers": [{"kind": ..., ...}, ...]}`` (JSON or YAML)."""
    text = Path(path).read_text()
    if str(path).endswith((".yaml", ".yml")):
        doc = yaml.safe_load(text)
    else:
        doc = json.loads(text) if text.strip() else None
    if not doc or not doc.get("layers"):
        raise InvalidConfig(f"{path}: no layers defined")
    out = []
    for i, row in enumerate(doc["layers"]):
        try:
            out.append(LayerSpec(**row).validate())
        except (TypeError, ValueError) as e:
            raise InvalidConfig(f"{path}: layer {i}: {e}") from e
    return out


def dump_layers(layers: Iterable[LayerSpec]) -> str:
    return json.dumps({"layers": [l.to_dict() for l in layers]}, indent=2)
