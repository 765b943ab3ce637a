"""Shared backbone with an embedding head and a 4-way rotation head."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError
from .tensor import (
    Tensor,
    conv2d,
    conv_out_extent,
    flatten_rows,
    global_avg_pool,
    l2_normalize_rows,
    linear,
    no_grad,
    relu,
)

N_ROTATIONS = 4


@dataclass(frozen=True)
class BackboneSpec:
    """Backbone geometry.

    ``small_conv`` stacks 3x3 stride-2 convolutions (pad 1) with ReLU and
    ends in global average pooling. ``mlp`` flattens the image and applies
    ReLU linear layers. ``widths[-1]`` is the feature width in both cases.
    """

    kind: str = "small_conv"
    widths: tuple[int, ...] = (16, 32, 64)
    in_channels: int = 1
    image_size: int = 32
    input_mean: float = 0.0
    input_std: float = 1.0

    def __post_init__(self):
        if self.kind not in ("small_conv", "mlp"):
            raise ValueError(f"unknown backbone kind {self.kind!r}")
        if not self.widths or min(self.widths) < 1:
            raise ValueError(f"backbone widths must be positive, got {self.widths}")

    @property
    def d_feat(self) -> int:
        return self.widths[-1]


@dataclass
class ModelParams:
    spec: BackboneSpec
    backbone: list[dict[str, Tensor]]
    embed_head: dict[str, Tensor]
    rot_head: dict[str, Tensor]
    d_embed: int = field(default=0)

    def named(self) -> dict[str, Tensor]:
        """All parameters keyed by a stable dotted name, in registration order."""
        out: dict[str, Tensor] = {}
        for i, layer in enumerate(self.backbone):
            for k, v in layer.items():
                out[f"backbone.{i}.{k}"] = v
        for k, v in self.embed_head.items():
            out[f"embed.{k}"] = v
        for k, v in self.rot_head.items():
            out[f"rot.{k}"] = v
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named().values())

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.parameters())

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        named = self.named()
        missing = set(named) - set(arrays)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, t in named.items():
            if arrays[k].shape != t.shape:
                raise DimensionError(f"{k}: stored shape {arrays[k].shape} != {t.shape}")
            t.data = np.ascontiguousarray(arrays[k], dtype=t.dtype).copy()


def _param(arr: np.ndarray, name: str) -> Tensor:
    return Tensor(arr, requires_grad=True, name=name)


def init_params(spec: BackboneSpec, d_embed: int, seed: int, dtype=np.float32) -> ModelParams:
    """He-normal weights (std = sqrt(2 / fan_in)), zero biases."""
    if d_embed < 1:
        raise ValueError(f"d_embed must be >= 1, got {d_embed}")
    rng = np.random.default_rng(seed)

    def he(shape, fan_in):
        return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)

    layers = []
    if spec.kind == "small_conv":
        c_in = spec.in_channels
        for i, c_out in enumerate(spec.widths):
            layers.append({
                "w": _param(he((c_out, c_in, 3, 3), c_in * 9), f"backbone.{i}.w"),
                "b": _param(np.zeros(c_out, dtype), f"backbone.{i}.b"),
            })
            c_in = c_out
    else:
        d_in = spec.in_channels * spec.image_size ** 2
        for i, d_out in enumerate(spec.widths):
            layers.append({
                "w": _param(he((d_in, d_out), d_in), f"backbone.{i}.w"),
                "b": _param(np.zeros(d_out, dtype), f"backbone.{i}.b"),
            })
            d_in = d_out
    d = spec.d_feat
    embed = {"w": _param(he((d, d_embed), d), "embed.w"), "b": _param(np.zeros(d_embed, dtype), "embed.b")}
    rot = {"w": _param(he((d, N_ROTATIONS), d), "rot.w"), "b": _param(np.zeros(N_ROTATIONS, dtype), "rot.b")}
    return ModelParams(spec, layers, embed, rot, d_embed)


def expected_param_count(spec: BackboneSpec, d_embed: int) -> int:
    """Closed-form parameter count for :func:`init_params`."""
    total = 0
    prev = spec.in_channels * (9 if spec.kind == "small_conv" else spec.image_size ** 2)
    for w in spec.widths:
        total += prev * w + w
        prev = w * 9 if spec.kind == "small_conv" else w
    d = spec.d_feat
    return total + d * d_embed + d_embed + d * N_ROTATIONS + N_ROTATIONS


def backbone_forward(params: ModelParams, images: Tensor) -> Tensor:
    spec = params.spec
    if images.ndim != 4 or images.shape[1] != spec.in_channels:
        raise DimensionError(f"images {images.shape} do not match {spec.in_channels} input channels")
    if spec.input_mean != 0.0 or spec.input_std != 1.0:
        images = Tensor((images.data - images.dtype.type(spec.input_mean)) / images.dtype.type(spec.input_std))
    if spec.kind == "mlp":
        if images.shape[2:] != (spec.image_size, spec.image_size):
            raise DimensionError(f"mlp backbone expects {spec.image_size}px images, got {images.shape}")
        h = flatten_rows(images)
        for layer in params.backbone:
            h = relu(linear(h, layer["w"], layer["b"]))
        return h
    h = images
    for layer in params.backbone:
        if conv_out_extent(h.shape[2], 2, 1) < 1:
            raise DimensionError(f"images {images.shape} too small for {len(params.backbone)} stride-2 layers")
        h = relu(conv2d(h, layer["w"], stride=2, pad=1, bias=layer["b"]))
    return global_avg_pool(h)


def embed(params: ModelParams, features: Tensor) -> Tensor:
    return l2_normalize_rows(linear(features, params.embed_head["w"], params.embed_head["b"]))


def rotation_logits(params: ModelParams, features: Tensor) -> Tensor:
    return linear(features, params.rot_head["w"], params.rot_head["b"])


def infer(params: ModelParams, images: np.ndarray, batch_size: int = 256, what: str = "embed") -> np.ndarray:
    """Inference-mode forward over a whole array, in fixed-size chunks.

    ``what`` is ``"features"``, ``"embed"`` or ``"rot"``.
    """
    dtype = params.embed_head["w"].dtype
    outs = []
    with no_grad():
        for start in range(0, images.shape[0], batch_size):
            x = Tensor(images[start:start + batch_size], dtype=dtype)
            f = backbone_forward(params, x)
            if what == "embed":
                f = embed(params, f)
            elif what == "rot":
                f = rotation_logits(params, f)
            elif what != "features":
                raise ValueError(f"unknown output {what!r}")
            outs.append(f.data)
    return np.concatenate(outs, axis=0)
