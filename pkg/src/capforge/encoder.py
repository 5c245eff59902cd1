"""Two-block CNN image encoder with a sigmoid attribute head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from capforge.errors import ContractError
from capforge.numerics import Tensor, no_tape, ops


@dataclass
class EncoderParams:
    conv1_w: Tensor
    conv1_b: Tensor
    conv2_w: Tensor
    conv2_b: Tensor
    proj_w: Tensor
    proj_b: Tensor
    attr_w: Tensor
    attr_b: Tensor
    grid: int

    @classmethod
    def init(cls, rng: np.random.Generator, grid: int = 16, c1: int = 8, c2: int = 16,
             d_v: int = 64, d_a: int = 8) -> "EncoderParams":
        if grid % 4:
            raise ContractError("grid must be divisible by 4 (two 2x2 pools)")
        flat = (grid // 4) ** 2 * c2

        def he(*shape, fan_in):
            return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)

        return cls(
            conv1_w=Tensor(he(3, 3, 3, c1, fan_in=27), True, "enc.conv1_w"),
            conv1_b=Tensor(np.zeros(c1), True, "enc.conv1_b"),
            conv2_w=Tensor(he(3, 3, c1, c2, fan_in=9 * c1), True, "enc.conv2_w"),
            conv2_b=Tensor(np.zeros(c2), True, "enc.conv2_b"),
            proj_w=Tensor(he(flat, d_v, fan_in=flat), True, "enc.proj_w"),
            proj_b=Tensor(np.zeros(d_v), True, "enc.proj_b"),
            attr_w=Tensor(rng.normal(0.0, np.sqrt(1.0 / d_v), size=(d_v, d_a)), True, "enc.attr_w"),
            attr_b=Tensor(np.zeros(d_a), True, "enc.attr_b"),
            grid=grid,
        )

    @property
    def d_v(self) -> int:
        return self.proj_w.shape[1]

    @property
    def d_a(self) -> int:
        return self.attr_w.shape[1]

    def tensors(self) -> list[Tensor]:
        return [self.conv1_w, self.conv1_b, self.conv2_w, self.conv2_b,
                self.proj_w, self.proj_b, self.attr_w, self.attr_b]


@dataclass
class EncodedImage:
    f: np.ndarray
    a: np.ndarray


def _as_batch(p: EncoderParams, image) -> tuple[np.ndarray, bool]:
    x = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or x.shape[1:] != (p.grid, p.grid, 3):
        raise ContractError(f"expected images of shape ({p.grid}, {p.grid}, 3), got {x.shape[1:]}")
    return x, single


def conv_features(p: EncoderParams, image) -> Tensor:
    """conv3x3 -> ReLU -> maxpool2x2, twice; ``(N, grid/4, grid/4, c2)``."""
    x, _ = _as_batch(p, image)
    h = ops.maxpool2x2(ops.relu(ops.conv2d_same(x, p.conv1_w, p.conv1_b)))
    return ops.maxpool2x2(ops.relu(ops.conv2d_same(h, p.conv2_w, p.conv2_b)))


def encode_image(p: EncoderParams, image) -> Tensor:
    """Feature vector(s) for one ``H x W x 3`` image or an ``N x H x W x 3`` batch.

    The pooled conv maps are flattened and mapped affinely to ``D_v``.
    """
    x, single = _as_batch(p, image)
    h = ops.reshape(conv_features(p, x), (x.shape[0], -1))
    f = ops.matmul(h, p.proj_w) + p.proj_b
    return ops.reshape(f, (p.d_v,)) if single else f


def predict_attributes(p: EncoderParams, f) -> Tensor:
    f = f if isinstance(f, Tensor) else Tensor(f)
    if f.shape[-1] != p.d_v:
        raise ContractError(f"feature length {f.shape[-1]} != D_v {p.d_v}")
    return ops.sigmoid(ops.matmul(f, p.attr_w) + p.attr_b)


def attribute_loss(a_pred, labels) -> Tensor:
    """Mean binary cross-entropy per row, probabilities clamped to [1e-7, 1-1e-7]."""
    return ops.binary_cross_entropy(a_pred, labels, eps=1e-7)


def encode(p: EncoderParams, image) -> EncodedImage:
    """Inference-only encoding of a single image."""
    with no_tape():
        f = encode_image(p, image)
        a = predict_attributes(p, f)
    return EncodedImage(f.data, a.data)
