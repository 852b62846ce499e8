"""Adaptive self-calibrated convolution (C input channels -> C' output channels).

The input is split channelwise into halves ``x1`` and ``x2``:

* calibration branch: ``t = avgpool(x1, r)``; ``u = up(conv(t, K2), r)``
  center-cropped to the input size; ``gate = sigmoid(x1 + u)``.
  ``y1 = conv(conv(x1, K3) * gate', K4)`` where ``gate'`` maps the C/2 gate
  channels onto the C'/2 channels of ``conv(x1, K3)``.
* plain branch: ``y2 = conv(x2, K1)``.

The output is ``concat(y1, y2)`` with C' channels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .errors import ConfigError, DimensionError
from .params import ParamSet, conv_weight, zeros
from .tensor import Tensor


def default_pool_rate(h: int, w: int) -> int:
    return 4 if min(h, w) >= 8 else 2


@dataclass(frozen=True)
class ScConvConfig:
    c_in: int
    c_out: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    pool_rate: int = 4

    def __post_init__(self):
        if self.c_in < 2 or self.c_in % 2:
            raise ConfigError(f"scconv: c_in must be even and >= 2, got {self.c_in}")
        if self.c_out < 2 or self.c_out % 2:
            raise ConfigError(f"scconv: c_out must be even and >= 2, got {self.c_out}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"scconv: kernel must be odd, got {self.kernel}")
        if self.pool_rate < 1:
            raise ConfigError(f"scconv: pool_rate must be >= 1, got {self.pool_rate}")
        if self.stride < 1 or self.padding < 0:
            raise ConfigError("scconv: stride must be >= 1 and padding >= 0")


@dataclass
class ScConvParams:
    k1: Tensor
    b1: Tensor
    k2: Tensor
    b2: Tensor
    k3: Tensor
    b3: Tensor
    k4: Tensor
    b4: Tensor

    def named(self):
        for key in ("k1", "b1", "k2", "b2", "k3", "b3", "k4", "b4"):
            yield key, getattr(self, key)

    def register(self, params: ParamSet, prefix: str) -> None:
        for key, t in self.named():
            params.add(f"{prefix}.{key}", t)


def expected_shapes(config: ScConvConfig) -> dict[str, tuple[int, ...]]:
    hi, ho, k = config.c_in // 2, config.c_out // 2, config.kernel
    return {
        "k1": (ho, hi, k, k),
        "k2": (hi, hi, k, k),
        "k3": (ho, hi, k, k),
        "k4": (ho, ho, k, k),
        "b1": (ho,),
        "b2": (hi,),
        "b3": (ho,),
        "b4": (ho,),
    }


def build_scconv(config: ScConvConfig, rng: np.random.Generator, dtype=np.float64) -> ScConvParams:
    hi, ho, k = config.c_in // 2, config.c_out // 2, config.kernel
    return ScConvParams(
        k1=conv_weight(rng, ho, hi, k, dtype),
        b1=zeros((ho,), dtype),
        k2=conv_weight(rng, hi, hi, k, dtype),
        b2=zeros((hi,), dtype),
        k3=conv_weight(rng, ho, hi, k, dtype),
        b3=zeros((ho,), dtype),
        k4=conv_weight(rng, ho, ho, k, dtype),
        b4=zeros((ho,), dtype),
    )


def gate_channel_map(c_half_in: int, c_half_out: int) -> np.ndarray:
    """Nearest-neighbour index map from C/2 gate channels to C'/2 channels."""
    return (np.arange(c_half_out) * c_half_in) // c_half_out


def calibration_gate(x1: Tensor, params: ScConvParams, config: ScConvConfig) -> Tensor:
    """sigmoid(x1 + upsampled low-resolution transform), shape of ``x1``."""
    r = config.pool_rate
    h, w = x1.shape[2:]
    ph, pw = -h % r, -w % r
    t = x1
    if ph or pw:
        # ceil-mode pooling: center the zero padding so the crop below undoes it
        t = F.pad2d(t, ph // 2, ph - ph // 2, pw // 2, pw - pw // 2)
    t = F.avgpool2d(t, r, r)
    u = F.conv2d(t, params.k2, params.b2, stride=1, padding=config.kernel // 2)
    u = F.center_crop(F.upsample_nearest(u, r), h, w)
    return F.sigmoid(x1 + u)


def scconv_forward(x: Tensor, params: ScConvParams, config: ScConvConfig) -> Tensor:
    if x.ndim != 4 or x.shape[1] != config.c_in:
        raise DimensionError(f"scconv: expected [N,{config.c_in},H,W] input, got {x.shape}")
    h, w = x.shape[2:]
    if h < config.pool_rate or w < config.pool_rate:
        raise ConfigError(f"scconv: input {h}x{w} smaller than pool rate {config.pool_rate}")
    half = config.c_in // 2
    x1, x2 = x[:, :half], x[:, half:]

    gate = calibration_gate(x1, params, config)
    if config.c_out != config.c_in:
        gate = gate[:, gate_channel_map(half, config.c_out // 2)]
    s, p = config.stride, config.padding
    y1 = F.conv2d(x1, params.k3, params.b3, stride=1, padding=config.kernel // 2) * gate
    y1 = F.conv2d(y1, params.k4, params.b4, stride=s, padding=p)
    y2 = F.conv2d(x2, params.k1, params.b1, stride=s, padding=p)
    return F.concat([y1, y2], axis=1)
