"""Per-stream input preparation.

face:    bilinear resize of the face crop to 96x96
context: centre-pad the occluded scene to 400x712, shrink by 3 (floor, 133x237),
         and in train mode take a random 133x237 crop of the 5-px zero-padded map
body:    bilinear resize of the background-removed scene to 256x256

All outputs are channels-first float arrays in [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, ValidationError


@dataclass(frozen=True)
class PrepConfig:
    face_size: int = 96
    context_pad_h: int = 400
    context_pad_w: int = 712
    context_scale: int = 3
    crop_pad: int = 5
    body_size: int = 256

    def __post_init__(self):
        for name in ("face_size", "context_pad_h", "context_pad_w", "context_scale", "body_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.crop_pad < 0:
            raise ConfigError("crop_pad must be >= 0")

    @property
    def context_shape(self) -> tuple[int, int]:
        return self.context_pad_h // self.context_scale, self.context_pad_w // self.context_scale


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear resize of an H x W (x C) array."""
    if out_h < 1 or out_w < 1:
        raise ValidationError(f"output size must be positive, got {out_h}x{out_w}")
    h, w = image.shape[:2]
    if h == 0 or w == 0:
        raise ValidationError("cannot resize an empty image")
    if (h, w) == (out_h, out_w):
        return image.copy()
    ys = np.linspace(0.0, h - 1, out_h) if out_h > 1 else np.array([(h - 1) / 2.0])
    xs = np.linspace(0.0, w - 1, out_w) if out_w > 1 else np.array([(w - 1) / 2.0])
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0).reshape(-1, 1, *([1] * (image.ndim - 2)))
    wx = (xs - x0).reshape(1, -1, *([1] * (image.ndim - 2)))
    top = image[y0][:, x0] * (1 - wx) + image[y0][:, x1] * wx
    bottom = image[y1][:, x0] * (1 - wx) + image[y1][:, x1] * wx
    return top * (1 - wy) + bottom * wy


def _channels_first(image: np.ndarray, dtype) -> np.ndarray:
    if image.ndim == 2:
        image = np.repeat(image[:, :, None], 3, axis=2)
    return np.ascontiguousarray(np.clip(image, 0.0, 1.0).transpose(2, 0, 1), dtype=dtype)


def _check_nonempty(image: np.ndarray, what: str) -> None:
    if image.ndim not in (2, 3) or image.shape[0] < 1 or image.shape[1] < 1:
        raise ValidationError(f"{what}: degenerate image of shape {image.shape}")


def prep_face(face_img: np.ndarray, config: PrepConfig = PrepConfig(), dtype=np.float32) -> np.ndarray:
    _check_nonempty(face_img, "prep_face")
    s = config.face_size
    return _channels_first(resize_bilinear(face_img, s, s), dtype)


def prep_body(masked_img: np.ndarray, config: PrepConfig = PrepConfig(), dtype=np.float32) -> np.ndarray:
    _check_nonempty(masked_img, "prep_body")
    s = config.body_size
    return _channels_first(resize_bilinear(masked_img, s, s), dtype)


def pad_to_canvas(image: np.ndarray, canvas_h: int, canvas_w: int) -> np.ndarray:
    """Centre ``image`` on a zero canvas, shrinking it uniformly first if it does not fit."""
    h, w = image.shape[:2]
    if h > canvas_h or w > canvas_w:
        s = min(canvas_h / h, canvas_w / w)
        image = resize_bilinear(image, max(1, math.floor(h * s)), max(1, math.floor(w * s)))
        h, w = image.shape[:2]
    canvas = np.zeros((canvas_h, canvas_w) + image.shape[2:], dtype=image.dtype)
    top, left = (canvas_h - h) // 2, (canvas_w - w) // 2
    canvas[top : top + h, left : left + w] = image
    return canvas


def context_base(occluded: np.ndarray, config: PrepConfig = PrepConfig(), dtype=np.float32) -> np.ndarray:
    """Deterministic part of the context pipeline (pad + shrink), channels-first."""
    _check_nonempty(occluded, "prep_context")
    padded = pad_to_canvas(occluded, config.context_pad_h, config.context_pad_w)
    oh, ow = config.context_shape
    return _channels_first(resize_bilinear(padded, oh, ow), dtype)


def random_crop(chw: np.ndarray, pad: int, rng: np.random.Generator) -> np.ndarray:
    """Zero-pad by ``pad`` on every side and crop back to the original size at a random offset."""
    if pad == 0:
        return chw.copy()
    _, h, w = chw.shape
    padded = np.pad(chw, ((0, 0), (pad, pad), (pad, pad)))
    oy, ox = rng.integers(0, 2 * pad + 1, size=2)
    return np.ascontiguousarray(padded[:, oy : oy + h, ox : ox + w])


def prep_context(
    occluded: np.ndarray,
    config: PrepConfig = PrepConfig(),
    train: bool = False,
    rng: Optional[np.random.Generator] = None,
    dtype=np.float32,
) -> np.ndarray:
    base = context_base(occluded, config, dtype)
    if not train:
        return base
    if rng is None:
        raise ValidationError("prep_context: train mode needs an explicit rng stream")
    return random_crop(base, config.crop_pad, rng)
