"""Grad-CAM over a captured activation of the context stream."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .errors import ValidationError
from .tensor import Tensor

DEFAULT_LAYER = "context.features"


def cam_from(activation: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """relu(sum_k mean(grad_k) * A_k) over [C,h,w] arrays, divided by its max when positive."""
    alpha = grad.mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(alpha, activation, axes=1), 0.0)
    peak = cam.max()
    return cam / peak if peak > 0 else cam


def grad_cam(activation: Tensor, score: Tensor) -> np.ndarray:
    """Grad-CAM of scalar ``score`` w.r.t. an activation of shape [1,C,h,w] (or [C,h,w]).

    ``activation`` must be part of the graph that produced ``score``.
    """
    activation.retain_grad()
    activation.grad = None
    score.backward()
    a = activation.data
    g = np.zeros_like(a) if activation.grad is None else activation.grad
    if a.ndim == 4:
        a, g = a[0], g[0]
    return cam_from(a, g)


def gradcam(model, inputs: Mapping[str, object], target_class: int, layer: str = DEFAULT_LAYER, body_present=None) -> np.ndarray:
    """Class activation map for a single sample, shape = the layer's spatial dims.

    Runs with eval-mode batch norm and never touches the parameters' gradients.
    """
    k = model.config.num_classes
    if not 0 <= int(target_class) < k:
        raise ValidationError(f"class index {target_class} out of range [0, {k})")
    feeds = {}
    for s in model.config.streams:
        x = inputs[s]
        data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=model.dtype)
        if data.shape[0] != 1:
            raise ValidationError(f"gradcam works on one sample, got batch {data.shape[0]}")
        feeds[s] = Tensor(data.astype(model.dtype), requires_grad=True)
    saved = {name: t.requires_grad for name, t in model.params.items()}
    for t in model.params.values():
        t.requires_grad = False
    try:
        capture: dict = {}
        out = model.forward(feeds, train=False, body_present=body_present, capture=capture)
        if layer not in capture:
            raise ValidationError(f"unknown gradcam layer {layer!r}; choose from {sorted(capture)}")
        return grad_cam(capture[layer], out.logits[0, int(target_class)])
    finally:
        for name, t in model.params.items():
            t.requires_grad = saved[name]
