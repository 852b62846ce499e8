"""Central finite-difference oracle for analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .functional import branch_digest, record_branches
from .tensor import Tensor


def _digest_of(f: Callable[[], Tensor]) -> tuple[float, bytes]:
    with record_branches() as log:
        value = float(f().data)
    return value, branch_digest(log)


def numerical_grad(
    f: Callable[[], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    indices: Optional[Iterable[int]] = None,
    base_digest: Optional[bytes] = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Central differences of scalar ``f()`` w.r.t. entries of ``x`` (perturbed in place).

    Returns ``(flat_indices, derivatives, smooth)``. When ``base_digest`` is
    given, ``smooth[k]`` is False if a ReLU or max-pool decision differs between
    the unperturbed point and either perturbed one; otherwise it is all True.
    """
    flat = x.data.reshape(-1)
    idx = np.arange(flat.size) if indices is None else np.asarray(list(indices), dtype=np.int64)
    out = np.empty(idx.size, dtype=np.float64)
    smooth = np.ones(idx.size, dtype=bool)
    for k, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + eps
        if base_digest is None:
            fp = float(f().data)
            flat[i] = orig - eps
            fm = float(f().data)
        else:
            fp, dp = _digest_of(f)
            flat[i] = orig - eps
            fm, dm = _digest_of(f)
            smooth[k] = dp == base_digest and dm == base_digest
        flat[i] = orig
        out[k] = (fp - fm) / (2.0 * eps)
    return idx, out, smooth


def analytic_grads(f: Callable[[], Tensor], xs: Sequence[Tensor]) -> list[np.ndarray]:
    """Backprop gradients of scalar ``f()`` w.r.t. each tensor in ``xs`` from a single backward pass."""
    saved = [(x.requires_grad, x.grad) for x in xs]
    for x in xs:
        x.requires_grad = True
        x.grad = None
    try:
        f().backward()
        return [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in xs]
    finally:
        for x, (rg, g) in zip(xs, saved):
            x.requires_grad, x.grad = rg, g


def analytic_grad(f: Callable[[], Tensor], x: Tensor) -> np.ndarray:
    return analytic_grads(f, [x])[0]


def relative_error(a: np.ndarray, n: np.ndarray) -> np.ndarray:
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


@dataclass
class FDReport:
    max_error: float
    checked: list[np.ndarray]  # flat indices compared, per tensor
    skipped: list[np.ndarray]  # flat indices excluded (non-smooth or below the noise floor), per tensor

    @property
    def num_checked(self) -> int:
        return int(sum(len(c) for c in self.checked))


def finite_diff_report(
    f: Callable[[], Tensor],
    xs: Sequence[Tensor],
    eps: float = 1e-5,
    indices: Optional[Sequence[Optional[Iterable[int]]]] = None,
    skip_nonsmooth: bool = False,
    noise_floor: float = 0.0,
) -> FDReport:
    """Compare backprop and central differences for several tensors at once.

    With ``skip_nonsmooth`` the entries whose perturbation flips a ReLU sign or
    a max-pool winner anywhere in ``f`` are excluded (and listed in ``skipped``).
    Entries where both derivatives are below ``noise_floor`` in magnitude are
    excluded as well: there the central difference is dominated by rounding
    and truncation, so its relative error says nothing about backprop.
    """
    grads = analytic_grads(f, xs)
    base = _digest_of(f)[1] if skip_nonsmooth else None
    worst, checked, skipped = 0.0, [], []
    for k, (x, g) in enumerate(zip(xs, grads)):
        idx, n, smooth = numerical_grad(f, x, eps, None if indices is None else indices[k], base)
        a = g.reshape(-1)[idx]
        if noise_floor > 0:
            smooth &= np.maximum(np.abs(a), np.abs(n)) >= noise_floor
        if np.isnan(n).any() or np.isnan(a).any():
            worst = float("nan")
        elif smooth.any() and not np.isnan(worst):
            worst = max(worst, float(relative_error(a[smooth], n[smooth]).max()))
        checked.append(idx[smooth])
        skipped.append(idx[~smooth])
    return FDReport(worst, checked, skipped)


def finite_diff_check(
    f: Callable[[], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    indices: Optional[Iterable[int]] = None,
) -> float:
    """Max elementwise relative error between backprop and central differences.

    ``f`` is a zero-argument closure producing a scalar tensor that depends on
    ``x``. The error for each element is ``|a-n| / max(|a|, |n|, 1e-8)``.
    Returns NaN if ``f`` produces NaN.
    """
    return finite_diff_report(f, [x], eps, None if indices is None else [indices]).max_error
