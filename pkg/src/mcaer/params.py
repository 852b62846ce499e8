"""Parameter registry, batch-norm buffers, seeded initializers."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .errors import ConfigError
from .tensor import Tensor


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for the stream identified by ``(seed, *keys)``.

    Streams derived from distinct key tuples are statistically independent,
    so per-sample or per-epoch draws never depend on evaluation order.
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


class ParamSet:
    """Ordered map of unique names to trainable tensors."""

    def __init__(self) -> None:
        self._items: "OrderedDict[str, Tensor]" = OrderedDict()

    def add(self, name: str, t: Tensor) -> Tensor:
        if name in self._items:
            raise ConfigError(f"parameter {name!r} registered twice")
        t.requires_grad = True
        t.name = name
        self._items[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def __contains__(self, name: str) -> bool:
        return name in self._items

    def __iter__(self) -> Iterator[str]:
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def items(self):
        return self._items.items()

    def values(self):
        return self._items.values()

    def names(self) -> list[str]:
        return list(self._items)

    def zero_grad(self) -> None:
        for t in self._items.values():
            t.grad = None

    def num_elements(self) -> int:
        return sum(t.size for t in self._items.values())


@dataclass
class RunningStats:
    """Batch-norm running mean/variance; ``None`` until initialized."""

    mean: Optional[np.ndarray] = None
    var: Optional[np.ndarray] = None

    @classmethod
    def fresh(cls, channels: int, dtype=np.float64) -> "RunningStats":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> Tensor:
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype))


def conv_weight(rng, cout: int, cin: int, k: int, dtype) -> Tensor:
    return he_uniform(rng, (cout, cin, k, k), cin * k * k, dtype)


def deconv_weight(rng, cin: int, cout: int, k: int, stride: int, dtype) -> Tensor:
    # each output pixel receives cin*k*k/stride^2 contributions
    return he_uniform(rng, (cin, cout, k, k), max(1, cin * k * k // (stride * stride)), dtype)


def linear_weight(rng, dout: int, din: int, dtype) -> Tensor:
    return he_uniform(rng, (dout, din), din, dtype)


def zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype))


def ones(shape, dtype) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype))
