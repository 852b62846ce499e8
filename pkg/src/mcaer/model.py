"""Three-stream emotion network with attention-boosted context and adaptive fusion."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, replace
from typing import Mapping, NamedTuple, Optional, Sequence

import numpy as np

from . import functional as F
from .errors import ConfigError, DimensionError
from .params import (
    ParamSet,
    RunningStats,
    conv_weight,
    deconv_weight,
    linear_weight,
    make_rng,
    ones,
    zeros,
)
from .scconv import ScConvConfig, build_scconv, default_pool_rate, scconv_forward
from .tensor import Tensor

CLASS_NAMES = ("angry", "disgust", "fear", "happy", "sad", "surprise", "neutral")
STREAMS = ("face", "context", "body")


def _scale(widths: Sequence[int], divisor: int) -> tuple[int, ...]:
    return tuple(max(2, w // divisor) for w in widths)


@dataclass(frozen=True)
class StreamConfig:
    """Layer widths and stream selection. ``width_divisor`` shrinks every channel count."""

    face_widths: tuple[int, ...] = (32, 64, 128, 256, 256)
    context_widths: tuple[int, ...] = (32, 64, 128, 256)
    scconv_out: int = 256
    body_widths: tuple[int, ...] = (32, 64, 128, 256)
    deconv_widths: tuple[int, ...] = (256, 256)
    deconv_kernel: int = 4
    num_joints: int = 7
    gate_hidden: int = 128
    classifier_hidden: int = 128
    num_classes: int = 7
    width_divisor: int = 1
    enabled_streams: tuple[str, ...] = ("face", "context", "body")
    body_use_mask: bool = True
    face_size: int = 96
    context_hw: tuple[int, int] = (133, 237)
    body_size: int = 256
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        for name in ("face_widths", "context_widths", "body_widths", "deconv_widths", "context_hw", "enabled_streams"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        unknown = set(self.enabled_streams) - set(STREAMS)
        if unknown:
            raise ConfigError(f"unknown stream(s) {sorted(unknown)}; choose from {STREAMS}")
        if "face" not in self.enabled_streams or "context" not in self.enabled_streams:
            raise ConfigError("enabled_streams must contain 'face' and 'context'")
        if len(set(self.enabled_streams)) != len(self.enabled_streams):
            raise ConfigError("enabled_streams has duplicates")
        if len(self.face_widths) != 5 or len(self.context_widths) != 4 or len(self.body_widths) != 4:
            raise ConfigError("face needs 5 widths, context and body need 4")
        if self.width_divisor < 1:
            raise ConfigError("width_divisor must be >= 1")
        if self.num_classes != len(CLASS_NAMES):
            raise ConfigError(f"num_classes must be {len(CLASS_NAMES)}")
        dims = {self.face[-1], self.scconv_channels[1]}
        if "body" in self.enabled_streams:
            dims.add(self.deconv[-1])
        if len(dims) != 1:
            raise ConfigError(f"stream feature sizes differ: {sorted(dims)}")

    @property
    def streams(self) -> tuple[str, ...]:
        """Enabled streams in canonical order."""
        return tuple(s for s in STREAMS if s in self.enabled_streams)

    @property
    def face(self) -> tuple[int, ...]:
        return _scale(self.face_widths, self.width_divisor)

    @property
    def context(self) -> tuple[int, ...]:
        return _scale(self.context_widths, self.width_divisor)

    @property
    def scconv_channels(self) -> tuple[int, int]:
        c_in = self.context[-1]
        c_out = max(2, self.scconv_out // self.width_divisor)
        return c_in + c_in % 2, c_out + c_out % 2

    @property
    def body(self) -> tuple[int, ...]:
        return _scale(self.body_widths, self.width_divisor)

    @property
    def deconv(self) -> tuple[int, ...]:
        return _scale(self.deconv_widths, self.width_divisor)

    @property
    def feature_dim(self) -> int:
        return self.face[-1]

    @property
    def hidden(self) -> tuple[int, int]:
        return (
            max(1, self.gate_hidden // self.width_divisor),
            max(1, self.classifier_hidden // self.width_divisor),
        )

    def context_trace(self) -> list[tuple[int, int]]:
        """Spatial size after the input and each of the four context pools."""
        h, w = self.context_hw
        trace = [(h, w)]
        for _ in range(4):
            h, w = h // 2, w // 2
            trace.append((h, w))
        return trace

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "StreamConfig":
        known = cls.__dataclass_fields__
        extra = set(d) - set(known)
        if extra:
            raise ConfigError(f"unknown model config keys {sorted(extra)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    def with_streams(self, streams: Sequence[str]) -> "StreamConfig":
        return replace(self, enabled_streams=tuple(streams))


def reduced_config(divisor: int = 8, **overrides) -> StreamConfig:
    """Width-reduced configuration used by the verification and overfit checks."""
    return StreamConfig(width_divisor=divisor, **overrides)


class ModelOutput(NamedTuple):
    logits: Tensor
    weights: Tensor
    attention: Tensor
    heatmaps: Optional[Tensor]


class MCAERModel:
    """Parameter registry plus the forward passes of every stream and the fusion head."""

    class_names = CLASS_NAMES

    def __init__(self, config: StreamConfig = StreamConfig(), seed: int = 0, dtype=np.float32):
        self.config = config
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.params = ParamSet()
        self.buffers: "OrderedDict[str, RunningStats]" = OrderedDict()
        h, w = config.context_trace()[-1]
        c_in, c_out = config.scconv_channels
        self.scconv_config = ScConvConfig(c_in, c_out, 3, 1, 1, default_pool_rate(h, w))
        self._build(make_rng(seed, 0))

    # -- construction ---------------------------------------------------------

    def _conv_bn(self, rng, prefix: str, cin: int, cout: int) -> None:
        dt = self.dtype
        self.params.add(f"{prefix}.conv.weight", conv_weight(rng, cout, cin, 3, dt))
        self.params.add(f"{prefix}.bn.gamma", ones((cout,), dt))
        self.params.add(f"{prefix}.bn.beta", zeros((cout,), dt))
        self.buffers[f"{prefix}.bn"] = RunningStats.fresh(cout, dt)

    def _linear(self, rng, prefix: str, din: int, dout: int) -> None:
        self.params.add(f"{prefix}.weight", linear_weight(rng, dout, din, self.dtype))
        self.params.add(f"{prefix}.bias", zeros((dout,), self.dtype))

    def _build(self, rng) -> None:
        cfg, dt = self.config, self.dtype
        cin = 3
        for i, c in enumerate(cfg.face, start=1):
            self._conv_bn(rng, f"face.layer{i}", cin, c)
            cin = c
        cin = 3
        for i, c in enumerate(cfg.context, start=1):
            self._conv_bn(rng, f"context.layer{i}", cin, c)
            cin = c
        if cin != self.scconv_config.c_in:
            # odd reduced width: project to the even scconv input
            self._conv_bn(rng, "context.adapter", cin, self.scconv_config.c_in)
        self.scconv = build_scconv(self.scconv_config, rng, dt)
        self.scconv.register(self.params, "context.scconv")
        d = self.scconv_config.c_out
        self.params.add("context.attention.weight", conv_weight(rng, 1, d, 1, dt))
        if "body" in cfg.enabled_streams:
            cin = 3
            for i, c in enumerate(cfg.body, start=1):
                self._conv_bn(rng, f"body.layer{i}", cin, c)
                cin = c
            for i, c in enumerate(cfg.deconv, start=1):
                k = cfg.deconv_kernel
                self.params.add(f"body.deconv{i}.weight", deconv_weight(rng, cin, c, k, 2, dt))
                self.params.add(f"body.deconv{i}.bn.gamma", ones((c,), dt))
                self.params.add(f"body.deconv{i}.bn.beta", zeros((c,), dt))
                self.buffers[f"body.deconv{i}.bn"] = RunningStats.fresh(c, dt)
                cin = c
            if cfg.num_joints > 0:
                self.params.add("body.heatmap.weight", conv_weight(rng, cfg.num_joints, cin, 1, dt))
                self.params.add("body.heatmap.bias", zeros((cfg.num_joints,), dt))
        d = cfg.feature_dim
        gh, ch = cfg.hidden
        for s in cfg.streams:
            self._linear(rng, f"fusion.gate.{s}.fc1", d, gh)
            self._linear(rng, f"fusion.gate.{s}.fc2", gh, 1)
        self._linear(rng, "fusion.classifier.fc1", d * len(cfg.streams), ch)
        self._linear(rng, "fusion.classifier.fc2", ch, cfg.num_classes)

    def trainable_params(self, include_heatmap: bool = False) -> ParamSet:
        """Parameters reached by the classification loss (and optionally the heatmap head)."""
        out = ParamSet()
        for name, t in self.params.items():
            if name.startswith("body.heatmap.") and not include_heatmap:
                continue
            out._items[name] = t
        return out

    # -- building blocks ------------------------------------------------------

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    def _bn(self, x: Tensor, prefix: str, train: bool) -> Tensor:
        cfg = self.config
        return F.batchnorm2d(
            x,
            self._p(f"{prefix}.gamma"),
            self._p(f"{prefix}.beta"),
            self.buffers[prefix],
            train,
            cfg.bn_momentum,
            cfg.bn_eps,
        )

    def _conv_bn_relu(self, x: Tensor, prefix: str, train: bool) -> Tensor:
        x = F.conv2d(x, self._p(f"{prefix}.conv.weight"), None, 1, 1)
        return F.relu(self._bn(x, f"{prefix}.bn", train))

    def _mlp(self, x: Tensor, prefix: str) -> Tensor:
        h = F.relu(F.linear(x, self._p(f"{prefix}.fc1.weight"), self._p(f"{prefix}.fc1.bias")))
        return F.linear(h, self._p(f"{prefix}.fc2.weight"), self._p(f"{prefix}.fc2.bias"))

    def _as_input(self, x, stream: str, hw: tuple[int, int]) -> Tensor:
        t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        if t.dtype != self.dtype:
            t = t.astype(self.dtype)
        if t.ndim != 4 or t.shape[1] != 3 or t.shape[2:] != tuple(hw):
            raise DimensionError(f"{stream} stream: expected [N,3,{hw[0]},{hw[1]}] input, got {t.shape}")
        return t

    # -- streams ----------------------------------------------------------------

    def face_stream(self, x, train: bool = False, capture: Optional[dict] = None) -> Tensor:
        s = self.config.face_size
        x = self._as_input(x, "face", (s, s))
        for i in range(1, 6):
            x = self._conv_bn_relu(x, f"face.layer{i}", train)
            if i <= 4:
                x = F.maxpool2d(x, 2, 2)
        if capture is not None:
            capture["face.features"] = x
        return F.global_avgpool(x)

    def context_stream(self, x, train: bool = False, capture: Optional[dict] = None) -> tuple[Tensor, Tensor]:
        x = self._as_input(x, "context", self.config.context_hw)
        for i in range(1, 5):
            x = F.maxpool2d(self._conv_bn_relu(x, f"context.layer{i}", train), 2, 2)
        if "context.adapter.conv.weight" in self.params:
            x = self._conv_bn_relu(x, "context.adapter", train)
        feats = F.relu(scconv_forward(x, self.scconv, self.scconv_config))
        if capture is not None:
            capture["context.features"] = feats
        logits = F.conv2d(feats, self._p("context.attention.weight"))
        attention = F.spatial_softmax(logits)
        boosted = feats * attention
        if capture is not None:
            capture["context.attention_logits"] = logits
            capture["context.boosted"] = boosted
        return F.global_avgpool(boosted), attention

    def body_stream(self, x, train: bool = False, capture: Optional[dict] = None) -> tuple[Tensor, Optional[Tensor]]:
        s = self.config.body_size
        x = self._as_input(x, "body", (s, s))
        for i in range(1, 5):
            x = F.maxpool2d(self._conv_bn_relu(x, f"body.layer{i}", train), 2, 2)
        k = self.config.deconv_kernel
        for i in range(1, len(self.config.deconv) + 1):
            x = F.deconv2d(x, self._p(f"body.deconv{i}.weight"), None, 2, (k - 2) // 2)
            x = F.relu(self._bn(x, f"body.deconv{i}.bn", train))
        if capture is not None:
            capture["body.features"] = x
        heatmaps = None
        if "body.heatmap.weight" in self.params:
            heatmaps = F.conv2d(x, self._p("body.heatmap.weight"), self._p("body.heatmap.bias"))
        return F.global_avgpool(x), heatmaps

    def fuse(self, features: Sequence[Tensor]) -> tuple[Tensor, Tensor]:
        """Softmax-gated fusion of one [N,D] feature per enabled stream -> (logits, weights)."""
        streams = self.config.streams
        if len(features) != len(streams):
            raise DimensionError(f"fusion expects {len(streams)} stream features {streams}, got {len(features)}")
        d = self.config.feature_dim
        for s, f in zip(streams, features):
            if f.ndim != 2 or f.shape[1] != d:
                raise DimensionError(f"fusion: {s} feature has shape {f.shape}, expected [N,{d}]")
        scores = F.concat([self._mlp(f, f"fusion.gate.{s}") for s, f in zip(streams, features)], axis=1)
        weights = F.softmax(scores, axis=1)
        fused = F.concat([f * weights[:, i : i + 1] for i, f in enumerate(features)], axis=1)
        return self._mlp(fused, "fusion.classifier"), weights

    def forward(
        self,
        inputs: Mapping[str, object],
        train: bool = False,
        body_present=None,
        capture: Optional[dict] = None,
    ) -> ModelOutput:
        """Run every enabled stream and the fusion head.

        ``body_present`` (bool array [N]) zeroes the body feature of samples
        whose person mask is missing; their gate still participates.
        """
        missing = [s for s in self.config.streams if s not in inputs]
        if missing:
            raise DimensionError(f"missing input for stream(s) {missing}")
        feats = [self.face_stream(inputs["face"], train, capture)]
        ctx, attention = self.context_stream(inputs["context"], train, capture)
        feats.append(ctx)
        heatmaps = None
        if "body" in self.config.enabled_streams:
            body, heatmaps = self.body_stream(inputs["body"], train, capture)
            if body_present is not None:
                keep = np.asarray(body_present, dtype=self.dtype).reshape(-1, 1)
                body = body * keep
            feats.append(body)
        if len({f.shape[0] for f in feats}) != 1:
            raise DimensionError(f"stream batch sizes differ: {[f.shape[0] for f in feats]}")
        logits, weights = self.fuse(feats)
        return ModelOutput(logits, weights, attention, heatmaps)

    __call__ = forward

    def predict_proba(self, inputs, body_present=None) -> np.ndarray:
        from .tensor import no_grad

        with no_grad():
            out = self.forward(inputs, train=False, body_present=body_present)
        return F.softmax(out.logits, axis=1).data


def mcaer_forward(model: MCAERModel, inputs: Mapping[str, object], train: bool = False, body_present=None) -> ModelOutput:
    return model.forward(inputs, train=train, body_present=body_present)
