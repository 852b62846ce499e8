"""Verification suites shared by ``mcaer selftest`` and the test-suite.

* gradient suite: analytic vs central-difference gradients at float64
* shape suite: stream traces against hand-derived floor-pool tables
* invariant suite: normalizations of attention, fusion weights and class scores
"""

from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Optional, Sequence

import numpy as np

from . import functional as F
from .gradcheck import finite_diff_report
from .model import MCAERModel, StreamConfig, reduced_config
from .params import RunningStats, make_rng
from .scconv import ScConvConfig, build_scconv, scconv_forward
from .tensor import Tensor, no_grad

OP_LIMIT = 1e-5
COMPOSITE_LIMIT = 1e-4
SUM_LIMIT = 1e-6
# below this magnitude a float64 central difference of an O(1) loss is mostly rounding
E2E_NOISE_FLOOR = 1e-6
_SEED_BASE = 7001


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: Optional[float] = None  # measured error, when the check has a tolerance
    limit: Optional[float] = None
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        parts = [f"{status} {self.name}:"]
        if self.value is not None:
            parts.append(f"max_err={self.value:.3e} limit={self.limit:.0e}")
        if self.detail:
            parts.append(f"[{self.detail}]")
        return " ".join(parts)


def _t(a, grad: bool = True) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def _weighted(y: Tensor, r: np.ndarray) -> Tensor:
    """Scalar probe sum(y * r); a random ``r`` avoids gradients that vanish under a plain sum."""
    return (y * Tensor(r)).sum()


def _away_from_zero(rng, shape, lo: float = 0.1) -> np.ndarray:
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(lo, 1.0, size=shape)


def _distinct(rng, shape, gap: float = 0.01) -> np.ndarray:
    """Values whose pairwise gaps exceed ``gap`` so max-pool winners are stable under FD steps."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * gap - n * gap / 2).reshape(shape)


def _max_err(f: Callable[[], Tensor], tensors: Sequence[Tensor]) -> float:
    return finite_diff_report(f, tensors).max_error


# -- individual gradient cases ------------------------------------------------
# Each takes a Generator and returns the max relative error over its inputs.


def grad_conv2d(rng) -> float:
    stride, padding = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    x, w, b = _t(rng.normal(size=(2, 3, 6, 7))), _t(rng.normal(size=(4, 3, 3, 3))), _t(rng.normal(size=4))
    r = rng.normal(size=F.conv2d(x, w, b, stride, padding).shape)
    return _max_err(lambda: _weighted(F.conv2d(x, w, b, stride, padding), r), [x, w, b])


def grad_deconv2d(rng) -> float:
    x, w, b = _t(rng.normal(size=(2, 3, 4, 5))), _t(rng.normal(size=(3, 4, 4, 4))), _t(rng.normal(size=4))
    r = rng.normal(size=F.deconv2d(x, w, b, 2, 1).shape)
    return _max_err(lambda: _weighted(F.deconv2d(x, w, b, 2, 1), r), [x, w, b])


def grad_batchnorm2d(rng) -> float:
    x = _t(rng.normal(size=(4, 3, 3, 3)) * 2 + 1)
    gamma, beta = _t(rng.uniform(0.5, 1.5, 3)), _t(rng.normal(size=3))
    r = rng.normal(size=x.shape)
    train_err = _max_err(lambda: _weighted(F.batchnorm2d(x, gamma, beta, RunningStats(), True), r), [x, gamma, beta])
    stats = RunningStats(rng.normal(size=3), rng.uniform(0.5, 2.0, 3))
    eval_err = _max_err(lambda: _weighted(F.batchnorm2d(x, gamma, beta, stats, False), r), [x, gamma, beta])
    return max(train_err, eval_err)


def grad_relu(rng) -> float:
    x = _t(_away_from_zero(rng, (3, 5)))
    r = rng.normal(size=x.shape)
    return _max_err(lambda: _weighted(F.relu(x), r), [x])


def grad_sigmoid(rng) -> float:
    x = _t(rng.normal(size=(3, 5)) * 3)
    r = rng.normal(size=x.shape)
    return _max_err(lambda: _weighted(F.sigmoid(x), r), [x])


def grad_pools(rng) -> float:
    x = _t(_distinct(rng, (2, 2, 7, 8)))
    errs = []
    for k, s in ((2, 2), (3, 2), (2, 1)):
        r = rng.normal(size=F.maxpool2d(x, k, s).shape)
        errs.append(_max_err(lambda: _weighted(F.maxpool2d(x, k, s), r), [x]))
        r = rng.normal(size=F.avgpool2d(x, k, s).shape)
        errs.append(_max_err(lambda: _weighted(F.avgpool2d(x, k, s), r), [x]))
    r = rng.normal(size=(2, 2))
    errs.append(_max_err(lambda: _weighted(F.global_avgpool(x), r), [x]))
    r = rng.normal(size=(2, 2, 14, 16))
    errs.append(_max_err(lambda: _weighted(F.upsample_nearest(x, 2), r), [x]))
    return max(errs)


def grad_linear(rng) -> float:
    x, w, b = _t(rng.normal(size=(3, 4))), _t(rng.normal(size=(5, 4))), _t(rng.normal(size=5))
    r = rng.normal(size=(3, 5))
    return _max_err(lambda: _weighted(F.linear(x, w, b), r), [x, w, b])


def grad_softmax(rng) -> float:
    x = _t(rng.normal(size=(3, 4, 5)))
    errs = []
    for axis in (0, 1, 2):
        r = rng.normal(size=x.shape)
        errs.append(_max_err(lambda: _weighted(F.softmax(x, axis), r), [x]))
        errs.append(_max_err(lambda: _weighted(F.log_softmax(x, axis), r), [x]))
    m = _t(rng.normal(size=(2, 1, 3, 4)))
    r = rng.normal(size=m.shape)
    errs.append(_max_err(lambda: _weighted(F.spatial_softmax(m), r), [m]))
    return max(errs)


def grad_cross_entropy(rng) -> float:
    logits = _t(rng.normal(size=(4, 7)) * 2)
    labels = rng.integers(0, 7, size=4)
    x, w, b = _t(rng.normal(size=(3, 4))), _t(rng.normal(size=(5, 4))), _t(rng.normal(size=5))
    y = rng.integers(0, 5, size=3)
    return max(
        _max_err(lambda: F.cross_entropy(logits, labels), [logits]),
        _max_err(lambda: F.cross_entropy(F.linear(x, w, b), y), [x, w, b]),
    )


def grad_scconv(rng) -> float:
    errs = []
    # plain sum on the square case, random weighting on the channel-changing ones
    for c_in, c_out, hw, weighted in ((4, 4, 6, False), (4, 6, 8, True), (6, 2, 5, True)):
        cfg = ScConvConfig(c_in, c_out, pool_rate=2)
        p = build_scconv(cfg, rng, np.float64)
        for name, t in p.named():
            if name.startswith("b"):  # kernels keep their initializer scale
                t.data = rng.normal(size=t.shape) * 0.2
        x = _t(rng.normal(size=(1, c_in, hw, hw)))
        tensors = [x] + [t for _, t in p.named()]
        r = rng.normal(size=(1, c_out, hw, hw)) if weighted else np.ones((1, c_out, hw, hw))
        errs.append(_max_err(lambda: _weighted(scconv_forward(x, p, cfg), r), tensors))
    return max(errs)


def grad_attention(rng) -> float:
    feats = _t(np.abs(rng.normal(size=(2, 4, 3, 5))))
    w = _t(rng.normal(size=(1, 4, 1, 1)))
    r = rng.normal(size=(2, 4))

    def f():
        att = F.spatial_softmax(F.conv2d(feats, w))
        return _weighted(F.global_avgpool(feats * att), r)

    return _max_err(f, [feats, w])


def _perturb_params(model: MCAERModel, rng) -> None:
    # fresh init has zero biases and unit gammas; randomize so no gradient is degenerate
    for name, t in model.params.items():
        if name.endswith(".bias") or name.endswith(".beta"):
            t.data = (rng.normal(size=t.shape) * 0.1).astype(t.dtype)
        elif name.endswith(".gamma"):
            t.data = rng.uniform(0.5, 1.5, t.shape).astype(t.dtype)


def grad_fusion(rng) -> float:
    cfg = StreamConfig(
        face_widths=(2, 2, 2, 2, 6), context_widths=(2, 2, 2, 4), scconv_out=6,
        body_widths=(2, 2, 2, 2), deconv_widths=(2, 6), gate_hidden=5, classifier_hidden=5,
    )
    model = MCAERModel(cfg, seed=int(rng.integers(1 << 30)), dtype=np.float64)
    _perturb_params(model, rng)
    feats = [_t(rng.normal(size=(3, 6))) for _ in cfg.streams]
    labels = rng.integers(0, 7, size=3)
    params = [t for n, t in model.params.items() if n.startswith("fusion.")]
    for t in params:
        t.requires_grad = True
    return _max_err(lambda: F.cross_entropy(model.fuse(feats)[0], labels), feats + params)


def module_of(name: str) -> str:
    return name.split(".", 1)[0]


def sample_param_indices(model: MCAERModel, rng, per_module=10, exclude=None) -> dict[str, np.ndarray]:
    """Pick scalar entries per module (an int, or a dict module -> count), round-robin over its tensors.

    Entries listed in ``exclude`` (name -> set of flat indices) are never drawn.
    """
    exclude = exclude or {}
    groups: dict[str, list[str]] = {}
    for name in model.trainable_params().names():
        groups.setdefault(module_of(name), []).append(name)
    picks: dict[str, list[int]] = {}
    for module, names in groups.items():
        want = per_module.get(module, 0) if isinstance(per_module, dict) else per_module
        order = [names[i] for i in rng.permutation(len(names))]
        taken = 0
        while taken < want:
            progressed = False
            for name in order:
                if taken == want:
                    break
                chosen = picks.setdefault(name, [])
                free = np.setdiff1d(np.arange(model.params[name].size), chosen + sorted(exclude.get(name, ())))
                if free.size:
                    chosen.append(int(rng.choice(free)))
                    taken += 1
                    progressed = True
            if not progressed:
                break
    return {k: np.array(sorted(v)) for k, v in picks.items() if v}


def random_inputs(config: StreamConfig, n: int, rng, dtype=np.float64) -> dict:
    s, b = config.face_size, config.body_size
    out = {
        "face": rng.uniform(0, 1, (n, 3, s, s)).astype(dtype),
        "context": rng.uniform(0, 1, (n, 3) + tuple(config.context_hw)).astype(dtype),
    }
    if "body" in config.enabled_streams:
        out["body"] = rng.uniform(0, 1, (n, 3, b, b)).astype(dtype)
    return out


def _end_to_end_at_point(rng, per_module: int, max_rounds: int) -> Optional[float]:
    model = MCAERModel(reduced_config(8), seed=int(rng.integers(1 << 30)), dtype=np.float64)
    _perturb_params(model, rng)
    inputs = random_inputs(model.config, 1, rng)
    labels = rng.integers(0, 7, size=1)

    def f():
        return F.cross_entropy(model.forward(inputs, train=True).logits, labels)

    used: dict[str, set] = {}
    need = {module_of(n): per_module for n in model.trainable_params().names()}
    worst = 0.0
    for _ in range(max_rounds):
        if max(need.values()) <= 0:
            return worst
        picks = sample_param_indices(model, rng, need, exclude=used)
        names = list(picks)
        rep = finite_diff_report(
            f,
            [model.params[n] for n in names],
            indices=[picks[n] for n in names],
            skip_nonsmooth=True,
            noise_floor=E2E_NOISE_FLOOR,
        )
        if np.isnan(rep.max_error):
            return float("nan")
        worst = max(worst, rep.max_error)
        for n in names:
            used.setdefault(n, set()).update(int(i) for i in picks[n])
        for n, ok in zip(names, rep.checked):
            need[module_of(n)] -= len(ok)
    return worst if max(need.values()) <= 0 else None


def grad_end_to_end(rng, per_module: int = 10, max_rounds: int = 4, max_points: int = 4) -> float:
    """Sampled parameters of a width-reduced float64 model under train-mode BN.

    An entry whose perturbation flips a ReLU or max-pool decision is not a
    valid finite-difference point, and one whose gradient is below
    ``E2E_NOISE_FLOOR`` cannot be resolved by it; both are replaced by fresh
    samples. If a module cannot collect ``per_module`` usable entries (the
    random point sits next to a kink that everything upstream can reach) a new
    point is drawn.
    """
    for _ in range(max_points):
        err = _end_to_end_at_point(rng, per_module, max_rounds)
        if err is not None:
            return err
    return float("nan")


GRADIENT_CASES: list[tuple[str, float, Callable]] = [
    ("conv2d", OP_LIMIT, grad_conv2d),
    ("deconv2d", OP_LIMIT, grad_deconv2d),
    ("batchnorm2d", OP_LIMIT, grad_batchnorm2d),
    ("relu", OP_LIMIT, grad_relu),
    ("sigmoid", OP_LIMIT, grad_sigmoid),
    ("pools", OP_LIMIT, grad_pools),
    ("linear", OP_LIMIT, grad_linear),
    ("softmax", OP_LIMIT, grad_softmax),
    ("cross_entropy", OP_LIMIT, grad_cross_entropy),
    ("scconv_forward", OP_LIMIT, grad_scconv),
    ("attention", COMPOSITE_LIMIT, grad_attention),
    ("fusion_head", COMPOSITE_LIMIT, grad_fusion),
    ("end_to_end", COMPOSITE_LIMIT, grad_end_to_end),
]


def gradient_suite(seeds: Iterable[int] = range(20), only: Optional[Sequence[str]] = None) -> list[CheckResult]:
    seeds = list(seeds)
    results = []
    for k, (name, limit, fn) in enumerate(GRADIENT_CASES):
        if only is not None and name not in only:
            continue
        t0 = time.perf_counter()
        errs = [fn(make_rng(_SEED_BASE, k, s)) for s in seeds]
        worst = float(np.max(errs)) if not np.isnan(errs).any() else float("nan")
        passed = bool(np.isfinite(worst) and worst < limit)
        detail = f"{len(seeds)} seeds, {time.perf_counter() - t0:.1f}s"
        results.append(CheckResult(f"grad/{name}", passed, worst, limit, detail))
    return results


# -- shapes -------------------------------------------------------------------


def floor_pool_trace(hw: tuple[int, int], pools: int) -> list[tuple[int, int]]:
    h, w = hw
    out = [(h, w)]
    for _ in range(pools):
        h, w = h // 2, w // 2
        out.append((h, w))
    return out


def shape_suite(config: Optional[StreamConfig] = None, n: int = 2, seed: int = 0) -> list[CheckResult]:
    """Forward a batch through every stream and compare each shape to its expected value."""
    config = config or StreamConfig()
    model = MCAERModel(config, seed=seed)
    rng = make_rng(seed, 11)
    inputs = random_inputs(config, n, rng, np.float32)
    cap: dict = {}
    with no_grad():
        out = model.forward(inputs, train=False, capture=cap)
    d = config.feature_dim
    fh, fw = floor_pool_trace((config.face_size, config.face_size), 4)[-1]
    ch, cw = floor_pool_trace(tuple(config.context_hw), 4)[-1]
    bh = floor_pool_trace((config.body_size, config.body_size), 4)[-1][0] * 2 ** len(config.deconv)
    expected = {
        "face.features": (n, config.face[-1], fh, fw),
        "context.features": (n, config.scconv_channels[1], ch, cw),
        "attention": (n, 1, ch, cw),
        "logits": (n, config.num_classes),
        "weights": (n, len(config.streams)),
    }
    got = {
        "face.features": cap["face.features"].shape,
        "context.features": cap["context.features"].shape,
        "attention": out.attention.shape,
        "logits": out.logits.shape,
        "weights": out.weights.shape,
    }
    with no_grad():
        expected["face.vector"] = (n, d)
        got["face.vector"] = model.face_stream(inputs["face"]).shape
        expected["context.vector"] = (n, d)
        got["context.vector"] = model.context_stream(inputs["context"])[0].shape
        if "body" in config.enabled_streams:
            vec, heat = model.body_stream(inputs["body"])
            expected["body.features"] = (n, config.deconv[-1], bh, bh)
            got["body.features"] = cap["body.features"].shape
            expected["body.vector"] = (n, d)
            got["body.vector"] = vec.shape
            if config.num_joints > 0:
                expected["body.heatmaps"] = (n, config.num_joints, bh, bh)
                got["body.heatmaps"] = heat.shape
    return [
        CheckResult(f"shape/{k}", tuple(got[k]) == tuple(v), detail=f"got {tuple(got[k])} want {tuple(v)}")
        for k, v in expected.items()
    ]


# -- invariants ----------------------------------------------------------------


def invariant_suite(samples: int = 100, chunk: int = 10, seed: int = 0) -> list[CheckResult]:
    """Attention, fusion weights and class probabilities are normalized on random inputs."""
    att_err = lam_err = prob_err = 0.0
    lam_min = np.inf
    config = reduced_config(8)
    done = 0
    while done < samples:
        k = min(chunk, samples - done)
        rng = make_rng(seed, 12, done)
        model = MCAERModel(config, seed=int(rng.integers(1 << 30)))
        _perturb_params(model, rng)
        inputs = random_inputs(config, k, rng, np.float32)
        with no_grad():
            out = model.forward(inputs, train=False)
        att = out.attention.data.astype(np.float64).sum(axis=(1, 2, 3))
        lam = out.weights.data.astype(np.float64)
        prob = F.softmax(out.logits, axis=1).data.astype(np.float64).sum(axis=1)
        att_err = max(att_err, float(np.abs(att - 1).max()))
        lam_err = max(lam_err, float(np.abs(lam.sum(axis=1) - 1).max()))
        lam_min = min(lam_min, float(lam.min()))
        prob_err = max(prob_err, float(np.abs(prob - 1).max()))
        done += k
    detail = f"{samples} inputs"
    return [
        CheckResult("invariant/attention_sum", att_err <= SUM_LIMIT, att_err, SUM_LIMIT, detail),
        CheckResult("invariant/fusion_weight_sum", lam_err <= SUM_LIMIT, lam_err, SUM_LIMIT, detail),
        CheckResult("invariant/fusion_weight_nonneg", lam_min >= 0, detail=f"min weight {lam_min:.3e}"),
        CheckResult("invariant/probability_sum", prob_err <= SUM_LIMIT, prob_err, SUM_LIMIT, detail),
    ]


# -- fault injection ---------------------------------------------------------------


@contextlib.contextmanager
def inject_conv_grad_fault(factor: float = 1.01) -> Iterator[None]:
    """Scale conv2d's backward by ``factor`` so the gradient checks must notice."""
    original = F.conv2d

    def faulty(*args, **kwargs):
        return F.scale_grad(original(*args, **kwargs), factor)

    F.conv2d = faulty
    try:
        yield
    finally:
        F.conv2d = original


def run_selftest(seeds: Iterable[int] = range(20), fault: bool = False, echo: Callable[[str], None] = print) -> bool:
    ctx = inject_conv_grad_fault() if fault else contextlib.nullcontext()
    ok = True
    with ctx:
        for suite in (lambda: gradient_suite(seeds), shape_suite, invariant_suite):
            for res in suite():
                echo(res.line())
                ok &= res.passed
    return ok
