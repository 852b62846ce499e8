import numpy as np
import pytest

from mcaer import functional as F
from mcaer.errors import ConfigError, DimensionError, ValidationError
from mcaer.gradcam import cam_from, grad_cam, gradcam
from mcaer.gradcheck import finite_diff_report
from mcaer.model import CLASS_NAMES, MCAERModel, StreamConfig, mcaer_forward, reduced_config
from mcaer.params import make_rng
from mcaer.selftest import _perturb_params, floor_pool_trace, random_inputs, shape_suite
from mcaer.tensor import Tensor, no_grad


@pytest.fixture(scope="module")
def full_model():
    return MCAERModel(StreamConfig(), seed=0)


@pytest.fixture(scope="module")
def small_model():
    return MCAERModel(reduced_config(8), seed=0)


def inputs_for(config, n, seed=0, dtype=np.float32):
    return random_inputs(config, n, make_rng(seed, 99), dtype)


class TestConfig:
    def test_class_table(self):
        assert CLASS_NAMES == ("angry", "disgust", "fear", "happy", "sad", "surprise", "neutral")

    @pytest.mark.parametrize("streams", [("face",), ("context", "body"), ("face", "context", "legs")])
    def test_face_and_context_required(self, streams):
        with pytest.raises(ConfigError):
            StreamConfig(enabled_streams=streams)

    def test_round_trip_dict(self):
        cfg = reduced_config(4, enabled_streams=("face", "context"))
        assert StreamConfig.from_dict(cfg.to_dict()) == cfg

    def test_parameters_registered_once(self, full_model):
        names = full_model.params.names()
        assert len(names) == len(set(names))
        ids = [id(t) for t in full_model.params.values()]
        assert len(ids) == len(set(ids))
        scconv = [n for n in names if n.startswith("context.scconv.")]
        assert len(scconv) == 8

    def test_context_trace_table(self):
        assert StreamConfig().context_trace() == [(133, 237), (66, 118), (33, 59), (16, 29), (8, 14)]
        assert floor_pool_trace((96, 96), 4) == [(96, 96), (48, 48), (24, 24), (12, 12), (6, 6)]


class TestFaceStream:
    @pytest.mark.parametrize("n", [1, 32])
    def test_output_shape(self, full_model, n):
        cap = {}
        with no_grad():
            out = full_model.face_stream(inputs_for(full_model.config, n)["face"], capture=cap)
        assert out.shape == (n, 256)
        assert cap["face.features"].shape == (n, 256, 6, 6)

    def test_zero_input_gives_zero(self, full_model):
        with no_grad():
            out = full_model.face_stream(np.zeros((1, 3, 96, 96), np.float32))
        assert np.all(out.data == 0)

    def test_wrong_shape_names_stream(self, small_model):
        with pytest.raises(DimensionError, match="face"):
            small_model.face_stream(np.zeros((1, 3, 95, 96), np.float32))

    def test_kernel_gradient(self):
        rng = make_rng(21)
        model = MCAERModel(reduced_config(8), seed=3, dtype=np.float64)
        _perturb_params(model, rng)
        x = Tensor(rng.uniform(size=(1, 3, 96, 96)))
        w = model.params["face.layer3.conv.weight"]
        idx = rng.choice(w.size, 20, replace=False)
        rep = finite_diff_report(lambda: model.face_stream(x, train=True).sum(), [w], indices=[idx], skip_nonsmooth=True)
        assert rep.num_checked >= 10
        assert rep.max_error < 1e-5


class TestContextStream:
    def test_shapes_and_normalization(self, full_model):
        cap = {}
        with no_grad():
            vec, att = full_model.context_stream(inputs_for(full_model.config, 3)["context"], capture=cap)
        assert vec.shape == (3, 256)
        assert att.shape == (3, 1, 8, 14)
        assert cap["context.features"].shape == (3, 256, 8, 14)
        assert np.all(att.data > 0)
        np.testing.assert_allclose(att.data.astype(np.float64).sum(axis=(1, 2, 3)), 1.0, atol=1e-6)

    def test_constant_attention_logits_give_uniform_map(self):
        model = MCAERModel(reduced_config(8), seed=1)
        model.params["context.attention.weight"].data[:] = 0
        with no_grad():
            _, att = model.context_stream(inputs_for(model.config, 2)["context"])
        np.testing.assert_allclose(att.data, 1 / 112, rtol=1e-6)

    def test_boosted_feature_is_map_times_features(self, small_model):
        cap = {}
        with no_grad():
            vec, att = small_model.context_stream(inputs_for(small_model.config, 2)["context"], capture=cap)
        want = (cap["context.features"].data * att.data).mean(axis=(2, 3))
        np.testing.assert_allclose(vec.data, want, rtol=1e-6)

    def test_input_scaling_changes_map_not_normalization(self, small_model):
        x = inputs_for(small_model.config, 2)["context"]
        with no_grad():
            _, a = small_model.context_stream(x)
            _, b = small_model.context_stream(x * 3.0)
        assert not np.allclose(a.data, b.data)
        np.testing.assert_allclose(b.data.astype(np.float64).sum(axis=(1, 2, 3)), 1.0, atol=1e-6)


class TestBodyStream:
    def test_shapes(self, full_model):
        cap = {}
        with no_grad():
            vec, heat = full_model.body_stream(inputs_for(full_model.config, 1)["body"], capture=cap)
        assert vec.shape == (1, 256)
        assert cap["body.features"].shape == (1, 256, 64, 64)
        assert heat.shape == (1, 7, 64, 64)

    def test_zero_input_gives_zero_feature(self, small_model):
        with no_grad():
            vec, _ = small_model.body_stream(np.zeros((1, 3, 256, 256), np.float32))
        assert np.all(vec.data == 0)

    def test_kernel_gradient(self):
        rng = make_rng(22)
        model = MCAERModel(reduced_config(8), seed=4, dtype=np.float64)
        _perturb_params(model, rng)
        x = Tensor(rng.uniform(size=(1, 3, 256, 256)))
        checked = 0
        for name in ("body.layer2.conv.weight", "body.deconv1.weight"):
            w = model.params[name]
            idx = rng.choice(w.size, 10, replace=False)
            rep = finite_diff_report(
                lambda: model.body_stream(x, train=True)[0].sum(), [w], indices=[idx], skip_nonsmooth=True
            )
            assert rep.max_error < 1e-5, name
            checked += rep.num_checked
        assert checked >= 10


class TestShapeSuite:
    def test_full_width_traces(self):
        results = shape_suite(StreamConfig(), n=2)
        assert all(r.passed for r in results), [r.line() for r in results if not r.passed]
        assert {r.name for r in results} >= {"shape/face.features", "shape/attention", "shape/body.heatmaps"}


def copy_gate(model, src, dst):
    for layer in ("fc1", "fc2"):
        for kind in ("weight", "bias"):
            model.params[f"fusion.gate.{dst}.{layer}.{kind}"].data = model.params[f"fusion.gate.{src}.{layer}.{kind}"].data.copy()


class TestFusion:
    def test_identical_gates_and_features_give_uniform_weights(self):
        model = MCAERModel(reduced_config(8), seed=2, dtype=np.float64)
        copy_gate(model, "face", "context")
        copy_gate(model, "face", "body")
        f = Tensor(make_rng(1).normal(size=(4, 32)))
        _, lam = model.fuse([f, f, f])
        np.testing.assert_allclose(lam.data, 1 / 3, rtol=1e-12)

    def test_weights_normalized(self):
        rng = make_rng(5)
        model = MCAERModel(reduced_config(8), seed=5, dtype=np.float64)
        _perturb_params(model, rng)
        for _ in range(20):
            feats = [Tensor(rng.normal(size=(5, 32)) * 3) for _ in range(3)]
            logits, lam = model.fuse(feats)
            assert logits.shape == (5, 7)
            assert np.all(lam.data >= 0)
            np.testing.assert_allclose(lam.data.sum(axis=1), 1.0, atol=1e-6)

    def test_stream_permutation_symmetry(self):
        rng = make_rng(6)
        a = MCAERModel(reduced_config(8), seed=6, dtype=np.float64)
        _perturb_params(a, rng)
        b = MCAERModel(reduced_config(8), seed=7, dtype=np.float64)
        streams = ("face", "context", "body")
        perm = (1, 2, 0)  # b's stream i receives a's stream perm[i]
        for name, t in a.params.items():
            if not name.startswith("fusion.gate."):
                b.params[name].data = t.data.copy()
        for i, s in enumerate(streams):
            src = streams[perm[i]]
            for suffix in ("fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"):
                b.params[f"fusion.gate.{s}.{suffix}"].data = a.params[f"fusion.gate.{src}.{suffix}"].data.copy()
        d = 32
        w = a.params["fusion.classifier.fc1.weight"].data
        b.params["fusion.classifier.fc1.weight"].data = np.concatenate([w[:, p * d : (p + 1) * d] for p in perm], axis=1)
        feats = [rng.normal(size=(4, d)) for _ in streams]
        la, wa = a.fuse([Tensor(f) for f in feats])
        lb, wb = b.fuse([Tensor(feats[p]) for p in perm])
        np.testing.assert_allclose(wb.data, wa.data[:, list(perm)], rtol=1e-12)
        np.testing.assert_allclose(lb.data, la.data, rtol=1e-12, atol=1e-12)

    def test_stream_count_mismatch(self, small_model):
        with pytest.raises(DimensionError):
            small_model.fuse([Tensor(np.zeros((1, 32), np.float32))] * 2)


class TestForward:
    def test_probabilities_and_determinism(self):
        cfg = reduced_config(8)
        x = inputs_for(cfg, 3)
        p1 = MCAERModel(cfg, seed=11).predict_proba(x)
        p2 = MCAERModel(cfg, seed=11).predict_proba(x)
        np.testing.assert_array_equal(p1, p2)
        np.testing.assert_allclose(p1.astype(np.float64).sum(axis=1), 1.0, atol=1e-6)

    def test_two_stream_configuration(self):
        cfg = reduced_config(8, enabled_streams=("face", "context"))
        model = MCAERModel(cfg, seed=0)
        assert not any(n.startswith("body.") for n in model.params.names())
        with no_grad():
            out = mcaer_forward(model, inputs_for(cfg, 2))
        assert out.logits.shape == (2, 7)
        assert out.weights.shape == (2, 2)
        assert out.heatmaps is None

    def test_missing_body_contributes_zero_feature(self, small_model):
        x = inputs_for(small_model.config, 2)
        other = dict(x, body=np.random.default_rng(0).uniform(size=x["body"].shape).astype(np.float32))
        with no_grad():
            a = small_model.forward(x, body_present=[False, True])
            b = small_model.forward(other, body_present=[False, True])
        # the absent sample ignores its body image; its gate still takes part
        np.testing.assert_array_equal(a.logits.data[0], b.logits.data[0])
        assert a.weights.shape == (2, 3)
        assert not np.array_equal(a.logits.data[1], b.logits.data[1])

    def test_missing_stream_input(self, small_model):
        x = inputs_for(small_model.config, 1)
        del x["body"]
        with pytest.raises(DimensionError, match="body"):
            small_model.forward(x)

    def test_wrong_context_shape_names_stream(self, small_model):
        x = inputs_for(small_model.config, 1)
        x["context"] = np.zeros((1, 3, 133, 236), np.float32)
        with pytest.raises(DimensionError, match="context"):
            small_model.forward(x)


class TestGradCam:
    def test_shape_and_range(self, small_model):
        x = inputs_for(small_model.config, 1)
        cam = gradcam(small_model, x, 3)
        assert cam.shape == (8, 14)
        assert cam.min() >= 0 and cam.max() <= 1

    def test_idempotent_and_leaves_params_alone(self, small_model):
        x = inputs_for(small_model.config, 1)
        a, b = gradcam(small_model, x, 2), gradcam(small_model, x, 2)
        np.testing.assert_array_equal(a, b)
        assert all(t.grad is None for t in small_model.params.values())
        assert all(t.requires_grad for t in small_model.params.values())

    def test_disconnected_class_gives_zero_map(self):
        model = MCAERModel(reduced_config(8), seed=3)
        model.params["fusion.classifier.fc2.weight"].data[4] = 0
        cam = gradcam(model, inputs_for(model.config, 1), 4)
        assert np.all(cam == 0)

    def test_class_out_of_range(self, small_model):
        with pytest.raises(ValidationError):
            gradcam(small_model, inputs_for(small_model.config, 1), 7)

    def test_batch_rejected(self, small_model):
        with pytest.raises(ValidationError):
            gradcam(small_model, inputs_for(small_model.config, 2), 0)

    def test_one_by_one_toy_by_hand(self):
        # score = 3*a0 - 2*a1^2 on a 2-channel 1x1 activation; gradients (3, -4*a1)
        for a_vals, want in (([2.0, 0.5], 1.0), ([2.0, 1.5], 0.0)):
            a = Tensor(np.array(a_vals).reshape(1, 2, 1, 1), requires_grad=True)
            score = (a[:, 0] * 3.0).sum() - (a[:, 1] * a[:, 1] * 2.0).sum()
            g = np.array([3.0, -4 * a_vals[1]])
            raw = max(0.0, float(g @ np.array(a_vals)))
            assert (raw > 0) == (want == 1.0)
            np.testing.assert_array_equal(grad_cam(a, score), [[want]])

    def test_two_by_two_toy_by_hand(self):
        a = np.array([[[1.0, 2.0], [0.0, 3.0]], [[2.0, 0.0], [1.0, 1.0]]])
        t = Tensor(a[None], requires_grad=True)
        # score = sum(A0) - 0.5 * sum(A1^2): dA0 = 1, dA1 = -A1 -> alpha = (1, -1)
        score = t[:, 0].sum() - (t[:, 1] * t[:, 1]).sum() * 0.5
        raw = np.maximum(a[0] - a[1], 0)  # [[0, 2], [0, 2]]
        np.testing.assert_allclose(grad_cam(t, score), raw / raw.max())
        np.testing.assert_allclose(cam_from(a, np.stack([np.ones((2, 2)), -a[1]])), raw / raw.max())
