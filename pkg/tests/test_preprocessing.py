from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcaer.errors import ConfigError, ParseError, ValidationError
from mcaer.imageio import decode_netpbm, encode_netpbm, read_image, read_mask, write_image, write_mask
from mcaer.params import make_rng
from mcaer.preprocessing import (
    PrepConfig,
    context_base,
    pad_to_canvas,
    prep_body,
    prep_context,
    prep_face,
    random_crop,
    resize_bilinear,
)


class TestResize:
    def test_identity(self, rng):
        img = rng.uniform(size=(7, 9, 3))
        np.testing.assert_array_equal(resize_bilinear(img, 7, 9), img)

    def test_constant(self):
        np.testing.assert_array_equal(resize_bilinear(np.full((5, 8), 0.25), 13, 3), 0.25)

    def test_two_by_two_hand_values(self):
        got = resize_bilinear(np.array([[0.0, 1.0], [2.0, 3.0]]), 4, 4)
        # corner-aligned: sample points 0, 1/3, 2/3, 1; the source is exactly f(y, x) = 2y + x
        want = [[float(2 * Fraction(i, 3) + Fraction(j, 3)) for j in range(4)] for i in range(4)]
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-15)
        assert got[0, 0] == 0.0 and got[3, 3] == 3.0 and got[0, 3] == 1.0 and got[3, 0] == 2.0

    def test_errors(self):
        with pytest.raises(ValidationError):
            resize_bilinear(np.zeros((0, 4)), 2, 2)
        with pytest.raises(ValidationError):
            resize_bilinear(np.zeros((3, 4)), 0, 2)


class TestFaceBody:
    def test_face_identity_size(self, rng):
        img = rng.uniform(size=(96, 96, 3))
        out = prep_face(img, dtype=np.float64)
        assert out.shape == (3, 96, 96)
        np.testing.assert_array_equal(out, img.transpose(2, 0, 1))

    def test_face_constant(self):
        np.testing.assert_array_equal(prep_face(np.full((192, 192, 3), 0.5)), 0.5)

    def test_body_identity_and_constant(self, rng):
        img = rng.uniform(size=(256, 256, 3))
        np.testing.assert_array_equal(prep_body(img, dtype=np.float64), img.transpose(2, 0, 1))
        np.testing.assert_array_equal(prep_body(np.full((512, 512, 3), 0.5)), 0.5)

    @settings(max_examples=30, deadline=None)
    @given(h=st.integers(1, 300), w=st.integers(1, 300), gray=st.booleans())
    def test_shape_contract(self, h, w, gray):
        img = np.random.default_rng(h * 1000 + w).uniform(size=(h, w) if gray else (h, w, 3))
        f, b = prep_face(img), prep_body(img)
        assert f.shape == (3, 96, 96) and b.shape == (3, 256, 256)
        assert f.min() >= 0 and f.max() <= 1 and b.min() >= 0 and b.max() <= 1

    def test_degenerate_crop_rejected(self):
        with pytest.raises(ValidationError):
            prep_face(np.zeros((0, 5, 3)))


class TestContext:
    def test_full_canvas_eval(self, rng):
        out = prep_context(rng.uniform(size=(400, 712, 3)))
        assert out.shape == (3, 133, 237)

    @settings(max_examples=20, deadline=None)
    @given(h=st.integers(1, 900), w=st.integers(1, 1400), train=st.booleans())
    def test_shape_contract(self, h, w, train):
        img = np.full((h, w, 3), 0.6)
        out = prep_context(img, train=train, rng=make_rng(0))
        assert out.shape == (3, 133, 237)
        assert out.min() >= 0 and out.max() <= 1

    def test_padding_keeps_original_pixels(self, rng):
        img = rng.uniform(size=(101, 300, 3))
        canvas = pad_to_canvas(img, 400, 712)
        top, left = (400 - 101) // 2, (712 - 300) // 2
        np.testing.assert_array_equal(canvas[top : top + 101, left : left + 300], img)
        assert np.count_nonzero(canvas) == np.count_nonzero(img)

    def test_oversized_image_is_down_fit(self, rng):
        canvas = pad_to_canvas(np.ones((800, 712, 3)), 400, 712)
        assert canvas.shape == (400, 712, 3)
        assert np.count_nonzero(canvas[:, :, 0]) == 400 * 356

    def test_eval_deterministic(self, rng):
        img = rng.uniform(size=(300, 500, 3))
        np.testing.assert_array_equal(prep_context(img), prep_context(img.copy()))

    def test_train_crop_reproducible_with_seed(self, rng):
        img = rng.uniform(size=(300, 500, 3))
        a = prep_context(img, train=True, rng=make_rng(9, 1))
        b = prep_context(img, train=True, rng=make_rng(9, 1))
        np.testing.assert_array_equal(a, b)

    def test_train_crop_offsets_cover_range(self):
        base = np.random.default_rng(0).uniform(0.1, 1.0, size=(2, 9, 11))
        padded = np.pad(base, ((0, 0), (5, 5), (5, 5)))
        crops = {(y, x): padded[:, y : y + 9, x : x + 11] for y in range(11) for x in range(11)}
        seen = set()
        rng = make_rng(0)
        for _ in range(2000):
            out = random_crop(base, 5, rng)
            hits = [k for k, c in crops.items() if np.array_equal(c, out)]
            assert len(hits) == 1
            seen.add(hits[0])
        assert seen == set(crops)

    def test_all_zero_stays_zero(self):
        z = np.zeros((200, 300, 3))
        assert np.all(prep_context(z) == 0)
        assert np.all(prep_context(z, train=True, rng=make_rng(1)) == 0)

    def test_train_needs_rng(self):
        with pytest.raises(ValidationError):
            prep_context(np.zeros((10, 10, 3)), train=True)

    def test_base_matches_eval(self, rng):
        img = rng.uniform(size=(50, 60, 3))
        np.testing.assert_array_equal(context_base(img), prep_context(img))

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            PrepConfig(face_size=0)
        with pytest.raises(ConfigError):
            PrepConfig(crop_pad=-1)
        assert PrepConfig().context_shape == (133, 237)


class TestImageIO:
    def test_ppm_round_trip(self, tmp_path, rng):
        img = rng.integers(0, 256, size=(5, 7, 3)).astype(np.uint8)
        write_image(tmp_path / "a.ppm", img)
        np.testing.assert_array_equal(np.rint(read_image(tmp_path / "a.ppm") * 255), img)

    def test_header_with_comment(self):
        buf = b"P5\n# hi\n2 1\n255\n" + bytes([0, 255])
        np.testing.assert_array_equal(decode_netpbm(buf), [[0.0, 1.0]])

    def test_truncated_raster(self):
        with pytest.raises(ParseError):
            decode_netpbm(b"P6\n2 2\n255\n" + bytes(5))

    def test_unsupported_magic(self):
        with pytest.raises(ParseError):
            decode_netpbm(b"P3\n1 1\n255\n0 0 0\n")

    def test_mask_threshold_at_128(self, tmp_path):
        raw = np.array([[0, 127, 128, 255]], dtype=np.uint8)
        (tmp_path / "m.pgm").write_bytes(encode_netpbm(raw))
        np.testing.assert_array_equal(read_mask(tmp_path / "m.pgm"), [[0, 0, 1, 1]])

    def test_mask_round_trip(self, tmp_path):
        m = (np.random.default_rng(0).uniform(size=(6, 4)) > 0.5).astype(np.uint8)
        write_mask(tmp_path / "m.pgm", m)
        np.testing.assert_array_equal(read_mask(tmp_path / "m.pgm"), m)
