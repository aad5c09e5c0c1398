import math

import numpy as np
import pytest

from poseloop.errors import EmptyInputError, InvalidSigmaError, OutOfBoundsError, ShapeError
from poseloop.heatmap import (
    AmplitudeMode,
    GaussianParams,
    Keypoint,
    batch_confidence,
    decode_argmax,
    decode_subpixel,
    encode_keypoint,
)

UNIT = GaussianParams(2.0, AmplitudeMode.UNIT_PEAK)
LITERAL = GaussianParams(2.0, AmplitudeMode.EQ1_LITERAL)
DIMS = (64, 48)


def brute_force_argmax(h):
    """Independent scan: first index of the maximum in row-major order."""
    best = None
    best_val = -math.inf
    for y in range(h.shape[0]):
        for x in range(h.shape[1]):
            if h[y, x] > best_val:
                best_val = h[y, x]
                best = (x, y)
    return best, best_val


class TestEncode:
    def test_literal_peak_value(self):
        hm = encode_keypoint((10, 20), LITERAL, DIMS)
        assert hm[20, 10] == pytest.approx(1.0 / (8 * math.pi), rel=1e-6)

    def test_radial_symmetry(self):
        for mode in AmplitudeMode:
            hm = encode_keypoint((10, 20), GaussianParams(2.0, mode), DIMS)
            assert hm[20, 12] == pytest.approx(hm[20, 8], rel=1e-6)

    def test_subpixel_argmax_matches_brute_force(self):
        # x=31.5 ties pixels 31 and 32 bit-exactly; the row-major scan keeps 31
        hm = encode_keypoint((31.5, 17.25), UNIT, DIMS)
        (x, y), _ = brute_force_argmax(np.asarray(hm, dtype=np.float64))
        assert (x, y) == (31, 17)
        kp = decode_argmax(hm)
        assert (kp.x, kp.y) == (31, 17)

    def test_nearest_pixel_argmax_off_tie(self):
        hm = encode_keypoint((31.4, 17.25), UNIT, DIMS)
        kp = decode_argmax(hm)
        assert (kp.x, kp.y) == (31, 17)
        hm = encode_keypoint((31.6, 17.75), UNIT, DIMS)
        kp = decode_argmax(hm)
        assert (kp.x, kp.y) == (32, 18)

    def test_out_of_bounds(self):
        with pytest.raises(OutOfBoundsError):
            encode_keypoint((64, 10), UNIT, DIMS)
        with pytest.raises(OutOfBoundsError):
            encode_keypoint((10, -0.1), UNIT, DIMS)

    def test_invalid_sigma(self):
        with pytest.raises(InvalidSigmaError):
            GaussianParams(0.0)
        with pytest.raises(InvalidSigmaError):
            GaussianParams(-2.0)

    def test_mode_consistency(self):
        unit = encode_keypoint((13.3, 27.8), UNIT, DIMS, dtype=np.float64)
        literal = encode_keypoint((13.3, 27.8), LITERAL, DIMS, dtype=np.float64)
        np.testing.assert_allclose(literal, unit / (2 * math.pi * 4.0), rtol=1e-6)

    def test_monotone_radial_decay(self):
        hm = encode_keypoint((30, 24), UNIT, DIMS)
        row = hm[24, 30:]
        assert np.all(np.diff(row) <= 0)
        col = hm[24:, 30]
        assert np.all(np.diff(col) <= 0)
        left = hm[24, :31][::-1]
        assert np.all(np.diff(left) <= 0)


class TestDecode:
    def test_integer_roundtrip(self):
        kp = decode_argmax(encode_keypoint((10, 20), UNIT, DIMS))
        assert (kp.x, kp.y) == (10, 20)
        assert kp.confidence == pytest.approx(1.0)

    def test_all_zero_tiebreak(self):
        kp = decode_argmax(np.zeros((48, 64), dtype=np.float32))
        assert (kp.x, kp.y) == (0, 0)
        assert kp.confidence == 0.0

    def test_two_peak_sum(self):
        hm = encode_keypoint((5, 5), UNIT, DIMS, dtype=np.float64) + 0.6 * encode_keypoint(
            (40, 30), UNIT, DIMS, dtype=np.float64
        )
        (x, y), _ = brute_force_argmax(hm)
        assert (x, y) == (5, 5)
        kp = decode_argmax(hm)
        assert (kp.x, kp.y) == (5, 5)

    def test_roundtrip_property_1000_points(self):
        rng = np.random.default_rng(42)
        for _ in range(1000):
            x = int(rng.integers(1, DIMS[0] - 1))
            y = int(rng.integers(1, DIMS[1] - 1))
            kp = decode_argmax(encode_keypoint((x, y), UNIT, DIMS))
            assert (kp.x, kp.y) == (x, y)

    def test_confidence_clamped(self):
        hm = 3.0 * encode_keypoint((10, 10), UNIT, DIMS, dtype=np.float64)
        assert decode_argmax(hm).confidence == 1.0

    def test_rejects_bad_shapes(self):
        with pytest.raises(ShapeError):
            decode_argmax(np.zeros((4, 4)))
        with pytest.raises(ShapeError):
            decode_argmax(np.full((48, 64), np.nan))


class TestSubpixel:
    def test_symmetric_peak_no_shift(self):
        kp = decode_subpixel(encode_keypoint((10, 20), UNIT, DIMS))
        assert (kp.x, kp.y) == (10.0, 20.0)

    def test_shift_toward_larger_neighbor(self):
        hm = encode_keypoint((10.4, 20.0), UNIT, DIMS, dtype=np.float64)
        assert hm[20, 11] > hm[20, 9]  # oracle: right neighbor larger
        kp = decode_subpixel(hm)
        assert kp.x == pytest.approx(10.25)
        assert kp.y == pytest.approx(20.0)

    def test_border_no_shift(self):
        hm = encode_keypoint((0, 20), UNIT, DIMS)
        kp = decode_subpixel(hm)
        assert kp.x == 0.0

    def test_never_moves_more_than_quarter_pixel(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            px = rng.uniform(0, DIMS[0] - 1e-3)
            py = rng.uniform(0, DIMS[1] - 1e-3)
            hm = encode_keypoint((px, py), UNIT, DIMS)
            a = decode_argmax(hm)
            s = decode_subpixel(hm)
            assert abs(s.x - a.x) <= 0.25
            assert abs(s.y - a.y) <= 0.25


class TestBatchConfidence:
    def test_unit_peak(self):
        assert batch_confidence([encode_keypoint((10, 20), UNIT, DIMS)]) == [1.0]

    def test_all_zero(self):
        assert batch_confidence([np.zeros((48, 64), dtype=np.float32)]) == [0.0]

    def test_empty(self):
        with pytest.raises(EmptyInputError):
            batch_confidence([])

    def test_order_preserving(self):
        hms = [
            0.5 * encode_keypoint((10, 10), UNIT, DIMS, dtype=np.float64),
            encode_keypoint((20, 20), UNIT, DIMS, dtype=np.float64),
        ]
        confs = batch_confidence(hms)
        assert confs[0] == pytest.approx(0.5, abs=1e-6)
        assert confs[1] == pytest.approx(1.0)


def test_keypoint_confidence_validation():
    with pytest.raises(ValueError):
        Keypoint(1.0, 1.0, confidence=1.5)
