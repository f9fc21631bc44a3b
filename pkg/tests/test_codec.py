import numpy as np
import pytest

from odonet.codec import (
    DistanceCodec,
    binarize,
    class_to_distance,
    decode_class,
    decode_distance,
    encode,
    round_half_away,
)
from odonet.errors import ContractError, DomainError

DEFAULT = DistanceCodec()  # K=155, d_max=15.5, t=0.5


class TestCodecConfig:
    def test_default_step_is_decimeter(self):
        assert DEFAULT.d_step == pytest.approx(0.1, abs=1e-15)
        assert DEFAULT.n_classes == 156

    def test_step_times_k_within_ulp(self):
        for codec in (DEFAULT, DistanceCodec(K=31, d_max=3.1), DistanceCodec(K=7, d_max=2.0)):
            assert abs(codec.d_step * codec.K - codec.d_max) <= 2 * np.spacing(codec.d_max)

    def test_invalid_configs(self):
        with pytest.raises(DomainError):
            DistanceCodec(K=0)
        with pytest.raises(DomainError):
            DistanceCodec(d_max=-1.0)
        with pytest.raises(DomainError):
            DistanceCodec(threshold=1.0)


class TestEncode:
    def test_zero_distance_is_all_zeros(self):
        np.testing.assert_array_equal(encode(0.0, DEFAULT), np.zeros(155))

    def test_d_max_is_all_ones(self):
        np.testing.assert_array_equal(encode(15.5, DEFAULT), np.ones(155))

    def test_rounding_ties_away(self):
        v = encode(0.26, DistanceCodec(K=155, d_max=15.5))
        # 0.26 / 0.1 = 2.6 -> class 3
        assert v[:3].tolist() == [1.0, 1.0, 1.0]
        assert v[3:].sum() == 0

    def test_clamps_beyond_d_max(self):
        np.testing.assert_array_equal(encode(99.0, DEFAULT), np.ones(155))

    def test_negative_rejected(self):
        with pytest.raises(DomainError):
            encode(-0.1, DEFAULT)


class TestBinarize:
    def test_at_threshold_rounds_up(self):
        np.testing.assert_array_equal(binarize(np.array([0.5]), 0.5), [1.0])

    def test_just_below_threshold(self):
        np.testing.assert_array_equal(binarize(np.array([0.49999]), 0.5), [0.0])

    def test_high_threshold_zeroes_everything(self):
        v = np.full(10, 0.9)
        out = binarize(v, 0.95)
        np.testing.assert_array_equal(out, np.zeros(10))
        assert decode_class(out) == 0

    def test_domain_check(self):
        with pytest.raises(DomainError):
            binarize(np.array([1.2]), 0.5)


class TestDecode:
    def test_stops_at_first_zero(self):
        assert decode_class(np.array([1.0, 1.0, 0.0, 1.0])) == 2

    def test_all_zeros(self):
        assert decode_class(np.zeros(155)) == 0

    def test_all_ones(self):
        assert decode_class(np.ones(155)) == 155

    def test_non_binary_rejected(self):
        with pytest.raises(ContractError):
            decode_class(np.array([1.0, 0.5]))


class TestClassToDistance:
    def test_zero(self):
        assert class_to_distance(0, DEFAULT) == 0.0

    def test_full_range(self):
        assert class_to_distance(155, DEFAULT) == pytest.approx(15.5, abs=1e-12)

    def test_mid(self):
        assert class_to_distance(7, DEFAULT) == pytest.approx(0.7, abs=1e-12)

    def test_out_of_range(self):
        with pytest.raises(DomainError):
            class_to_distance(156, DEFAULT)
        with pytest.raises(DomainError):
            class_to_distance(-1, DEFAULT)


class TestProperties:
    def test_round_trip_all_classes(self):
        for c in range(DEFAULT.K + 1):
            d = class_to_distance(c, DEFAULT)
            assert decode_class(encode(d, DEFAULT)) == c

    def test_monotonic_in_distance(self):
        rng = np.random.default_rng(0)
        ds = np.sort(rng.uniform(0, 15.5, 200))
        prev = encode(0.0, DEFAULT)
        for d in ds:
            cur = encode(float(d), DEFAULT)
            assert (cur >= prev).all()
            prev = cur

    def test_threshold_monotonicity(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            v = rng.random(20)
            ts = np.sort(rng.random(5) * 0.98 + 0.01)
            classes = [decode_class(binarize(v, float(t))) for t in ts]
            assert all(a >= b for a, b in zip(classes, classes[1:]))

    def test_suffix_insensitivity_fuzz(self):
        rng = np.random.default_rng(2)
        for _ in range(500):
            c = int(rng.integers(0, 20))
            v = np.zeros(21)
            v[:c] = 1.0
            fuzzed = v.copy()
            if c + 1 < v.size:
                fuzzed[c + 1 :] = rng.integers(0, 2, v.size - c - 1)
            assert decode_class(fuzzed) == decode_class(v) == c

    def test_round_half_away(self):
        assert round_half_away(2.5) == 3
        assert round_half_away(3.5) == 4  # not banker's rounding
        assert round_half_away(-2.5) == -3
        assert round_half_away(2.49) == 2

    def test_decode_distance_end_to_end(self):
        codec = DistanceCodec(K=31, d_max=3.1)
        v = np.full(31, 0.1)
        v[:12] = 0.93
        assert decode_distance(v, codec) == pytest.approx(1.2, abs=1e-12)
