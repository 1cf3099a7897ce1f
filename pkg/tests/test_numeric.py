
import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sigmarec import tensorio
from sigmarec.numeric import OptimState, adamw_step, cosine, grad_check, make_rng, softmax

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(softmax([1, 1, 1], 1.0), [1 / 3] * 3, atol=1e-15)

    def test_single(self):
        assert softmax([5.0], 0.05).tolist() == [1.0]

    def test_against_mpmath(self):
        mpmath.mp.dps = 50
        ex = [mpmath.e ** x for x in (1, 2, 3)]
        expect = [float(e / sum(ex)) for e in ex]
        np.testing.assert_allclose(softmax([1.0, 2.0, 3.0], 1.0), expect, rtol=1e-15, atol=1e-16)

    @pytest.mark.parametrize("bad", [[1.0, np.nan], [np.inf, 0.0]])
    def test_rejects_non_finite(self, bad):
        with pytest.raises(ValueError):
            softmax(bad)

    @pytest.mark.parametrize("t", [0.0, -1.0])
    def test_rejects_temperature(self, t):
        with pytest.raises(ValueError):
            softmax([1.0, 2.0], t)

    @given(arrays(np.float64, st.integers(1, 20), elements=finite), st.floats(1e-3, 1e3))
    def test_probability_vector(self, x, t):
        p = softmax(x, t)
        assert np.all(p >= 0)
        assert abs(p.sum() - 1) <= 1e-9
        assert p[np.argmax(x)] == p.max()

    def test_very_negative_scores(self):
        p = softmax([-1e4, -1e4 - 1, -2e4], 0.05)
        assert np.all(np.isfinite(p)) and abs(p.sum() - 1) < 1e-12


class TestCosine:
    def test_identical(self):
        assert cosine([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == pytest.approx(1.0, abs=1e-15)

    def test_orthogonal(self):
        assert cosine([1.0, 0.0], [0.0, 3.0]) == 0.0

    def test_hand_value(self):
        assert cosine([1, 2], [2, 1]) == pytest.approx(4 / 5, abs=1e-15)

    def test_zero_vector_is_error(self):
        with pytest.raises(ValueError):
            cosine([0.0, 0.0], [1.0, 0.0])

    @given(arrays(np.float64, 4, elements=st.floats(-10, 10)), arrays(np.float64, 4, elements=st.floats(-10, 10)),
           st.floats(0.01, 100), st.floats(0.01, 100))
    def test_symmetric_scale_invariant(self, u, v, a, b):
        if np.linalg.norm(u) < 1e-3 or np.linalg.norm(v) < 1e-3:
            return
        c = cosine(u, v)
        assert -1 <= c <= 1
        assert cosine(v, u) == pytest.approx(c, abs=1e-12)
        assert cosine(a * u, b * v) == pytest.approx(c, abs=1e-12)


class TestAdamW:
    def test_zero_grad_identity(self):
        p = {"w": np.array([1.0, -2.0])}
        st_ = OptimState(0.1)
        for _ in range(3):
            adamw_step(p, {"w": np.zeros(2)}, st_)
        np.testing.assert_array_equal(p["w"], [1.0, -2.0])
        assert st_.step == 3

    def test_decoupled_decay(self):
        p = {"w": np.array([1.0, -2.0])}
        st_ = OptimState(0.1, weight_decay=0.5)
        for k in range(1, 4):
            adamw_step(p, {"w": np.zeros(2)}, st_)
            np.testing.assert_allclose(p["w"], np.array([1.0, -2.0]) * 0.95 ** k, rtol=1e-15)

    def test_scripted_reference(self):
        # independent scalar transcription of the update rule
        lr, b1, b2, eps, wd, g = 0.01, 0.9, 0.999, 1e-8, 0.1, 0.5
        x, m, v = 2.0, 0.0, 0.0
        expect = []
        for t in range(1, 4):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            x = x - lr * wd * x
            x = x - lr * (m / (1 - b1 ** t)) / ((v / (1 - b2 ** t)) ** 0.5 + eps)
            expect.append(x)
        p = {"x": np.array([2.0])}
        st_ = OptimState(lr, weight_decay=wd)
        got = []
        for _ in range(3):
            adamw_step(p, {"x": np.array([g])}, st_)
            got.append(p["x"][0])
        np.testing.assert_allclose(got, expect, rtol=1e-14)

    def test_warmup(self):
        st_ = OptimState(1.0, warmup_steps=4)
        assert [st_.effective_lr(s) for s in (1, 2, 4, 10)] == [0.25, 0.5, 1.0, 1.0]

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            adamw_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, OptimState(0.1))


class TestGradCheck:
    def test_quadratic(self):
        x = np.array([1.0, 2.0])
        err = grad_check(lambda p: (0.5 * float(p @ p), p.copy()), x, 1e-6)
        assert err <= 1e-8

    def test_detects_wrong_gradient(self):
        x = np.array([1.0, 2.0])
        assert grad_check(lambda p: (0.5 * float(p @ p), 2 * p), x, 1e-6) > 0.5

    def test_rejects_nondeterminism(self):
        calls = iter(range(100))
        with pytest.raises(RuntimeError):
            grad_check(lambda p: (float(next(calls)), np.zeros(1)), np.zeros(1), 1e-6)

    def test_epsilon_range(self):
        with pytest.raises(ValueError):
            grad_check(lambda p: (0.0, p), np.zeros(1), 1e-1)


class TestRng:
    def test_streams_reproducible_and_distinct(self):
        a = make_rng(7, "x", 1).random(4)
        np.testing.assert_array_equal(a, make_rng(7, "x", 1).random(4))
        assert not np.array_equal(a, make_rng(7, "x", 2).random(4))
        assert not np.array_equal(a, make_rng(8, "x", 1).random(4))


class TestTensorFormat:
    @pytest.mark.parametrize("dtype,tag", [(np.float32, 0), (np.float64, 1)])
    def test_roundtrip_and_header(self, tmp_path, dtype, tag):
        a = np.arange(24, dtype=dtype).reshape(2, 3, 4)
        tensorio.write_tensor(tmp_path / "a.sgma", a)
        raw = (tmp_path / "a.sgma").read_bytes()
        assert raw[:4] == b"SGMA"
        assert int.from_bytes(raw[4:8], "little") == 1
        assert raw[8] == tag and raw[9] == 3
        assert [int.from_bytes(raw[10 + 8 * k:18 + 8 * k], "little") for k in range(3)] == [2, 3, 4]
        assert raw[34:] == a.astype(a.dtype.newbyteorder("<")).tobytes()
        b = tensorio.read_tensor(tmp_path / "a.sgma")
        assert b.dtype == dtype
        np.testing.assert_array_equal(a, b)

    def test_multiple_records(self, tmp_path):
        arrs = [np.ones((2, 2)), np.zeros(3, dtype=np.float32)]
        tensorio.write_tensors(tmp_path / "m.sgma", arrs)
        back = tensorio.read_tensors(tmp_path / "m.sgma")
        assert len(back) == 2 and back[1].dtype == np.float32

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x").write_bytes(b"NOPE" + bytes(10))
        with pytest.raises(tensorio.TensorFormatError):
            tensorio.read_tensor(tmp_path / "x")
