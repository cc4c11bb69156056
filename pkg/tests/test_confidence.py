import json
import math

import numpy as np
import pytest
import scipy.special
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import make_set
from selconf.confidence import (
    VsParams,
    doctor,
    doctor_table,
    mcd_confidence,
    mcd_table,
    msp,
    msp_table,
    softmax,
    vs_apply,
    vs_table,
)
from selconf.errors import ValidationError

logit_rows = arrays(np.float64, st.integers(2, 8), elements=st.floats(-30, 30))


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_allclose(softmax([0.0, 0.0]), [0.5, 0.5], rtol=0, atol=1e-15)

    def test_ln2(self):
        np.testing.assert_allclose(softmax([math.log(2), 0.0]), [2 / 3, 1 / 3], rtol=0, atol=1e-15)

    def test_large_inputs_stay_finite(self):
        p = softmax([1000.0, 0.0])
        assert np.all(np.isfinite(p))
        np.testing.assert_allclose(p, [1.0, 0.0], atol=1e-300)
        p = softmax([1e4, -1e4, 0.0])
        assert np.all(np.isfinite(p)) and p[0] == 1.0

    def test_errors(self):
        with pytest.raises(ValidationError):
            softmax([])
        with pytest.raises(ValidationError):
            softmax([1.0, np.nan])
        with pytest.raises(ValidationError):
            softmax([np.inf, 0.0])

    @given(logit_rows)
    def test_matches_scipy(self, z):
        p = softmax(z)
        np.testing.assert_allclose(p, scipy.special.softmax(z), rtol=1e-12, atol=1e-15)
        assert abs(p.sum() - 1.0) < 1e-12
        assert np.all(p > 0) and np.all(p <= 1)

    def test_batched_rows(self, rng):
        z = rng.normal(0, 5, size=(50, 6))
        np.testing.assert_allclose(softmax(z), scipy.special.softmax(z, axis=1), rtol=1e-12)


class TestMsp:
    def test_uniform(self):
        assert msp([3.0, 3.0, 3.0, 3.0]) == pytest.approx(0.25, abs=1e-15)

    def test_from_probabilities(self):
        assert msp(np.log([0.5, 0.3, 0.2])) == pytest.approx(0.5, abs=1e-15)

    def test_ln2(self):
        assert msp([math.log(2), 0.0]) == pytest.approx(2 / 3, abs=1e-15)

    def test_needs_two_classes(self):
        with pytest.raises(ValidationError):
            msp([1.0])

    @given(logit_rows, st.floats(-1e3, 1e3))
    def test_range_and_shift_invariance(self, z, c):
        k = z.size
        s = msp(z)
        assert 1 / k - 1e-12 <= s <= 1.0
        assert msp(z + c) == pytest.approx(s, rel=1e-9, abs=1e-12)


class TestDoctor:
    def test_uniform(self):
        assert doctor([0.0] * 4) == pytest.approx(0.25, abs=1e-15)

    def test_near_one_hot(self):
        assert doctor([1e4, 0.0, 0.0]) == pytest.approx(1.0, abs=1e-15)

    def test_gini_complement(self):
        assert doctor(np.log([0.5, 0.3, 0.2])) == pytest.approx(0.38, abs=1e-14)

    @given(logit_rows, st.floats(-1e3, 1e3))
    def test_range_and_shift_invariance(self, z, c):
        s = doctor(z)
        assert 1 / z.size - 1e-12 <= s <= 1.0 + 1e-12
        assert doctor(z + c) == pytest.approx(s, rel=1e-9, abs=1e-12)

    @given(arrays(np.float64, (40, 2), elements=st.floats(-20, 20)))
    def test_two_class_ranking_matches_msp(self, z):
        # p^2 + (1-p)^2 is increasing in max(p, 1-p), so pairwise orders agree
        a, b = msp(z), doctor(z)
        for i in range(len(a)):
            for j in range(len(a)):
                if a[i] < a[j] - 1e-12:
                    assert b[i] <= b[j] + 1e-12


class TestMcd:
    def test_identical_passes(self, rng):
        z = rng.normal(size=5)
        assert mcd_confidence(np.stack([z] * 7)) == pytest.approx(msp(z), abs=1e-15)

    def test_single_pass(self, rng):
        z = rng.normal(size=5)
        assert mcd_confidence(z[None, :]) == pytest.approx(msp(z), abs=1e-15)

    def test_opposing_passes(self):
        assert mcd_confidence([[1e4, 0.0], [0.0, 1e4]]) == pytest.approx(0.5, abs=1e-15)

    def test_errors(self):
        with pytest.raises(ValidationError):
            mcd_confidence(np.zeros((0, 3)))
        with pytest.raises(ValidationError):
            mcd_confidence([1.0, 2.0])

    def test_table_requires_passes(self):
        es = make_set([[1.0, 0.0]], [0])
        with pytest.raises(ValidationError, match="mc_passes"):
            mcd_table(es)

    def test_batched_matches_loop(self, rng):
        passes = rng.normal(size=(20, 4, 3))
        batched = mcd_confidence(passes)
        loop = [float(np.max(np.mean(scipy.special.softmax(p, axis=1), axis=0))) for p in passes]
        np.testing.assert_allclose(batched, loop, rtol=1e-12)


class TestVectorScaling:
    def test_identity(self, rng):
        z = rng.normal(size=(10, 4))
        np.testing.assert_array_equal(vs_apply(VsParams.identity(4), z), z)

    def test_hand_example(self):
        params = VsParams([2.0, 1.0], [0.0, 0.0])
        np.testing.assert_array_equal(vs_apply(params, [1.0, 1.0]), [2.0, 1.0])
        assert msp(vs_apply(params, [1.0, 1.0])) == pytest.approx(math.e / (math.e + 1), abs=1e-15)

    @given(arrays(np.float64, (30, 4), elements=st.floats(-10, 10)), st.floats(0.01, 10))
    def test_uniform_scale_keeps_argmax(self, z, c):
        out = vs_apply(VsParams(np.full(4, c), np.zeros(4)), z)
        np.testing.assert_array_equal(np.argmax(out, axis=1), np.argmax(z, axis=1))

    @given(arrays(np.float64, (30, 2), elements=st.floats(-10, 10)), st.floats(0.01, 10))
    def test_uniform_scale_keeps_two_class_ranking(self, z, c):
        a, b = msp(z), msp(vs_apply(VsParams(np.full(2, c), np.zeros(2)), z))
        for i in range(len(a)):
            for j in range(len(a)):
                if a[i] < a[j] - 1e-9:
                    assert b[i] <= b[j] + 1e-9

    def test_uniform_scale_can_reorder_three_classes(self):
        # with K >= 3 a shared temperature keeps each argmax but not the
        # cross-record order of MSP
        z = np.array([[4.0, 4.0, 0.0], [1.5, 0.0, 0.0]])
        before = msp(z)
        after = msp(vs_apply(VsParams(np.full(3, 0.1), np.zeros(3)), z))
        assert before[0] < before[1]
        assert after[0] > after[1]

    def test_dimension_mismatch(self):
        with pytest.raises(ValidationError):
            vs_apply(VsParams.identity(3), [1.0, 2.0])

    def test_invalid_params(self):
        with pytest.raises(ValidationError):
            VsParams([1.0, 1.0], [0.0])
        with pytest.raises(ValidationError):
            VsParams([np.nan], [0.0])

    def test_json_round_trip(self):
        p = VsParams([0.5, 1.25, 2.0], [0.1, -0.2, 1e-17])
        q = VsParams.from_json(p.to_json())
        np.testing.assert_array_equal(p.diag_w, q.diag_w)
        np.testing.assert_array_equal(p.bias, q.bias)
        assert set(json.loads(p.to_json())) == {"diag_w", "bias"}

    def test_table_keeps_backbone_correctness(self):
        # a bias large enough to flip the argmax must not change the correctness bit
        es = make_set([[2.0, 0.0], [0.0, 2.0]], [0, 1])
        table = vs_table(es, VsParams([1.0, 1.0], [0.0, 10.0]))
        np.testing.assert_array_equal(table.correct, [1, 1])
        assert table.method_name == "vs"


class TestTables:
    def test_names_and_values(self, rng):
        z = rng.normal(size=(8, 3))
        es = make_set(z, rng.integers(0, 3, 8), passes=np.stack([z, z], axis=1))
        for fn, name, ref in [
            (msp_table, "msp", msp(z)),
            (doctor_table, "doctor", doctor(z)),
            (mcd_table, "mcd", msp(z)),
        ]:
            t = fn(es)
            assert t.method_name == name
            np.testing.assert_allclose(t.confidence, ref, rtol=0, atol=1e-15)
            np.testing.assert_array_equal(t.correct, es.correct)
