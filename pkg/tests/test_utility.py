import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ccbudget.utility import (
    DegenerateBaseline,
    Measurement,
    MissingCells,
    UtilityConfig,
    UtilityMatrix,
    average_utility,
    compute_utility,
)

positive = st.floats(min_value=1e-3, max_value=1e4, allow_nan=False)


class TestComputeUtility:
    def test_identity_is_zero(self):
        base = Measurement(12.5, 87.0)
        assert compute_utility(base, base) == 0.0

    def test_hand_computed(self):
        # +10% throughput, +1% latency, lambda 10: 0.10 - 0.10 = 0
        u = compute_utility(Measurement(11.0, 101.0), Measurement(10.0, 100.0))
        assert u == pytest.approx(0.0, abs=1e-12)
        u = compute_utility(Measurement(15.0, 100.0), Measurement(10.0, 100.0), UtilityConfig(lam=3.0))
        assert u == pytest.approx(0.5)

    def test_lambda_zero_ignores_latency(self):
        u = compute_utility(Measurement(10.0, 900.0), Measurement(10.0, 100.0), UtilityConfig(lam=0.0))
        assert u == 0.0

    @pytest.mark.parametrize("base", [Measurement(0.0, 100.0), Measurement(10.0, 0.0), Measurement(-1.0, 5.0)])
    def test_degenerate_baseline(self, base):
        with pytest.raises(DegenerateBaseline):
            compute_utility(Measurement(1.0, 1.0), base)

    def test_negative_lambda_rejected(self):
        with pytest.raises(ValueError):
            UtilityConfig(lam=-1.0)

    @given(positive, positive, positive, positive, st.floats(min_value=0, max_value=50))
    def test_matches_formula(self, t, l, t0, l0, lam):
        expected = (t - t0) / t0 - lam * (l - l0) / l0
        got = compute_utility(Measurement(t, l), Measurement(t0, l0), UtilityConfig(lam))
        assert math.isclose(got, expected, rel_tol=1e-12, abs_tol=1e-12)

    @given(positive, positive, positive, st.floats(min_value=1.0001, max_value=10))
    def test_monotone_in_throughput_and_latency(self, t, l, l0, f):
        base = Measurement(10.0, l0)
        assert compute_utility(Measurement(t * f, l), base) > compute_utility(Measurement(t, l), base)
        assert compute_utility(Measurement(t, l * f), base) < compute_utility(Measurement(t, l), base)


class TestAverageUtility:
    def test_mean(self):
        assert average_utility([0.1, 0.2, 0.3]) == pytest.approx(0.2)

    def test_missing_cells(self):
        with pytest.raises(MissingCells):
            average_utility([0.1, np.nan], mask=[True, False])
        with pytest.raises(MissingCells):
            average_utility([])


class TestUtilityMatrix:
    def test_csv_round_trip_exact(self):
        rng = np.random.default_rng(3)
        vals = rng.standard_normal((4, 3))
        vals[1, 2] = np.nan
        m = UtilityMatrix(["a", "b", "c", "d"], ["x", "y", "z"], vals)
        back = UtilityMatrix.from_csv(m.to_csv())
        assert back.algorithms == m.algorithms and back.conditions == m.conditions
        assert np.array_equal(back.mask, m.mask)
        assert np.array_equal(back.values[m.mask], m.values[m.mask])

    def test_header_required(self):
        with pytest.raises(ValueError):
            UtilityMatrix.from_csv("id,x\na,1\n")

    def test_ragged_row(self):
        with pytest.raises(ValueError, match="line 3"):
            UtilityMatrix.from_csv("alg_id,x,y\na,1,2\nb,1\n")

    def test_duplicate_ids(self):
        with pytest.raises(ValueError):
            UtilityMatrix(["a", "a"], ["x"], np.zeros((2, 1)))

    def test_complete_rows_and_row_average(self):
        m = UtilityMatrix(["a", "b"], ["x", "y"], np.array([[0.2, 0.4], [np.nan, 1.0]]))
        assert not m.fully_observed()
        c = m.complete_rows()
        assert c.algorithms == ["a"]
        assert c.row_average(0) == pytest.approx(0.3)
        with pytest.raises(MissingCells):
            m.row_average(1)
