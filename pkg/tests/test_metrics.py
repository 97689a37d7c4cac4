import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from gluefuse.dataset import ContingencyTable, Dataset, Schema, Source, tabulate
from gluefuse.errors import ValidationError
from gluefuse.metrics import frechet_bounds, hellinger, mi_combine, misclassified_count, t_quantile

# frozen with mpmath at 40 digits
HELLINGER_HALF_QUARTER = 0.18459191128251452516
T975_DF_25_9 = 3.3314388028747434722
T975_DF_10 = 2.2281388519862747484


def simplex(draw, k):
    w = draw(st.lists(st.floats(0.0, 1.0), min_size=k, max_size=k))
    w = np.array(w)
    assume(w.sum() > 1e-3)
    return w / w.sum()


@st.composite
def prob_pairs(draw):
    k = draw(st.integers(1, 12))
    return simplex(draw, k), simplex(draw, k)


class TestHellinger:
    def test_identity(self):
        assert hellinger([0.2, 0.3, 0.5], [0.2, 0.3, 0.5]) == 0.0

    def test_disjoint(self):
        assert hellinger([1, 0], [0, 1]) == pytest.approx(1.0, abs=1e-15)

    def test_example(self):
        assert hellinger([0.5, 0.5], [0.25, 0.75]) == pytest.approx(HELLINGER_HALF_QUARTER, abs=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ValidationError, match="length"):
            hellinger([0.5, 0.5], [1.0])

    def test_not_simplex(self):
        with pytest.raises(ValidationError):
            hellinger([0.5, 0.6], [0.5, 0.5])
        with pytest.raises(ValidationError):
            hellinger([1.5, -0.5], [0.5, 0.5])

    def test_tiny_negative_clamped(self):
        assert hellinger([1.0 + 5e-13, -5e-13], [1.0, 0.0]) == pytest.approx(0.0, abs=1e-6)

    def test_accepts_tables(self):
        p = np.full((2, 3), 1 / 6)
        assert hellinger(p, p.ravel()) == 0.0

    @given(prob_pairs())
    def test_symmetric_bounded(self, pq):
        p, q = pq
        h = hellinger(p, q)
        assert 0.0 <= h <= 1.0
        assert h == pytest.approx(hellinger(q, p), abs=1e-15)

    @given(prob_pairs(), st.randoms())
    def test_permutation_invariant(self, pq, r):
        p, q = pq
        perm = list(range(p.size))
        r.shuffle(perm)
        assert hellinger(p[perm], q[perm]) == pytest.approx(hellinger(p, q), abs=1e-14)

    @given(prob_pairs())
    def test_zero_iff_equal(self, pq):
        p, q = pq
        assert hellinger(p, p) == 0.0
        if np.abs(p - q).max() > 1e-6:
            assert hellinger(p, q) > 0


def table(counts, names=("x", "y")):
    return ContingencyTable(tuple(names), np.asarray(counts))


class TestMisclassified:
    def test_identity(self):
        t = table([[3, 1], [0, 2]])
        assert misclassified_count(t, [t, t]) == 0.0

    def test_move_two(self):
        truth = table([[3, 1], [0, 2]])
        moved = table([[1, 3], [0, 2]])
        assert misclassified_count(truth, [moved]) == 2.0

    def test_mean_of_two(self):
        truth = table([[4, 4], [0, 0]])
        a = table([[2, 6], [0, 0]])
        b = table([[0, 8], [0, 0]])
        assert misclassified_count(truth, [a, b]) == 3.0

    def test_shape_and_total_mismatch(self):
        truth = table([[1, 1], [1, 1]])
        with pytest.raises(ValidationError):
            misclassified_count(truth, [table([[1, 1, 1, 1]])])
        with pytest.raises(ValidationError, match="totals"):
            misclassified_count(truth, [table([[1, 1], [1, 2]])])
        with pytest.raises(ValidationError):
            misclassified_count(truth, [])

    @given(st.lists(st.integers(0, 9), min_size=6, max_size=6), st.randoms())
    def test_order_invariant(self, c, r):
        truth = np.array(c)
        imp = np.array(c)
        r.shuffle(imp)
        perm = list(range(6))
        r.shuffle(perm)
        a = misclassified_count(table(truth, ["x"]), [table(imp, ["x"])])
        b = misclassified_count(table(truth[perm], ["x"]), [table(imp[perm], ["x"])])
        assert a == b
        assert (a == 0) == bool((truth == imp).all())


def frechet_schema(db=2, dbp=2, da=2):
    return Schema.from_records(
        [
            {"name": "a", "levels": da, "role": "A"},
            {"name": "b", "levels": db, "role": "B"},
            {"name": "c", "levels": dbp, "role": "Bprime"},
        ]
    )


def two_cell_data():
    s = frechet_schema()
    d1 = [[1, 1, 0]] * 2 + [[1, 2, 0]] * 8 + [[2, 1, 0]] * 6 + [[2, 2, 0]] * 4
    d2 = [[1, 0, 1]] * 9 + [[1, 0, 2]] * 1 + [[2, 0, 1]] * 5 + [[2, 0, 2]] * 5
    return Dataset(s, np.array(d1), Source.D1), Dataset(s, np.array(d2), Source.D2)


class TestFrechet:
    def test_unconditional_example(self):
        s = frechet_schema()
        d1 = Dataset(s, np.array([[1, 1, 0]] * 3 + [[1, 2, 0]] * 7), Source.D1)
        d2 = Dataset(s, np.array([[1, 0, 1]] * 6 + [[1, 0, 2]] * 4), Source.D2)
        iv = frechet_bounds(d1, d2, "b", "c", condition_on_A=False).interval(1, 1)
        assert (iv.lower, iv.upper) == (pytest.approx(0.0, abs=1e-15), pytest.approx(0.3, abs=1e-15))

    def test_conditional_example(self):
        d1, d2 = two_cell_data()
        res = frechet_bounds(d1, d2, "b", "c", condition_on_A=True)
        iv = res.interval(1, 1)
        assert iv.lower == pytest.approx(0.1, abs=1e-12)
        assert iv.upper == pytest.approx(0.35, abs=1e-12)
        assert iv.width == pytest.approx(0.25, abs=1e-12)
        assert res.unmatched_cells == []

    def test_conditioning_tightens(self):
        d1, d2 = two_cell_data()
        c = frechet_bounds(d1, d2, "b", "c", True)
        u = frechet_bounds(d1, d2, "b", "c", False)
        for x, y in zip(c, u):
            assert x.width <= y.width + 1e-12

    def test_unmatched_cell_reported(self):
        s = frechet_schema()
        d1 = Dataset(s, np.array([[1, 1, 0], [2, 2, 0]]), Source.D1)
        d2 = Dataset(s, np.array([[1, 0, 1], [1, 0, 2]]), Source.D2)
        res = frechet_bounds(d1, d2, "b", "c")
        assert res.unmatched_cells == [(2,)]
        for iv in res:
            assert 0 <= iv.lower <= iv.upper <= 1

    @given(st.integers(0, 2**31), st.integers(2, 3), st.integers(2, 4), st.integers(2, 4))
    def test_intervals_valid(self, seed, db, dbp, da):
        r = np.random.default_rng(seed)
        s = frechet_schema(db, dbp, da)
        n = 40
        d1 = np.stack([r.integers(1, da + 1, n), r.integers(1, db + 1, n), np.zeros(n, int)], axis=1)
        d2 = np.stack([r.integers(1, da + 1, n), np.zeros(n, int), r.integers(1, dbp + 1, n)], axis=1)
        res = frechet_bounds(Dataset(s, d1, Source.D1), Dataset(s, d2, Source.D2), "b", "c")
        assert len(res) == db * dbp
        for iv in res:
            assert 0 <= iv.lower <= iv.upper <= 1


class TestMI:
    def test_example(self):
        est = mi_combine([(1.0, 0.5), (2.0, 0.5)])
        assert (est.qbar, est.within, est.between, est.total) == (1.5, 0.5, 0.5, pytest.approx(1.25))
        assert est.df == pytest.approx(25 / 9)
        half = T975_DF_25_9 * math.sqrt(1.25)
        assert est.lower == pytest.approx(1.5 - half, abs=1e-6)
        assert est.upper == pytest.approx(1.5 + half, abs=1e-6)

    def test_zero_between(self):
        est = mi_combine([(2.0, 0.3)] * 4)
        assert est.between == 0.0
        assert est.total == pytest.approx(est.within)
        assert math.isinf(est.df)
        assert est.upper - 2.0 == pytest.approx(1.959963984540054 * math.sqrt(0.3), abs=1e-9)

    def test_m1_error(self):
        with pytest.raises(ValidationError):
            mi_combine([(1.0, 0.5)])

    def test_negative_variance(self):
        with pytest.raises(ValidationError):
            mi_combine([(1.0, -0.5), (1.0, 0.5)])

    def test_t_quantile(self):
        assert t_quantile(0.975, 10) == pytest.approx(T975_DF_10, abs=1e-9)

    @given(st.lists(st.tuples(st.floats(-50, 50), st.floats(0, 10)), min_size=2, max_size=20))
    def test_total_at_least_within(self, pairs):
        est = mi_combine(pairs)
        m = len(pairs)
        assert est.total >= est.within - 1e-12
        assert est.total == pytest.approx(est.within + (1 + 1 / m) * est.between, rel=1e-12, abs=1e-12)
        assert est.lower <= est.qbar <= est.upper

    def test_many_identical_converge(self):
        est = mi_combine([(3.0, 0.2)] * 500)
        assert (est.qbar, est.within, est.total) == (pytest.approx(3.0), pytest.approx(0.2), pytest.approx(0.2))
