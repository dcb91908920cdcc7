import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from xlalign import align_metrics as am


class TestRecall:
    def test_self_retrieval(self):
        x = np.random.default_rng(0).standard_normal((10, 4))
        assert am.recall_at_1(x, x) == 1.0

    def test_shifted_one_hots(self):
        e = np.eye(5)
        assert am.recall_at_1(e, np.roll(e, 1, axis=0)) == 0.0

    def test_ties_are_misses(self):
        q = np.array([[1.0, 0.0]])
        g = np.array([[1.0, 0.0], [2.0, 0.0]])
        assert am.recall_at_1(q, g, pairing=[0]) == 0.0

    def test_pairing_map(self):
        x = np.eye(3)
        assert am.recall_at_1(x, x[[2, 0, 1]], pairing=[1, 2, 0]) == 1.0

    def test_errors(self):
        with pytest.raises(ValueError, match="size"):
            am.recall_at_1(np.eye(3), np.eye(3)[:2])
        with pytest.raises(ValueError, match="dim"):
            am.recall_at_1(np.eye(3), np.eye(4)[:3])
        with pytest.raises(ValueError, match="zero"):
            am.recall_at_1(np.zeros((2, 2)), np.eye(2))

    def test_chance_level_on_unrelated_vectors(self):
        # independent draws per language: no shared semantics, retrieval is a guess
        n, seeds = 64, 200
        vals = [
            am.recall_at_1(*np.random.default_rng(s).standard_normal((2, n, 16)))
            for s in range(seeds)
        ]
        se = math.sqrt((1 / n) * (1 - 1 / n) / (n * seeds))
        assert abs(np.mean(vals) - 1 / n) < 4 * se


class TestJSD:
    def test_identical(self):
        x = np.random.default_rng(0).standard_normal((30, 3))
        assert am.jsd(x, x.copy(), 4) == 0.0

    def test_disjoint_no_smoothing(self):
        rng = np.random.default_rng(1)
        a = rng.standard_normal((20, 2)) * 0.01
        b = a + 100.0
        assert am.jsd(a, b, 2, smoothing=0.0) == pytest.approx(math.log(2), abs=1e-15)

    def test_symmetric_exactly(self):
        rng = np.random.default_rng(2)
        a, b = rng.standard_normal((25, 3)), rng.standard_normal((18, 3)) + 0.5
        assert am.jsd(a, b, 6) == am.jsd(b, a, 6)

    def test_errors(self):
        with pytest.raises(ValueError):
            am.jsd(np.ones((2, 2)), np.ones((1, 2)), 4)
        with pytest.raises(ValueError):
            am.jsd(np.ones((3, 2)), np.ones((3, 2)), 1)

    def test_histogram_jsd_hand_value(self):
        p, q = np.array([1.0, 0.0]), np.array([0.5, 0.5])
        m = np.array([0.75, 0.25])
        expected = 0.5 * (1.0 * math.log(1 / 0.75)) + 0.5 * (0.5 * math.log(0.5 / 0.75) + 0.5 * math.log(0.5 / 0.25))
        assert am.js_divergence(p, q) == pytest.approx(expected, rel=1e-14)
        assert m.sum() == 1.0


@settings(max_examples=40, deadline=None)
@given(
    arrays(np.float64, st.tuples(st.integers(2, 12), st.just(3)), elements=st.floats(-5, 5)),
    arrays(np.float64, st.tuples(st.integers(2, 12), st.just(3)), elements=st.floats(-5, 5)),
    st.integers(2, 4),
    st.sampled_from([0.0, 1.0]),
)
def test_jsd_bounds_and_symmetry(a, b, k, smoothing):
    v = am.jsd(a, b, k, smoothing=smoothing)
    assert 0.0 <= v <= math.log(2) + 1e-15
    assert v == am.jsd(b, a, k, smoothing=smoothing)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 10), st.just(3)), elements=st.floats(-5, 5)), st.integers(0, 2**31))
def test_recall_bounds(x, seed):
    y = x + np.random.default_rng(seed).standard_normal(x.shape)
    if np.any(np.linalg.norm(x, axis=1) == 0) or np.any(np.linalg.norm(y, axis=1) == 0):
        return
    assert 0.0 <= am.recall_at_1(x, y) <= 1.0


class TestCentroids:
    def reps(self, rng, n=8, offsets=None):
        base = rng.standard_normal((n, 4))
        offsets = offsets or {"en": np.zeros(4), "ja": np.full(4, 2.0), "ko": np.array([0, -3.0, 1, 0])}
        return {l: (list(range(n)), base + o) for l, o in offsets.items()}

    def test_identity(self):
        r = self.reps(np.random.default_rng(0))
        for before, after in am.centroid_shift(r, r).values():
            assert before == after

    def test_exact_centering_without_noise(self):
        r = self.reps(np.random.default_rng(1))
        centered = {l: (ids, x - x.mean(axis=0)) for l, (ids, x) in r.items()}
        for before, after in am.centroid_shift(r, centered).values():
            assert after == pytest.approx(0.0, abs=1e-12) and before > 0

    def test_language_mismatch(self):
        r = self.reps(np.random.default_rng(2))
        with pytest.raises(ValueError):
            am.centroid_shift(r, {"en": r["en"]})


class TestProjection:
    def test_rotation_of_2d_data(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((12, 2)) * [3.0, 1.0]
        x -= x.mean(axis=0)
        out = am.project_2d([(v, "en", i) for i, v in enumerate(x)])
        xy = np.array([(a, b) for a, b, _, _ in out])
        d0 = np.linalg.norm(x[:, None] - x[None], axis=-1)
        d1 = np.linalg.norm(xy[:, None] - xy[None], axis=-1)
        np.testing.assert_allclose(d1, d0, atol=1e-9)

    def test_rank_one(self):
        direction = np.array([1.0, 2.0, -1.0])
        out = am.project_2d([(t * direction, "en", i) for i, t in enumerate(np.linspace(-1, 1, 7))])
        assert max(abs(y) for _, y, _, _ in out) < 1e-9

    def test_degenerate(self):
        with pytest.raises(ValueError, match="degenerate"):
            am.project_2d([(np.ones(3), "en", i) for i in range(4)])

    def test_orthonormal_axes(self):
        x = np.random.default_rng(3).standard_normal((20, 6))
        _, axes = am.principal_axes(x)
        np.testing.assert_allclose(axes @ axes.T, np.eye(2), atol=1e-9)


class TestReport:
    def test_csv_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        reps = {l: (list(range(10)), rng.standard_normal((10, 3))) for l in ("en", "ja", "ko")}
        rep = am.evaluate(reps, codebook_size=4, reference=reps)
        rep.write_csv(tmp_path / "m.csv")
        back = am.MetricsReport.read_csv(tmp_path / "m.csv")
        assert back.recall_at_1 == rep.recall_at_1 and back.jsd == rep.jsd
        assert (tmp_path / "m.csv").read_text().splitlines()[0] == ",".join(am.MetricsReport.HEADER)
        assert len(rep.pairs()) == 3

    def test_shared_items_only(self):
        rng = np.random.default_rng(1)
        reps = {"en": ([0, 1, 2, 3], rng.standard_normal((4, 3))), "ast": ([2, 3], rng.standard_normal((2, 3)))}
        rep = am.evaluate(reps, codebook_size=2)
        assert rep.n_items == 2
