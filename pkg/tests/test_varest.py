import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from scanguard.core import RatioSeries
from scanguard.errors import (
    DegenerateVolumesWarning,
    EmptyTraining,
    NonPositiveBandwidth,
    NumericalUnderflow,
    SchemaVersionError,
    TooFewPoints,
)
from scanguard.ingest import SplitSpec, WeekFilter, parse_scanner_csv, train_test_split
from scanguard.simulate import ScenarioConfig, VarianceCase, generate_path, variance_case
from scanguard.varest import (
    BandwidthSearchConfig,
    VarianceSurface,
    fit_variance_surface,
    load_surface,
    loocv_error,
    nw_estimate,
    pilot_bandwidth,
    save_surface,
    search_bandwidth,
    select_bandwidth,
    surface_grid,
)

FIVE = [(1, 2, 0.5), (2, 3, 1.0), (3, 3, 2.0), (4, 1, 0.2), (5, 5, 3.0)]


def rs_from_triples(triples):
    t = np.asarray(triples, dtype=float)
    return RatioSeries.from_log_ratios(np.arange(len(t)), np.sqrt(t[:, 2]), t[:, :2])


def brute_nw(triples, h, q):
    num = den = 0.0
    for v1, v2, y2 in triples:
        w = math.exp(-((q[0] - v1) ** 2) / (2 * h[0] ** 2) - ((q[1] - v2) ** 2) / (2 * h[1] ** 2))
        num += w * y2
        den += w
    return num / den if den > 0 else 0.0


def brute_loocv(triples, h):
    total = 0.0
    for i, (v1, v2, y2) in enumerate(triples):
        rest = [t for j, t in enumerate(triples) if j != i]
        total += (y2 - brute_nw(rest, h, (v1, v2))) ** 2
    return total


def random_triples(rng, n):
    v = 1 + rng.chisquare(5, size=(n, 2))
    y2 = rng.standard_normal(n) ** 2
    return [tuple(r) for r in np.column_stack([v, y2])]


triples_st = hnp.arrays(
    np.float64, st.tuples(st.integers(2, 25), st.just(3)),
    elements=st.floats(0.5, 20.0, allow_nan=False),
)
bw_st = st.tuples(st.floats(0.05, 50.0), st.floats(0.05, 50.0))


class TestEstimate:
    def test_direct_summation_oracle(self):
        # value frozen from a plain-Python evaluation of the weight formula
        surf = VarianceSurface(FIVE, (1.0, 1.0))
        assert nw_estimate(surf, 3, 3) == pytest.approx(1.5197944712543876, rel=1e-12)
        assert nw_estimate(surf, 3, 3) == pytest.approx(brute_nw(FIVE, (1, 1), (3, 3)), rel=1e-12)

    def test_tiny_bandwidth_localizes(self):
        surf = VarianceSurface(FIVE, (1e-3, 1e-3))
        assert nw_estimate(surf, 2, 3) == pytest.approx(1.0, abs=1e-12)

    def test_underflow(self):
        surf = VarianceSurface(FIVE, (1e-3, 1e-3))
        with pytest.raises(NumericalUnderflow):
            nw_estimate(surf, 100, 100)
        assert nw_estimate(surf, 100, 100, fallback="nearest") == 3.0

    def test_validation(self):
        with pytest.raises(EmptyTraining):
            VarianceSurface([(1, 1, 0.1)], (1, 1))
        with pytest.raises(NonPositiveBandwidth):
            VarianceSurface(FIVE, (0.0, 1.0))
        with pytest.raises(ValueError):
            VarianceSurface([(1, 1, -0.1), (2, 2, 0.1)], (1, 1))

    @given(triples_st, bw_st, st.tuples(st.floats(0.5, 20), st.floats(0.5, 20)))
    def test_convex_bound(self, pts, h, q):
        surf = VarianceSurface(pts, h)
        try:
            e = nw_estimate(surf, *q)
        except NumericalUnderflow:
            return
        ysq = pts[:, 2]
        assert ysq.min() - 1e-12 <= e <= ysq.max() + 1e-12

    @given(triples_st, bw_st, st.floats(0.0, 5.0))
    def test_constant_reproduction(self, pts, h, c):
        pts = pts.copy()
        pts[:, 2] = c
        surf = VarianceSurface(pts, h)
        est = surf.estimate(pts[:, :2])
        assert np.allclose(est, c, rtol=0, atol=1e-12)

    @given(triples_st)
    def test_infinite_bandwidth(self, pts):
        surf = VarianceSurface(pts, (1e9, 1e9))
        q = pts[:, :2].mean(axis=0)
        assert surf.estimate(q)[0] == pytest.approx(pts[:, 2].mean(), rel=1e-6)

    @given(triples_st, bw_st, st.randoms())
    def test_permutation_symmetry(self, pts, h, rnd):
        perm = list(range(len(pts)))
        rnd.shuffle(perm)
        a = VarianceSurface(pts, h)
        b = VarianceSurface(pts[perm], h)
        q = pts[:, :2]
        try:
            ea = a.estimate(q)
        except NumericalUnderflow:
            return
        assert np.allclose(ea, b.estimate(q), rtol=1e-12, atol=1e-15)

    @given(triples_st, bw_st, st.floats(-0.4, 30.0), st.floats(-0.4, 30.0))
    def test_translation_equivariance(self, pts, h, s1, s2):
        shifted = pts.copy()
        shifted[:, 0] += s1
        shifted[:, 1] += s2
        a = VarianceSurface(pts, h)
        b = VarianceSurface(shifted, h)
        try:
            ea = a.estimate(pts[:, :2])
        except NumericalUnderflow:
            return
        assert np.allclose(ea, b.estimate(shifted[:, :2]), rtol=1e-10, atol=1e-12)


class TestFit:
    def test_three_hundred_triples(self):
        path = generate_path(ScenarioConfig(), 0)
        train, _ = path.split()
        surf = fit_variance_surface(train, (1.0, 1.0))
        assert len(surf) == 300
        assert np.allclose(surf.train_points[:, 2], train.log_ratios ** 2)

    def test_all_zero(self):
        rs = RatioSeries.from_log_ratios([1, 2, 3], [0.0, 0.0, 0.0], [[1, 2], [2, 3], [3, 4]])
        surf = fit_variance_surface(rs, (1.0, 1.0))
        assert surf.estimate([[1, 1], [10, 10]]).tolist() == [0.0, 0.0]

    def test_too_short(self):
        with pytest.raises(EmptyTraining):
            fit_variance_surface(rs_from_triples(FIVE[:1]), (1, 1))

    def test_case_a_mse_dense_region(self):
        errs = []
        for r in range(5):
            train, _ = generate_path(ScenarioConfig(base_seed=7), r).split()
            surf = fit_variance_surface(train, select_bandwidth(train))
            g = surface_grid(surf, (3, 9, 7), (3, 9, 7), true_variance=lambda a, b: np.ones_like(a))
            errs.append(g.sq_error.mean())
        assert np.mean(errs) < 0.15

    def test_roundtrip(self, tmp_path):
        surf = VarianceSurface(FIVE, (1.5, 0.7))
        p = tmp_path / "s.json"
        save_surface(surf, p)
        back = load_surface(p)
        assert back.bandwidth == surf.bandwidth
        assert np.array_equal(back.train_points, surf.train_points)

    def test_schema_checked(self):
        with pytest.raises(SchemaVersionError):
            VarianceSurface.from_dict({"schema": "other/9", "bandwidth": [1, 1], "train_points": FIVE})


class TestLoocv:
    def test_identical_triples(self):
        assert loocv_error(rs_from_triples([(2, 2, 0.3)] * 3), (1, 1)) == pytest.approx(0.0, abs=1e-15)

    def test_huge_bandwidth_closed_form(self):
        t = random_triples(np.random.default_rng(4), 12)
        y2 = np.array([x[2] for x in t])
        n = len(y2)
        expected = sum((y2[i] - (y2.sum() - y2[i]) / (n - 1)) ** 2 for i in range(n))
        assert loocv_error(rs_from_triples(t), (1e9, 1e9)) == pytest.approx(expected, rel=1e-9)

    def test_ten_point_brute_force(self):
        t = random_triples(np.random.default_rng(10), 10)
        assert loocv_error(rs_from_triples(t), (1.3, 2.1)) == pytest.approx(brute_loocv(t, (1.3, 2.1)), rel=1e-9)

    def test_underflow_counts_as_zero_prediction(self):
        t = [(1, 1, 0.5), (50, 50, 2.0), (100, 100, 3.0)]
        err, under = loocv_error(rs_from_triples(t), (0.01, 0.01), return_underflow=True)
        assert under == 3
        assert err == pytest.approx(0.25 + 4.0 + 9.0)

    def test_too_few(self):
        with pytest.raises(TooFewPoints):
            loocv_error(rs_from_triples(FIVE[:2]), (1, 1))

    @settings(max_examples=30)
    @given(triples_st.filter(lambda a: len(a) >= 3), bw_st)
    def test_matches_brute_force(self, pts, h):
        t = [tuple(r) for r in pts]
        assert loocv_error(rs_from_triples(t), h) == pytest.approx(brute_loocv(t, h), rel=1e-9, abs=1e-12)


class TestBandwidth:
    def test_pilot_rule(self):
        v = np.random.default_rng(1).uniform(1, 10, size=(64, 2))
        (h1, h2), deg = pilot_bandwidth(v)
        assert deg == ()
        assert h1 == pytest.approx(1.06 * np.std(v[:, 0], ddof=1) * 64 ** (-1 / 6))
        assert h2 == pytest.approx(1.06 * np.std(v[:, 1], ddof=1) * 64 ** (-1 / 6))

    def test_degenerate_volumes(self):
        rs = rs_from_triples([(4, 4, 0.1), (4, 4, 0.2), (4, 4, 0.3)])
        with pytest.warns(DegenerateVolumesWarning):
            sel = search_bandwidth(rs)
        assert sel.bandwidth == pytest.approx((4e-6, 4e-6))
        assert sel.degenerate_dims == (0, 1)

    def test_single_grid_point(self):
        t = random_triples(np.random.default_rng(2), 20)
        rs = rs_from_triples(t)
        pilot, _ = pilot_bandwidth(rs.vol_pairs)
        cfg = BandwidthSearchConfig(grid_points_per_dim=1)
        h = select_bandwidth(rs, cfg)
        assert h == pytest.approx((pilot[0], pilot[1]))

    def test_grid_shape_and_minimum(self):
        t = random_triples(np.random.default_rng(3), 40)
        rs = rs_from_triples(t)
        sel = search_bandwidth(rs, BandwidthSearchConfig(grid_points_per_dim=5))
        assert sel.cv_errors.shape == (5, 5)
        a = int(np.argmin(np.abs(sel.grid_h1 - sel.bandwidth[0])))
        b = int(np.argmin(np.abs(sel.grid_h2 - sel.bandwidth[1])))
        assert sel.cv_errors[a, b] == sel.cv_errors.min()
        # grid entries agree with the standalone criterion
        assert sel.cv_errors[1, 3] == pytest.approx(loocv_error(rs, (sel.grid_h1[1], sel.grid_h2[3])), rel=1e-10)

    def test_ties_prefer_smoother(self):
        # 0.25 keeps every weighted mean exact, so all non-underflowing cells tie at zero
        rs = rs_from_triples([(1, 1, 0.25), (2, 3, 0.25), (5, 2, 0.25), (7, 7, 0.25)])
        sel = search_bandwidth(rs, BandwidthSearchConfig(grid_points_per_dim=4))
        assert sel.bandwidth == (sel.grid_h1[-1], sel.grid_h2[-1])

    def test_config_validation(self):
        with pytest.raises(ValueError):
            BandwidthSearchConfig(grid_span=(2.0, 1.0))
        with pytest.raises(ValueError):
            BandwidthSearchConfig(grid_points_per_dim=0)

    def test_constant_variance_prefers_smoothing(self):
        cfg = ScenarioConfig(base_seed=7)
        votes = 0
        for r in range(20):
            train, _ = generate_path(cfg, r).split()
            sel = search_bandwidth(train)
            a = int(np.argmin(np.abs(sel.grid_h1 - sel.bandwidth[0])))
            b = int(np.argmin(np.abs(sel.grid_h2 - sel.bandwidth[1])))
            # top quartile of the 16-point grid, averaged over both dimensions
            votes += (a + b) / 2 >= 12
        assert votes > 10


class TestGrid:
    def test_constant_surface(self):
        surf = VarianceSurface([(1, 1, 0.7), (5, 5, 0.7), (9, 2, 0.7)], (2, 2))
        g = surface_grid(surf, (1, 9, 4), (1, 9, 3))
        assert g.sigma2.shape == (4, 3)
        assert np.allclose(g.sigma2, 0.7)

    def test_steps_validation(self):
        with pytest.raises(ValueError):
            surface_grid(VarianceSurface(FIVE, (1, 1)), (1, 5, 1), (1, 5, 3))

    def test_csv(self):
        g = surface_grid(VarianceSurface(FIVE, (1, 1)), (1, 5, 2), (1, 5, 2),
                         true_variance=lambda a, b: np.zeros_like(a))
        buf = io.StringIO()
        g.write_csv(buf)
        lines = buf.getvalue().splitlines()
        assert lines[0] == "v1,v2,sigma2,sq_error"
        assert len(lines) == 5
        v1, v2, s2, se = map(float, lines[2].split(","))
        assert (v1, v2) == (1.0, 5.0)
        assert se == pytest.approx(s2 ** 2)

    def test_case_b_error_pattern(self):
        dense, corner = [], []
        trend = []
        for r in range(5):
            train, _ = generate_path(ScenarioConfig(variance_case=VarianceCase.B, base_seed=7), r).split()
            surf = fit_variance_surface(train, select_bandwidth(train))
            g = surface_grid(surf, (2, 20, 10), (2, 20, 10), fallback="nearest",
                             true_variance=lambda a, b: variance_case(VarianceCase.B, a, b))
            dense.append(g.sq_error[:3, :3].mean())
            corner.append(g.sq_error[-2:, -2:].mean())
            rows = surface_grid(surf, (2, 10, 5), (2, 10, 5)).sigma2.mean(axis=1)
            trend.append(np.all(np.diff(rows) > 0))
        assert np.mean(dense) < np.mean(corner)
        assert sum(trend) >= 3

    def test_sample_data_low_volumes_noisier(self, sample_csv_path):
        recs = parse_scanner_csv(sample_csv_path.read_bytes()).records
        spec = SplitSpec(WeekFilter.parse("weeks=1-52"), WeekFilter.parse("store=S01;weeks=53-104"))
        split = train_test_split(recs, spec, drop_unchanged=True)
        surf = fit_variance_surface(split.train, select_bandwidth(split.train))
        g = surface_grid(surf, (1, 25, 5), (1, 25, 5), fallback="nearest")
        assert g.sigma2[0, 0] > g.sigma2[-1, -1]
        assert g.sigma2[:2, :2].mean() > g.sigma2[-2:, -2:].mean()
