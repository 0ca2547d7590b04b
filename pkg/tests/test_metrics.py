import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from rcnnmps.grid import CategoricalGrid
from rcnnmps.metrics import (
    Ensemble,
    etype,
    indicator_variance,
    indicator_variogram,
    minority_proportion_for_variance,
    most_probable,
    proportions,
    read_variogram_csv,
    sill_estimate,
    variance_map,
    variograms,
    write_variogram_csv,
)


def brute_variogram(values, category, direction, max_lag):
    """Enumerate every ordered node pair once per unordered pair."""
    z = (values == category).astype(float)
    nodes = list(itertools.product(*map(range, z.shape)))
    sq, n = np.zeros(max_lag + 1), np.zeros(max_lag + 1)
    for a, b in itertools.combinations(nodes, 2):
        d = np.subtract(b, a)
        if direction == "vertical":
            if d[0] or d[1]:
                continue
            h = abs(d[2])
        else:
            if d[2]:
                continue
            h = int(np.floor(np.hypot(d[0], d[1]) + 0.5))
        if 1 <= h <= max_lag:
            sq[h] += (z[a] - z[b]) ** 2
            n[h] += 1
    return {h: (0.5 * sq[h] / n[h], int(n[h])) for h in range(1, max_lag + 1) if n[h]}


class TestVariogram:
    def test_constant_grid(self):
        for v in variograms(CategoricalGrid(np.ones((6, 6, 6), dtype=int))):
            assert np.all(v.gamma == 0)

    def test_vertical_stripes(self):
        z = np.arange(8) % 2 + 1
        g = CategoricalGrid(np.broadcast_to(z, (4, 4, 8)).copy())
        v = indicator_variogram(g, 2, "vertical", 3)
        assert v.at(1) == 0.5 and v.at(2) == 0.0 and v.at(3) == 0.5
        assert np.all(indicator_variogram(g, 2, "omni-horizontal", 2).gamma == 0)

    def test_iid_sill(self):
        rng = np.random.default_rng(0)
        g = CategoricalGrid(np.where(rng.random((40, 40, 40)) < 0.75, 2, 1))
        for v in variograms(g):
            assert np.all(np.abs(v.gamma - 0.1875) < 0.01), v.direction

    @pytest.mark.parametrize("direction", ["vertical", "omni-horizontal"])
    @pytest.mark.parametrize("seed", [0, 1])
    def test_matches_brute_force(self, direction, seed):
        vals = np.random.default_rng(seed).integers(1, 3, size=(5, 6, 4))
        got = indicator_variogram(CategoricalGrid(vals), 2, direction, 3)
        want = brute_variogram(vals, 2, direction, 3)
        assert [h for h, _, _ in got.lags] == sorted(want)
        for h, gamma, pairs in got.lags:
            assert pairs == want[h][1]
            assert abs(gamma - want[h][0]) < 1e-12

    def test_default_max_lag_is_half_extent(self):
        g = CategoricalGrid(np.ones((10, 12, 8), dtype=int))
        assert indicator_variogram(g, 2, "vertical").h[-1] == 4
        assert indicator_variogram(g, 2, "omni-horizontal").h[-1] == 5

    @settings(max_examples=20, deadline=None)
    @given(hnp.arrays(np.int8, (5, 5, 6), elements=st.integers(1, 2)))
    def test_bounds(self, values):
        for v in variograms(CategoricalGrid(values)):
            assert np.all((v.gamma >= 0) & (v.gamma <= 0.5))
            assert np.all(v.pairs > 0)

    def test_errors(self):
        g = CategoricalGrid(np.ones((4, 4, 4), dtype=int))
        with pytest.raises(ValueError):
            indicator_variogram(g, 2, "diagonal")
        with pytest.raises(ValueError):
            indicator_variogram(g, 2, "vertical", 0)
        with pytest.raises(ValueError):
            indicator_variogram(CategoricalGrid.unknown((4, 4, 4)), 2, "vertical")

    def test_csv_round_trip(self, tmp_path):
        g = CategoricalGrid(np.random.default_rng(2).integers(1, 3, size=(6, 6, 6)))
        res = variograms(g)
        write_variogram_csv(res, tmp_path / "v.csv")
        assert (tmp_path / "v.csv").read_text().splitlines()[0] == "direction,lag,gamma,pairs"
        back = read_variogram_csv(tmp_path / "v.csv")
        assert [(r.direction, r.lags) for r in back] == [(r.direction, r.lags) for r in res]

    def test_sill_estimate(self):
        rng = np.random.default_rng(4)
        g = CategoricalGrid(np.where(rng.random((30, 30, 20)) < 0.3, 2, 1))
        assert abs(sill_estimate(g) - 0.21) < 0.015
        assert abs(indicator_variance(g) - 0.21) < 0.01


class TestEnsembleMaps:
    def test_identical_members(self):
        g = CategoricalGrid(np.random.default_rng(0).integers(1, 3, size=(4, 4, 4)))
        ens = Ensemble([g, g.copy(), g.copy()])
        np.testing.assert_array_equal(etype(ens), g.values == 2)
        assert np.all(variance_map(ens) == 0)
        assert most_probable(ens) == g

    def test_one_differing_node(self):
        a = CategoricalGrid(np.ones((3, 3, 3), dtype=int))
        b = a.copy()
        b.values[1, 2, 0] = 2
        ens = Ensemble([a, b])
        e = etype(ens)
        assert e[1, 2, 0] == 0.5 and e.sum() == 0.5
        assert variance_map(ens)[1, 2, 0] == 0.25

    def test_variance_is_p_one_minus_p(self):
        rng = np.random.default_rng(1)
        ens = Ensemble([CategoricalGrid(rng.integers(1, 3, size=(5, 5, 5))) for _ in range(7)])
        p = etype(ens)
        np.testing.assert_allclose(variance_map(ens), p * (1 - p), atol=1e-12, rtol=0)

    def test_validation(self):
        with pytest.raises(ValueError):
            Ensemble([])
        with pytest.raises(ValueError):
            Ensemble([CategoricalGrid(np.ones((2, 2, 2), dtype=int)),
                      CategoricalGrid(np.ones((2, 2, 3), dtype=int))])
        with pytest.raises(ValueError):
            Ensemble([CategoricalGrid.unknown((2, 2, 2))])


class TestProportions:
    def test_single_category(self):
        assert proportions(CategoricalGrid(np.ones((3, 3, 3), dtype=int))).tolist() == [1.0, 0.0]

    def test_checkerboard(self):
        v = (np.indices((4, 4, 4)).sum(axis=0) % 2) + 1
        assert proportions(CategoricalGrid(v)).tolist() == [0.5, 0.5]

    def test_sum_to_one(self):
        p = proportions(CategoricalGrid(np.random.default_rng(0).integers(1, 4, size=(7, 5, 3)), 3))
        assert abs(p.sum() - 1) < 1e-12

    def test_minority_for_variance(self):
        p = minority_proportion_for_variance(0.18)
        assert abs(p * (1 - p) - 0.18) < 1e-12
        assert abs(p - 0.235) < 1e-3

    def test_incomplete(self):
        with pytest.raises(ValueError):
            proportions(CategoricalGrid.unknown((2, 2, 2)))
