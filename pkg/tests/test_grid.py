import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from rcnnmps.grid import (
    CategoricalGrid,
    DrillHoleSet,
    GridFormatError,
    WindowSpec,
    extract_window,
    load_drillholes,
    load_grid,
    migrate_hard_data,
    nearest_nodes,
    one_hot_encode,
    sample_drillholes,
    save_drillholes,
    save_grid,
)


def write_body(path, records):
    path.write_text("title\n1\nfacies\n" + "\n".join(map(str, records)) + "\n")


class TestGridFile:
    def test_load_declared_order(self, tmp_path):
        p = tmp_path / "g.gslib"
        write_body(p, [1, 1, 2, 2, 1, 1, 2, 2])
        g = load_grid(p, (2, 2, 2), 2)
        assert g.value(0, 0, 0) == 1
        assert g.value(1, 1, 1) == 2
        # x fastest: record 2 is (0, 1, 0)
        assert g.value(0, 1, 0) == 2

    def test_record_count_error(self, tmp_path):
        p = tmp_path / "g.gslib"
        write_body(p, [1] * 7)
        with pytest.raises(GridFormatError, match="record count"):
            load_grid(p, (2, 2, 2), 2)

    def test_out_of_range_reports_line(self, tmp_path):
        p = tmp_path / "g.gslib"
        write_body(p, [1, 1, 3, 1, 1, 1, 1, 1])
        with pytest.raises(GridFormatError, match="line 6"):
            load_grid(p, (2, 2, 2), 2)

    def test_bad_header(self, tmp_path):
        p = tmp_path / "g.gslib"
        p.write_text("title\ntwo\nname\n1\n")
        with pytest.raises(GridFormatError, match="line 2"):
            load_grid(p, (1, 1, 1), 2)

    def test_smallest_file(self, tmp_path):
        p = tmp_path / "g.gslib"
        save_grid(CategoricalGrid(np.full((1, 1, 1), 2)), p)
        assert p.read_text().splitlines()[3:] == ["2"]

    def test_record_count_50_cubed(self, tmp_path):
        p = tmp_path / "g.gslib"
        save_grid(CategoricalGrid(np.ones((50, 50, 50), dtype=int)), p)
        assert len(p.read_text().splitlines()) - 3 == 125000

    @settings(max_examples=25, deadline=None)
    @given(hnp.arrays(np.int8, (5, 5, 5), elements=st.integers(0, 2)))
    def test_round_trip(self, tmp_path_factory, values):
        p = tmp_path_factory.mktemp("rt") / "g.gslib"
        g = CategoricalGrid(values)
        save_grid(g, p)
        assert load_grid(p, (5, 5, 5), 2) == g


def test_grid_rejects_bad_codes():
    with pytest.raises(ValueError):
        CategoricalGrid(np.full((2, 2, 2), 3), 2)


def test_flat_order_is_x_fastest():
    g = CategoricalGrid.from_flat(np.arange(8) % 3, (2, 2, 2), 2)
    assert g.flat().tolist() == (np.arange(8) % 3).tolist()
    assert g.value(1, 0, 0) == 1 and g.value(0, 1, 0) == 2


def test_drillhole_csv_round_trip(tmp_path):
    dh = DrillHoleSet([[1, 2, 3], [0, 0, 0]], [2, 1])
    p = tmp_path / "dh.csv"
    save_drillholes(dh, p)
    assert p.read_text().splitlines()[0] == "x,y,z,category"
    back = load_drillholes(p)
    np.testing.assert_array_equal(back.coords, dh.coords)
    np.testing.assert_array_equal(back.categories, dh.categories)


def test_drillholes_reject_unknown():
    with pytest.raises(ValueError):
        DrillHoleSet([[0, 0, 0]], [0])


def test_window_spec_validation():
    with pytest.raises(ValueError):
        WindowSpec((4, 5, 5), (3, 3, 3))
    with pytest.raises(ValueError):
        WindowSpec((5, 5, 5), (7, 3, 3))
    assert WindowSpec((9, 9, 9), (5, 5, 5)).ip_size == 125


class TestMigration:
    def test_exact_node(self):
        g = migrate_hard_data(CategoricalGrid.unknown((6, 6, 6)), DrillHoleSet([[3, 4, 5]], [1]))
        assert g.value(3, 4, 5) == 1
        assert np.count_nonzero(g.values) == 1

    def test_conflict_first_wins(self, caplog):
        dh = DrillHoleSet([[2.1, 2, 2], [1.9, 2, 2]], [1, 2])
        g = migrate_hard_data(CategoricalGrid.unknown((4, 4, 4)), dh)
        assert g.value(2, 2, 2) == 1
        assert "1 conflicting" in caplog.text

    def test_informed_count_matches_brute_force(self):
        rng = np.random.default_rng(3)
        dims = (7, 5, 6)
        coords = rng.uniform(-1, 8, size=(60, 3))
        cats = rng.integers(1, 3, size=60)
        g = migrate_hard_data(CategoricalGrid.unknown(dims), DrillHoleSet(coords, cats))
        nodes = np.array(list(itertools.product(*map(range, dims))))
        nearest = set()
        for c in coords:
            d = np.linalg.norm(nodes - c, axis=1)
            nearest.add(tuple(nodes[np.argmin(d)]))
        assert np.count_nonzero(g.values) == len(nearest)

    def test_nearest_node_clips(self):
        assert nearest_nodes([[-3.0, 10.2, 1.49]], (4, 4, 4)).tolist() == [[0, 3, 1]]

    def test_idempotent(self):
        rng = np.random.default_rng(0)
        base = CategoricalGrid(rng.integers(0, 3, size=(6, 6, 6)))
        dh = DrillHoleSet(rng.integers(0, 6, size=(30, 3)), rng.integers(1, 3, size=30))
        once = migrate_hard_data(base, dh)
        assert migrate_hard_data(once, dh) == once


class TestWindows:
    def test_interior_copy(self):
        v = np.arange(7 * 7 * 7).reshape(7, 7, 7) % 3
        g = CategoricalGrid(v)
        w = extract_window(g, (3, 3, 3), (3, 5, 3))
        np.testing.assert_array_equal(w, v[2:5, 1:6, 2:5])

    def test_corner_padding_count(self):
        g = CategoricalGrid(np.ones((5, 5, 5), dtype=int))
        w = extract_window(g, (0, 0, 0), (3, 3, 3))
        outside = sum(
            1
            for dx, dy, dz in itertools.product((-1, 0, 1), repeat=3)
            if min(dx, dy, dz) < 0
        )
        assert outside == 19
        assert np.count_nonzero(w == 0) == outside

    def test_identity_window(self):
        v = np.random.default_rng(1).integers(1, 3, size=(5, 7, 3))
        g = CategoricalGrid(v)
        np.testing.assert_array_equal(extract_window(g, (2, 3, 1), (5, 7, 3)), v)

    def test_errors(self):
        g = CategoricalGrid.unknown((5, 5, 5))
        with pytest.raises(ValueError):
            extract_window(g, (2, 2, 2), (2, 3, 3))
        with pytest.raises(ValueError):
            extract_window(g, (5, 0, 0), (3, 3, 3))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 4), st.data())
    def test_translation_consistent(self, cx, cy, cz, data):
        v = np.random.default_rng(cx * 100 + cy * 10 + cz).integers(0, 3, size=(7, 7, 6))
        g = CategoricalGrid(v)
        w = extract_window(g, (cx, cy, cz), (3, 3, 3))
        off = data.draw(st.tuples(*[st.integers(0, 2)] * 3))
        assert w[off] == v[cx + off[0] - 1, cy + off[1] - 1, cz + off[2] - 1]


class TestOneHot:
    def test_all_unknown(self):
        x = one_hot_encode(np.zeros((3, 3, 3), dtype=int), 2)
        assert x.shape == (3, 3, 3, 3)
        assert np.all(x[0] == 1) and np.all(x[1:] == 0)

    def test_single_node(self):
        x = one_hot_encode(np.full((1, 1, 1), 2), 2)
        assert x[:, 0, 0, 0].tolist() == [0, 0, 1]

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            one_hot_encode(np.full((1, 1, 1), 3), 2)

    @settings(max_examples=30, deadline=None)
    @given(hnp.arrays(np.int8, (4, 3, 5), elements=st.integers(0, 3)))
    def test_partition_and_argmax_recovery(self, w):
        x = one_hot_encode(w, 3)
        np.testing.assert_array_equal(x.sum(axis=0), 1)
        np.testing.assert_array_equal(x.argmax(axis=0), w)


class TestDrillholes:
    @pytest.mark.parametrize("fraction, columns", [(0.05, 125), (0.02, 50)])
    def test_column_counts(self, fraction, columns):
        ti = CategoricalGrid(np.ones((50, 50, 50), dtype=int))
        dh = sample_drillholes(ti, fraction, seed=4)
        assert len(dh) == columns * 50
        cols = {(int(x), int(y)) for x, y, _ in dh.coords}
        assert len(cols) == columns

    def test_deterministic_and_categories(self):
        rng = np.random.default_rng(2)
        ti = CategoricalGrid(rng.integers(1, 3, size=(10, 10, 8)))
        a = sample_drillholes(ti, 0.1, seed=9)
        b = sample_drillholes(ti, 0.1, seed=9)
        np.testing.assert_array_equal(a.coords, b.coords)
        assert set(np.unique(a.categories)) <= {1, 2}
        ix, iy, iz = a.coords.astype(int).T
        np.testing.assert_array_equal(ti.values[ix, iy, iz], a.categories)

    def test_reaches_fraction(self):
        ti = CategoricalGrid(np.ones((10, 10, 7), dtype=int))
        dh = sample_drillholes(ti, 0.13, seed=0)
        assert len(dh) >= 0.13 * ti.size
        assert len(dh) - 7 < 0.13 * ti.size

    @pytest.mark.parametrize("fraction", [0.0, 1.0, -0.1])
    def test_bad_fraction(self, fraction):
        with pytest.raises(ValueError):
            sample_drillholes(CategoricalGrid(np.ones((4, 4, 4), dtype=int)), fraction, 0)
