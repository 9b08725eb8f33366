import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate as sp_integrate

from degenpop.discretize import (Field2, Field3, Grid, axis_weights,
                                 integrate_nodes, random_final_data,
                                 read_field_csv, read_field_raw,
                                 sine_mode_data, spawn_rng, weighted_norm,
                                 write_field_csv, write_field_raw)


def make_grid(Nt=6, Nx=8):
    return Grid.aligned(T=1.0, A=2.0, Nt=Nt, Nx=Nx)


class TestGrid:
    def test_aligned_derives_age_cells(self):
        g = make_grid()
        assert g.Na == 12
        assert g.dt == g.da

    def test_mismatched_spacings_rejected(self):
        with pytest.raises(ValueError, match="T/Nt == A/Na"):
            Grid(T=1.0, A=2.0, Nt=10, Na=15, Nx=8)

    def test_aligned_rejects_fractional_age_count(self):
        with pytest.raises(ValueError):
            Grid.aligned(T=1.0, A=1.75, Nt=10, Nx=8)

    def test_node_counts_and_spans(self):
        g = Grid(T=1.0, A=2.0, Nt=4, Na=8, Nx=5, x_span=(0.25, 0.75))
        assert g.t_nodes.shape == (5,)
        assert g.a_nodes.shape == (9,)
        assert g.x_nodes[0] == 0.25 and g.x_nodes[-1] == 0.75
        assert g.dx == pytest.approx(0.1)

    def test_with_time_keeps_space(self):
        g = make_grid()
        g2 = g.with_time(0.5, 3)
        assert g2.Nx == g.Nx and g2.Na == g.Na
        assert g2.dt == g.dt

    def test_unknown_axis(self):
        with pytest.raises(ValueError):
            make_grid().axis_nodes("z")


class TestQuadrature:
    def test_matches_scipy_trapezoid(self):
        rng = spawn_rng(3)
        vals = rng.standard_normal((7, 11))
        ours = integrate_nodes(vals, (0.25, 0.1))
        ref = sp_integrate.trapezoid(
            sp_integrate.trapezoid(vals, dx=0.1, axis=1), dx=0.25)
        assert ours == pytest.approx(ref, rel=1e-14)

    def test_weighted_norm_polynomial_oracle(self):
        # int_0^1 x^2 dx = 1/3
        nodes = np.linspace(0.0, 1.0, 20_001)
        val = weighted_norm(nodes, (nodes,))
        assert val == pytest.approx(1.0 / 3.0, rel=1e-8)

    def test_weighted_norm_singular_endpoint(self):
        # int_0^1 x^(-1/2) dx = 2.  The weight blows up at the left edge,
        # so the regular cells next to it converge at O(sqrt(h)) only.
        nodes = np.linspace(0.0, 1.0, 100_001)
        val = weighted_norm(np.ones_like(nodes), (nodes,),
                            weight=lambda x: np.where(x > 0, x, np.inf) ** -0.5)
        assert val == pytest.approx(2.0, rel=5e-3)

    def test_weighted_norm_rejects_mismatched_axes(self):
        with pytest.raises(ValueError):
            weighted_norm(np.ones((3, 3)), (np.linspace(0, 1, 3),))

    def test_axis_weights_sum(self):
        w = axis_weights(11, 0.1)
        assert w.sum() == pytest.approx(1.0)

    @given(st.integers(min_value=2, max_value=40),
           st.floats(min_value=-3, max_value=3, allow_nan=False),
           st.floats(min_value=-3, max_value=3, allow_nan=False))
    @settings(max_examples=60, deadline=None)
    def test_trapezoid_exact_on_affine(self, n, a, b):
        nodes = np.linspace(0.0, 1.0, n + 1)
        exact = a + b / 2.0
        got = integrate_nodes(a + b * nodes, (1.0 / n,))
        assert got == pytest.approx(exact, abs=1e-10)

    @given(st.integers(min_value=0, max_value=2 ** 31), st.integers(2, 30))
    @settings(max_examples=40, deadline=None)
    def test_quadrature_monotone(self, seed, n):
        rng = spawn_rng(seed)
        f = rng.uniform(0.0, 1.0, n)
        g = f + rng.uniform(0.0, 1.0, n)
        h = 1.0 / (n - 1)
        assert integrate_nodes(f, (h,)) <= integrate_nodes(g, (h,)) + 1e-12


class TestFields:
    def test_field3_rejects_nan(self):
        g = make_grid()
        vals = np.zeros((g.Nt + 1, g.Na + 1, g.Nx + 1))
        vals[1, 1, 1] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            Field3(g, vals)

    def test_field2_shape_check(self):
        g = make_grid()
        with pytest.raises(ValueError, match="shape"):
            Field2(g, np.zeros((3, 3)))

    def test_from_function_broadcasts(self):
        g = make_grid()
        f = Field3.from_function(g, lambda t, a, x: t + a + x)
        assert f.values[2, 3, 4] == pytest.approx(
            g.t_nodes[2] + g.a_nodes[3] + g.x_nodes[4])

    def test_sine_modes_vanish_on_edges(self):
        g = make_grid()
        f = sine_mode_data(g, [[1.0, -0.5], [0.25, 0.1]])
        assert np.all(f.values[-1] == 0.0)          # a = A row
        np.testing.assert_allclose(f.values[:, 0], 0.0, atol=1e-15)
        np.testing.assert_allclose(f.values[:, -1], 0.0, atol=1e-15)


class TestRandomness:
    def test_spawn_rng_reproducible(self):
        a = spawn_rng(11, 2).standard_normal(5)
        b = spawn_rng(11, 2).standard_normal(5)
        np.testing.assert_array_equal(a, b)

    def test_streams_differ(self):
        a = spawn_rng(11, 0).standard_normal(5)
        b = spawn_rng(11, 1).standard_normal(5)
        assert not np.array_equal(a, b)

    @given(st.integers(min_value=0, max_value=2 ** 31))
    @settings(max_examples=25, deadline=None)
    def test_random_final_data_deterministic(self, seed):
        g = make_grid(4, 6)
        a = random_final_data(g, seed)
        b = random_final_data(g, seed)
        np.testing.assert_array_equal(a.values, b.values)


class TestSnapshotIO:
    def test_csv_round_trip(self, tmp_path):
        g = make_grid(3, 4)
        fld = Field2(g, spawn_rng(5).standard_normal((g.Na + 1, g.Nx + 1)))
        path = tmp_path / "snap.csv"
        write_field_csv(fld, path)
        back = read_field_csv(path, g)
        np.testing.assert_array_equal(back.values, fld.values)
        assert back.axes == ("a", "x")

    def test_raw_round_trip_field3(self, tmp_path):
        g = make_grid(3, 4)
        fld = Field3(g, spawn_rng(6).standard_normal(
            (g.Nt + 1, g.Na + 1, g.Nx + 1)))
        path = tmp_path / "snap.raw"
        write_field_raw(fld, path)
        back = read_field_raw(path, g)
        np.testing.assert_array_equal(back.values, fld.values)

    def test_raw_version_guard(self, tmp_path):
        path = tmp_path / "bad.raw"
        import struct
        path.write_bytes(struct.pack("<4q", 3, 4, 5, 99))
        with pytest.raises(ValueError, match="version"):
            read_field_raw(path, make_grid())
