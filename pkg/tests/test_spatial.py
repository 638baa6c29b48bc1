"""Spatial difference constraints, connected components, gauge-fixed solve."""

import math

import numpy as np
import pytest

from tircal.errors import ConfigError, DataError, SolverFailureError
from tircal.model import ParamChain, RelativeParams
from tircal.spatial import (
    DifferenceConstraint,
    GridSpec,
    SpatialField,
    accumulate_constraints,
    connected_components,
    solve_spatial,
)
from tircal.temporal import CorrespondenceSet

GRID8 = GridSpec(cells_x=8, cells_y=8, width=80, height=80)


def cell_center(grid, cell):
    return grid.cell_centers()[cell]


def make_chain(steps):
    chain = ParamChain()
    for t, (a, b) in enumerate(steps, start=1):
        chain.append_step(RelativeParams(a, b, t, t + 1))
    return chain


class TestGridSpec:
    def test_every_pixel_maps_to_one_cell(self):
        grid = GridSpec(4, 3, 40, 30)
        xs, ys = np.meshgrid(np.arange(40) + 0.5, np.arange(30) + 0.5)
        cells = grid.cell_index(xs.ravel(), ys.ravel())
        assert cells.min() == 0 and cells.max() == grid.n_cells - 1
        counts = np.bincount(cells, minlength=grid.n_cells)
        assert np.all(counts == 100)  # uniform 10x10 pixel cells

    def test_invalid(self):
        with pytest.raises(ConfigError):
            GridSpec(0, 4, 10, 10)
        with pytest.raises(ConfigError):
            GridSpec(16, 16, 8, 8)


class TestAccumulateConstraints:
    def test_identity_zero_rhs(self):
        chain = make_chain([(0.0, 0.0)])
        c0 = cell_center(GRID8, 0)
        c5 = cell_center(GRID8, 5)
        cset = CorrespondenceSet(
            1, 2, [c0], [c5], np.array([0.4]), np.array([0.4])
        )
        out = accumulate_constraints([cset], chain, GRID8)
        assert len(out) == 1
        assert out[0].rhs == pytest.approx(0.0, abs=1e-15)

    def test_rhs_matches_true_field_difference(self):
        # Forward oracle with the source frame at nominal gain: intensities
        # built from a known bias field must pin exactly r_n - r_m.
        rng = np.random.default_rng(4)
        r = rng.normal(0, 0.05, GRID8.n_cells)
        a23, b23 = 0.3, -0.06
        chain = make_chain([(0.0, 0.0), (a23, b23)])
        centers = GRID8.cell_centers()
        cells_m = rng.integers(0, GRID8.n_cells, 40)
        cells_n = (cells_m + rng.integers(1, GRID8.n_cells, 40)) % GRID8.n_cells
        radiance = rng.uniform(0.3, 0.6, 40)
        i_from = radiance + r[cells_m]  # frame 2 at gain 1, offset 0
        i_to = (radiance + r[cells_n] - b23) / math.exp(a23)
        cset = CorrespondenceSet(
            2, 3, centers[cells_m], centers[cells_n],
            np.clip(i_from, 0, 1), np.clip(i_to, 0, 1),
        )
        out = accumulate_constraints([cset], chain, GRID8, max_abs_rhs=10.0)
        want = {}
        for n, m in zip(cells_n, cells_m):
            if n == m:
                continue
            key = (min(n, m), max(n, m))
            want[key] = (r[key[0]] - r[key[1]])
        assert len(out) == len(want)
        for c in out:
            assert c.rhs == pytest.approx(want[(c.cell_n, c.cell_m)], abs=1e-10)

    def test_same_cell_dropped(self):
        chain = make_chain([(0.0, 0.0)])
        p = cell_center(GRID8, 9)
        cset = CorrespondenceSet(1, 2, [p], [p + 0.5], np.array([0.3]), np.array([0.35]))
        assert accumulate_constraints([cset], chain, GRID8) == []

    def test_gross_outlier_dropped(self):
        chain = make_chain([(0.0, 0.0)])
        cset = CorrespondenceSet(
            1, 2, [cell_center(GRID8, 0)], [cell_center(GRID8, 1)],
            np.array([0.1]), np.array([0.9]),
        )
        assert accumulate_constraints([cset], chain, GRID8) == []

    def test_duplicates_averaged(self):
        chain = make_chain([(0.0, 0.0)])
        c0, c1 = cell_center(GRID8, 0), cell_center(GRID8, 1)
        cset = CorrespondenceSet(
            1, 2,
            [c0, c0], [c1, c1],
            np.array([0.4, 0.4]), np.array([0.5, 0.6]),
        )
        out = accumulate_constraints([cset], chain, GRID8)
        assert len(out) == 1
        # Stored in canonical cell order: r_0 - r_1 = -(0.1 + 0.2)/2.
        assert (out[0].cell_n, out[0].cell_m) == (0, 1)
        assert out[0].rhs == pytest.approx(-0.15, abs=1e-12)

    def test_same_cell_constraint_type_rejected(self):
        with pytest.raises(DataError):
            DifferenceConstraint(3, 3, 0.1)


class TestConnectedComponents:
    def test_no_constraints(self):
        labels, largest = connected_components([], GRID8)
        assert np.all(labels == -1)
        assert largest.size == 0

    def test_chain_of_constraints(self):
        cons = [
            DifferenceConstraint(1, 2, 0.0),
            DifferenceConstraint(2, 3, 0.0),
            DifferenceConstraint(3, 4, 0.0),
        ]
        labels, largest = connected_components(cons, GRID8)
        assert sorted(largest) == [1, 2, 3, 4]
        assert len(set(labels[[1, 2, 3, 4]])) == 1

    def test_two_cliques(self):
        # Hand-enumerated union-find merges: 5-cell clique beats 3-cell clique.
        big = [DifferenceConstraint(i, j, 0.0) for i in range(5) for j in range(i + 1, 5)]
        small = [DifferenceConstraint(i, j, 0.0) for i in range(10, 13) for j in range(i + 1, 13)]
        labels, largest = connected_components(big + small, GRID8)
        assert sorted(largest) == [0, 1, 2, 3, 4]
        assert labels[10] != labels[0]

    def test_size_tie_breaks_by_lowest_cell(self):
        a = [DifferenceConstraint(7, 8, 0.0)]
        b = [DifferenceConstraint(2, 3, 0.0)]
        _, largest = connected_components(a + b, GRID8)
        assert sorted(largest) == [2, 3]


class TestSolveSpatial:
    def test_two_cell_hand_solution(self):
        # Normal equations by hand: 3 rows stating r_n - r_m = 0.05 and the
        # mean-zero gauge give r_n = 0.025, r_m = -0.025.
        cons = [DifferenceConstraint(4, 9, 0.05)] * 3
        labels, largest = connected_components(cons, GRID8)
        field = solve_spatial(cons, largest, GRID8, labels)
        assert field.r[4] == pytest.approx(0.025, abs=1e-12)
        assert field.r[9] == pytest.approx(-0.025, abs=1e-12)
        assert field.residual_rms == pytest.approx(0.0, abs=1e-12)

    def test_all_zero_rhs(self):
        cons = [
            DifferenceConstraint(0, 1, 0.0),
            DifferenceConstraint(1, 2, 0.0),
            DifferenceConstraint(0, 2, 0.0),
        ]
        _, largest = connected_components(cons, GRID8)
        field = solve_spatial(cons, largest, GRID8)
        assert np.allclose(field.r[[0, 1, 2]], 0.0, atol=1e-14)

    def test_recovers_synthetic_field(self):
        # 32x32 grid, 10k noiseless constraints in one component.
        grid = GridSpec(32, 32, 320, 320)
        rng = np.random.default_rng(11)
        truth = rng.normal(0, 0.05, grid.n_cells)
        m = rng.integers(0, grid.n_cells, 10_000)
        shift = rng.integers(1, grid.n_cells, 10_000)
        n = (m + shift) % grid.n_cells
        keep = n != m
        cons = [
            DifferenceConstraint(int(i), int(j), float(truth[i] - truth[j]))
            for i, j in zip(n[keep], m[keep])
        ]
        labels, largest = connected_components(cons, grid)
        assert largest.size == grid.n_cells
        field = solve_spatial(cons, largest, grid, labels)
        aligned = truth - truth.mean()
        assert np.max(np.abs(field.r - aligned)) <= 1e-8

    def test_gauge_invariance(self):
        # Adding a constant to the true field leaves the solution unchanged.
        grid = GridSpec(4, 4, 16, 16)
        rng = np.random.default_rng(3)
        truth = rng.normal(0, 0.04, grid.n_cells)
        pairs = [(i, (i + 1) % grid.n_cells) for i in range(grid.n_cells)]
        base = [DifferenceConstraint(i, j, float(truth[i] - truth[j])) for i, j in pairs]
        shifted = [
            DifferenceConstraint(i, j, float((truth[i] + 5.0) - (truth[j] + 5.0)))
            for i, j in pairs
        ]
        _, largest = connected_components(base, grid)
        f1 = solve_spatial(base, largest, grid)
        f2 = solve_spatial(shifted, largest, grid)
        assert np.allclose(f1.r[largest], f2.r[largest], atol=1e-12)

    def test_least_squares_optimality(self):
        # Noisy constraints: the solve's residual cannot exceed the residual
        # of the mean-centered true field.
        grid = GridSpec(6, 6, 60, 60)
        rng = np.random.default_rng(8)
        truth = rng.normal(0, 0.05, grid.n_cells)
        cons = []
        for _ in range(400):
            i, j = rng.choice(grid.n_cells, 2, replace=False)
            cons.append(
                DifferenceConstraint(int(i), int(j), float(truth[i] - truth[j] + rng.normal(0, 0.01)))
            )
        labels, largest = connected_components(cons, grid)
        field = solve_spatial(cons, largest, grid, labels)
        truth_resid = np.sqrt(
            np.mean([(truth[c.cell_n] - truth[c.cell_m] - c.rhs) ** 2 for c in cons])
        )
        assert field.residual_rms <= truth_resid + 1e-12

    def test_laplacian_rank(self):
        # Rank |component| - 1 before the gauge row, full rank after.
        cons = [
            DifferenceConstraint(0, 1, 0.1),
            DifferenceConstraint(1, 2, 0.1),
            DifferenceConstraint(2, 3, 0.1),
        ]
        k = 4
        A = np.zeros((3, k))
        for row, c in enumerate(cons):
            A[row, c.cell_n] = 1.0
            A[row, c.cell_m] = -1.0
        laplacian = A.T @ A
        assert np.linalg.matrix_rank(laplacian) == k - 1
        bordered = np.zeros((k + 1, k + 1))
        bordered[:k, :k] = laplacian
        bordered[k, :k] = 1.0
        bordered[:k, k] = 1.0
        assert np.linalg.matrix_rank(bordered) == k + 1

    def test_order_independence(self):
        grid = GridSpec(5, 5, 50, 50)
        rng = np.random.default_rng(23)
        truth = rng.normal(0, 0.03, grid.n_cells)
        cons = []
        for _ in range(200):
            i, j = rng.choice(grid.n_cells, 2, replace=False)
            cons.append(DifferenceConstraint(int(i), int(j), float(truth[i] - truth[j])))
        perm = list(cons)
        rng.shuffle(perm)
        _, largest = connected_components(cons, grid)
        f1 = solve_spatial(cons, largest, grid)
        f2 = solve_spatial(perm, largest, grid)
        assert np.allclose(f1.r[largest], f2.r[largest], atol=1e-10)

    def test_solve_outside_largest_component_only(self):
        cons_a = [DifferenceConstraint(0, 1, 0.1), DifferenceConstraint(1, 2, 0.1)]
        cons_b = [DifferenceConstraint(20, 21, 0.3)]
        labels, largest = connected_components(cons_a + cons_b, GRID8)
        field = solve_spatial(cons_a + cons_b, largest, GRID8, labels)
        assert field.solved_mask[[0, 1, 2]].all()
        assert not field.solved_mask[20] and not field.solved_mask[21]
        assert np.isnan(field.r[20])

    def test_empty_component(self):
        with pytest.raises(SolverFailureError):
            solve_spatial([], np.array([], dtype=int), GRID8)


class TestSpatialFieldSerialization:
    def test_json_round_trip(self, tmp_path):
        cons = [DifferenceConstraint(4, 9, 0.05)] * 2
        labels, largest = connected_components(cons, GRID8)
        field = solve_spatial(cons, largest, GRID8, labels)
        path = tmp_path / "field.json"
        field.to_json(path)
        loaded = SpatialField.from_json(path)
        assert loaded.grid == field.grid
        assert np.allclose(loaded.r[largest], field.r[largest])
        assert np.isnan(loaded.r[0])
        assert loaded.source[4] == 1 and loaded.source[0] == 0

    def test_pgm_render(self, tmp_path):
        from tircal.io import read_pgm

        field = SpatialField.empty(GRID8)
        field.r[:] = 0.0
        field.source[:] = 1
        field.r[0] = 0.1
        path = tmp_path / "field.pgm"
        field.to_pgm(path)
        img = read_pgm(path)
        assert img.shape == (80, 80)
        # Mid-gray background, brighter where the bias is positive.
        assert img[40, 40] == pytest.approx(128 / 255, abs=1e-6)
        assert img[0, 0] > img[40, 40]

    def test_bilinear_sample_at_centers(self):
        field = SpatialField.empty(GRID8)
        field.r[:] = np.arange(GRID8.n_cells, dtype=float) / GRID8.n_cells
        field.source[:] = 1
        centers = GRID8.cell_centers()
        got = field.sample(centers[:, 0], centers[:, 1])
        assert np.allclose(got, field.r, atol=1e-12)
