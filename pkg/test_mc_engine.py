#!/usr/bin/env python3
"""
Tests for the exact-law and conditioned simulators and the sharded estimators.
"""

import math

import numpy as np
import pytest

from ibm_core import PhaseState, self_start_survival
from mc_engine import (
    EstimateCI,
    HistogramBins,
    KilledCellTable,
    PathGrid,
    RngSpec,
    estimate,
    estimate_many,
    killed_cell_family,
    killed_density_histogram,
    passage_times,
    sample_increment,
    simulate_conditioned,
    simulate_conditioned_ensemble,
    simulate_ensemble,
    simulate_path,
    track_functionals,
)
from specfun import DomainError


def test_rng_spec_is_reproducible():
    a = RngSpec(11, 3).generator(2).standard_normal(5)
    b = RngSpec(11, 3).generator(2).standard_normal(5)
    c = RngSpec(11, 4).generator(2).standard_normal(5)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    assert RngSpec(11, 2 ** 64 - 1).child(1) == RngSpec(11, 0)


@pytest.mark.parametrize("seed", [-1, 2 ** 64, True, 1.5])
def test_rng_spec_rejects_bad_seed(seed):
    with pytest.raises(DomainError):
        RngSpec(seed)


def test_path_grid_validation_and_stops():
    with pytest.raises(DomainError):
        PathGrid(0.0, 1.0)
    with pytest.raises(DomainError):
        PathGrid(2.0, 1.0)
    with pytest.raises(DomainError):
        PathGrid(0.1, 1.0, growth=-1.0)
    grid = PathGrid(0.1, 1.0, growth=0.5)
    assert grid.step_at(2.0) == pytest.approx(0.2)
    assert grid.stops([0.5, 0.25, 1.0]) == [0.25, 0.5, 1.0]
    with pytest.raises(DomainError):
        grid.stops([2.0])


def test_increment_moments():
    """Var dB = h, Var dX = h^3 / 3, Cov = h^2 / 2."""
    h = 0.5
    dx, db = sample_increment(h, RngSpec(1).generator(), size=200_000)
    cov = np.cov(np.vstack([dx, db]))
    assert cov[1, 1] == pytest.approx(h, rel=0.02)
    assert cov[0, 0] == pytest.approx(h ** 3 / 3, rel=0.02)
    assert cov[0, 1] == pytest.approx(h ** 2 / 2, rel=0.03)
    with pytest.raises(DomainError):
        sample_increment(0.0, RngSpec(1).generator())


def test_ensemble_final_law_is_exact():
    """X_1 ~ N(x + y, 1/3) and B_1 ~ N(y, 1) whatever the step."""
    start = PhaseState(0.3, -0.2)
    result = simulate_ensemble(start, PathGrid(0.25, 1.0), 8000, RngSpec(5))
    snap = result.final
    assert np.mean(snap.x) == pytest.approx(0.1, abs=4 * math.sqrt(1 / 3 / 8000))
    assert np.mean(snap.y) == pytest.approx(-0.2, abs=4 * math.sqrt(1 / 8000))
    assert np.var(snap.x) == pytest.approx(1 / 3, rel=0.08)


def test_antithetic_pairs_mirror():
    start = PhaseState(0.0, 0.0)
    result = simulate_ensemble(start, PathGrid(0.1, 1.0), 10, RngSpec(9), antithetic=True)
    snap = result.final
    np.testing.assert_allclose(snap.x[:5], -snap.x[5:], atol=1e-12)
    np.testing.assert_allclose(snap.y[:5], -snap.y[5:], atol=1e-12)


def test_survival_matches_exact_self_start_law():
    """P_{(0,1)}(T_0 > 1) from passage detection agrees with the tabulated law."""
    grid = PathGrid(0.005, 1.0)
    est = estimate(lambda r: r.survived(1.0).astype(float), PhaseState(0.0, 1.0), grid, 6000, RngSpec(7),
                   shards=4, threads=2, levels=(0.0,), stop_when_done=True)
    assert est.agrees(self_start_survival(1.0, 1.0), k=4.0, slack=0.01)


def test_estimates_do_not_depend_on_threads():
    grid = PathGrid(0.05, 1.0)

    def functional(r):
        return np.column_stack([r.final.x, r.final.y ** 2])

    one = estimate_many(functional, PhaseState(1.0, 0.0), grid, 400, RngSpec(3), shards=4, threads=1)
    many = estimate_many(functional, PhaseState(1.0, 0.0), grid, 400, RngSpec(3), shards=4, threads=4)
    assert one == many
    assert len(one) == 2


def test_constant_functional_has_zero_error():
    est = estimate(lambda r: np.full(r.n_paths, 2.5), PhaseState(1.0, 0.0), PathGrid(0.5, 1.0), 50, RngSpec(1))
    assert est.mean == 2.5
    assert est.stderr == 0.0
    assert est.n == 50
    with pytest.raises(DomainError):
        estimate(lambda r: np.zeros(r.n_paths), PhaseState(1.0, 0.0), PathGrid(0.5, 1.0), 1, RngSpec(1))


def test_estimate_ci_helpers():
    est = EstimateCI.from_values([1.0, 2.0, 3.0, 4.0])
    assert est.mean == 2.5
    assert est.stderr == pytest.approx(math.sqrt(5 / 3 / 4))
    assert est.z_score(2.5) == 0.0
    assert est.agrees(2.5 + 2.9 * est.stderr)
    assert not est.agrees(2.5 + 3.1 * est.stderr)
    assert EstimateCI(1.0, 0.0, 3).z_score(2.0) == math.inf
    with pytest.raises(DomainError):
        EstimateCI(1.0, -1.0, 3)


def test_single_path_crossings_and_functionals():
    path = simulate_path(PhaseState(0.5, -1.0), PathGrid(0.01, 2.0), RngSpec(21), levels=(0.0, 0.5))
    times = [c[1] for c in path.crossings]
    assert times == sorted(times)
    zeros = passage_times(path, 0.0, 1)
    level_zero = [c for c in path.crossings if c[0] == 0.0]
    if zeros:
        assert zeros[0][0] == pytest.approx(level_zero[0][1])
    info = track_functionals(path, sigma_levels=(0.0,))
    assert info.sup >= path.xs.max() - 1e-12
    assert info.touched == bool(zeros)
    assert len(info.sigma_b_times) == 1
    assert path.start == PhaseState(0.5, -1.0)


def test_supremum_and_velocity_passages_are_tracked():
    result = simulate_ensemble(PhaseState(0.0, 0.0), PathGrid(0.02, 1.0), 500, RngSpec(4),
                               sigma_levels=(0.5,), track_sup=True)
    snap = result.final
    assert np.all(snap.sup >= np.maximum(0.0, snap.x) - 1e-12)
    times = result.sigma_times[0.5]
    hit = ~np.isnan(times)
    assert hit.any()
    assert np.all((times[hit] >= 0) & (times[hit] <= 1.0))
    assert np.all(np.isfinite(result.sigma_positions[0.5][hit]))


def test_conditioned_paths_stay_positive():
    result = simulate_conditioned_ensemble(PhaseState(1.0, 0.0), PathGrid(0.01, 2.0), 200, RngSpec(2),
                                           checkpoints=(1.0,))
    for t in (1.0, 2.0):
        assert np.all(result.snapshot(t).x > 0)
    path = simulate_conditioned(PhaseState(0.0, 1.0), PathGrid(0.01, 1.0), RngSpec(2))
    assert all(x > 0 for _, x, _ in path.samples[1:])


def test_conditioned_negative_side():
    result = simulate_conditioned_ensemble(PhaseState(-1.0, 0.0), PathGrid(0.01, 1.0), 100, RngSpec(8), sign=-1)
    assert np.all(result.final.x < 0)


@pytest.mark.parametrize("start,sign", [(PhaseState(0.0, 0.0), 1), (PhaseState(0.0, -1.0), 1),
                                        (PhaseState(1.0, 0.0), -1), (PhaseState(1.0, 0.0), 2)])
def test_conditioned_rejects_bad_start(start, sign):
    with pytest.raises(DomainError):
        simulate_conditioned_ensemble(start, PathGrid(0.01, 1.0), 10, RngSpec(1), sign=sign)


def test_killed_histogram_accounts_for_survivors():
    bins = HistogramBins.uniform((0.0, 3.0), (-3.0, 3.0), 6, 6)
    hist = killed_density_histogram(PhaseState(0.3, -0.5), 0.5, bins, 2000, RngSpec(6), shards=2)
    assert 0 < hist.survival.mean < 1
    assert hist.counts.sum() <= hist.survivors
    assert hist.mass == pytest.approx(hist.counts.sum() / 2000)
    assert hist(-1.0, 0.0) == 0.0
    assert hist.cell(2, 3).mean == pytest.approx(float(hist.density[2, 3]))
    with pytest.raises(DomainError):
        killed_density_histogram(PhaseState(0.0, -1.0), 0.5, bins, 10, RngSpec(6))


def test_histogram_bins_validation():
    with pytest.raises(DomainError):
        HistogramBins(np.array([0.0, 0.0, 1.0]), np.array([0.0, 1.0]))
    assert HistogramBins.uniform((0.0, 1.0), (0.0, 2.0), 2, 4).area.shape == (2, 4)


def test_killed_cell_family_edges():
    table = killed_cell_family([0.5, 1.0], [0.1, 0.2], (0.0, 1.0, 0.0, 2.0), 200, RngSpec(12), threads=2)
    assert table.prob.shape == (3, 3)
    assert np.all((table.prob >= 0) & (table.prob <= 1))
    k, err = table.along_z(0.15, [-1.0, 0.0, 0.75])
    assert k[0] == 0.0 and k[1] == 0.0
    assert 0 <= k[2] <= 1
    assert np.all(err >= 0)
    assert table(0.15, -0.5) == 0.0
    # at r = 0 the path still sits at (0, z), inside the cell for z < 2
    assert table(0.0, 0.5) == pytest.approx(1.0)


def test_conditioned_sigma_levels_and_barrier_gap():
    result = simulate_conditioned_ensemble(PhaseState(1.0, 0.0), PathGrid(0.01, 1.0), 300, RngSpec(3),
                                           sigma_levels=(0.5,))
    when, where = result.sigma_times[0.5], result.sigma_positions[0.5]
    hit = ~np.isnan(when)
    assert 0 < hit.sum() < 300
    assert np.all((when[hit] > 0) & (when[hit] <= 1.0))
    assert np.all(where[hit] > 0)
    assert np.all(np.isnan(where[~hit]))
    snap = result.final
    assert np.all(snap.min_gap > 0)
    assert np.all(snap.min_gap <= snap.x)


def test_conditioned_sigma_levels_stop_and_mirror():
    result = simulate_conditioned_ensemble(PhaseState(-1.0, 0.0), PathGrid(0.01, 5.0), 100, RngSpec(4), sign=-1,
                                           sigma_levels=(-0.5,), stop_when_done=True)
    hit = ~np.isnan(result.sigma_times[-0.5])
    assert hit.any()
    assert np.all(result.sigma_positions[-0.5][hit] < 0)
    retired = result.final.retired
    assert retired.any() and not np.any(retired & ~hit)
    on_level = simulate_conditioned_ensemble(PhaseState(1.0, 0.5), PathGrid(0.01, 0.1), 5, RngSpec(4),
                                             sigma_levels=(0.5,))
    assert np.all(on_level.sigma_times[0.5] == 0.0)


def test_barrier_gap_ignores_a_start_on_the_axis():
    result = simulate_conditioned_ensemble(PhaseState(0.0, 1.0), PathGrid(0.01, 0.5), 50, RngSpec(9))
    gap = result.final.min_gap
    assert np.all(gap > 0) and np.all(np.isfinite(gap))
    assert simulate_ensemble(PhaseState(0.0, 1.0), PathGrid(0.01, 0.5), 5, RngSpec(9)).final.min_gap is None


def test_killed_cell_table_as_density():
    table = KilledCellTable(np.array([0.0, 1.0, 2.0]), np.array([0.0, 1.0]),
                            np.array([[0.0, 0.0], [0.4, 0.2], [0.8, 0.6]]), np.zeros((3, 2)))
    density = table.as_density((0.0, 0.5, -1.0, 1.0))
    assert density(1.0, 1.0, 0.25, 0.0) == pytest.approx(0.2 / 1.0)
    assert density(0.5, 1.5, 0.0, -1.0) == pytest.approx(table(0.5, 1.5))
    assert table(0.5, 1.5) == pytest.approx(0.5)
    assert density(1.0, 1.0, 0.5, 0.0) == 0.0
    assert density(1.0, 1.0, 0.25, 1.0) == 0.0
    assert density(1.0, -1.0, 0.25, 0.0) == 0.0
    assert KilledCellTable(table.z_nodes, table.r_nodes, table.prob, table.stderr)(1.0, 1.0) == pytest.approx(0.2)
    with pytest.raises(DomainError):
        table.as_density((0.5, 0.5, -1.0, 1.0))
