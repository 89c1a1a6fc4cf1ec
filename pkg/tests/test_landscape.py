import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from chreode.exceptions import ConfigError, DataError, DatasetFormatError
from chreode.landscape import (
    CloneBenchmark,
    Landscape,
    Snapshot,
    TrajectoryDataset,
    dataset_text,
    dt_convergence_gap,
    fate_of,
    fate_ratio,
    parse_dataset,
    propagate,
    read_dataset,
    simulate_clones,
    simulate_dataset,
    simulate_population,
    write_dataset,
)
from chreode.losses import composite_loss, mmd, sinkhorn_cost
from chreode.operator import build_variant

from conftest import central_diff


@pytest.mark.parametrize("kind", ["double_well", "rotation_only", "well_plus_rotation"])
def test_potential_gradient_matches_numerical(kind):
    land = Landscape(kind=kind, dim=5, well_shift=0.3)
    rng = np.random.default_rng(0)
    for z in rng.normal(size=(10, 5)) * 1.5:
        fd = central_diff(lambda v: float(land.potential(v)[0]), z, h=1e-6)
        assert np.max(np.abs(land.potential_grad(z)[0] - fd)) < 1e-8


def test_landscape_structure():
    land = Landscape(dim=6, omega=0.7)
    s = land.antisym_matrix()
    assert np.array_equal(s, -s.T)
    assert land.angular_velocity == 0.7
    assert Landscape(kind="double_well").angular_velocity == 0.0
    minima = np.array([[1.0, 0, 0, 0, 0, 0], [-1.0, 0, 0, 0, 0, 0]])
    assert np.all(land.potential(minima) == 0)
    z = np.random.default_rng(1).normal(size=(100, 6)) * 3
    assert np.all(land.potential(z) >= 0)


def test_landscape_config_validation():
    with pytest.raises(ConfigError):
        Landscape(kind="spiral")
    with pytest.raises(ConfigError):
        Landscape.from_dict({"dim": 4, "colour": 1})
    land = Landscape(dim=3, omega=0.1)
    assert Landscape.from_dict(land.to_dict()) == land


def test_time_zero_draws_initial_gaussian():
    land = Landscape(dim=4)
    cells = simulate_population(land, 0.0, 4000, seed=0).cells
    spread = np.array([land.init_std, land.init_std, land.ambient_init_std, land.ambient_init_std])
    assert np.all(np.abs(cells.mean(0) - land.center) < 3 * spread / math.sqrt(4000))


def test_noise_free_double_well_descends_to_minima():
    land = Landscape(kind="double_well", dim=3, sigma_plane=0.0, sigma_ambient=0.0, init_std=0.3)
    start = simulate_population(land, 0.0, 200, seed=1).cells
    end = simulate_population(land, 20.0, 200, seed=1, dt=0.05).cells
    assert np.all(land.potential(end) <= land.potential(start))
    assert np.all(np.abs(np.abs(end[:, 0]) - 1.0) < 1e-3)


def test_gradient_flow_step_halving_keeps_descent_monotone():
    # dt=0.5 overshoots the quartic wells; the integrator must shrink it.
    land = Landscape(kind="double_well", dim=2, sigma_plane=0.0, sigma_ambient=0.0, init_std=1.0)
    start = simulate_population(land, 0.0, 100, seed=2).cells
    end = simulate_population(land, 3.0, 100, seed=2, dt=0.5).cells
    assert np.all(land.potential(end) <= land.potential(start))


def test_rotation_matches_exact_solution():
    omega = 0.5
    land = Landscape(kind="rotation_only", dim=2, omega=omega, sigma_plane=0.0, sigma_ambient=0.0,
                     init_center=(1.0, 0.0), init_std=0.0)
    end = simulate_population(land, math.pi / (2 * omega), 1, seed=0, dt=1e-3).cells[0]
    assert np.linalg.norm(end - np.array([0.0, 1.0])) < 1e-3


def test_simulation_rejects_bad_arguments():
    land = Landscape(dim=2)
    with pytest.raises(ConfigError):
        simulate_population(land, 1.0, 5, seed=0, dt=0.0)
    with pytest.raises(ConfigError):
        simulate_population(land, -1.0, 5, seed=0)
    with pytest.raises(ConfigError):
        simulate_dataset(land, (1.0,), 5, seed=0)


def test_population_independent_of_batching():
    land = Landscape(dim=3)
    big = simulate_population(land, 0.5, 20, seed=4).cells
    small = simulate_population(land, 0.5, 7, seed=4).cells
    assert np.array_equal(big[:7], small)


def test_snapshots_are_distinct_draws():
    ds = simulate_dataset(Landscape(dim=3), (0.0, 0.0001), 50, seed=5)
    assert not np.allclose(ds.snapshots[0].cells, ds.snapshots[1].cells, atol=1e-2)


def test_dt_halving_changes_endpoint_distance_below_one_percent():
    assert dt_convergence_gap(Landscape(), 2.0, 400, seed=0) < 0.01


def test_noise_free_clones_share_one_fate():
    land = Landscape(dim=3, sigma_plane=0.0, sigma_ambient=0.0, init_std=0.3)
    bench = simulate_clones(land, 0.0, 6.0, 20, 8, seed=0)
    for c in range(20):
        assert len(set(bench.daughters.fates[bench.daughters.clone_ids == c])) == 1
    assert set(np.unique(bench.ratios[~np.isnan(bench.ratios)])) <= {0.0, 1.0}


def test_saddle_clones_split_evenly_on_average():
    land = Landscape(kind="double_well", dim=2, init_center=(0.0, 0.0), init_std=0.0)
    means = [np.nanmean(simulate_clones(land, 0.0, 4.0, 10, 60, seed=s).ratios) for s in range(4)]
    assert abs(np.mean(means) - 0.5) < 0.05


def test_clone_ratios_in_unit_interval_and_majority_fate():
    bench = simulate_clones(Landscape(dim=3), 0.25, 2.0, 15, 20, seed=1)
    r = bench.ratios[~np.isnan(bench.ratios)]
    assert np.all((r >= 0) & (r <= 1))
    for c, fate in zip(bench.source.clone_ids, bench.source.fates):
        labels = bench.daughters.fates[bench.daughters.clone_ids == c]
        left, right = np.sum(labels == "left_well"), np.sum(labels == "right_well")
        expected = "undecided" if left == right else ("left_well" if left > right else "right_well")
        assert fate == expected


def test_fate_labels_and_ratio():
    cells = np.array([[-1.0, 0], [-0.31, 0], [0.1, 0], [0.3, 0], [2.0, 0]])
    assert list(fate_of(cells)) == ["left_well", "left_well", "undecided", "right_well", "right_well"]
    assert list(fate_of(cells, shift=2.0))[-1] == "undecided"
    assert fate_ratio(fate_of(cells)) == 0.5
    assert math.isnan(fate_ratio(np.array(["undecided"])))


def test_propagate_zero_duration_is_identity():
    z = np.random.default_rng(0).normal(size=(4, 3))
    assert np.array_equal(propagate(Landscape(dim=3), z, 0.0, seed=0), z)
    with pytest.raises(ConfigError):
        propagate(Landscape(dim=3), z, -1.0, seed=0)


# ------------------------------------------------------------------ datasets
def test_dataset_round_trip(tmp_path, small_dataset):
    path = write_dataset(small_dataset, tmp_path / "d.chds")
    back = read_dataset(path)
    assert back.equals(small_dataset)
    for i in range(len(back.snapshots)):
        assert np.array_equal(back.train(i), small_dataset.train(i))


def test_clone_dataset_round_trip(tmp_path):
    bench = simulate_clones(Landscape(dim=3), 0.25, 1.0, 5, 4, seed=2)
    path = write_dataset(bench.to_dataset({"kind": "clones"}), tmp_path / "c.chds")
    back = CloneBenchmark.from_dataset(read_dataset(path))
    assert back.source.equals(bench.source) and back.daughters.equals(bench.daughters)
    np.testing.assert_array_equal(back.ratios, bench.ratios)


def test_format_header_and_rows(small_dataset):
    text = dataset_text(small_dataset)
    lines = text.splitlines()
    assert lines[0] == f"CHREODE-DS v1 d=4 T=4"
    assert lines[1].startswith("SNAP t=0.25 n=120 clones=0")
    assert len(lines[2].split()) == 4


def test_corrupted_cell_count_is_reported(small_dataset):
    text = dataset_text(small_dataset).replace("n=120", "n=119", 1)
    with pytest.raises(DatasetFormatError, match="n=119"):
        parse_dataset(text)
    with pytest.raises(DatasetFormatError):
        parse_dataset(dataset_text(small_dataset).replace("n=120", "n=121", 1))


@pytest.mark.parametrize(
    "mutate",
    [
        lambda t: t.replace("CHREODE-DS v1", "CHREODE-DS v2", 1),
        lambda t: t.replace("CHREODE-DS", "CHREODE-XX", 1),
        lambda t: "\n".join(t.splitlines()[:50]),
        lambda t: "",
        lambda t: t.replace("SNAP t=0.25", "SNAP x=0.25", 1),
    ],
)
def test_malformed_files_rejected(mutate, small_dataset):
    with pytest.raises(DatasetFormatError):
        parse_dataset(mutate(dataset_text(small_dataset)))


def test_empty_snapshot_rejected_at_write(tmp_path):
    ds = TrajectoryDataset([Snapshot(0.0, np.zeros((0, 2))), Snapshot(1.0, np.ones((2, 2)))])
    with pytest.raises(DataError):
        write_dataset(ds, tmp_path / "e.chds")


def test_missing_dataset_file(tmp_path):
    with pytest.raises(DataError):
        read_dataset(tmp_path / "nope.chds")


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 2), elements=st.floats(-1e300, 1e300, allow_nan=False)))
def test_values_survive_text_format(cells):
    ds = TrajectoryDataset([Snapshot(0.5, cells), Snapshot(1.5, cells[::-1].copy())])
    snaps = parse_dataset(dataset_text(ds))
    assert all(np.array_equal(a.cells, b.cells) for a, b in zip(snaps, ds.snapshots))


def test_split_is_deterministic_and_disjoint(small_dataset):
    for i in range(len(small_dataset.snapshots)):
        tr, te = small_dataset.split_indices(i)
        assert len(np.intersect1d(tr, te)) == 0
        assert len(tr) + len(te) == small_dataset.snapshots[i].n
        assert len(te) == 24
        tr2, te2 = small_dataset.split_indices(i)
        assert np.array_equal(tr, tr2) and np.array_equal(te, te2)


def test_dataset_validation():
    with pytest.raises(DataError):
        TrajectoryDataset([Snapshot(1.0, np.ones((2, 2))), Snapshot(0.5, np.ones((2, 2)))])
    with pytest.raises(DataError):
        TrajectoryDataset([Snapshot(0.0, np.ones((2, 2))), Snapshot(1.0, np.ones((2, 3)))])
    with pytest.raises(DataError):
        Snapshot(0.0, np.ones((2, 2)), clone_ids=[0, 1], fates=["left_well", "sideways"])


def test_losses_invariant_to_cell_order():
    ds = simulate_dataset(Landscape(dim=3), (0.25, 1.0), 40, seed=6)
    src, tgt = (torch.as_tensor(s.cells) for s in ds.snapshots)
    perm = torch.randperm(40, generator=torch.Generator().manual_seed(0))
    assert float(mmd(src, tgt)) == pytest.approx(float(mmd(src, tgt[perm])), rel=1e-12)
    assert float(sinkhorn_cost(src, tgt)) == pytest.approx(float(sinkhorn_cost(src, tgt[perm])), rel=1e-9)
    model = build_variant("selected", 3, width=8, depth=1, rank=2)
    noise = torch.zeros(40, 1, 3, dtype=torch.float64)
    a = composite_loss(model, src, tgt, 0.75, noise).to_record()
    b = composite_loss(model, src, tgt[perm], 0.75, noise).to_record()
    for k in a:
        assert a[k] == pytest.approx(b[k], rel=1e-9, abs=1e-14)
