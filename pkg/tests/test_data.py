import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedprotokd.data import (
    Dataset,
    PartitionPlan,
    dirichlet_partition,
    generate_mixture,
    load_csv,
    pathological_partition,
    save_csv,
    split_public,
)
from fedprotokd.errors import DomainError, ParseError, PrivacyError


@pytest.fixture
def blobs():
    return generate_mixture(6, 8, 100, 1.0, seed=0)


def test_mixture_counts():
    ds = generate_mixture(2, 3, 5, 1.0, seed=0)
    assert ds.n == 10
    assert sorted(np.bincount(ds.labels).tolist()) == [5, 5]


def test_mixture_zero_spread_rows_identical():
    ds = generate_mixture(3, 4, 6, 0.0, seed=1)
    for c in range(3):
        rows = ds.features[ds.labels == c]
        assert np.all(rows == rows[0])


def test_mixture_deterministic():
    a = generate_mixture(4, 5, 20, 0.7, seed=9)
    b = generate_mixture(4, 5, 20, 0.7, seed=9)
    assert np.array_equal(a.features, b.features) and np.array_equal(a.labels, b.labels)


def test_mixture_more_classes_than_dims():
    ds = generate_mixture(10, 2, 3, 0.0, seed=0)
    assert np.unique(ds.features, axis=0).shape[0] == 10


@pytest.mark.parametrize("kwargs", [dict(n_per_class=0), dict(num_classes=1), dict(dim=1), dict(spread=-1.0)])
def test_mixture_domain_errors(kwargs):
    args = dict(num_classes=3, dim=3, n_per_class=4, spread=1.0, seed=0) | kwargs
    with pytest.raises(DomainError):
        generate_mixture(**args)


def test_split_public_sizes_and_partition_law():
    ds = generate_mixture(4, 3, 25, 1.0, seed=0)
    public, private = split_public(ds, 25, seed=3)
    assert (public.n, private.n) == (25, 75)
    assert set(public.index).isdisjoint(private.index)
    assert set(public.index) | set(private.index) == set(range(100))


def test_split_public_is_stratified():
    ds = generate_mixture(5, 3, 40, 1.0, seed=0)
    public, _ = split_public(ds, 50, seed=0)
    assert np.bincount(public.evaluation_labels).tolist() == [10] * 5


def test_split_public_hides_labels():
    ds = generate_mixture(2, 2, 10, 1.0, seed=0)
    public, private = split_public(ds, 4, seed=0)
    with pytest.raises(PrivacyError):
        public.labels
    assert public.evaluation_labels.shape == (4,)
    assert private.labels.shape == (16,)


def test_split_public_too_large():
    ds = generate_mixture(2, 2, 5, 1.0, seed=0)
    with pytest.raises(DomainError):
        split_public(ds, 10, seed=0)


def test_default_public_size_is_2500():
    from fedprotokd.config import ExperimentConfig

    assert ExperimentConfig().public_n == 2500


def _check_partition(plan, ds):
    flat = [i for rows in plan.client_indices for i in rows]
    assert len(flat) == len(set(flat)) == ds.n
    assert set(flat) == set(ds.index.tolist())
    assert all(rows for rows in plan.client_indices)


def test_dirichlet_conservation(blobs):
    plan = dirichlet_partition(blobs, 10, 0.1, seed=4)
    _check_partition(plan, blobs)


def test_dirichlet_reference_alphas_run(blobs):
    for alpha in (0.1, 0.3):
        _check_partition(dirichlet_partition(blobs, 10, alpha, seed=0), blobs)


def test_dirichlet_rejects_bad_alpha(blobs):
    with pytest.raises(DomainError):
        dirichlet_partition(blobs, 10, 0.0, seed=0)


def test_dirichlet_huge_alpha_is_near_uniform():
    ds = generate_mixture(3, 2, 1000, 1.0, seed=0)
    plan = dirichlet_partition(ds, 5, 1e6, seed=1)
    share = 1000 / 5
    for rows in plan.client_indices:
        hist = np.bincount(ds.labels[rows], minlength=3)
        assert np.all(np.abs(hist - share) <= 0.1 * share)


def test_dirichlet_repairs_empty_clients():
    ds = generate_mixture(2, 2, 6, 1.0, seed=0)
    plan = dirichlet_partition(ds, 6, 0.01, seed=2)
    _check_partition(plan, ds)


def test_dirichlet_deterministic(blobs):
    a = dirichlet_partition(blobs, 7, 0.3, seed=11)
    b = dirichlet_partition(blobs, 7, 0.3, seed=11)
    assert a.client_indices == b.client_indices


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 12), st.floats(0.05, 5.0), st.integers(0, 10_000))
def test_dirichlet_partition_law_property(clients, alpha, seed):
    ds = generate_mixture(4, 2, 15, 1.0, seed=seed)
    _check_partition(dirichlet_partition(ds, clients, alpha, seed), ds)


def test_pathological_ten_clients_three_classes():
    ds = generate_mixture(10, 4, 60, 1.0, seed=0)
    plan = pathological_partition(ds, 10, 3, seed=0)
    _check_partition(plan, ds)
    label_sets = [set(ds.labels[rows].tolist()) for rows in plan.client_indices]
    assert all(len(s) == 3 for s in label_sets)
    assert set().union(*label_sets) == set(range(10))


def test_pathological_shards_unbalanced():
    ds = generate_mixture(4, 2, 400, 1.0, seed=0)
    plan = pathological_partition(ds, 8, 2, seed=5)
    sizes = [len(rows) for rows in plan.client_indices]
    assert max(sizes) > min(sizes)
    # every holder gets a share within the seeded [0.5, 1.5] multiplier range
    for c in range(4):
        shares = [int(np.sum(ds.labels[rows] == c)) for rows in plan.client_indices]
        shares = [s for s in shares if s]
        assert max(shares) <= 3 * min(shares) + 1


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 10), st.integers(1, 6), st.integers(0, 10_000))
def test_pathological_property(clients, k, seed):
    s = 6
    ds = generate_mixture(s, 2, 30, 1.0, seed=seed)
    if clients * k < s:
        with pytest.raises(DomainError):
            pathological_partition(ds, clients, k, seed)
        return
    plan = pathological_partition(ds, clients, k, seed)
    _check_partition(plan, ds)
    sets = [set(ds.labels[rows].tolist()) for rows in plan.client_indices]
    assert all(len(x) == k for x in sets)
    assert set().union(*sets) == set(range(s))


def test_pathological_infeasible():
    ds = generate_mixture(10, 2, 10, 1.0, seed=0)
    with pytest.raises(DomainError):
        pathological_partition(ds, 3, 3, seed=0)
    with pytest.raises(DomainError):
        pathological_partition(ds, 5, 11, seed=0)


def test_partition_on_private_pool_uses_source_rows():
    ds = generate_mixture(3, 2, 20, 1.0, seed=0)
    public, private = split_public(ds, 12, seed=0)
    plan = dirichlet_partition(private, 4, 0.5, seed=0).with_public(public.index)
    flat = sorted(i for rows in plan.client_indices for i in rows)
    assert sorted(flat + plan.public_indices) == list(range(60))


def test_plan_json_round_trip(tmp_path, blobs):
    plan = dirichlet_partition(blobs, 5, 0.3, seed=0).with_public([])
    path = tmp_path / "plan.json"
    plan.save(path)
    again = PartitionPlan.load(path)
    assert again.client_indices == plan.client_indices
    assert again.public_indices == plan.public_indices


def test_plan_rejects_overlap():
    with pytest.raises(DomainError):
        PartitionPlan([[0, 1], [1, 2]])
    with pytest.raises(DomainError):
        PartitionPlan([[0], []])


# csv -----------------------------------------------------------------------

def test_load_csv_well_formed(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("0,1.0,2.0\n1,3.0,4.0\n2,5.5,-1\n")
    ds = load_csv(path)
    assert ds.n == 3 and ds.dim == 2 and ds.num_classes == 3


def test_load_csv_header_and_round_trip(tmp_path):
    ds = generate_mixture(3, 4, 5, 1.0, seed=2)
    path = tmp_path / "d.csv"
    save_csv(ds, path)
    again = load_csv(path)
    assert np.array_equal(again.features, ds.features)
    assert np.array_equal(again.labels, ds.labels)
    path.write_text("label,a,b\n0,1,2\n")
    assert load_csv(path).n == 1


def test_load_csv_ragged_names_row(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("0,1.0,2.0\n1,3.0\n")
    with pytest.raises(ParseError, match="line 2") as info:
        load_csv(path)
    assert info.value.line == 2


def test_load_csv_non_numeric(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("0,1.0,2.0\n1,x,4.0\n")
    with pytest.raises(ParseError, match="line 2"):
        load_csv(path)


def test_load_csv_empty(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("")
    with pytest.raises(DomainError, match="no data rows"):
        load_csv(path)


def test_load_csv_missing(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_csv(tmp_path / "nope.csv")


def test_dataset_validates_labels():
    with pytest.raises(DomainError):
        Dataset(np.zeros((2, 2)), np.array([0, 3]), 2)
