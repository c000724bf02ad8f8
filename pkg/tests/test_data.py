import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from transmeter.data import (
    Batch,
    Dataset,
    balanced_batches,
    fit_norm_stats,
    flip_labels,
    load_csv,
    load_registry,
    make_folds,
    split,
    write_csv,
    znormalize,
)
from transmeter.errors import InvalidArgumentError, LoadError, ShapeError


def toy(n, d=2, seed=0, name="toy"):
    rng = np.random.default_rng(seed)
    return Dataset(name, rng.normal(size=(n, d)), rng.integers(0, 2, size=n))


# Dataset ----------------------------------------------------------------------


def test_dataset_rejects_bad_labels_and_shapes():
    with pytest.raises(InvalidArgumentError):
        Dataset("x", np.zeros((2, 1)), [0, 2])
    with pytest.raises(ShapeError):
        Dataset("x", np.zeros((3, 1)), [0, 1])
    with pytest.raises(InvalidArgumentError):
        Dataset("x", np.zeros((0, 1)), [])


# load_csv ---------------------------------------------------------------------


def test_load_csv_maps_positive_label(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("a,b,y\n1,2,yes\n3,4,no\n5,6,yes\n")
    ds = load_csv(p, "y", "yes")
    assert ds.labels.tolist() == [1, 0, 1]
    assert ds.features.tolist() == [[1, 2], [3, 4], [5, 6]]
    assert ds.name == "d"


def test_label_column_can_sit_anywhere(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("y,a\n1,0.5\n0,1.5\n")
    ds = load_csv(p, "y", "1")
    assert ds.features.ravel().tolist() == [0.5, 1.5]
    assert ds.labels.tolist() == [1, 0]


def test_three_label_values_is_an_error(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("a,y\n1,x\n2,y\n3,z\n")
    with pytest.raises(LoadError, match="3 distinct"):
        load_csv(p, "y", "x")


def test_nan_cell_names_row_and_column(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("a,b,y\n1,2,1\n3,NaN,0\n")
    with pytest.raises(LoadError, match=r"row 3, column 'b'"):
        load_csv(p, "y", "1")


def test_unparseable_cell(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("a,y\nhello,1\n")
    with pytest.raises(LoadError, match=r"row 2, column 'a'"):
        load_csv(p, "y", "1")


def test_missing_file_and_column(tmp_path):
    with pytest.raises(LoadError, match="not found"):
        load_csv(tmp_path / "nope.csv", "y", "1")
    p = tmp_path / "d.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(LoadError, match="label column 'y'"):
        load_csv(p, "y", "1")


def test_csv_round_trip_is_exact(tmp_path):
    ds = toy(7, 3)
    write_csv(ds, tmp_path / "t.csv")
    back = load_csv(tmp_path / "t.csv", "label", "1")
    assert back.features.tobytes() == ds.features.tobytes()
    assert back.labels.tolist() == ds.labels.tolist()


# registry ---------------------------------------------------------------------


def test_registry_resolves_relative_paths(tmp_path):
    (tmp_path / "data").mkdir()
    (tmp_path / "data" / "a.csv").write_text("x,y\n1,1\n2,0\n")
    reg = tmp_path / "reg.ini"
    reg.write_text("[alpha]\ncsv = data/a.csv\nlabel_column = y\n\n[beta]\ncsv = b.csv\nlabel_column = y\n"
                   "positive_label = yes\ncheckpoint = models/b.json\n")
    r = load_registry(reg)
    assert r.names() == ["alpha", "beta"]
    assert r["alpha"].positive_label == "1"
    assert r["alpha"].load().size == 2
    assert r.checkpoint_path("alpha") == tmp_path / "checkpoints" / "alpha.json"
    assert r.checkpoint_path("beta") == tmp_path / "models" / "b.json"
    with pytest.raises(LoadError, match="gamma"):
        r["gamma"]


def test_registry_duplicate_names_rejected(tmp_path):
    reg = tmp_path / "reg.ini"
    reg.write_text("[a]\ncsv = a.csv\nlabel_column = y\n[a]\ncsv = b.csv\nlabel_column = y\n")
    with pytest.raises(LoadError):
        load_registry(reg)


def test_registry_entry_needs_csv(tmp_path):
    reg = tmp_path / "reg.ini"
    reg.write_text("[a]\nlabel_column = y\n")
    with pytest.raises(LoadError, match="csv"):
        load_registry(reg)


# split ------------------------------------------------------------------------


def test_split_sizes_for_690_rows():
    train, test = split(toy(690), 0.7, np.random.default_rng(0))
    assert (train.size, test.size) == (483, 207)


def test_split_is_deterministic():
    ds = toy(10)
    a = split(ds, 0.7, np.random.default_rng(3))
    b = split(ds, 0.7, np.random.default_rng(3))
    assert a[0].features.tobytes() == b[0].features.tobytes()
    assert a[1].features.tobytes() == b[1].features.tobytes()


@given(st.integers(2, 200), st.floats(0.05, 0.95), st.integers(0, 2**32 - 1))
def test_split_is_a_partition(n, frac, seed):
    ds = Dataset("i", np.arange(n, dtype=float).reshape(-1, 1), np.zeros(n))
    if math.floor(n * frac + 1e-9) in (0, n):
        with pytest.raises(InvalidArgumentError):
            split(ds, frac, np.random.default_rng(seed))
        return
    train, test = split(ds, frac, np.random.default_rng(seed))
    rows = np.concatenate([train.features.ravel(), test.features.ravel()])
    assert sorted(rows.tolist()) == list(range(n))


def test_split_rejects_bad_fraction():
    with pytest.raises(InvalidArgumentError):
        split(toy(10), 1.0, np.random.default_rng(0))


# znormalize -------------------------------------------------------------------


def test_znormalize_hand_values():
    ds = Dataset("z", np.array([[1.0], [2.0], [3.0]]), [0, 1, 0])
    (out,), stats = znormalize(ds)
    assert stats.mean[0] == 2.0
    assert stats.std[0] == pytest.approx(math.sqrt(2 / 3), rel=1e-12)
    np.testing.assert_allclose(out.features.ravel(), [-1.224745, 0, 1.224745], atol=1e-6)


def test_constant_column_uses_unit_std():
    ds = Dataset("z", np.array([[5.0, 1.0], [5.0, 2.0]]), [0, 1])
    (out,), stats = znormalize(ds)
    assert stats.std[0] == 1.0
    assert not out.features[:, 0].any()


def test_test_split_uses_training_statistics():
    train = Dataset("tr", np.array([[0.0], [2.0]]), [0, 1])
    test = Dataset("te", np.array([[4.0]]), [1])
    (_, t), stats = znormalize(train, [test])
    assert t.features[0, 0] == (4.0 - 1.0) / 1.0


def test_znormalize_dim_mismatch():
    with pytest.raises(ShapeError):
        znormalize(toy(4, 2), [toy(4, 3)])


@settings(max_examples=40)
@given(st.integers(2, 50), st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_normalized_training_columns_are_standard(n, d, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(loc=rng.uniform(-50, 50, size=d), scale=rng.uniform(0.1, 20, size=d), size=(n, d))
    (out,), stats = znormalize(Dataset("r", x, np.zeros(n)))
    assert np.all(np.abs(out.features.mean(axis=0)) < 1e-9)
    varying = np.ptp(x, axis=0) > 0
    np.testing.assert_allclose(out.features.std(axis=0)[varying], 1.0, atol=1e-9)


# folds ------------------------------------------------------------------------


def test_fold_sizes():
    assert make_folds(toy(9), 3, np.random.default_rng(0)).sizes() == [3, 3, 3]
    assert sorted(make_folds(toy(10), 3, np.random.default_rng(0)).sizes()) == [3, 3, 4]


def test_folds_deterministic_and_k_bounds():
    a = make_folds(toy(10), 3, np.random.default_rng(5))
    b = make_folds(toy(10), 3, np.random.default_rng(5))
    assert a.assignments.tolist() == b.assignments.tolist()
    with pytest.raises(InvalidArgumentError):
        make_folds(toy(2), 3, np.random.default_rng(0))


@given(st.integers(2, 80), st.integers(2, 10), st.integers(0, 1000))
def test_folds_cover_every_row_once(n, k, seed):
    if k > n:
        return
    plan = make_folds(toy(n), k, np.random.default_rng(seed))
    val = np.concatenate([plan.indices(f)[1] for f in range(k)])
    assert sorted(val.tolist()) == list(range(n))
    sizes = plan.sizes()
    assert max(sizes) - min(sizes) <= 1
    for f in range(k):
        train, v = plan.indices(f)
        assert not set(train) & set(v)


# flip -------------------------------------------------------------------------


def test_flip_examples():
    ds = Dataset("f", np.zeros((3, 1)), [0, 1, 1])
    assert flip_labels(ds).labels.tolist() == [1, 0, 0]
    assert flip_labels(Dataset("f", np.zeros((1, 1)), [1])).labels.tolist() == [0]


@given(st.lists(st.integers(0, 1), min_size=1, max_size=30), st.integers(0, 100))
def test_flip_is_an_involution(labels, seed):
    x = np.random.default_rng(seed).normal(size=(len(labels), 2))
    ds = Dataset("f", x, labels)
    twice = flip_labels(flip_labels(ds))
    assert twice.labels.tolist() == labels
    assert flip_labels(ds).features.tobytes() == x.tobytes()


# batches ----------------------------------------------------------------------


def test_balanced_batches_cycle_smaller_pool():
    src = toy(100, 2, 0)
    tgt = toy(40, 3, 1)
    batches = list(balanced_batches(src, tgt, 20, np.random.default_rng(0)))
    assert len(batches) == 5
    for b in batches:
        assert (b.n_source, b.n_target) == (20, 20)
        assert b.domain_labels.mean() == 0.5
    seen = np.concatenate([b.source_features[:, 0] for b in batches])
    assert np.unique(seen).size == 100


def test_balanced_batches_deterministic():
    src, tgt = toy(30, 2, 0), toy(12, 3, 1)
    a = list(balanced_batches(src, tgt, 5, np.random.default_rng(9)))
    b = list(balanced_batches(src, tgt, 5, np.random.default_rng(9)))
    assert [x.target_features.tobytes() for x in a] == [x.target_features.tobytes() for x in b]


def test_batch_size_capped_by_smaller_pool():
    batches = list(balanced_batches(toy(50), toy(8), 32, np.random.default_rng(0)))
    assert all(b.n_target == 8 and b.n_source == 8 for b in batches)


def test_batch_domain_labels_source_first():
    b = Batch.from_datasets(toy(2, 2), toy(3, 4))
    assert b.domain_labels.tolist() == [0, 0, 1, 1, 1]
    assert b.origin_dims.tolist() == [2, 2, 4, 4, 4]
    assert len(b) == 5


def test_fit_norm_stats_shapes():
    stats = fit_norm_stats(toy(5, 4))
    assert stats.mean.shape == stats.std.shape == (4,)
