import numpy as np
import pytest

from qivreg.data import (
    CoefficientVector,
    Dataset,
    IndexSet,
    load_csv,
    partition,
    standardize,
)
from qivreg.errors import (
    EmptySelection,
    FullSelection,
    ValidationError,
    ZeroVarianceColumn,
)


def make_raw(rng, n=40, p=6):
    X = rng.standard_normal((n, p)) * rng.uniform(0.5, 3, size=p) + rng.uniform(-2, 2, size=p)
    y = rng.standard_normal(n) + 1.5
    return Dataset.from_arrays(X, y)


class TestIndexSet:
    def test_sorted_unique(self):
        s = IndexSet.from_iterable([3, 1, 7])
        assert s.indices == (1, 3, 7)
        assert list(s.zero_based()) == [0, 2, 6]

    def test_rejects_duplicates_and_nonpositive(self):
        with pytest.raises(ValidationError):
            IndexSet((1, 1, 2))
        with pytest.raises(ValidationError):
            IndexSet((0, 2))
        with pytest.raises(ValidationError):
            IndexSet((3, 2))

    def test_complement(self):
        s = IndexSet((1, 3))
        assert s.complement(4).indices == (2, 4)


class TestStandardize:
    def test_already_standardized_column_unchanged(self, rng):
        n = 200
        col = rng.standard_normal(n)
        col = (col - col.mean()) / col.std()
        other = rng.standard_normal(n) * 3 + 1
        ds = Dataset.from_arrays(np.column_stack([col, other]), rng.standard_normal(n))
        out = standardize(ds)
        assert np.max(np.abs(out.X[:, 0] - col)) < 1e-12

    def test_two_point_column(self):
        # column [0, 2]: mean 1, divide-by-n sd 1 -> [-1, 1]
        ds = Dataset.from_arrays(np.array([[0.0, 1.0], [2.0, 2.0]]), np.array([0.0, 1.0]))
        out = standardize(ds)
        assert np.allclose(out.X[:, 0], [-1.0, 1.0])
        assert out.column_means[0] == 1.0
        assert np.isclose(out.column_scales[0], 1.0)

    def test_idempotent(self, rng):
        ds = make_raw(rng)
        once = standardize(ds)
        twice = standardize(once)
        assert np.max(np.abs(twice.X - once.X)) < 1e-10
        assert np.max(np.abs(twice.y - once.y)) < 1e-10

    def test_invariants_hold(self, rng):
        out = standardize(make_raw(rng))
        assert out.standardized
        assert np.max(np.abs(out.X.mean(axis=0))) < 1e-10
        assert np.max(np.abs(out.X.var(axis=0) - 1)) < 1e-8
        assert abs(out.y.mean()) < 1e-10

    def test_zero_variance_column_rejected(self, rng):
        X = rng.standard_normal((10, 3))
        X[:, 1] = 4.2
        with pytest.raises(ZeroVarianceColumn):
            standardize(Dataset.from_arrays(X, rng.standard_normal(10)))

    def test_commutes_with_row_permutation(self, rng):
        ds = make_raw(rng)
        perm = rng.permutation(ds.n)
        direct = standardize(ds).X[perm]
        permuted = standardize(Dataset.from_arrays(ds.X[perm], ds.y[perm])).X
        assert np.max(np.abs(direct - permuted)) < 1e-12

    def test_transform_new_matches_training_map(self, rng):
        ds = make_raw(rng)
        out = standardize(ds)
        assert np.max(np.abs(out.transform_new(ds.X) - out.X)) < 1e-12


class TestPartition:
    def test_direct_gather(self, rng):
        X = np.arange(12.0).reshape(4, 3)
        ds = Dataset.from_arrays(X, np.zeros(4))
        part = partition(ds, IndexSet((1, 3)))
        assert np.array_equal(part.Z, X[:, [0, 2]])
        assert np.array_equal(part.U, X[:, [1]])

    def test_boundary_one_removed(self, rng):
        ds = make_raw(rng, p=5)
        part = partition(ds, IndexSet((1, 2, 3, 4)))
        assert part.U.shape[1] == 1

    def test_round_trip_exact(self, rng):
        ds = make_raw(rng, p=8)
        part = partition(ds, IndexSet((2, 5, 7)))
        assert np.array_equal(part.reassemble(), ds.X)
        assert len(part.z_indices) + len(part.u_indices) == ds.p

    def test_errors(self, rng):
        ds = make_raw(rng, p=4)
        with pytest.raises(EmptySelection):
            partition(ds, IndexSet(()))
        with pytest.raises(FullSelection):
            partition(ds, IndexSet((1, 2, 3, 4)))
        with pytest.raises(ValidationError):
            partition(ds, IndexSet((1, 9)))


class TestDatasetValidation:
    def test_rejects_nonfinite(self):
        with pytest.raises(ValidationError):
            Dataset.from_arrays(np.array([[1.0, np.nan], [0.0, 1.0]]), np.zeros(2))

    def test_rejects_tiny(self):
        with pytest.raises(ValidationError):
            Dataset.from_arrays(np.ones((1, 2)), np.zeros(1))

    def test_standardized_flag_checked(self, rng):
        X = rng.standard_normal((30, 2)) + 5.0
        with pytest.raises(ValidationError):
            Dataset(X=X, y=np.zeros(30), column_means=np.zeros(2),
                    column_scales=np.ones(2), standardized=True)

    def test_coefficient_vector_finite(self):
        with pytest.raises(ValidationError):
            CoefficientVector(np.array([1.0, np.inf]))


class TestCsv:
    def test_round_trip(self, tmp_path, rng):
        ds = make_raw(rng, n=12, p=3)
        path = tmp_path / "d.csv"
        header = "y," + ",".join(f"x{j}" for j in range(1, 4))
        lines = [header]
        for i in range(ds.n):
            lines.append(",".join(repr(float(v)) for v in [ds.y[i], *ds.X[i]]))
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        loaded = load_csv(path)
        assert np.array_equal(loaded.X, ds.X)
        assert np.array_equal(loaded.y, ds.y)

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("resp,x1\n1.0,2.0\n3.0,4.0\n", encoding="utf-8")
        with pytest.raises(ValidationError):
            load_csv(path)

    def test_bad_cell_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("y,x1\n1.0,2.0\noops,4.0\n", encoding="utf-8")
        with pytest.raises(ValidationError):
            load_csv(path)
