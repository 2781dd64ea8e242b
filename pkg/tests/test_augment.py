import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trainvar.augment import (
    AugmentError, SubjectRecord, augmentation_sweep, build_augmented_dataset, evaluate_mae, read_records,
    records_from_family, synthetic_records, train_linear_regressor, train_random_forest, write_records,
)

DATA = Path(__file__).parent / "data"


def tiny_records(n=10, reps=4, d=3, seed=0):
    rng = np.random.default_rng(seed)
    return [SubjectRecord(f"s{i:02d}", float(rng.normal()), {r: rng.normal(size=d) for r in range(1, reps + 1)})
            for i in range(n)]


@settings(max_examples=30, deadline=None)
@given(st.integers(5, 30), st.integers(1, 6), st.data())
def test_row_count_law_and_no_leakage(n, reps, data):
    k = data.draw(st.integers(1, reps))
    seed = data.draw(st.integers(0, 1000))
    recs = tiny_records(n, reps)
    try:
        ds = build_augmented_dataset(recs, k, seed)
    except AugmentError:
        assume_small = round(0.2 * n) < 2 or n - round(0.2 * n) < 2
        assert assume_small
        return
    n_train = len(set(ds.subjects_train))
    assert len(ds.y_train) == k * n_train
    assert len(ds.y_test) == n - n_train
    assert not set(ds.subjects_train) & set(ds.subjects_test)
    assert set(ds.reps_test) == {1}
    assert set(ds.reps_train) == set(range(1, k + 1))


def test_split_is_deterministic_and_order_free():
    recs = tiny_records(20)
    a = build_augmented_dataset(recs, 2, 3)
    b = build_augmented_dataset(list(reversed(recs)), 2, 3)
    assert a.split == b.split
    assert np.array_equal(a.x_train, b.x_train)
    assert build_augmented_dataset(recs, 2, 4).split != a.split


def test_k_out_of_range():
    with pytest.raises(AugmentError):
        build_augmented_dataset(tiny_records(10, 3), 4)
    with pytest.raises(AugmentError):
        build_augmented_dataset(tiny_records(10, 3), 0)


def test_forest_predicts_mean_of_trees():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(60, 3))
    y = x[:, 0] - 2 * x[:, 1] + rng.normal(size=60) * 0.1
    f = train_random_forest(x, y, n_trees=7, max_depth=4, rf_seed=1)
    q = rng.normal(size=(9, 3))
    assert np.array_equal(f.predict(q), f.predict_trees(q).mean(axis=0))
    g = train_random_forest(x, y, n_trees=7, max_depth=4, rf_seed=1)
    assert np.array_equal(f.predict(q), g.predict(q))
    h = train_random_forest(x, y, n_trees=7, max_depth=4, rf_seed=2)
    assert not np.array_equal(f.predict(q), h.predict(q))


def test_depth_zero_forest_without_bootstrap_is_train_mean():
    y = np.array([1.0, 2.0, 6.0])
    f = train_random_forest(np.arange(3.0)[:, None], y, n_trees=3, max_depth=0, bootstrap=False)
    assert np.allclose(f.predict(np.array([[10.0], [-3.0]])), 3.0)


def test_step_function_fit_exactly_without_bootstrap():
    x = np.linspace(0, 1, 40)[:, None]
    y = np.where(x[:, 0] < 0.5, 1.0, 5.0)
    f = train_random_forest(x, y, n_trees=5, max_depth=3, bootstrap=False)
    assert evaluate_mae(f, x, y) == 0.0


def test_ridge_matches_frozen_reference():
    ref = json.loads((DATA / "ridge_20x5.json").read_text())
    m = train_linear_regressor(np.array(ref["x"]), np.array(ref["y"]), ridge=1e-6)
    assert np.allclose(m.coef, ref["coef"], rtol=1e-9, atol=1e-12)
    assert m.intercept == pytest.approx(ref["intercept"], rel=1e-9)


def test_huge_ridge_predicts_the_mean():
    rng = np.random.default_rng(1)
    x, y = rng.normal(size=(30, 4)), rng.normal(size=30)
    m = train_linear_regressor(x, y, ridge=1e12)
    assert np.allclose(m.predict(x), y.mean(), atol=1e-9)


def test_singular_system_needs_ridge():
    x = np.column_stack([np.arange(5.0), 2 * np.arange(5.0)])
    with pytest.raises(AugmentError):
        train_linear_regressor(x, np.arange(5.0), ridge=0.0)
    train_linear_regressor(x, np.arange(5.0), ridge=1e-3)


def test_mae_examples():
    class Const:
        def predict(self, x):
            return np.zeros(len(x))
    assert evaluate_mae(Const(), np.zeros((3, 1)), np.array([1.0, -2.0, 3.0])) == pytest.approx(2.0)
    with pytest.raises(AugmentError):
        evaluate_mae(Const(), np.zeros((0, 1)), np.array([]))


def test_duplicated_repetitions_give_flat_sweep():
    base = synthetic_records(60, 1, 3, seed=2)
    recs = [SubjectRecord(r.subject_id, r.target, {i: r.repetitions[1] for i in range(1, 5)}) for r in base]
    res = augmentation_sweep(recs, 4, "linear", seeds=[0, 1])
    # identical rows only reweight the least-squares problem uniformly
    assert abs(res.fit.slope) < 1e-9


def test_sweep_rejects_bad_k_and_model():
    recs = tiny_records(10, 3)
    with pytest.raises(AugmentError):
        augmentation_sweep(recs, 4)
    with pytest.raises(AugmentError):
        augmentation_sweep(recs, 2)
    with pytest.raises(AugmentError):
        augmentation_sweep(recs, 3, "svm")


def test_sweep_outputs(tmp_path):
    res = augmentation_sweep(synthetic_records(40, 3, 2, seed=1), 3, "forest", seeds=[0, 1], n_trees=5, max_depth=3)
    res.write(tmp_path)
    lines = (tmp_path / "sweep.csv").read_text().splitlines()
    assert lines[0] == "k,mean_MAE,std_MAE" and len(lines) == 4
    summary = json.loads((tmp_path / "sweep.json").read_text())
    assert summary["k_max"] == 3 and summary["model"] == "forest"


def test_records_csv_round_trip(tmp_path):
    recs = tiny_records(4, 3)
    write_records(tmp_path / "r.csv", recs, ["a", "b", "c"])
    back, names = read_records(tmp_path / "r.csv")
    assert names == ["a", "b", "c"]
    for r, s in zip(recs, back):
        assert r.subject_id == s.subject_id and r.target == s.target
        assert all(np.array_equal(r.repetitions[k], s.repetitions[k]) for k in r.repetitions)


def test_records_csv_errors(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("subject_id,repetition_id,target,a\ns1,1,0.5,1\ns1,1,0.5,2\n")
    with pytest.raises(AugmentError, match="duplicate"):
        read_records(p)
    p.write_text("subject_id,repetition_id,target,a\ns1,1,0.5,1\ns1,2,0.7,2\n")
    with pytest.raises(AugmentError, match="conflicting"):
        read_records(p)
    p.write_text("id,target\n")
    with pytest.raises(AugmentError):
        read_records(p)


def test_records_from_family_shapes():
    true = np.array([[10.0, 4.0], [12.0, 6.0], [8.0, 5.0]])
    members = [true + 1, true - 1]
    recs = records_from_family(members, true, seed=0)
    assert len(recs) == 3 and recs[0].rep_ids == [1, 2]
    assert np.array_equal(recs[1].repetitions[2], true[1] - 1)


def test_subject_record_validation():
    with pytest.raises(AugmentError):
        SubjectRecord("s", 0.0, {})
    with pytest.raises(AugmentError):
        SubjectRecord("s", 0.0, {1: np.zeros(2), 2: np.zeros(3)})
    assert SubjectRecord("s", 0.0, {3: np.zeros(1), 1: np.ones(1)}).rep_ids == [1, 3]
