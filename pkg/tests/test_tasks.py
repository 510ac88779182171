import numpy as np
import pytest

from ella.tasks import (
    DatasetFormatError,
    StreamOrder,
    TaskSpec,
    generate_task,
    interference_stream,
    load_csv,
    make_stream,
    rotation_matrix,
    task_means,
)


def _same(d1, d2):
    return np.array_equal(d1.features, d2.features) and np.array_equal(d1.labels, d2.labels)


@pytest.mark.parametrize("kind", ["rotated-gaussians", "permuted-features", "label-remap"])
def test_deterministic(kind):
    spec = TaskSpec(kind, {"angle": 0.3}, seed=5, samples_per_class=20, test_samples_per_class=10)
    a, b = generate_task(spec), generate_task(spec)
    assert _same(a[0], b[0]) and _same(a[1], b[1])


def test_train_test_disjoint_and_balanced():
    train, test = generate_task(TaskSpec(seed=2, samples_per_class=30, test_samples_per_class=11))
    assert np.bincount(train.labels).tolist() == [30] * 4
    assert np.bincount(test.labels).tolist() == [11] * 4
    rows = {tuple(r) for r in train.features}
    assert not any(tuple(r) in rows for r in test.features)


def test_zero_angle_keeps_base_means():
    spec = TaskSpec(params={"angle": 0.0})
    base = task_means(TaskSpec())
    np.testing.assert_array_equal(task_means(spec), base)


def test_half_turn_swaps_antipodal_means():
    means = [[1.5, 0.5], [-1.5, -0.5]]
    rotated = task_means(TaskSpec(params={"means": means, "angle": np.pi}))
    np.testing.assert_allclose(rotated, [[-1.5, -0.5], [1.5, 0.5]], atol=1e-15)


def test_rotation_matrix_orthogonal_with_odd_tail():
    R = rotation_matrix(5, 0.7)
    np.testing.assert_allclose(R @ R.T, np.eye(5), atol=1e-15)
    assert R[4, 4] == 1.0


def test_permuted_and_remapped_share_base_inputs():
    p = dict(samples_per_class=10, test_samples_per_class=5, seed=3)
    base, _ = generate_task(TaskSpec("rotated-gaussians", {}, **p))
    perm, _ = generate_task(TaskSpec("permuted-features", {"permutation_seed": 9}, **p))
    remap, _ = generate_task(TaskSpec("label-remap", {"mapping": [1, 2, 3, 0]}, **p))
    order = np.random.default_rng(9).permutation(16)
    np.testing.assert_array_equal(perm.features, base.features[:, order])
    np.testing.assert_array_equal(remap.features, base.features)
    np.testing.assert_array_equal(remap.labels, (base.labels + 1) % 4)


def test_stream_lengths_and_seed_isolation():
    one = StreamOrder([TaskSpec(seed=1, samples_per_class=5, test_samples_per_class=5)])
    assert len(make_stream(one)) == 1
    a, b = make_stream(StreamOrder([
        TaskSpec(seed=1, samples_per_class=300, test_samples_per_class=5),
        TaskSpec(seed=2, samples_per_class=300, test_samples_per_class=5),
    ]))
    assert not _same(a[0], b[0])
    for c in range(4):
        ma = a[0].features[a[0].labels == c].mean(0)
        mb = b[0].features[b[0].labels == c].mean(0)
        assert np.linalg.norm(ma - mb) < 0.5


def test_order_changes_only_position():
    s1, s2 = (TaskSpec(params={"angle": a}, seed=i, samples_per_class=8, test_samples_per_class=4)
              for i, a in enumerate([0.0, 1.0]))
    fwd = make_stream(StreamOrder([s1, s2]))
    rev = make_stream(StreamOrder([s2, s1]))
    assert _same(fwd[0][0], rev[1][0]) and _same(fwd[1][1], rev[0][1])


def test_stream_rejects_mismatched_tasks():
    bad = StreamOrder([TaskSpec(), TaskSpec(params={"n_features": 8})])
    with pytest.raises(ValueError, match="task 1"):
        make_stream(bad)


def test_interference_stream_angles():
    s = interference_stream(3)
    assert [t.params["angle"] for t in s.tasks] == pytest.approx([0, np.pi / 2, np.pi])


class TestCsv:
    def test_roundtrip(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("a,b,label\n0.5,1.5,0\n-1,2.25,2\n3,4,1\n")
        ds = load_csv(path)
        np.testing.assert_array_equal(ds.features, [[0.5, 1.5], [-1, 2.25], [3, 4]])
        np.testing.assert_array_equal(ds.labels, [0, 2, 1])
        assert ds.num_classes == 3

    def test_csv_task_split(self, tmp_path):
        path = tmp_path / "d.csv"
        rows = "\n".join(f"{i},{i * 2},{i % 2}" for i in range(30))
        path.write_text("x,y,label\n" + rows + "\n")
        train, test = generate_task(TaskSpec("csv", {"path": str(path)}, seed=1))
        assert len(train) + len(test) == 30 and len(test) == 10
        assert not set(train.features[:, 0]) & set(test.features[:, 0])

    @pytest.mark.parametrize(
        "body, match",
        [
            ("a,label\n1,0\nx,1\n", r":3: column 1 \('a'\)"),
            ("a,label\n1,0\n2,1.5\n", r":3: label column"),
            ("a,label\n1,0\n2\n", r":3: expected 2 columns"),
            ("", "missing header"),
        ],
    )
    def test_malformed(self, tmp_path, body, match):
        path = tmp_path / "bad.csv"
        path.write_text(body)
        with pytest.raises(DatasetFormatError, match=match):
            load_csv(path)
