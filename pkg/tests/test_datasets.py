import numpy as np
import pytest

from vqtsgen import datasets as ds
from vqtsgen.errors import ParseError


def test_load_minimal_record(tmp_path):
    p = tmp_path / "mini.tsv"
    p.write_text("1\t0.0\t1.0\n")
    got = ds.load_tsv(p)
    assert got.labels.tolist() == [0]
    assert np.allclose(got.values, [[0.0, 1.0]])


def test_load_empty_file_errors(tmp_path):
    p = tmp_path / "empty.tsv"
    p.write_text("")
    with pytest.raises(ParseError, match="no records"):
        ds.load_tsv(p)


def test_load_remaps_labels_by_first_appearance(tmp_path):
    p = tmp_path / "ford.tsv"
    p.write_text("-1\t0.5\t0.1\n1\t0.2\t0.3\n-1\t0.4\t0.9\n")
    got = ds.load_tsv(p)
    assert got.labels.tolist() == [0, 1, 0]


def test_load_ragged_line_names_line(tmp_path):
    p = tmp_path / "ragged.tsv"
    p.write_text("0\t1.0\t2.0\n0\t1.0\n")
    with pytest.raises(ParseError, match="ragged.tsv:2"):
        ds.load_tsv(p)


def test_load_non_numeric_names_line(tmp_path):
    p = tmp_path / "bad.tsv"
    p.write_text("0\t1.0\tbogus\n")
    with pytest.raises(ParseError, match="bad.tsv:1"):
        ds.load_tsv(p)


def test_tsv_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    original = ds.SeriesSet(
        values=rng.normal(size=(7, 12)).astype(np.float32),
        labels=rng.integers(0, 3, size=7),
    )
    p = tmp_path / "round.tsv"
    ds.write_tsv(p, original, header_lines=["provenance=test"])
    back = ds.load_tsv(p)
    assert np.all(np.abs(back.values - original.values) < 1e-9)
    # labels are remapped by first appearance; remap the originals the same way
    remap = {}
    for lab in original.labels:
        remap.setdefault(int(lab), len(remap))
    assert back.labels.tolist() == [remap[int(l)] for l in original.labels]


def test_znormalize_hand_values():
    out = ds.znormalize(np.array([[1.0, 2.0, 3.0]]))
    assert np.allclose(out, [[-1.2247449, 0.0, 1.2247449]], atol=1e-6)
    assert abs(out.mean()) < 1e-6 and abs(out.std() - 1.0) < 1e-6


def test_znormalize_idempotent_and_constant():
    rng = np.random.default_rng(6)
    x = ds.znormalize(rng.normal(size=(4, 50)))
    again = ds.znormalize(x)
    assert np.allclose(x, again, atol=1e-6)
    assert np.array_equal(ds.znormalize(np.full((1, 8), 5.0)), np.zeros((1, 8), dtype=np.float32))


def _balanced_set(per_class=10, classes=2, length=20, seed=0):
    rng = np.random.default_rng(seed)
    n = per_class * classes
    return ds.SeriesSet(
        values=rng.normal(size=(n, length)).astype(np.float32),
        labels=np.repeat(np.arange(classes), per_class),
    )


def test_stratified_resplit_80_20():
    data = _balanced_set(per_class=10, classes=3)
    split = ds.stratified_resplit(data, 0.8, seed=1)
    for c in range(3):
        assert (split.train.labels == c).sum() == 8
        assert (split.test.labels == c).sum() == 2


def test_stratified_resplit_tiny_classes():
    data = _balanced_set(per_class=2, classes=2)
    split = ds.stratified_resplit(data, 0.5, seed=2)
    for c in range(2):
        assert (split.train.labels == c).sum() == 1
        assert (split.test.labels == c).sum() == 1


def test_stratified_resplit_deterministic():
    data = _balanced_set(per_class=25, classes=4, seed=3)
    a = ds.stratified_resplit(data, 0.8, seed=9)
    b = ds.stratified_resplit(data, 0.8, seed=9)
    assert np.array_equal(a.train.values, b.train.values)
    assert np.array_equal(a.test.labels, b.test.labels)


def test_stratified_resplit_proportions_within_one():
    rng = np.random.default_rng(11)
    labels = np.concatenate([np.zeros(13), np.ones(7), np.full(29, 2)]).astype(np.int64)
    data = ds.SeriesSet(values=rng.normal(size=(49, 10)).astype(np.float32), labels=labels)
    split = ds.stratified_resplit(data, 0.8, seed=4)
    for c, n_c in ds.class_histogram(labels).items():
        got = (split.train.labels == c).sum()
        assert abs(got - 0.8 * n_c) <= 1.0


def test_stratified_resplit_rejects_singleton_class():
    data = ds.SeriesSet(
        values=np.zeros((3, 5), dtype=np.float32),
        labels=np.array([0, 0, 1]),
    )
    with pytest.raises(ValueError, match="class 1"):
        ds.stratified_resplit(data, 0.8, seed=0)


def test_make_synthetic_balance_and_split():
    data = ds.make_synthetic("two_patterns", n=600, length=128, noise_std=0.05, seed=0)
    assert len(data.train) == 480 and len(data.test) == 120
    assert ds.class_histogram(data.train.labels) == {0: 240, 1: 240}
    assert ds.class_histogram(data.test.labels) == {0: 60, 1: 60}


def test_make_synthetic_deterministic():
    a = ds.make_synthetic("sine", n=32, length=64, noise_std=0.1, seed=7)
    b = ds.make_synthetic("sine", n=32, length=64, noise_std=0.1, seed=7)
    assert np.array_equal(a.train.values, b.train.values)
    assert np.array_equal(a.test.values, b.test.values)


def test_make_synthetic_sine_single_class_normalized():
    data = ds.make_synthetic("sine", n=16, length=64, noise_std=0.0, seed=8)
    assert data.num_classes == 1
    assert np.all(data.train.labels == 0)
    vals = data.train.values
    assert np.all(np.abs(vals.mean(axis=1)) < 1e-5)
    assert np.all(np.abs(vals.std(axis=1) - 1.0) < 1e-4)


def test_make_synthetic_rejects_unknown_kind():
    with pytest.raises(ValueError, match="unknown synthetic kind"):
        ds.make_synthetic("sawtooth", n=8, length=32, noise_std=0.0, seed=0)
