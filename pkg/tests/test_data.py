import os
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import write_class_tree
from oracles import bilinear_half_pixel
from pattlite.data import (DataError, Dataset, batches, ckplus_subject_folds, decode_image, load_directory_dataset,
                           load_splits, load_subset_list, merge, preprocess_scale, random_contrast, random_flip,
                           resize_bilinear, subject_from_filename)
from pattlite.tensor import Rng


def test_two_classes_three_files(tmp_path):
    g = np.random.default_rng(0)
    write_class_tree(tmp_path, "train", {c: [g.uniform(0, 255, (4, 4, 3)) for _ in range(3)] for c in ("b", "a")})
    ds = load_directory_dataset(tmp_path, "train")
    assert len(ds) == 6 and ds.class_names == ["a", "b"]
    assert ds.labels.tolist() == [0, 0, 0, 1, 1, 1]
    assert [s.key for s in ds.samples][:2] == ["a/a_000.plt", "a/a_001.plt"]


def test_generated_tree_round_trips(tmp_path):
    g = np.random.default_rng(1)
    counts = {f"c{i}": int(g.integers(1, 5)) for i in range(4)}
    write_class_tree(tmp_path, "test", {c: [np.full((3, 3, 3), 9.0)] * n for c, n in counts.items()})
    ds = load_directory_dataset(tmp_path, "test")
    assert Counter(ds.class_names[l] for l in ds.labels) == Counter(counts)


def test_loader_errors(tmp_path):
    with pytest.raises(DataError):
        load_directory_dataset(tmp_path, "train")
    (tmp_path / "train" / "empty").mkdir(parents=True)
    with pytest.raises(DataError):
        load_directory_dataset(tmp_path, "train")
    bad = tmp_path / "x.plt"
    bad.write_bytes(b"garbage")
    with pytest.raises(DataError, match="x.plt"):
        decode_image(bad)


def test_png_grayscale_replicated(tmp_path):
    from PIL import Image
    arr = np.arange(16, dtype=np.uint8).reshape(4, 4) * 10
    p = tmp_path / "g.png"
    Image.fromarray(arr, "L").save(p)
    img = decode_image(p)
    assert img.shape == (4, 4, 3) and np.array_equal(img[:, :, 1], arr.astype(np.float32))


def test_load_splits_and_merge(toy_tree):
    splits = load_splits(toy_tree)
    assert set(splits) == {"train", "val", "test"}
    assert len(merge(list(splits.values()))) == 8 + 4 + 6


# -- resize / preprocess ---------------------------------------------------------

def test_resize_identity_and_constant():
    x = np.random.default_rng(0).uniform(0, 255, (224, 224, 3)).astype(np.float32)
    assert np.array_equal(resize_bilinear(x, 224, 224), x)
    c = np.full((7, 5, 3), 42.0)
    assert np.allclose(resize_bilinear(c, 224, 224), 42.0)


def test_resize_2x2_to_4x4_hand_oracle():
    img = np.array([[0.0, 10.0], [20.0, 30.0]])[:, :, None]
    got = resize_bilinear(img, 4, 4)[:, :, 0]
    # half-pixel source coordinates -0.25, 0.25, 0.75, 1.25 clamp to 0, .25, .75, 1
    r = np.array([0.0, 0.25, 0.75, 1.0])
    expect = 20 * r[:, None] + 10 * r[None, :]
    assert np.allclose(got, expect, atol=1e-12)
    assert np.allclose(got, bilinear_half_pixel(img, 4, 4)[:, :, 0], atol=1e-12)


@given(st.integers(1, 9), st.integers(1, 9), st.integers(1, 12), st.integers(1, 12), st.integers(0, 99))
@settings(max_examples=40, deadline=None)
def test_resize_matches_scalar_oracle(h, w, oh, ow, seed):
    img = np.random.default_rng(seed).uniform(0, 255, (h, w, 2))
    assert np.allclose(resize_bilinear(img, oh, ow), bilinear_half_pixel(img, oh, ow), atol=1e-9)


def test_preprocess_scale():
    assert preprocess_scale(np.array([0.0, 127.5, 255.0])).tolist() == [-1.0, 0.0, 1.0]
    x = np.random.default_rng(0).uniform(0, 255, 100)
    assert np.allclose((preprocess_scale(x).astype(np.float64) + 1) * 127.5, x, atol=1e-4)
    assert np.allclose((x / 127.5 - 1 + 1) * 127.5, x, atol=1e-6)
    with pytest.raises(ValueError):
        preprocess_scale(np.array([256.0]))


# -- augmentation ---------------------------------------------------------------

def test_flip_cases():
    row = np.array([[[1.0], [2.0]]])
    flipped = random_flip(row, Rng(0), p=1.0)
    assert flipped[0, :, 0].tolist() == [2.0, 1.0]
    assert np.array_equal(random_flip(flipped, Rng(0), p=1.0), row)
    assert np.array_equal(random_flip(row, Rng(0), p=0.0), row)
    hits = sum(not np.array_equal(random_flip(row, Rng(i)), row) for i in range(400))
    assert 150 < hits < 250


def test_contrast_cases():
    c = np.full((4, 4, 3), 77.0)
    for seed in range(10):
        assert np.array_equal(random_contrast(c, Rng(seed)), c)
    x = np.random.default_rng(0).uniform(50, 200, (6, 6, 3))
    y = random_contrast(x, Rng(3))
    f = (y - x.mean((0, 1))) / (x - x.mean((0, 1)))
    assert np.allclose(f, f.flat[0]) and 0.8 <= f.flat[0] <= 1.2
    assert y.min() >= 0 and y.max() <= 255


# -- batching -------------------------------------------------------------------

def _ds(n, split="train"):
    g = np.random.default_rng(0)
    return Dataset.from_arrays([g.uniform(0, 255, (5, 5, 3)) for _ in range(n)], [i % 3 for i in range(n)],
                               ["a", "b", "c"], split)


def test_batch_sizes_and_multiset():
    ds = _ds(20)
    out = list(batches(ds, 8, Rng(1), size=6))
    assert [len(y) for _, y in out] == [8, 8, 4]
    assert sorted(np.concatenate([y for _, y in out]).tolist()) == sorted(ds.labels.tolist())
    for x, _ in out:
        assert x.shape[1:] == (6, 6, 3) and x.min() >= -1 and x.max() <= 1


def test_batch_determinism():
    a = [x for x, _ in batches(_ds(10), 4, Rng(5), size=5)]
    b = [x for x, _ in batches(_ds(10), 4, Rng(5), size=5)]
    assert all(np.array_equal(p, q) for p, q in zip(a, b))
    c = [x for x, _ in batches(_ds(10), 4, Rng(6), size=5)]
    assert not all(np.array_equal(p, q) for p, q in zip(a, c))


def test_eval_split_is_not_augmented():
    ds = _ds(6, "test")
    x, _ = next(batches(ds, 6, size=5))
    assert np.array_equal(x, np.stack([preprocess_scale(ds.image(i, 5)) for i in range(6)]))
    with pytest.raises(ValueError):
        next(batches(_ds(3), 2))  # training split needs an rng
    with pytest.raises(DataError):
        next(batches(Dataset([], ["a"]), 2))


# -- folds and subsets -------------------------------------------------------------

def _subject_ds(subjects):
    imgs = [np.zeros((2, 2, 3))] * len(subjects)
    return Dataset.from_arrays(imgs, [0] * len(subjects), ["x"], "all", subjects)


def test_twenty_subjects_two_per_fold():
    ds = _subject_ds([f"S{i:03d}" for i in range(20) for _ in range(2)])
    folds = ckplus_subject_folds(ds, 10)
    assert len(folds) == 10
    for train, test in folds:
        assert len({s.subject_id for s in test.samples}) == 2


@given(st.lists(st.integers(0, 30), min_size=10, max_size=80), st.integers(2, 10))
@settings(max_examples=40, deadline=None)
def test_folds_partition(raw, k):
    subjects = [f"S{v}" for v in raw]
    if len(set(subjects)) < k:
        return
    ds = _subject_ds(subjects)
    folds = ckplus_subject_folds(ds, k)
    seen = []
    for train, test in folds:
        tr = {s.subject_id for s in train.samples}
        te = {s.subject_id for s in test.samples}
        assert not tr & te
        assert len(train) + len(test) == len(ds)
        seen += [id(s) for s in test.samples]
    assert sorted(seen) == sorted(id(s) for s in ds.samples)


def test_fold_errors():
    with pytest.raises(DataError):
        ckplus_subject_folds(_subject_ds(["S1", None, "S2"]), 2)
    with pytest.raises(DataError):
        ckplus_subject_folds(_subject_ds(["S1", "S1"]), 2)


def test_subject_ids(tmp_path):
    assert subject_from_filename("S005_001_00000011.png") == "S005"
    assert subject_from_filename("plain.png") is None
    write_class_tree(tmp_path, "train", {"a": [np.zeros((2, 2, 3))] * 2}, prefix=lambda c, i: f"S{i}_x")
    (tmp_path / "subjects.tsv").write_text("S0_x.plt\tP9\n")
    ds = load_directory_dataset(tmp_path, "train")
    assert [s.subject_id for s in ds.samples] == ["P9", "S1"]


def test_subset_lists(toy_tree, tmp_path, caplog):
    test = load_directory_dataset(toy_tree, "test")
    empty = tmp_path / "empty.txt"
    empty.write_text("")
    assert load_subset_list(empty, test).members == []
    names = [s.key for s in test.samples[:3]]
    lst = tmp_path / "three.txt"
    lst.write_text("\n".join([names[0], os.path.basename(names[1]), "test/" + names[2], names[0], "nope.plt"]) + "\n")
    sub = load_subset_list(lst, test)
    assert sub.members == [0, 1, 2] and sub.unresolved == ["nope.plt"] and sub.name == "three"
    assert "1 subset entries" in caplog.text
