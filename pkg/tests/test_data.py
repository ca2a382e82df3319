import gzip
import os
from pathlib import Path

import numpy as np
import pytest

from gruvariants.data import (
    IdxFormatError,
    MnistImage,
    ReviewFormatError,
    batch_indices,
    batch_iter,
    load_mnist_idx,
    load_token_reviews,
    to_pixel_sequence,
    to_row_sequence,
)

from conftest import write_idx


def test_hand_built_idx_fixture(idx_pair):
    images = load_mnist_idx(*idx_pair)
    assert len(images) == 2
    assert [im.label for im in images] == [7, 3]
    assert images[0].pixels[0, 1] == 1.0 and images[0].pixels.sum() == 1.0
    assert images[1].pixels[27, 27] == 1.0
    assert images[1].pixels[3, 4] == pytest.approx(0.2, abs=1e-15)


def test_gzip_detected_by_magic(tmp_path, idx_pair):
    raw_images, raw_labels = idx_pair
    gz_images = tmp_path / "img-renamed"
    gz_images.write_bytes(gzip.compress(raw_images.read_bytes()))
    a = load_mnist_idx(gz_images, raw_labels)
    b = load_mnist_idx(*idx_pair)
    np.testing.assert_array_equal(a[1].pixels, b[1].pixels)


def test_idx_errors(tmp_path, idx_pair):
    images, labels = idx_pair
    bad = write_idx(tmp_path / "bad", 2049, (2, 28, 28), bytes(2 * 784))
    with pytest.raises(IdxFormatError, match="magic") as err:
        load_mnist_idx(bad, labels)
    assert err.value.offset == 0 and err.value.path.endswith("bad")

    short = tmp_path / "short"
    short.write_bytes(images.read_bytes()[:-10])
    with pytest.raises(IdxFormatError, match="truncated"):
        load_mnist_idx(short, labels)

    three = write_idx(tmp_path / "three", 2049, (3,), bytes([1, 2, 3]))
    with pytest.raises(IdxFormatError, match="3 labels for 2 images"):
        load_mnist_idx(images, three)


def test_bundled_subset_loads(mnist_dir):
    train = load_mnist_idx(mnist_dir / "train-images-idx3-ubyte.gz", mnist_dir / "train-labels-idx1-ubyte.gz")
    test = load_mnist_idx(mnist_dir / "t10k-images-idx3-ubyte.gz", mnist_dir / "t10k-labels-idx1-ubyte.gz")
    assert (len(train), len(test)) == (4000, 1000)
    for im in train[:200] + test[:200]:
        assert im.pixels.shape == (28, 28) and 0.0 <= im.pixels.min() and im.pixels.max() <= 1.0
        assert 0 <= im.label < 10


def test_pixel_sequence(idx_pair):
    img = load_mnist_idx(*idx_pair)[0]
    seq = to_pixel_sequence(img)
    assert seq.steps.shape == (784, 1) and seq.length == 784
    assert np.flatnonzero(seq.steps[:, 0]).tolist() == [1]
    zero = to_pixel_sequence(MnistImage(np.zeros((28, 28)), 0))
    np.testing.assert_array_equal(zero.steps, 0.0)


def test_pixel_index_arithmetic(rng):
    img = MnistImage(rng.random((28, 28)), 5)
    seq = to_pixel_sequence(img)
    for t in rng.integers(0, 784, size=50):
        assert seq.steps[t, 0] == img.pixels[t // 28, t % 28]


def test_row_sequence(rng):
    img = MnistImage(rng.random((28, 28)), 2)
    rows = to_row_sequence(img)
    assert rows.steps.shape == (28, 28) and rows.target == 2
    np.testing.assert_array_equal(rows.steps.reshape(-1), to_pixel_sequence(img).steps[:, 0])
    np.testing.assert_array_equal(to_row_sequence(MnistImage(np.zeros((28, 28)), 0)).steps, 0.0)


def test_review_padding_truncation_and_oov(tmp_path):
    long_ids = " ".join(str(i) for i in range(100, 200))
    path = tmp_path / "reviews.tsv"
    path.write_text(f"1\t5 7 9\n0\t{long_ids}\n1\t3 25000 4\n\n", encoding="utf-8")
    recs = load_token_reviews(path)
    assert len(recs) == 3
    assert recs[0].label == 1 and recs[0].token_ids.tolist() == [0] * 77 + [5, 7, 9]
    assert recs[1].token_ids.tolist() == list(range(120, 200))
    assert recs[2].token_ids[-3:].tolist() == [3, 1, 4]
    for r in recs:
        assert len(r.token_ids) == 80 and r.token_ids.max() < 20000


@pytest.mark.parametrize("line,fragment", [
    ("1 5 7", "TAB"),
    ("2\t5 7", "not 0 or 1"),
    ("1\t5 x 7", "non-integer"),
])
def test_review_errors_name_line(tmp_path, line, fragment):
    path = tmp_path / "r.tsv"
    path.write_text(f"0\t1 2\n{line}\n", encoding="utf-8")
    with pytest.raises(ReviewFormatError, match=fragment) as err:
        load_token_reviews(path)
    assert err.value.line_no == 2


def test_batch_sizes_and_partition():
    batches = batch_indices(100, 32, seed=1)
    assert [len(b) for b in batches] == [32, 32, 32, 4]
    assert sorted(np.concatenate(batches).tolist()) == list(range(100))
    again = batch_indices(100, 32, seed=1)
    assert all(np.array_equal(a, b) for a, b in zip(batches, again))
    assert not all(np.array_equal(a, b) for a, b in zip(batches, batch_indices(100, 32, seed=2)))


def test_batch_iter_yields_samples():
    samples = [f"s{i}" for i in range(10)]
    got = [s for batch in batch_iter(samples, 4, seed=3) for s in batch]
    assert sorted(got) == sorted(samples)
    with pytest.raises(ValueError):
        list(batch_iter([], 4, seed=0))


FULL = os.environ.get("GRUVARIANTS_FULL_MNIST")


@pytest.mark.extended
@pytest.mark.skipif(not FULL, reason="set GRUVARIANTS_FULL_MNIST to the full MNIST directory")
def test_full_mnist_counts():
    from gruvariants.cli import _find
    d = Path(FULL)
    train = load_mnist_idx(_find(d, "train-images-idx3-ubyte"), _find(d, "train-labels-idx1-ubyte"))
    test = load_mnist_idx(_find(d, "t10k-images-idx3-ubyte"), _find(d, "t10k-labels-idx1-ubyte"))
    assert (len(train), len(test)) == (60000, 10000)
