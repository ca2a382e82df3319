"""MNIST IDX and tokenized-review loading, sequence generators and batching."""
import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049
SIDE = 28
VOCAB = 20000
MAXLEN = 80
PAD_ID = 0
OOV_ID = 1


class IdxFormatError(ValueError):
    def __init__(self, path, offset, message):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{path}: {message} (at byte offset {offset})")


class ReviewFormatError(ValueError):
    def __init__(self, path, line_no, message):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{path}, line {line_no}: {message}")


@dataclass
class MnistImage:
    pixels: np.ndarray  # (28, 28) in [0, 1]
    label: int


@dataclass
class SequenceSample:
    steps: np.ndarray  # (T, m)
    target: int

    @property
    def length(self):
        return self.steps.shape[0]


@dataclass
class ReviewRecord:
    token_ids: np.ndarray  # (maxlen,) int64
    label: int


def _read_maybe_gzip(path):
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _read_idx(path, magic, item_dims):
    raw = _read_maybe_gzip(path)
    header_len = 4 * (2 + len(item_dims))
    if len(raw) < header_len:
        raise IdxFormatError(path, len(raw), f"truncated header, need {header_len} bytes")
    found, count, *dims = struct.unpack(f">{2 + len(item_dims)}i", raw[:header_len])
    if found != magic:
        raise IdxFormatError(path, 0, f"magic number {found}, expected {magic}")
    if item_dims and tuple(dims) != item_dims:
        raise IdxFormatError(path, 8, f"item dimensions {tuple(dims)}, expected {item_dims}")
    item = int(np.prod(item_dims)) if item_dims else 1
    need = header_len + count * item
    if len(raw) < need:
        raise IdxFormatError(path, len(raw), f"truncated payload, header declares {count} items ({need} bytes)")
    data = np.frombuffer(raw, dtype=np.uint8, count=count * item, offset=header_len)
    return data.reshape((count,) + tuple(item_dims))


def load_mnist_arrays(images_path, labels_path):
    """Return ``(pixels, labels)``: ``(N, 28, 28)`` floats in [0, 1] and ``(N,)`` ints."""
    images = _read_idx(images_path, IMAGE_MAGIC, (SIDE, SIDE))
    labels = _read_idx(labels_path, LABEL_MAGIC, ())
    if len(images) != len(labels):
        raise IdxFormatError(labels_path, 4, f"{len(labels)} labels for {len(images)} images")
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise IdxFormatError(labels_path, 8 + bad, f"label {labels[bad]} is not a digit")
    return images.astype(np.float64) / 255.0, labels.astype(np.int64)


def load_mnist_idx(images_path, labels_path):
    pixels, labels = load_mnist_arrays(images_path, labels_path)
    return [MnistImage(p, int(y)) for p, y in zip(pixels, labels)]


def to_pixel_sequence(img):
    # Row-major scan: step t is pixel (t // 28, t % 28).
    return SequenceSample(np.asarray(img.pixels, dtype=np.float64).reshape(SIDE * SIDE, 1), img.label)


def to_row_sequence(img):
    return SequenceSample(np.asarray(img.pixels, dtype=np.float64).reshape(SIDE, SIDE), img.label)


def pad_or_truncate(ids, maxlen=MAXLEN, pad_id=PAD_ID):
    """Keep the last ``maxlen`` ids, left-padding shorter sequences."""
    ids = list(ids)[-maxlen:] if maxlen else []
    return np.array([pad_id] * (maxlen - len(ids)) + ids, dtype=np.int64)


def load_token_reviews(path, vocab=VOCAB, maxlen=MAXLEN, pad_id=PAD_ID, oov_id=OOV_ID):
    """Parse ``label<TAB>id id ...`` lines into fixed-length records."""
    records = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            label_text, sep, body = line.partition("\t")
            if not sep:
                raise ReviewFormatError(path, line_no, "missing TAB between label and token ids")
            if label_text.strip() not in ("0", "1"):
                raise ReviewFormatError(path, line_no, f"label {label_text!r} is not 0 or 1")
            try:
                ids = [int(tok) for tok in body.split()]
            except ValueError as exc:
                raise ReviewFormatError(path, line_no, f"non-integer token id ({exc})") from None
            if any(i < 0 for i in ids):
                raise ReviewFormatError(path, line_no, "negative token id")
            ids = [i if i < vocab else oov_id for i in ids]
            records.append(ReviewRecord(pad_or_truncate(ids, maxlen, pad_id), int(label_text)))
    return records


def batch_indices(count, batch_size=32, seed=None):
    """Shuffled index batches covering ``range(count)`` once; last batch may be short.

    ``seed`` may be an int or a ``numpy.random.Generator`` (advanced in place).
    """
    if count < 1:
        raise ValueError("cannot batch an empty sample set")
    order = np.random.default_rng(seed).permutation(count)
    return [order[i:i + batch_size] for i in range(0, count, batch_size)]


def batch_iter(samples, batch_size=32, seed=None):
    for idx in batch_indices(len(samples), batch_size, seed):
        yield [samples[i] for i in idx]


def stack_sequences(samples):
    """Stack :class:`SequenceSample` items into ``(inputs, targets)`` arrays."""
    steps = np.stack([s.steps for s in samples])
    return steps, np.array([s.target for s in samples], dtype=np.int64)


def stack_reviews(records):
    ids = np.stack([r.token_ids for r in records]) if records else np.zeros((0, MAXLEN), dtype=np.int64)
    return ids, np.array([r.label for r in records], dtype=np.int64)
