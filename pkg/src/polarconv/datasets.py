"""Dataset ingestion: MNIST-style IDX files, CIFAR-10 binary batches,
augmentation, and a bundled fallback digit corpus for offline runs."""

import gzip
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073  # 1 label byte + 3 * 32 * 32 pixels


class FormatError(ValueError):
    """Raised for malformed dataset files."""


def _read_bytes(path: Path) -> bytes:
    data = path.read_bytes()
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    return data


def read_idx_images(path) -> np.ndarray:
    buf = _read_bytes(Path(path))
    if len(buf) < 16:
        raise FormatError(f"{path}: truncated IDX header")
    magic, n, rows, cols = np.frombuffer(buf[:16], dtype=">u4")
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
    expected = 16 + n * rows * cols
    if len(buf) < expected:
        raise FormatError(f"{path}: file holds {len(buf)} bytes, need {expected}")
    return np.frombuffer(buf, dtype=np.uint8, count=n * rows * cols,
                         offset=16).reshape(n, 1, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    buf = _read_bytes(Path(path))
    if len(buf) < 8:
        raise FormatError(f"{path}: truncated IDX header")
    magic, n = np.frombuffer(buf[:8], dtype=">u4")
    if magic != IDX_LABELS_MAGIC:
        raise FormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")
    if len(buf) < 8 + n:
        raise FormatError(f"{path}: file holds {len(buf)} bytes, need {8 + n}")
    return np.frombuffer(buf, dtype=np.uint8, count=n, offset=8).astype(np.int64)


def write_idx_images(path, images: np.ndarray):
    n, _, rows, cols = images.shape
    header = np.array([IDX_IMAGES_MAGIC, n, rows, cols], dtype=">u4").tobytes()
    Path(path).write_bytes(header + images.astype(np.uint8).tobytes())


def write_idx_labels(path, labels: np.ndarray):
    header = np.array([IDX_LABELS_MAGIC, len(labels)], dtype=">u4").tobytes()
    Path(path).write_bytes(header + labels.astype(np.uint8).tobytes())


def _find(root: Path, names) -> Path:
    for name in names:
        for cand in (root / name, root / (name + ".gz")):
            if cand.exists():
                return cand
    raise FormatError(f"none of {names} found under {root}")


def load_mnist(path):
    """Load an IDX image/label corpus from a directory.

    Returns ((train_images, train_labels), (test_images, test_labels)) with
    images as float64 [n, 1, H, W] scaled to [0, 1].
    """
    root = Path(path)
    pairs = []
    for split in ("train", "t10k"):
        imgs = read_idx_images(_find(root, [f"{split}-images-idx3-ubyte",
                                            f"{split}-images.idx3-ubyte"]))
        labels = read_idx_labels(_find(root, [f"{split}-labels-idx1-ubyte",
                                              f"{split}-labels.idx1-ubyte"]))
        if len(imgs) != len(labels):
            raise FormatError(f"{split}: {len(imgs)} images vs {len(labels)} labels")
        pairs.append((imgs.astype(np.float64) / 255.0, labels))
    return tuple(pairs)


def load_cifar10(path):
    """Load CIFAR-10 binary batches from a directory.

    Each record is one label byte followed by the R, G, B planes. Returns
    the same structure as :func:`load_mnist` with [n, 3, 32, 32] images.
    """
    root = Path(path)
    train_files = sorted(root.glob("data_batch_*.bin")) or sorted(root.glob("data_batch_*"))
    test_files = [p for p in (root / "test_batch.bin", root / "test_batch") if p.exists()]
    if not train_files or not test_files:
        raise FormatError(f"no CIFAR-10 batch files under {root}")

    def read(files):
        images, labels = [], []
        for f in files:
            buf = _read_bytes(f)
            if len(buf) % CIFAR_RECORD:
                raise FormatError(f"{f}: size {len(buf)} not a multiple of {CIFAR_RECORD}")
            rec = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
            labels.append(rec[:, 0].astype(np.int64))
            images.append(rec[:, 1:].reshape(-1, 3, 32, 32))
        return (np.concatenate(images).astype(np.float64) / 255.0,
                np.concatenate(labels))

    return read(train_files), read(test_files)


def augment(batch: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Random crop from a zero-padded image plus random horizontal flip.

    Intended for CIFAR-shaped inputs; call sites skip it for MNIST.
    """
    n, c, h, w = batch.shape
    padded = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=batch.dtype)
    padded[:, :, pad:pad + h, pad:pad + w] = batch
    out = np.empty_like(batch)
    offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
    flips = rng.random(n) < 0.5
    for i in range(n):
        oy, ox = offsets[i]
        crop = padded[i, :, oy:oy + h, ox:ox + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out


def batch_indices(n: int, batch_size: int, steps: int, rng: np.random.Generator):
    """Deterministic stream of batch index arrays, reshuffling per epoch."""
    produced = 0
    while produced < steps:
        order = rng.permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            if produced >= steps:
                return
            yield order[start:start + batch_size]
            produced += 1
        if n < batch_size:
            # tiny corpora: sample with replacement to fill the batch
            yield rng.integers(0, n, size=batch_size)
            produced += 1


def materialize_digit_corpus(out_dir, train_fraction: float = 0.85, seed: int = 0):
    """Write an IDX-format handwritten-digit corpus for offline use.

    Upsamples scikit-learn's bundled 8x8 digit scans to 28x28 so the corpus
    is a drop-in stand-in where the full MNIST files are unavailable.
    """
    from scipy.ndimage import zoom
    from sklearn.datasets import load_digits

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    digits = load_digits()
    images = digits.images / 16.0      # 8x8, values 0..16
    labels = digits.target.astype(np.uint8)
    big = np.stack([zoom(img, 3.5, order=1) for img in images])
    big = np.clip(np.round(big * 255.0), 0, 255).astype(np.uint8)[:, None, :, :]

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(big))
    n_train = int(len(big) * train_fraction)
    tr, te = order[:n_train], order[n_train:]
    write_idx_images(out / "train-images-idx3-ubyte", big[tr])
    write_idx_labels(out / "train-labels-idx1-ubyte", labels[tr])
    write_idx_images(out / "t10k-images-idx3-ubyte", big[te])
    write_idx_labels(out / "t10k-labels-idx1-ubyte", labels[te])
    return out
