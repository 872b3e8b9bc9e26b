"""Colored MNIST: IDX ingestion, environment construction, calibration.

The task: binarize the digit label, flip it with fixed probability, then
inject a color that correlates with the (noisy) label more strongly than
the digit shape does, with the correlation reversed in the test
environment.  Images are downsampled to 14x14 and placed in one of two
channels, so a color-reliant model and a shape-reliant model are easy to
tell apart.
"""

from __future__ import annotations

import gzip
import hashlib
import os
import struct
import urllib.request
from dataclasses import dataclass, field

import numpy as np

from .errors import IdxFormatError
from .numkit import Rng
from .sem import Dataset

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}

# sha256 of the canonical uncompressed IDX files
MNIST_SHA256 = {
    "train-images-idx3-ubyte": "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db",
    "train-labels-idx1-ubyte": "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5",
    "t10k-images-idx3-ubyte": "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7",
    "t10k-labels-idx1-ubyte": "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2",
}

TRAIN_SUBSET = 50_000
ENV_FLIP_PROBS = (0.2, 0.1, 0.9)
LABEL_NOISE = 0.25


@dataclass
class IdxImages:
    count: int
    rows: int
    cols: int
    pixels: np.ndarray  # uint8, shape (count, rows, cols)


@dataclass
class ColoredDataset(Dataset):
    """Environment of the colored task; metadata kept for audits."""

    flip_prob: float = 0.0
    digits: np.ndarray | None = None
    ytilde: np.ndarray | None = None
    color: np.ndarray | None = None
    channels: int = 2
    side: int = 14


def _read_bytes(source) -> bytes:
    if isinstance(source, (bytes, bytearray)):
        return bytes(source)
    data = open(source, "rb").read()
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    return data


def parse_idx(source):
    """Decode an IDX payload into images or a label vector.

    Returns :class:`IdxImages` for the image magic and a uint8 label array
    for the label magic; anything malformed raises :class:`IdxFormatError`
    with the offending byte offset.
    """
    data = _read_bytes(source)
    if len(data) < 4:
        raise IdxFormatError(f"truncated header: {len(data)} bytes", offset=0)
    (magic,) = struct.unpack(">I", data[:4])
    if magic == LABELS_MAGIC:
        if len(data) < 8:
            raise IdxFormatError("truncated label count", offset=4)
        (count,) = struct.unpack(">I", data[4:8])
        if len(data) != 8 + count:
            raise IdxFormatError(
                f"label payload has {len(data) - 8} bytes, expected {count}", offset=8
            )
        labels = np.frombuffer(data, dtype=np.uint8, offset=8)
        if labels.size and labels.max() > 9:
            raise IdxFormatError("labels out of range 0..9", offset=8)
        return labels.copy()
    if magic == IMAGES_MAGIC:
        if len(data) < 16:
            raise IdxFormatError("truncated image dimensions", offset=4)
        count, rows, cols = struct.unpack(">III", data[4:16])
        expected = 16 + count * rows * cols
        if len(data) != expected:
            raise IdxFormatError(
                f"image payload has {len(data) - 16} bytes, expected {count * rows * cols}",
                offset=16,
            )
        pixels = np.frombuffer(data, dtype=np.uint8, offset=16).reshape(count, rows, cols)
        return IdxImages(count=count, rows=rows, cols=cols, pixels=pixels.copy())
    raise IdxFormatError(f"bad magic 0x{magic:08x}", offset=0)


def write_idx(payload) -> bytes:
    """Inverse of :func:`parse_idx`; used for round-trip tests."""
    if isinstance(payload, IdxImages):
        head = struct.pack(">IIII", IMAGES_MAGIC, payload.count, payload.rows, payload.cols)
        return head + payload.pixels.astype(np.uint8).tobytes()
    labels = np.asarray(payload, dtype=np.uint8)
    return struct.pack(">II", LABELS_MAGIC, labels.size) + labels.tobytes()


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def fetch_mnist(dest_dir, base_url, sha256_map=None, timeout=60):
    """Explicitly download the four IDX files and verify their digests.

    Never called implicitly; pointing ``mnist_dir`` at existing files is
    the normal path.
    """
    sha256_map = sha256_map or MNIST_SHA256
    os.makedirs(dest_dir, exist_ok=True)
    for name in MNIST_FILES.values():
        target = os.path.join(dest_dir, name)
        if not os.path.exists(target):
            url = base_url.rstrip("/") + "/" + name
            with urllib.request.urlopen(url, timeout=timeout) as resp:
                blob = resp.read()
            if blob[:2] == b"\x1f\x8b":
                blob = gzip.decompress(blob)
            with open(target, "wb") as fh:
                fh.write(blob)
        digest = _sha256(target)
        want = sha256_map.get(name)
        if want and digest != want:
            raise IOError(f"{name}: sha256 mismatch ({digest} != {want})")
    return dest_dir


def resolve_mnist_dir(mnist_dir=None) -> str:
    path = mnist_dir or os.environ.get("IRM_MNIST_DIR", "")
    if not path:
        raise FileNotFoundError(
            "MNIST location not configured: set config key 'mnist_dir' or the "
            "IRM_MNIST_DIR environment variable to a directory holding "
            + ", ".join(MNIST_FILES.values())
        )
    missing = [n for n in MNIST_FILES.values() if not os.path.exists(os.path.join(path, n))]
    if missing:
        raise FileNotFoundError(
            f"MNIST files missing under {path}: {', '.join(missing)}; "
            "set 'mnist_dir'/'IRM_MNIST_DIR' correctly or fetch them with "
            "fetch_mnist(dest_dir, download_url)"
        )
    return path


def load_mnist(mnist_dir=None):
    path = resolve_mnist_dir(mnist_dir)
    train_images = parse_idx(os.path.join(path, MNIST_FILES["train_images"]))
    train_labels = parse_idx(os.path.join(path, MNIST_FILES["train_labels"]))
    test_images = parse_idx(os.path.join(path, MNIST_FILES["test_images"]))
    test_labels = parse_idx(os.path.join(path, MNIST_FILES["test_labels"]))
    if train_images.count != train_labels.size or test_images.count != test_labels.size:
        raise IdxFormatError("image/label counts disagree")
    return train_images, train_labels, test_images, test_labels


def downsample(pixels: np.ndarray) -> np.ndarray:
    """28x28 uint8 -> 14x14 float in [0, 1] by 2x2 mean pooling."""
    n, r, c = pixels.shape
    x = pixels.reshape(n, r // 2, 2, c // 2, 2).astype(np.float64) / 255.0
    return x.mean(axis=(2, 4))


def _make_environment(pixels, digits, flip_prob, label_noise, rng, env_id, grayscale=False):
    n = digits.shape[0]
    ytilde = (digits >= 5).astype(np.float64)
    y = ytilde.copy()
    noise_flips = rng.uniform(size=n) < label_noise
    y[noise_flips] = 1.0 - y[noise_flips]
    color = y.copy()
    color_flips = rng.uniform(size=n) < flip_prob
    color[color_flips] = 1.0 - color[color_flips]
    img = downsample(pixels)
    flat = img.reshape(n, -1)
    if grayscale:
        X = flat
        channels = 1
    else:
        X = np.zeros((n, 2 * flat.shape[1]))
        red = color == 1.0
        X[red, : flat.shape[1]] = flat[red]
        X[~red, flat.shape[1] :] = flat[~red]
        channels = 2
    return ColoredDataset(
        X=X,
        y=y,
        env_id=env_id,
        flip_prob=flip_prob,
        digits=digits.copy(),
        ytilde=ytilde,
        color=color,
        channels=channels,
        side=img.shape[1],
    )


def build_colored_mnist(
    train_images: IdxImages,
    train_labels: np.ndarray,
    test_images: IdxImages,
    test_labels: np.ndarray,
    env_flip_probs=ENV_FLIP_PROBS,
    label_noise: float = LABEL_NOISE,
    seed: int = 0,
    grayscale: bool = False,
):
    """Build the two training environments and the reversed test environment.

    The first 50,000 training images alternate between the two training
    environments (even indices to the first, odd to the second); the test
    split becomes the test environment with its color-label correlation
    flipped.  Returns [env1, env2, test_env].
    """
    if train_images.count != train_labels.size:
        raise ValueError("train images/labels misaligned")
    if test_images.count != test_labels.size:
        raise ValueError("test images/labels misaligned")
    if len(env_flip_probs) != 3:
        raise ValueError("need flip probabilities for exactly three environments")
    subset = min(TRAIN_SUBSET, train_images.count)
    idx_a = np.arange(0, subset, 2)
    idx_b = np.arange(1, subset, 2)
    rng = Rng(seed)
    envs = []
    for i, (idx, pool_images, pool_labels) in enumerate(
        [
            (idx_a, train_images, train_labels),
            (idx_b, train_images, train_labels),
            (np.arange(test_images.count), test_images, test_labels),
        ]
    ):
        envs.append(
            _make_environment(
                pool_images.pixels[idx],
                pool_labels[idx].astype(np.int64),
                flip_prob=float(env_flip_probs[i]),
                label_noise=label_noise,
                rng=rng.stream(f"cmnist-env{i}"),
                env_id=f"env{i}" if i < 2 else "test",
                grayscale=grayscale,
            )
        )
    return envs


def grayscale_oracle(train_images, train_labels, test_images, test_labels,
                     env_flip_probs=ENV_FLIP_PROBS, label_noise=LABEL_NOISE, seed=0):
    """Same pipeline with the coloring step skipped (one 14x14 channel)."""
    return build_colored_mnist(
        train_images,
        train_labels,
        test_images,
        test_labels,
        env_flip_probs=env_flip_probs,
        label_noise=label_noise,
        seed=seed,
        grayscale=True,
    )


@dataclass
class CalibrationRow:
    env: str
    h: float
    p: float
    count: int
    low_support: bool


def calibration_curve(model, datasets, bins: int = 20, min_count: int = 10):
    """Empirical P(y=1 | logit bin) per environment.

    Bins are equal-width over the pooled logit range; bins holding fewer
    than ``min_count`` examples are flagged low-support rather than
    dropped, since the tails are exactly where invariance is hardest to
    estimate.
    """
    if bins < 2:
        raise ValueError("need at least 2 bins")
    logits = {d.env_id: model.outputs(d.X) for d in datasets}
    lo = min(h.min() for h in logits.values())
    hi = max(h.max() for h in logits.values())
    if hi <= lo:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    centers = 0.5 * (edges[:-1] + edges[1:])
    rows = []
    for d in datasets:
        h = logits[d.env_id]
        which = np.clip(np.digitize(h, edges) - 1, 0, bins - 1)
        for b in range(bins):
            mask = which == b
            count = int(mask.sum())
            if count == 0:
                continue
            rows.append(
                CalibrationRow(
                    env=d.env_id,
                    h=float(centers[b]),
                    p=float(d.y[mask].mean()),
                    count=count,
                    low_support=count < min_count,
                )
            )
    return rows
