"""Datasets: MNIST IDX files, an offline synthetic-digits stand-in, and a toy dialogue corpus."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage


class DataMissingError(FileNotFoundError):
    pass


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    name: str = ""

    @property
    def n_features(self):
        return self.x_train.shape[1]

    @property
    def n_classes(self):
        return int(max(self.y_train.max(), self.y_test.max())) + 1


def read_idx(path):
    """Parse an IDX file (optionally gzipped): magic, big-endian dims, raw bytes."""
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        raw = fh.read()
    zero, dtype_code, ndim = struct.unpack_from(">HBB", raw, 0)
    if zero != 0 or dtype_code != 0x08:
        raise ValueError(f"{path}: unsupported IDX magic {raw[:4].hex()}")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    data = np.frombuffer(raw, dtype=np.uint8, offset=4 + 4 * ndim)
    if data.size != int(np.prod(dims)):
        raise ValueError(f"{path}: payload has {data.size} bytes, header promises {int(np.prod(dims))}")
    return data.reshape(dims)


def write_idx(path, array):
    array = np.asarray(array, dtype=np.uint8)
    header = struct.pack(">HBB", 0, 0x08, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.tobytes())


_MNIST_FILES = {
    "x_train": "train-images-idx3-ubyte",
    "y_train": "train-labels-idx1-ubyte",
    "x_test": "t10k-images-idx3-ubyte",
    "y_test": "t10k-labels-idx1-ubyte",
}


def load_mnist(directory) -> Dataset:
    directory = Path(directory)
    arrays = {}
    for key, stem in _MNIST_FILES.items():
        for cand in (directory / stem, directory / (stem + ".gz")):
            if cand.exists():
                arrays[key] = read_idx(cand)
                break
        else:
            raise DataMissingError(f"MNIST file {stem}[.gz] not found in {directory}")
    x_tr = arrays["x_train"].reshape(len(arrays["x_train"]), -1).astype(np.float64) / 255.0
    x_te = arrays["x_test"].reshape(len(arrays["x_test"]), -1).astype(np.float64) / 255.0
    return Dataset(x_tr, arrays["y_train"].astype(np.int64), x_te, arrays["y_test"].astype(np.int64), "mnist")


# 5x7 glyphs placed on an 8x8 grid
_GLYPHS = {
    0: [".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."],
    1: ["..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."],
    2: [".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"],
    3: ["#####", "...#.", "..#..", "...#.", "....#", "#...#", ".###."],
    4: ["...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."],
    5: ["#####", "#....", "####.", "....#", "....#", "#...#", ".###."],
    6: ["..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."],
    7: ["#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."],
    8: [".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."],
    9: [".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."],
}


def glyph8(digit: int) -> np.ndarray:
    img = np.zeros((8, 8))
    for r, row in enumerate(_GLYPHS[digit]):
        for c, ch in enumerate(row):
            if ch == "#":
                img[r, c + 1] = 1.0
    return img


def _render(digit, rng, side, jitter):
    base = ndimage.zoom(glyph8(digit), side / 8.0, order=1)
    angle = np.deg2rad(rng.uniform(-12, 12) * jitter)
    sx, sy = rng.uniform(1 - 0.2 * jitter, 1 + 0.1 * jitter, size=2)
    shear = rng.uniform(-0.25, 0.25) * jitter
    c, s = np.cos(angle), np.sin(angle)
    A = np.array([[c, -s], [s, c]]) @ np.array([[1.0, shear], [0.0, 1.0]]) @ np.diag([1 / sy, 1 / sx])
    center = np.array([side / 2 - 0.5, side / 2 - 0.5])
    shift = rng.uniform(-2.5, 2.5, size=2) * jitter
    offset = center - A @ (center + shift)
    img = ndimage.affine_transform(base, A, offset=offset, order=1, mode="constant")
    img = ndimage.gaussian_filter(img, rng.uniform(0.5, 1.3))
    peak = img.max()
    if peak > 0:
        img = img / peak * rng.uniform(0.7, 1.0)
    return img


def synthetic_digits(n_train=20000, n_test=2000, seed=0, side=28, jitter=1.0, noise=0.35) -> Dataset:
    """Offline MNIST stand-in: 8x8 digit glyphs rendered at side x side with
    random affine jitter, blur, contrast and additive noise."""
    rng = np.random.default_rng(seed)

    def make(n):
        y = rng.integers(0, 10, size=n)
        x = np.empty((n, side * side))
        for i, d in enumerate(y):
            img = _render(int(d), rng, side, jitter)
            img = img + rng.normal(0.0, noise, size=img.shape)
            x[i] = np.clip(img, 0.0, 1.0).ravel()
        return x, y.astype(np.int64)

    x_tr, y_tr = make(n_train)
    x_te, y_te = make(n_test)
    return Dataset(x_tr, y_tr, x_te, y_te, "synthetic-digits")


def load_dataset(name: str, data_dir=None, seed=0, **kw) -> Dataset:
    if name == "mnist":
        if data_dir is None:
            raise DataMissingError("MNIST requires a data directory holding the four IDX files")
        return load_mnist(data_dir)
    if name == "synthetic":
        return synthetic_digits(seed=seed, **kw)
    raise ValueError(f"unknown dataset {name!r}")


def synthetic_gaussian(n, d_in, n_classes, seed=0):
    """Seeded Gaussian inputs with uniform labels (timing workloads)."""
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, d_in)), rng.integers(0, n_classes, size=n)


_NAMES = ["JACK", "RAILLY", "COLE", "JAKE", "MARY", "SAM", "ELLEN", "FRANK", "NORA", "VIC"]
_SUBJ = ["I", "You", "We", "They", "He", "She", "Nobody", "Everyone"]
_VERB = ["know", "want", "need", "see", "remember", "like", "hate", "fix", "find", "tell"]
_OBJ = ["the tickets", "the problem", "this place", "the car", "my brother", "the money",
        "the Gift Shop", "your attitude", "the truth", "that movie", "the door", "it"]
_TAIL = ["", " now", " tonight", " again", " here", " already", " for sure", " right away"]
_INTERJ = ["Right!", "Look.", "Okay.", "Wait...", "Listen.", "No.", "Yes.", "Come on."]


def dialogue_corpus(n_chars=120_000, seed=0) -> str:
    """Script-like toy corpus: SPEAKER: utterance lines, blank line between conversations."""
    rng = np.random.default_rng(seed)
    out = []
    size = 0
    while size < n_chars:
        a, b = rng.choice(len(_NAMES), size=2, replace=False)
        for turn in range(int(rng.integers(2, 6))):
            who = _NAMES[a if turn % 2 == 0 else b]
            parts = []
            for _ in range(int(rng.integers(1, 3))):
                if rng.random() < 0.25:
                    parts.append(_INTERJ[rng.integers(len(_INTERJ))])
                s = f"{_SUBJ[rng.integers(len(_SUBJ))]} {_VERB[rng.integers(len(_VERB))]} " \
                    f"{_OBJ[rng.integers(len(_OBJ))]}{_TAIL[rng.integers(len(_TAIL))]}"
                parts.append(s + ("?" if rng.random() < 0.2 else "."))
            line = f"{who}: {' '.join(parts)}\n"
            out.append(line)
            size += len(line)
        out.append("\n")
        size += 1
    return "".join(out)
