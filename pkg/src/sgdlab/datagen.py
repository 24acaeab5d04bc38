"""Synthetic Gauss-k data with label corruption, plus IDX / CIFAR-10 ingestion.

Gauss-k draws k class means uniformly from [-10, 10]^d and an equal number
of samples per class from N(mean, I_d). Corruption redraws a per-class
ceiling fraction of labels uniformly from all k classes (the replacement
may coincide with the original). Generation uses its own RNG stream so a
dataset stays fixed across training runs.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, InputError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 3073

# Stream tags keep dataset draws independent of training randomness.
_TAG_MEANS = 101
_TAG_SAMPLES = 102
_TAG_CORRUPT = 103


@dataclass
class Dataset:
    features: np.ndarray  # (n, d) float64
    labels: np.ndarray    # (n,) int64 in [0, k)
    k: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.shape != (self.features.shape[0],):
            raise InputError("features must be (n, d) with matching (n,) labels")

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def d(self):
        return self.features.shape[1]


def generate_gauss_k(n: int, d: int, k: int, seed: int) -> Dataset:
    """Equal per-class samples from k isotropic Gaussians; deterministic in seed."""
    if n % k != 0:
        raise InputError(f"n={n} must be divisible by k={k}")
    rng_means = np.random.default_rng(np.random.SeedSequence([int(seed), _TAG_MEANS]))
    rng_samples = np.random.default_rng(np.random.SeedSequence([int(seed), _TAG_SAMPLES]))
    means = rng_means.uniform(-10.0, 10.0, size=(k, d))
    per = n // k
    features = np.empty((n, d))
    labels = np.empty(n, dtype=np.int64)
    for c in range(k):
        block = slice(c * per, (c + 1) * per)
        features[block] = means[c] + rng_samples.standard_normal((per, d))
        labels[block] = c
    meta = {"source": "gauss", "seed": int(seed), "corruption_fraction": 0.0,
            "class_means": means.tolist()}
    return Dataset(features, labels, k, meta)


def corrupt_labels(ds: Dataset, r: float, seed: int) -> Dataset:
    """Redraw ceil(r * class_size) labels per class uniformly from {0..k-1}.

    Features are shared with the input dataset, bit for bit.
    """
    if not 0.0 <= r <= 1.0:
        raise InputError("corruption fraction must lie in [0, 1]")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), _TAG_CORRUPT]))
    labels = ds.labels.copy()
    changed = 0
    for c in range(ds.k):
        idx = np.flatnonzero(ds.labels == c)
        take = math.ceil(r * len(idx))
        if take == 0:
            continue
        chosen = rng.permutation(idx)[:take]
        labels[chosen] = rng.integers(0, ds.k, size=take)
        changed += take
    meta = dict(ds.meta)
    meta["corruption_fraction"] = float(r)
    meta["corruption_seed"] = int(seed)
    meta["labels_redrawn"] = changed
    return Dataset(ds.features, labels, ds.k, meta)


def split_dataset(ds: Dataset, n_train: int) -> tuple:
    """Deterministic stratified split: first per-class block goes to train."""
    if n_train % ds.k != 0 or not 0 < n_train < ds.n:
        raise InputError("n_train must be a positive multiple of k below n")
    per = n_train // ds.k
    tr_idx, te_idx = [], []
    for c in range(ds.k):
        idx = np.flatnonzero(ds.labels == c)
        if len(idx) < per:
            raise InputError(f"class {c} has fewer than {per} samples")
        tr_idx.extend(idx[:per])
        te_idx.extend(idx[per:])
    tr = np.asarray(tr_idx)
    te = np.asarray(te_idx)
    mk = lambda sel, tag: Dataset(ds.features[sel], ds.labels[sel], ds.k,
                                  {**ds.meta, "split": tag})
    return mk(tr, "train"), mk(te, "test")


# ---------------------------------------------------------------------------
# file ingestion


def _read_exact(fh, count, path, offset):
    buf = fh.read(count)
    if len(buf) != count:
        raise FormatError(f"{path}: truncated, wanted {count} bytes", offset=offset)
    return buf


def load_idx(images_path, labels_path) -> Dataset:
    """IDX image/label pair (big-endian), flattened to (n, rows*cols) floats."""
    with open(images_path, "rb") as fh:
        magic, n, rows, cols = struct.unpack(">IIII", _read_exact(fh, 16, images_path, 0))
        if magic != IDX_IMAGES_MAGIC:
            raise FormatError(f"{images_path}: bad magic 0x{magic:08x}", offset=0)
        raw = fh.read()
        if len(raw) != n * rows * cols:
            raise FormatError(
                f"{images_path}: declared {n}x{rows}x{cols} pixels, found {len(raw)} bytes",
                offset=16)
        features = np.frombuffer(raw, dtype=np.uint8).astype(np.float64)
        features = features.reshape(n, rows * cols)
    with open(labels_path, "rb") as fh:
        magic, n_lab = struct.unpack(">II", _read_exact(fh, 8, labels_path, 0))
        if magic != IDX_LABELS_MAGIC:
            raise FormatError(f"{labels_path}: bad magic 0x{magic:08x}", offset=0)
        raw = fh.read()
        if len(raw) != n_lab:
            raise FormatError(
                f"{labels_path}: declared {n_lab} labels, found {len(raw)} bytes", offset=8)
        labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    if n_lab != n:
        raise FormatError(f"label count {n_lab} does not match image count {n}", offset=4)
    k = int(labels.max()) + 1 if n else 0
    return Dataset(features, labels, max(k, 1),
                   {"source": "idx", "rows": rows, "cols": cols})


def load_cifar_bin(paths) -> Dataset:
    """CIFAR-10 binary batches: 3073-byte records, pixels rescaled to [0, 1]."""
    if isinstance(paths, (str, bytes)):
        paths = [paths]
    feats, labs = [], []
    for path in paths:
        with open(path, "rb") as fh:
            raw = fh.read()
        if len(raw) == 0 or len(raw) % CIFAR_RECORD_BYTES != 0:
            raise FormatError(
                f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD_BYTES}",
                offset=len(raw) - (len(raw) % CIFAR_RECORD_BYTES))
        arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
        labels = arr[:, 0].astype(np.int64)
        if labels.max(initial=0) > 9:
            bad = int(np.argmax(arr[:, 0] > 9))
            raise FormatError(f"{path}: label byte out of range",
                              offset=bad * CIFAR_RECORD_BYTES)
        feats.append(arr[:, 1:].astype(np.float64) / 255.0)
        labs.append(labels)
    features = np.concatenate(feats, axis=0)
    labels = np.concatenate(labs)
    return Dataset(features, labels, 10, {"source": "cifar", "channels": 3,
                                          "channel_size": 1024})


# ---------------------------------------------------------------------------
# normalization


def normalize(ds: Dataset, stats=None) -> Dataset:
    """Center and scale features; per color channel for CIFAR, per scalar else.

    The fitted (mean, std) pairs land in meta["norm_stats"] so the same
    transform can be reapplied to held-out rows via apply_normalization.
    """
    if stats is None:
        stats = fit_normalization(ds)
    out = apply_normalization(ds, stats)
    return out


def fit_normalization(ds: Dataset) -> dict:
    if ds.meta.get("source") == "cifar":
        ch = int(ds.meta.get("channels", 3))
        size = int(ds.meta.get("channel_size", ds.d // ch))
        mean, std = [], []
        for c in range(ch):
            block = ds.features[:, c * size:(c + 1) * size]
            m, s = float(block.mean()), float(block.std())
            if s == 0.0:
                raise InputError(f"channel {c} has zero standard deviation")
            mean.append(m)
            std.append(s)
        return {"kind": "per_channel", "mean": mean, "std": std, "channel_size": size}
    m, s = float(ds.features.mean()), float(ds.features.std())
    if s == 0.0:
        raise InputError("features have zero standard deviation")
    return {"kind": "scalar", "mean": [m], "std": [s]}


def apply_normalization(ds: Dataset, stats: dict) -> Dataset:
    feats = ds.features.copy()
    if stats["kind"] == "per_channel":
        size = int(stats["channel_size"])
        for c, (m, s) in enumerate(zip(stats["mean"], stats["std"])):
            feats[:, c * size:(c + 1) * size] = (feats[:, c * size:(c + 1) * size] - m) / s
    else:
        feats = (feats - stats["mean"][0]) / stats["std"][0]
    meta = dict(ds.meta)
    meta["norm_stats"] = stats
    return Dataset(feats, ds.labels.copy(), ds.k, meta)


# ---------------------------------------------------------------------------
# single-file container: JSON header line + f8 features + i4 labels

_DATASET_FORMAT = "sgdlab-dataset-1"


def save_dataset(path, ds: Dataset):
    header = {"format": _DATASET_FORMAT, "n": ds.n, "d": ds.d, "k": ds.k, "meta": ds.meta}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        fh.write(ds.features.astype("<f8").tobytes())
        fh.write(ds.labels.astype("<i4").tobytes())


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        try:
            header = json.loads(fh.readline().decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: missing JSON header", offset=0) from exc
        if header.get("format") != _DATASET_FORMAT:
            raise FormatError(f"{path}: unknown container format", offset=0)
        n, d = int(header["n"]), int(header["d"])
        fbytes = _read_exact(fh, 8 * n * d, path, None)
        lbytes = _read_exact(fh, 4 * n, path, None)
    features = np.frombuffer(fbytes, dtype="<f8").reshape(n, d).astype(np.float64)
    labels = np.frombuffer(lbytes, dtype="<i4").astype(np.int64)
    return Dataset(features, labels, int(header["k"]), header.get("meta", {}))
