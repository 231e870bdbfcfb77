"""Datasets: the heteroskedastic 1-D regression task and corrupted digits."""
from __future__ import annotations

import gzip
import hashlib
import json
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffmath as dm
from . import kernels
from .conformal import Dataset
from .diffmath import MLPArch, ParamVector, Tape
from .optim import make_optimizer

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

NOISE_STD = 1.3
MAX_ROTATION_DEG = 30.0

REGRESSION_BASE_ARCH = MLPArch((1, 64, 64, 1), "relu")
CLASSIFIER_ARCH = MLPArch((784, 256, 128, 10), "relu")


# --- regression -------------------------------------------------------------

def regression_target(x, eps1, eps2):
    """y = cos(5x) + 0.3 eps1 + 1.8 sigmoid(5x) eps2."""
    x = np.asarray(x, dtype=np.float64)
    return np.cos(5.0 * x) + 0.3 * eps1 + 1.8 * dm.sigmoid_np(np.atleast_1d(5.0 * x)).reshape(x.shape) * eps2


def sample_regression(n: int, rng: np.random.Generator, noise: bool = True) -> Dataset:
    x = rng.uniform(-1.0, 1.0, n)
    if noise:
        e1 = rng.uniform(-0.5, 0.5, n)
        e2 = rng.uniform(-0.5, 0.5, n)
    else:
        e1 = e2 = np.zeros(n)
    return Dataset(x, regression_target(x, e1, e2))


@dataclass(frozen=True, eq=False)
class RegressionTask:
    train: Dataset
    cal: Dataset
    test: Dataset


def gen_regression(n_train: int, n_cal: int, n_test: int, seed: int, noise: bool = True) -> RegressionTask:
    """Independent train/calibration/test draws; each split has its own stream."""
    if min(n_train, n_cal, n_test) < 1:
        raise ValueError("split sizes must be positive")
    streams = np.random.SeedSequence([int(seed), 0x5EED]).spawn(3)
    return RegressionTask(*(sample_regression(n, np.random.default_rng(s), noise)
                            for n, s in zip((n_train, n_cal, n_test), streams)))


def _fit(loss_fn, params: np.ndarray, steps: int, lr: float, optimizer: str,
         n: int, batch: int, rng: np.random.Generator) -> np.ndarray:
    opt = make_optimizer(optimizer, lr)
    for _ in range(steps):
        idx = rng.choice(n, size=batch, replace=False) if batch < n else np.arange(n)
        tape = Tape()
        p = tape.variable(params)
        loss = loss_fn(p, idx)
        (g,) = tape.backward(loss, [p])
        (params,) = opt.step([params], [g])
    return params


def mse_loss(params, arch: MLPArch, x, y):
    pred = dm.forward_mlp(params, arch, np.asarray(x, dtype=np.float64).reshape(-1, 1))
    return dm.mean(dm.square(dm.sub(dm.reshape(pred, (len(y),)), y)))


def train_base_regressor(train: Dataset, steps: int = 3000, lr: float = 0.05, seed: int = 0,
                         arch: MLPArch = REGRESSION_BASE_ARCH, optimizer: str = "sgd",
                         batch: int | None = None) -> ParamVector:
    """Least-squares fit of the base regressor f; returns frozen parameters."""
    if len(train) == 0:
        raise ValueError("training split is empty")
    rng = np.random.default_rng([int(seed), 0xF17])
    params = arch.init(rng)
    batch = len(train) if batch is None else batch
    params = _fit(lambda p, idx: mse_loss(p, arch, train.x[idx], train.y[idx]),
                  params, steps, lr, optimizer, len(train), batch, rng)
    return ParamVector(params, arch.layout("base."))


# --- IDX ingestion ----------------------------------------------------------

class IdxFormatError(ValueError):
    pass


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def read_idx(path, magic: int) -> np.ndarray:
    """Parse one big-endian IDX file of unsigned bytes."""
    data = _read_bytes(path)
    if len(data) < 4:
        raise IdxFormatError(f"{path}: truncated header, {len(data)} bytes")
    (found,) = struct.unpack(">I", data[:4])
    if found != magic:
        raise IdxFormatError(f"{path}: bad magic 0x{found:08x} at offset 0, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(data) < head:
        raise IdxFormatError(f"{path}: truncated header, need {head} bytes, have {len(data)}")
    dims = struct.unpack(f">{ndim}I", data[4:head])
    need = head + int(np.prod(dims))
    if len(data) < need:
        raise IdxFormatError(f"{path}: truncated payload, need {need} bytes, have {len(data)}")
    return np.frombuffer(data, dtype=np.uint8, count=need - head, offset=head).reshape(dims)


def load_idx(images_path, labels_path) -> Dataset:
    """Images scaled to [0, 1] with shape (n, rows, cols), labels as int64."""
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise IdxFormatError(f"count mismatch: {len(images)} images but {len(labels)} labels")
    return Dataset(images.astype(np.float64) / 255.0, labels.astype(np.int64))


def write_idx(path, array: np.ndarray) -> None:
    """Write uint8 data as IDX (used for fixtures and exported corrupted sets)."""
    a = np.ascontiguousarray(array, dtype=np.uint8)
    header = struct.pack(">I", 0x0800 | a.ndim) + struct.pack(f">{a.ndim}I", *a.shape)
    Path(path).write_bytes(header + a.tobytes())


# --- digits -----------------------------------------------------------------

def _blob_templates(size: int = 28, n_classes: int = 10, blobs: int = 3, seed: int = 1234):
    rng = np.random.default_rng(seed)
    lo, hi = size * 0.25, size * 0.75
    return rng.uniform(lo, hi, size=(n_classes, blobs, 2))


def synthetic_digits(n: int, seed: int, size: int = 28, n_classes: int = 10) -> Dataset:
    """Ten-class 28x28 images made of class-specific Gaussian blobs in [0, 1].

    Stand-in for handwritten digits: jittered blob positions and intensities
    plus mild pixel noise.
    """
    centers = _blob_templates(size, n_classes)
    rng = np.random.default_rng([int(seed), 0xD161])
    labels = rng.integers(0, n_classes, n)
    jitter = rng.normal(0.0, 1.0, size=(n, centers.shape[1], 2))
    amp = rng.uniform(0.6, 1.0, size=(n, centers.shape[1]))
    grid = np.arange(size, dtype=np.float64)
    c = centers[labels] + jitter
    # separable Gaussian bumps, width 2.5 px
    gy = np.exp(-0.5 * ((grid[None, None, :] - c[..., 0:1]) / 2.5) ** 2)
    gx = np.exp(-0.5 * ((grid[None, None, :] - c[..., 1:2]) / 2.5) ** 2)
    img = np.einsum("nb,nbi,nbj->nij", amp, gy, gx)
    img += rng.normal(0.0, 0.05, size=img.shape)
    return Dataset(np.clip(img, 0.0, 1.0), labels.astype(np.int64))


def corruption_params(seed: int, index: int, shape, max_angle_deg: float = MAX_ROTATION_DEG,
                      noise_std: float = NOISE_STD):
    """Rotation angle (radians) and additive noise for one image."""
    rng = np.random.default_rng([int(seed), int(index)])
    angle = math.radians(rng.uniform(-max_angle_deg, max_angle_deg))
    return angle, noise_std * rng.standard_normal(shape)


def corrupt(images, seed: int, max_angle_deg: float = MAX_ROTATION_DEG,
            noise_std: float = NOISE_STD, start_index: int = 0) -> np.ndarray:
    """Random rotation plus Gaussian pixel noise, unclipped.

    Image ``i`` depends only on (seed, start_index + i).
    """
    images = np.asarray(images, dtype=np.float64)
    n = len(images)
    angles = np.empty(n)
    noise = np.empty_like(images)
    for i in range(n):
        angles[i], noise[i] = corruption_params(seed, start_index + i, images.shape[1:],
                                                max_angle_deg, noise_std)
    return kernels.rotate_bilinear(images, angles) + noise


@dataclass(frozen=True, eq=False)
class ClassificationTask:
    train: Dataset  # clean, for the base classifier
    pool: Dataset   # corrupted, split into calibration and test per seed

    def split(self, seed: int, n_cal: int, n_test: int) -> tuple[Dataset, Dataset]:
        if n_cal + n_test > len(self.pool):
            raise ValueError(f"pool of {len(self.pool)} too small for {n_cal} + {n_test}")
        perm = np.random.default_rng([int(seed), 0x5B117]).permutation(len(self.pool))
        return self.pool.subset(perm[:n_cal]), self.pool.subset(perm[n_cal:n_cal + n_test])


def flatten(data: Dataset) -> Dataset:
    return Dataset(data.x.reshape(len(data), -1), data.y)


def cross_entropy(params, arch: MLPArch, x, y):
    logp = dm.forward_mlp(params, MLPArch(arch.sizes, arch.activation, "log_softmax"), x)
    picked = dm.take_along_last(logp, np.asarray(y, dtype=np.int64)[:, None])
    return dm.neg(dm.mean(picked))


def predict_proba(params: ParamVector | np.ndarray, arch: MLPArch, x) -> np.ndarray:
    p = params.values if isinstance(params, ParamVector) else params
    logp = dm.forward_mlp(p, MLPArch(arch.sizes, arch.activation, "log_softmax"),
                          np.asarray(x, dtype=np.float64).reshape(len(x), -1))
    return np.exp(logp)


def accuracy(params, arch: MLPArch, data: Dataset) -> float:
    return float((predict_proba(params, arch, data.x).argmax(axis=1) == data.y).mean())


def train_base_classifier(data: Dataset, arch: MLPArch = CLASSIFIER_ARCH, steps: int = 1500,
                          lr: float = 1e-3, seed: int = 0, batch: int = 100,
                          optimizer: str = "adam") -> ParamVector:
    """Cross-entropy training on clean images; returns the full parameter vector."""
    if len(data) == 0:
        raise ValueError("training data is empty")
    flat = flatten(data)
    rng = np.random.default_rng([int(seed), 0xC1A5])
    params = arch.init(rng)
    params = _fit(lambda p, idx: cross_entropy(p, arch, flat.x[idx], flat.y[idx]),
                  params, steps, lr, optimizer, len(flat), batch, rng)
    return ParamVector(params, arch.layout("net."))


def split_network(params: ParamVector, arch: MLPArch, frozen_layers: int):
    """Split a trained dense network into a frozen feature stack and a trainable head.

    Returns (base_arch, base_params, head_arch, head_theta); the base is None
    when ``frozen_layers`` is 0.  The feature stack ends with the hidden
    activation so that head(features) reproduces the full network.
    """
    n_layers = len(arch.sizes) - 1
    if not 0 <= frozen_layers < n_layers:
        raise ValueError(f"frozen_layers must lie in [0, {n_layers - 1}]")
    head_arch = MLPArch(arch.sizes[frozen_layers:], arch.activation, "log_softmax")
    if frozen_layers == 0:
        return None, None, head_arch, params.values.copy()
    base_arch = MLPArch(arch.sizes[:frozen_layers + 1], arch.activation, arch.activation)
    cut = base_arch.layout().size
    base = ParamVector(params.values[:cut], base_arch.layout("base."))
    return base_arch, base, head_arch, params.values[cut:].copy()


# --- cache ------------------------------------------------------------------

CACHE_VERSION = 1


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def cached_arrays(cache_dir, key: dict, build) -> dict:
    """Load the arrays for ``key`` from ``cache_dir`` or build and store them."""
    if cache_dir is None:
        return build()
    key = dict(key, cache_version=CACHE_VERSION)
    path = Path(cache_dir) / f"{key.get('kind', 'data')}-{config_hash(key)}.npz"
    if path.exists():
        with np.load(path, allow_pickle=False) as z:
            return {k: z[k] for k in z.files}
    arrays = build()
    path.parent.mkdir(parents=True, exist_ok=True)
    # unique temporary name: concurrent workers may build the same entry
    tmp = path.with_name(f"{path.name}.{os.getpid()}.tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    tmp.replace(path)
    return arrays
