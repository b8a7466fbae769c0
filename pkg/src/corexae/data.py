"""Datasets: synthetic generators with known information content, IDX and CXDS I/O."""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .infotheory import GaussianJoint, binary_entropy, gaussian_tc
from .rng import Rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CXDS_MAGIC = b"CXDS"
CXDS_VERSION = 1


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    values: np.ndarray
    labels: np.ndarray | None = None
    per_dim_entropy: np.ndarray | None = None
    tc: float | None = None  # analytic TC(x) when known
    factors: np.ndarray | None = None  # generative factor / mixing matrix
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DataFormatError(f"dataset values must be a matrix, got shape {self.values.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.n,):
                raise DataFormatError("labels must hold one entry per example")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]

    @property
    def is_binary(self) -> bool:
        return bool(np.all((self.values == 0.0) | (self.values == 1.0)))

    def subset(self, rows) -> "Dataset":
        return Dataset(self.values[rows], None if self.labels is None else self.labels[rows],
                       self.per_dim_entropy, self.tc, self.factors, dict(self.meta))


def plugin_binary_entropy(values: np.ndarray) -> np.ndarray:
    """Per-column Bernoulli entropy of the empirical mean."""
    return binary_entropy(np.asarray(values, dtype=np.float64).mean(axis=0))


@dataclass(frozen=True)
class SyntheticSpec:
    kind: str  # "linear-gaussian" | "bars" | "bars-mixture"
    latent_dim: int
    observed_dim: int
    noise_scale: float = 0.5
    mixing_seed: int = 0
    bar_prob: float = 0.3

    def __post_init__(self):
        if self.kind not in ("linear-gaussian", "bars", "bars-mixture"):
            raise ValueError(f"unknown synthetic kind {self.kind!r}")
        if self.latent_dim > self.observed_dim:
            raise ValueError("latent_dim must not exceed observed_dim")
        if self.noise_scale <= 0:
            raise ValueError("noise_scale must be positive")


def gen_linear_gaussian(spec: SyntheticSpec, rng: Rng, n: int, mixing: np.ndarray | None = None) -> Dataset:
    """x = W s + noise with s ~ N(0, I_k); stores the analytic covariance and TC(x).

    ``mixing`` overrides the random ``W`` drawn from ``spec.mixing_seed``.
    Per-dimension entropies are the exact Gaussian marginal entropies.
    """
    d, k = spec.observed_dim, spec.latent_dim
    W = np.asarray(mixing, dtype=np.float64) if mixing is not None else Rng(spec.mixing_seed, 7).normal((d, k))
    if W.shape != (d, k):
        raise ValueError(f"mixing matrix must be {(d, k)}, got {W.shape}")
    cov = W @ W.T + spec.noise_scale ** 2 * np.eye(d)
    s = rng.normal((n, k))
    x = s @ W.T + spec.noise_scale * rng.normal((n, d))
    ent = 0.5 * (math.log(2 * math.pi * math.e) + np.log(np.diag(cov)))
    ds = Dataset(x, per_dim_entropy=ent, tc=gaussian_tc(GaussianJoint(cov)), factors=W,
                 meta={"kind": "linear-gaussian", "covariance": cov})
    return ds


def bar_masks(side: int) -> np.ndarray:
    """``2 * side`` masks: rows first, then columns; each flattened to ``side**2``."""
    masks = np.zeros((2 * side, side, side))
    for i in range(side):
        masks[i, i, :] = 1.0
        masks[side + i, :, i] = 1.0
    return masks.reshape(2 * side, side * side)


def _side(d: int) -> int:
    side = math.isqrt(d)
    if side * side != d:
        raise ValueError(f"observed_dim {d} is not a perfect square")
    return side


def gen_bars(spec: SyntheticSpec, rng: Rng, n: int) -> Dataset:
    """Union of horizontal and vertical bars, each present with ``spec.bar_prob``.

    Labels are the bitmask of present bars (rows are bits ``0..side-1``).
    """
    side = _side(spec.observed_dim)
    masks = bar_masks(side)
    present = rng.bernoulli(spec.bar_prob, (n, 2 * side))
    x = (present @ masks > 0).astype(np.float64)
    labels = (present.astype(np.int64) << np.arange(2 * side)).sum(axis=1)
    return Dataset(x, labels=labels, per_dim_entropy=plugin_binary_entropy(x), factors=present,
                   meta={"kind": "bars", "side": side})


def gen_bars_mixture(side: int, rng: Rng, n: int, n_classes: int = 4, extra_prob: float = 0.05,
                     flip_prob: float = 0.02) -> Dataset:
    """Clustered bars: class ``c`` always shows its own pair of bars.

    Class prototypes alternate between row pairs and column pairs spread across
    the image. Every non-prototype bar appears with ``extra_prob`` and each
    pixel flips with ``flip_prob``.
    """
    groups = (n_classes + 1) // 2
    block = side // groups
    if block < 2:
        raise ValueError(f"side {side} too small for {n_classes} classes")
    masks = bar_masks(side)
    protos = np.zeros((n_classes, 2 * side))
    for c in range(n_classes):
        base = 0 if c % 2 == 0 else side
        start = (c // 2) * block + block // 4
        protos[c, base + start] = protos[c, base + start + 1] = 1
    labels = rng.integers(0, n_classes, n)
    extra = rng.bernoulli(extra_prob, (n, 2 * side))
    present = np.maximum(protos[labels], extra)
    x = (present @ masks > 0).astype(np.float64)
    flips = rng.bernoulli(flip_prob, x.shape)
    x = np.abs(x - flips)
    return Dataset(x, labels=labels, per_dim_entropy=plugin_binary_entropy(x), factors=protos,
                   meta={"kind": "bars-mixture", "side": side})


def batch_iter(ds: Dataset | np.ndarray, batch_size: int, rng: Rng) -> Iterator[np.ndarray]:
    """One epoch of shuffled batches (the last may be short)."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    values = ds.values if isinstance(ds, Dataset) else np.asarray(ds)
    order = rng.permutation(values.shape[0])
    for s in range(0, values.shape[0], batch_size):
        yield values[order[s:s + batch_size]]


# --- IDX ---------------------------------------------------------------------

def _read_idx(path, expected_magic: int) -> tuple[tuple[int, ...], np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise DataFormatError(f"{path}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise DataFormatError(f"{path}: bad IDX magic, expected 0x{expected_magic:08x}, got 0x{magic:08x}")
    ndim = magic & 0xFF
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    start = 4 + 4 * ndim
    count = int(np.prod(dims))
    if len(raw) - start < count:
        raise DataFormatError(f"{path}: truncated payload ({len(raw) - start} of {count} bytes)")
    return dims, np.frombuffer(raw, dtype=np.uint8, count=count, offset=start)


def load_idx(images_path, labels_path=None, binarize: float | None = None) -> Dataset:
    """Read IDX image (and optional label) files; pixels scaled to [0, 1]."""
    dims, pix = _read_idx(images_path, IDX_IMAGES_MAGIC)
    n = dims[0]
    x = pix.reshape(n, -1).astype(np.float64) / 255.0
    labels = None
    if labels_path is not None:
        ldims, lab = _read_idx(labels_path, IDX_LABELS_MAGIC)
        if ldims[0] != n:
            raise DataFormatError(f"count mismatch: {n} images but {ldims[0]} labels")
        labels = lab.astype(np.int64)
    entropy = None
    if binarize is not None:
        x = binarize_values(x, binarize)
        entropy = plugin_binary_entropy(x)
    return Dataset(x, labels=labels, per_dim_entropy=entropy, meta={"kind": "idx", "shape": list(dims[1:])})


def binarize_values(x, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(x) > threshold).astype(np.float64)


def write_idx(path, array: np.ndarray, labels: bool = False) -> None:
    arr = np.asarray(array, dtype=np.uint8)
    magic = (IDX_LABELS_MAGIC if labels else 0x00000800) | arr.ndim
    if not labels and arr.ndim != 3:
        raise ValueError("image IDX files hold a rank-3 array")
    Path(path).write_bytes(struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape) + arr.tobytes())


# --- CXDS container ----------------------------------------------------------

def save_dataset(ds: Dataset, path) -> None:
    """``CXDS`` | version | n | d | f64 payload | label flag [+ i64 labels] | CRC-32."""
    parts = [CXDS_MAGIC, struct.pack("<IQQ", CXDS_VERSION, ds.n, ds.d), ds.values.astype("<f8").tobytes()]
    if ds.labels is None:
        parts.append(b"\x00")
    else:
        parts.append(b"\x01")
        parts.append(ds.labels.astype("<i8").tobytes())
    body = b"".join(parts)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if raw[:4] != CXDS_MAGIC:
        raise DataFormatError(f"bad dataset magic: expected {CXDS_MAGIC!r}, got {raw[:4]!r}")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise DataFormatError("dataset checksum mismatch (file truncated or corrupt)")
    version, n, d = struct.unpack_from("<IQQ", body, 4)
    if version != CXDS_VERSION:
        raise DataFormatError(f"dataset version {version} unsupported")
    pos = 24
    values = np.frombuffer(body, dtype="<f8", count=n * d, offset=pos).reshape(n, d).astype(np.float64)
    pos += 8 * n * d
    labels = None
    if body[pos] == 1:
        labels = np.frombuffer(body, dtype="<i8", count=n, offset=pos + 1).astype(np.int64)
    ds = Dataset(values, labels=labels)
    if ds.is_binary:
        ds.per_dim_entropy = plugin_binary_entropy(values)
    return ds
