"""Generation and analysis: prior vs aggregated-marginal sampling, traversals, reports, PGM grids."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import spearmanr

from .infotheory import (
    GaussianMixture1D,
    MIReport,
    TightnessResult,
    estimate_mi_latent,
    fit_aggregated_marginal,
    marginal_tightness,
)
from .models import HierarchicalModel, dist_mean, encode, generate
from .rng import Rng
from .tensor import Tensor


class BankMismatchError(ValueError):
    pass


def _latent_layer(model: HierarchicalModel) -> int:
    """Index of the top continuous layer."""
    for l in range(model.n_layers - 1, -1, -1):
        if model.layers[l].kind == "continuous":
            return l
    raise ValueError("model has no continuous latent layer")


def encoder_stats(model: HierarchicalModel, x: np.ndarray, batch_size: int = 2048) -> tuple[np.ndarray, np.ndarray]:
    """Posterior means and log-variances of the top continuous layer along the mean path."""
    layer = _latent_layer(model)
    mus, lvs = [], []
    for s in range(0, x.shape[0], batch_size):
        path = encode(model, x[s:s + batch_size], None, deterministic=True)
        post = path.posteriors[layer]
        mus.append(post.mean.value)
        lvs.append(post.log_var.value)
    return np.concatenate(mus), np.concatenate(lvs)


@dataclass
class MarginalBank:
    mixtures: list[GaussianMixture1D]
    subsample: int
    seed: int
    model_fingerprint: int
    layer: int

    def moments(self) -> tuple[np.ndarray, np.ndarray]:
        return (np.array([m.mean for m in self.mixtures]), np.array([m.variance for m in self.mixtures]))

    def to_json(self) -> str:
        return json.dumps({"subsample": self.subsample, "seed": self.seed, "layer": self.layer,
                           "model_fingerprint": self.model_fingerprint,
                           "mixtures": [m.to_dict() for m in self.mixtures]})

    @classmethod
    def from_json(cls, text: str) -> "MarginalBank":
        d = json.loads(text)
        return cls([GaussianMixture1D.from_dict(m) for m in d["mixtures"]], d["subsample"], d["seed"],
                   d["model_fingerprint"], d["layer"])


def fit_marginal_bank(model: HierarchicalModel, x: np.ndarray, rng: Rng, n: int = 1024, seed: int = 0) -> MarginalBank:
    means, log_vars = encoder_stats(model, x)
    # one shared subsample keeps the per-dimension mixtures aligned on the same examples
    rows = np.arange(x.shape[0]) if x.shape[0] <= n else np.sort(rng.choice(x.shape[0], n))
    mixtures = [fit_aggregated_marginal(means[rows], log_vars[rows], i, n=rows.size) for i in range(means.shape[1])]
    return MarginalBank(mixtures, int(rows.size), seed, model.params.fingerprint(), _latent_layer(model))


def _decode_top(model: HierarchicalModel, z_latent: np.ndarray, rng: Rng | None) -> np.ndarray:
    """Decode codes for the top continuous layer down to likelihood means."""
    layer = _latent_layer(model)
    z = Tensor(z_latent)
    for l in range(layer, -1, -1):
        dist = model.conditional(l, z)
        if l == 0:
            return dist_mean(dist).value.copy()
        z = dist.mean if rng is None else dist.mean + np.exp(0.5 * dist.log_var.value) * rng.normal(dist.shape)
    raise AssertionError("unreachable")


def sample_prior(model: HierarchicalModel, n: int, rng: Rng, return_codes: bool = False):
    """Draw from the top prior and decode to likelihood means ``[n, d]``."""
    if n == 0:
        empty = np.zeros((0, model.data_dim))
        return (empty, np.zeros((0, model.top.width))) if return_codes else empty
    if model.top.kind == "categorical":
        codes = np.eye(model.top.width)[rng.integers(0, model.top.width, n)]
    else:
        codes = rng.normal((n, model.top.width))
    out = generate(model, codes, rng.split(1))
    return (out, codes) if return_codes else out


def sample_marginals(model: HierarchicalModel, bank: MarginalBank, n: int, rng: Rng, return_codes: bool = False):
    """Draw every top continuous latent independently from its fitted mixture, then decode."""
    if bank.model_fingerprint != model.params.fingerprint():
        raise BankMismatchError("marginal bank was fitted on a different parameter snapshot")
    codes = np.stack([mix.sample(rng.split(i), n) for i, mix in enumerate(bank.mixtures)], axis=1) if n else \
        np.zeros((0, len(bank.mixtures)))
    out = _decode_top(model, codes, rng.split(len(bank.mixtures))) if n else np.zeros((0, model.data_dim))
    return (out, codes) if return_codes else out


@dataclass
class VarianceReport:
    dims: np.ndarray
    variances: np.ndarray
    mi: np.ndarray
    mi_se: np.ndarray
    cumulative: list[tuple[float, float]] = field(default_factory=list)  # (variance, fraction <= variance)
    spearman: float = float("nan")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["dim", "variance", "mi_nats", "mi_se"])
        for row in zip(self.dims, self.variances, self.mi, self.mi_se):
            w.writerow([int(row[0])] + [repr(float(v)) for v in row[1:]])
        return buf.getvalue()

    def cumulative_csv(self) -> str:
        lines = ["variance,fraction"] + [f"{v!r},{f!r}" for v, f in self.cumulative]
        return "\n".join(lines) + "\n"


def variance_report(bank: MarginalBank, mi: MIReport | None = None) -> VarianceReport:
    """Per-dimension mixture variance alongside MI, plus the variance CDF and rank correlation."""
    _, var = bank.moments()
    dims = np.arange(var.size)
    mi_val = np.full(var.size, np.nan)
    mi_se = np.full(var.size, np.nan)
    if mi is not None:
        for e in mi.entries:
            mi_val[e.dim] = e.value
            mi_se[e.dim] = e.std_err
    sv = np.sort(var)
    cumulative = [(float(v), (i + 1) / sv.size) for i, v in enumerate(sv)]
    rho = float("nan")
    if mi is not None and var.size > 2 and np.all(np.isfinite(mi_val)):
        rho = float(spearmanr(var, mi_val).statistic)
    return VarianceReport(dims, var, mi_val, mi_se, cumulative, rho)


@dataclass(frozen=True)
class TraversalSpec:
    dims: tuple[int, ...]
    lo: float = -3.0
    hi: float = 3.0
    steps: int = 7

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError("traversal range needs lo < hi")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")

    def grid(self) -> np.ndarray | None:
        """Traversal values; None for a single step, which keeps the encoded code."""
        return np.linspace(self.lo, self.hi, self.steps) if self.steps > 1 else None


def latent_traverse(model: HierarchicalModel, spec: TraversalSpec, source=None, categories=None,
                    rng: Rng | None = None, dim: int | None = None) -> np.ndarray:
    """Image grid ``[rows, steps, d]`` varying one top continuous latent.

    Rows come from seed images ``source`` (encoded to posterior means) or, for a
    categorical top layer, from ``categories``: codes are the conditional means
    of the continuous layer given each category (sampled when ``rng`` is set).
    The varied dimension is ``dim`` or the first of ``spec.dims``.
    """
    layer = _latent_layer(model)
    width = model.layers[layer].width
    target = spec.dims[0] if dim is None else dim
    if not 0 <= target < width:
        raise ValueError(f"latent dim {target} out of range for width {width}")
    if source is not None:
        base, _ = encoder_stats(model, np.atleast_2d(np.asarray(source, dtype=np.float64)))
    elif categories is not None:
        if model.top.kind != "categorical":
            raise ValueError("category rows need a categorical top layer")
        onehot = np.eye(model.top.width)[list(categories)]
        dist = model.conditional(model.n_layers - 1, onehot)
        base = dist.mean.value.copy()
        if rng is not None:
            base = base + np.exp(0.5 * dist.log_var.value) * rng.normal(base.shape)
    else:
        raise ValueError("latent_traverse needs seed images or categories")
    grid = spec.grid()
    rows = []
    for code in base:
        codes = np.repeat(code[None, :], spec.steps, axis=0)
        if grid is not None:
            codes[:, target] = grid
        rows.append(_decode_top(model, codes, None))
    return np.stack(rows)


def write_pgm_grid(images: np.ndarray, path, side: int | None = None) -> tuple[int, int]:
    """Tile ``[rows, cols, side*side]`` images into a plain (P2) PGM; returns ``(height, width)``.

    Images are separated by one-pixel lines of gray 128.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 2:
        images = images[None]
    r, c, d = images.shape
    side = side or math.isqrt(d)
    if side * side != d:
        raise ValueError(f"image size {d} is not square")
    if np.any(images < 0) or np.any(images > 1) or not np.all(np.isfinite(images)):
        raise ValueError("pixel values must lie in [0, 1]")
    h, w = r * side + (r - 1), c * side + (c - 1)
    canvas = np.full((h, w), 128, dtype=np.int64)
    for i in range(r):
        for j in range(c):
            tile = np.rint(images[i, j].reshape(side, side) * 255).astype(np.int64)
            canvas[i * (side + 1):i * (side + 1) + side, j * (side + 1):j * (side + 1) + side] = tile
    lines = ["P2", f"{w} {h}", "255"] + [" ".join(map(str, row)) for row in canvas]
    Path(path).write_text("\n".join(lines) + "\n")
    return h, w


def read_pgm(path) -> np.ndarray:
    tokens = Path(path).read_text().split()
    if tokens[0] != "P2":
        raise ValueError("not a plain PGM file")
    w, h, _ = int(tokens[1]), int(tokens[2]), int(tokens[3])
    return np.array(tokens[4:4 + w * h], dtype=np.int64).reshape(h, w)


# --- two-sample energy test ---------------------------------------------------

def _pairwise_mean_dist(a: np.ndarray, b: np.ndarray) -> float:
    d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return float(np.sqrt(np.maximum(d2, 0.0)).mean())


@dataclass
class EnergyTestResult:
    statistic: float
    p_value: float
    alpha: float
    n_used: int

    @property
    def equivalent(self) -> bool:
        """True when the test does not reject equality of distributions."""
        return self.p_value > self.alpha


def energy_test(a: np.ndarray, b: np.ndarray, rng: Rng, n_perm: int = 199, alpha: float = 0.01,
                max_points: int = 1000) -> EnergyTestResult:
    """Permutation-calibrated energy-distance two-sample test.

    At most ``max_points`` rows of each sample enter the permutation null,
    which keeps the pooled distance matrix small.
    """
    a = np.asarray(a, dtype=np.float64).reshape(len(a), -1)
    b = np.asarray(b, dtype=np.float64).reshape(len(b), -1)
    if a.shape[0] > max_points:
        a = a[rng.choice(a.shape[0], max_points)]
    if b.shape[0] > max_points:
        b = b[rng.choice(b.shape[0], max_points)]
    pooled = np.concatenate([a, b])
    sq = (pooled * pooled).sum(1)
    D = np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2.0 * pooled @ pooled.T, 0.0))
    na = a.shape[0]

    def stat(idx):
        ia, ib = idx[:na], idx[na:]
        return 2 * D[np.ix_(ia, ib)].mean() - D[np.ix_(ia, ia)].mean() - D[np.ix_(ib, ib)].mean()

    base = np.arange(pooled.shape[0])
    observed = stat(base)
    null = np.array([stat(rng.permutation(pooled.shape[0])) for _ in range(n_perm)])
    p = (1 + np.sum(null >= observed)) / (n_perm + 1)
    return EnergyTestResult(float(observed), float(p), alpha, int(pooled.shape[0]))


# --- per-latent information reports -------------------------------------------

def mi_report(model: HierarchicalModel, x: np.ndarray, rng: Rng, bank: MarginalBank | None = None,
              n_points: int = 512, n_draws: int = 256, reference: str = "mixture") -> MIReport:
    """I(x : z_i) for each top continuous latent as E_x KL(p(z_i|x) || reference).

    ``reference`` is the fitted aggregated marginal (``mixture``, the MI
    estimate) or ``standard`` for the N(0,1) prior (an upper bound).
    """
    if reference not in ("mixture", "standard"):
        raise ValueError(f"unknown MI reference {reference!r}")
    means, log_vars = encoder_stats(model, x)
    if reference == "mixture" and bank is None:
        bank = fit_marginal_bank(model, x, rng.split(0))
    entries = []
    for i in range(means.shape[1]):
        marginal = bank.mixtures[i] if reference == "mixture" else None
        entries.append(estimate_mi_latent(means, log_vars, i, marginal, rng.split(1).split(i), n_points, n_draws))
    return MIReport(entries)


def tightness_report(model: HierarchicalModel, x: np.ndarray, bank: MarginalBank, rng: Rng,
                     n_points: int = 512, n_draws: int = 256) -> list[TightnessResult]:
    """Per-dimension paired KL to the fitted mixture vs KL to N(0,1)."""
    means, log_vars = encoder_stats(model, x)
    return [marginal_tightness(means, log_vars, i, bank.mixtures[i], rng.split(i), n_points, n_draws)
            for i in range(means.shape[1])]


def tightness_csv(results: Sequence[TightnessResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["dim", "kl_mixture", "kl_mixture_se", "kl_standard", "kl_standard_se", "gap", "gap_se"])
    for r in results:
        w.writerow([r.dim] + [repr(float(v)) for v in (r.kl_mixture, r.kl_mixture_se, r.kl_standard,
                                                       r.kl_standard_se, r.gap, r.gap_se)])
    return buf.getvalue()


def tile(images: np.ndarray, cols: int | None = None) -> np.ndarray:
    """Arrange ``[n, d]`` images as ``[rows, cols, d]``; blank tiles pad the last row."""
    images = np.asarray(images, dtype=np.float64)
    n = images.shape[0]
    cols = cols or max(1, math.ceil(math.sqrt(n)))
    rows = max(1, math.ceil(n / cols))
    out = np.zeros((rows * cols, images.shape[1]))
    out[:n] = images
    return out.reshape(rows, cols, -1)
