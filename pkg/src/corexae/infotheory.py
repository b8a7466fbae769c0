"""Exact and Monte Carlo information quantities, all in nats.

Exact oracles work on enumerable discrete joints (``DiscreteJoint``) and on
multivariate Gaussians. The estimators at the bottom operate on encoder
outputs of a trained model: equal-weight mixtures of posterior marginals stand
in for the aggregated posterior of each latent dimension.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .rng import Rng

MAX_STATES = 2 ** 20
LOG_2PI = math.log(2.0 * math.pi)


class EnumerationGuardError(ValueError):
    pass


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    pass


# --- discrete joints ------------------------------------------------------

def _entropy(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


@dataclass
class DiscreteJoint:
    """Joint table over x-variables (leading axes) then z-variables."""

    table: np.ndarray
    n_x: int

    def __post_init__(self):
        self.table = np.asarray(self.table, dtype=np.float64)
        if self.table.size > MAX_STATES:
            raise EnumerationGuardError(f"{self.table.size} joint states exceed the enumeration guard of {MAX_STATES}")
        if np.any(self.table < 0) or abs(self.table.sum() - 1.0) > 1e-12:
            raise ValueError("joint table must be non-negative and sum to 1")
        if not 0 < self.n_x <= self.table.ndim:
            raise ValueError(f"n_x={self.n_x} invalid for a rank-{self.table.ndim} table")

    @property
    def x_cardinalities(self) -> tuple[int, ...]:
        return self.table.shape[: self.n_x]

    @property
    def z_cardinalities(self) -> tuple[int, ...]:
        return self.table.shape[self.n_x:]

    @property
    def x_axes(self) -> tuple[int, ...]:
        return tuple(range(self.n_x))

    @property
    def z_axes(self) -> tuple[int, ...]:
        return tuple(range(self.n_x, self.table.ndim))

    def marginal(self, axes: Sequence[int]) -> np.ndarray:
        drop = tuple(a for a in range(self.table.ndim) if a not in set(axes))
        return self.table.sum(axis=drop)

    def entropy(self, axes: Sequence[int]) -> float:
        return _entropy(self.marginal(axes)) if len(axes) else 0.0

    def mutual_information(self, a: Sequence[int], b: Sequence[int]) -> float:
        a, b = tuple(a), tuple(b)
        return self.entropy(a) + self.entropy(b) - self.entropy(tuple(sorted(a + b)))


def _vars(j: DiscreteJoint, over: str) -> tuple[int, ...]:
    if over == "x":
        return j.x_axes
    if over == "z":
        return j.z_axes
    raise ValueError(f"over must be 'x' or 'z', got {over!r}")


def discrete_tc(j: DiscreteJoint, over: str = "x") -> float:
    """Sum of marginal entropies minus joint entropy."""
    axes = _vars(j, over)
    return sum(j.entropy((a,)) for a in axes) - j.entropy(axes)


def discrete_conditional_tc(j: DiscreteJoint) -> float:
    """TC(x | z) = sum_i H(x_i | z) - H(x | z)."""
    z = j.z_axes
    hz = j.entropy(z)
    parts = sum(j.entropy(tuple(sorted((a,) + z))) - hz for a in j.x_axes)
    return parts - (j.entropy(tuple(range(j.table.ndim))) - hz)


def discrete_corex_objective(j: DiscreteJoint) -> tuple[float, float, float]:
    """``(TC(x;z), TC(z), TC(x;z) - TC(z))``."""
    tc_xz = discrete_tc(j, "x") - discrete_conditional_tc(j)
    tc_z = discrete_tc(j, "z")
    return tc_xz, tc_z, tc_xz - tc_z


def discrete_mi_decomposition_check(j: DiscreteJoint, _sign: float = 1.0) -> float:
    """|TC(x;z) - (sum_i I(x_i;z) - I(x;z))|.

    ``_sign`` flips the joint-MI term and exists only to inject faults in
    negative-control runs.
    """
    tc_xz = discrete_tc(j, "x") - discrete_conditional_tc(j)
    z = j.z_axes
    rhs = sum(j.mutual_information((a,), z) for a in j.x_axes) - _sign * j.mutual_information(j.x_axes, z)
    return abs(tc_xz - rhs)


def discrete_mi_objective(j: DiscreteJoint) -> float:
    """sum_i I(x_i : z) - sum_i I(z_i : x); equals the CorEx objective when p(z|x) factorizes."""
    x, z = j.x_axes, j.z_axes
    return sum(j.mutual_information((a,), z) for a in x) - sum(j.mutual_information((b,), x) for b in z)


def joint_from_encoder(px: np.ndarray, encoders: Sequence[np.ndarray]) -> DiscreteJoint:
    """Joint of p(x) and a factorized encoder ``prod_i p(z_i | x)``.

    ``encoders[i]`` has shape ``(*px.shape, K_i)`` with rows summing to one.
    """
    px = np.asarray(px, dtype=np.float64)
    table = px.copy()
    for enc in encoders:
        table = table[..., None] * np.expand_dims(enc, tuple(range(px.ndim, table.ndim)))
    return DiscreteJoint(table, px.ndim)


def random_joint(rng: Rng, x_cards: Sequence[int], z_cards: Sequence[int]) -> DiscreteJoint:
    shape = tuple(x_cards) + tuple(z_cards)
    w = rng.uniform(0.0, 1.0, shape) ** 3  # skew away from uniform
    return DiscreteJoint(w / w.sum(), len(x_cards))


def random_factorized_joint(rng: Rng, x_cards: Sequence[int], z_cards: Sequence[int]):
    px = rng.uniform(0.0, 1.0, tuple(x_cards)) ** 2
    px /= px.sum()
    encs = []
    for k in z_cards:
        e = rng.uniform(0.0, 1.0, (*x_cards, k)) ** 2 + 1e-3
        encs.append(e / e.sum(axis=-1, keepdims=True))
    return px, encs


def tabular_bound(px: np.ndarray, encoders, decoders, priors, entropy_offsets=None) -> float:
    """Exact CorEx variational bound for tabular distributions.

    ``decoders[i]`` holds q(x_i | z) with shape ``(*z_cards, card(x_i))``;
    ``priors[i]`` holds r(z_i). Returns
    ``sum_i H(x_i) + sum_i <ln q(x_i|z)> - sum_i E_x KL(p(z_i|x) || r(z_i))``.
    """
    j = joint_from_encoder(px, encoders)
    n_x = j.n_x
    if entropy_offsets is None:
        entropy_offsets = [j.entropy((a,)) for a in j.x_axes]
    total = float(np.sum(entropy_offsets))
    for i in range(n_x):
        pxz = j.marginal((i,) + j.z_axes)  # axes: x_i, z...
        q = np.moveaxis(np.asarray(decoders[i], dtype=np.float64), -1, 0)
        with np.errstate(divide="ignore", invalid="ignore"):
            total += float(np.where(pxz > 0, pxz * np.log(q), 0.0).sum())
    for i, (enc, r) in enumerate(zip(encoders, priors)):
        r = np.asarray(r, dtype=np.float64)
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(enc > 0, enc * (np.log(enc) - np.log(r)), 0.0)
        total -= float((px * terms.sum(axis=-1)).sum())
    return total


def true_posteriors(px: np.ndarray, encoders):
    """Decoders q(x_i|z) = p(x_i|z) and priors r(z_i) = p(z_i) that make the bound tight."""
    j = joint_from_encoder(px, encoders)
    decoders = []
    for i in j.x_axes:
        pxz = j.marginal((i,) + j.z_axes)
        pz = pxz.sum(axis=0, keepdims=True)
        decoders.append(np.moveaxis(pxz / np.where(pz > 0, pz, 1.0), 0, -1))
    priors = [j.marginal((a,)) for a in j.z_axes]
    return decoders, priors


# --- Gaussians ------------------------------------------------------------

@dataclass
class GaussianJoint:
    covariance: np.ndarray
    mean: np.ndarray | None = None

    def __post_init__(self):
        c = np.asarray(self.covariance, dtype=np.float64)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ValueError(f"covariance must be square, got {c.shape}")
        if np.max(np.abs(c - c.T)) > 1e-12:
            raise ValueError("covariance is not symmetric")
        try:
            self._chol = np.linalg.cholesky(c)
        except np.linalg.LinAlgError as exc:
            raise NotPositiveDefiniteError("covariance is not positive definite") from exc
        self.covariance = c
        self.mean = np.zeros(c.shape[0]) if self.mean is None else np.asarray(self.mean, dtype=np.float64)

    @property
    def dim(self) -> int:
        return self.covariance.shape[0]

    def log_det(self) -> float:
        return 2.0 * float(np.log(np.diag(self._chol)).sum())

    def entropy(self) -> float:
        return 0.5 * (self.dim * (LOG_2PI + 1.0) + self.log_det())


def gaussian_tc(g: GaussianJoint) -> float:
    """0.5 (sum_i ln S_ii - ln det S); clipped at 0 against round-off."""
    val = 0.5 * (float(np.log(np.diag(g.covariance)).sum()) - g.log_det())
    return max(val, 0.0)


def gaussian_conditional_cov(cov: np.ndarray, keep: Sequence[int], given: Sequence[int]) -> np.ndarray:
    """Covariance of ``keep`` conditioned on ``given`` (Schur complement)."""
    cov = np.asarray(cov, dtype=np.float64)
    keep, given = list(keep), list(given)
    a = cov[np.ix_(keep, keep)]
    if not given:
        return a
    b = cov[np.ix_(keep, given)]
    c = cov[np.ix_(given, given)]
    return a - b @ np.linalg.solve(c, b.T)


def gaussian_conditional_tc(cov: np.ndarray, keep: Sequence[int], given: Sequence[int]) -> float:
    cond = gaussian_conditional_cov(cov, keep, given)
    cond = 0.5 * (cond + cond.T)
    return gaussian_tc(GaussianJoint(cond))


# --- aggregated posterior mixtures ----------------------------------------

class GaussianMixture1D:
    """Equal-weight mixture of one-dimensional Gaussians."""

    def __init__(self, means, variances):
        self.means = np.asarray(means, dtype=np.float64).reshape(-1)
        self.variances = np.asarray(variances, dtype=np.float64).reshape(-1)
        if self.means.size == 0:
            raise ValueError("mixture needs at least one component")
        if self.means.shape != self.variances.shape:
            raise ValueError("means and variances must align")

    def __len__(self) -> int:
        return self.means.size

    @property
    def mean(self) -> float:
        return float(self.means.mean())

    @property
    def variance(self) -> float:
        # law of total variance
        return float(self.variances.mean() + self.means.var())

    def log_pdf(self, z, chunk: int = 4096) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        flat = z.reshape(-1)
        out = np.empty_like(flat)
        log_norm = -0.5 * (LOG_2PI + np.log(self.variances)) - math.log(len(self))
        inv = 1.0 / self.variances
        for s in range(0, flat.size, chunk):
            zz = flat[s:s + chunk, None]
            comp = log_norm - 0.5 * (zz - self.means) ** 2 * inv
            m = comp.max(axis=1, keepdims=True)
            out[s:s + chunk] = (m + np.log(np.exp(comp - m).sum(axis=1, keepdims=True)))[:, 0]
        return out.reshape(z.shape)

    def pdf(self, z) -> np.ndarray:
        return np.exp(self.log_pdf(z))

    def sample(self, rng: Rng, n: int) -> np.ndarray:
        idx = rng.integers(0, len(self), n)
        return self.means[idx] + np.sqrt(self.variances[idx]) * rng.normal(n)

    def to_dict(self) -> dict:
        return {"means": self.means.tolist(), "variances": self.variances.tolist()}

    @classmethod
    def from_dict(cls, d) -> "GaussianMixture1D":
        return cls(d["means"], d["variances"])


def fit_aggregated_marginal(means, log_vars, dim: int, n: int = 1024, rng: Rng | None = None) -> GaussianMixture1D:
    """Mixture of per-example posterior marginals of latent ``dim``.

    Uses every example when the dataset holds at most ``n`` rows, otherwise a
    subsample of ``n`` rows drawn without replacement from ``rng``.
    """
    means = np.asarray(means, dtype=np.float64)
    log_vars = np.asarray(log_vars, dtype=np.float64)
    if means.shape[0] == 0:
        raise ValueError("cannot fit an aggregated marginal on an empty dataset")
    rows = np.arange(means.shape[0])
    if means.shape[0] > n:
        if rng is None:
            raise ValueError("subsampling needs an rng")
        rows = np.sort(rng.choice(means.shape[0], n))
    return GaussianMixture1D(means[rows, dim], np.exp(log_vars[rows, dim]))


# --- reports --------------------------------------------------------------

@dataclass
class MIEntry:
    dim: int
    estimator: str  # exact | mc-mixture | mc-standard | bound
    value: float
    std_err: float
    samples: int


@dataclass
class MIReport:
    entries: list[MIEntry] = field(default_factory=list)

    def sorted(self, descending: bool = True) -> "MIReport":
        return MIReport(sorted(self.entries, key=lambda e: (-e.value if descending else e.value, e.dim)))

    def values(self) -> np.ndarray:
        return np.array([e.value for e in self.entries])

    def ranks(self) -> list[int]:
        """Dimensions ordered by decreasing value."""
        return [e.dim for e in self.sorted().entries]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["dim", "estimator", "value_nats", "std_err", "samples"])
        for e in self.entries:
            w.writerow([e.dim, e.estimator, repr(float(e.value)), repr(float(e.std_err)), e.samples])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MIReport":
        rows = list(csv.DictReader(io.StringIO(text)))
        return cls([MIEntry(int(r["dim"]), r["estimator"], float(r["value_nats"]), float(r["std_err"]),
                            int(r["samples"])) for r in rows])


def _mean_se(values: np.ndarray) -> tuple[float, float]:
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        return float(values.mean()), 0.0
    return float(values.mean()), float(values.std(ddof=1) / math.sqrt(values.size))


def _point_kl_terms(means, log_vars, dim, marginal, rng, n_points, n_draws):
    """Per-point Monte Carlo KL(p(z_dim|x_j) || marginal) and exact KL to N(0,1)."""
    means = np.asarray(means, dtype=np.float64)
    log_vars = np.asarray(log_vars, dtype=np.float64)
    rows = np.arange(means.shape[0])
    if n_points is not None and means.shape[0] > n_points:
        rows = np.sort(rng.choice(means.shape[0], n_points))
    mu = means[rows, dim]
    lv = log_vars[rows, dim]
    sd = np.exp(0.5 * lv)
    eps = rng.normal((rows.size, n_draws))
    z = mu[:, None] + sd[:, None] * eps
    log_post = -0.5 * (LOG_2PI + lv[:, None] + eps ** 2)
    kl_mix = None
    if marginal is not None:
        kl_mix = (log_post - marginal.log_pdf(z)).mean(axis=1)
    kl_std = 0.5 * (mu ** 2 + np.exp(lv) - 1.0 - lv)
    return kl_mix, kl_std


def estimate_mi_latent(means, log_vars, dim: int, marginal: GaussianMixture1D | None, rng: Rng,
                       n_points: int | None = 512, n_draws: int = 256) -> MIEntry:
    """E_x KL(p(z_dim|x) || r) with r the fitted mixture, or N(0,1) when ``marginal`` is None."""
    kl_mix, kl_std = _point_kl_terms(means, log_vars, dim, marginal, rng, n_points, n_draws)
    if marginal is None:
        val, se = _mean_se(kl_std)
        return MIEntry(dim, "mc-standard", val, se, kl_std.size)
    val, se = _mean_se(kl_mix)
    return MIEntry(dim, "mc-mixture", val, se, kl_mix.size * n_draws)


@dataclass
class TightnessResult:
    dim: int
    kl_mixture: float
    kl_standard: float
    gap: float  # kl_standard - kl_mixture
    gap_se: float
    kl_mixture_se: float
    kl_standard_se: float


def marginal_tightness(means, log_vars, dim: int, marginal: GaussianMixture1D, rng: Rng,
                       n_points: int | None = 512, n_draws: int = 256) -> TightnessResult:
    """Paired comparison of KL to the fitted mixture vs KL to N(0,1), same points."""
    kl_mix, kl_std = _point_kl_terms(means, log_vars, dim, marginal, rng, n_points, n_draws)
    gap, gap_se = _mean_se(kl_std - kl_mix)
    m, m_se = _mean_se(kl_mix)
    s, s_se = _mean_se(kl_std)
    return TightnessResult(dim, m, s, gap, gap_se, m_se, s_se)


def binary_entropy(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -(p * np.log(p) + (1 - p) * np.log(1 - p))
    return np.where((p <= 0) | (p >= 1), 0.0, h)


def estimate_mi_input(sample_z: Callable, decoder_log_prob: Callable, x: np.ndarray, dim: int,
                      entropy: float | None, rng: Rng, n_draws: int = 64) -> MIEntry:
    """Lower bound H(x_dim) + <ln q(x_dim | z)> with z drawn from the encoder.

    ``sample_z(x, rng, n)`` returns encoder draws for every row of ``x`` and
    ``decoder_log_prob(z, x)`` the per-dimension log-likelihood ``[rows, d]``
    (both see ``x`` repeated ``n`` times). Without an entropy estimate the
    value is reported relative to the unknown differential entropy and tagged
    ``bound-up-to-constant``.
    """
    x = np.asarray(x, dtype=np.float64)
    z, xr = sample_z(x, rng, n_draws)
    ll = np.asarray(decoder_log_prob(z, xr))[:, dim].reshape(n_draws, x.shape[0]).mean(axis=0)
    val, se = _mean_se(ll)
    if entropy is None:
        return MIEntry(dim, "bound-up-to-constant", val, se, ll.size * n_draws)
    return MIEntry(dim, "bound", float(entropy) + val, se, ll.size * n_draws)
