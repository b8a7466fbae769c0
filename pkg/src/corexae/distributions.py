"""Diagonal Gaussians, factorized Bernoullis and categoricals."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .rng import Rng
from .tensor import Tensor

LOG_VAR_MIN, LOG_VAR_MAX = -10.0, 10.0
LOGIT_MIN, LOGIT_MAX = -15.0, 15.0
LOG_2PI = math.log(2.0 * math.pi)


class DiagGaussian:
    """Per-dimension Gaussian with clamped log-variance."""

    def __init__(self, mean, log_var):
        self.mean = T._as_tensor(mean)
        self.log_var = T.clamp(log_var, LOG_VAR_MIN, LOG_VAR_MAX)
        if self.mean.shape != self.log_var.shape:
            raise T.ShapeError(f"mean {self.mean.shape} and log_var {self.log_var.shape} differ")

    @property
    def shape(self):
        return self.mean.shape

    @property
    def var(self) -> Tensor:
        return T.exp(self.log_var)

    def entropy(self) -> Tensor:
        return 0.5 * (LOG_2PI + 1.0 + self.log_var)


class BernoulliVec:
    def __init__(self, logits):
        self.logits = T.clamp(logits, LOGIT_MIN, LOGIT_MAX)

    @property
    def probs(self) -> Tensor:
        return T.sigmoid(self.logits)

    @property
    def mean(self) -> Tensor:
        return self.probs


class CategoricalDist:
    def __init__(self, logits):
        self.logits = T._as_tensor(logits)

    @property
    def K(self) -> int:
        return self.logits.shape[-1]


def gauss_kl_std(q: DiagGaussian) -> Tensor:
    """Per-dimension KL(q || N(0, 1))."""
    return 0.5 * (T.square(q.mean) + q.var - 1.0 - q.log_var)


def gauss_kl_general(q: DiagGaussian, r: DiagGaussian) -> Tensor:
    """Per-dimension KL(q || r) for diagonal Gaussians."""
    if q.shape[-1] != r.shape[-1]:
        raise T.ShapeError(f"KL width mismatch: {q.shape} vs {r.shape}")
    return 0.5 * (r.log_var - q.log_var + (q.var + T.square(q.mean - r.mean)) / r.var - 1.0)


def reparam_sample(q: DiagGaussian, rng: Rng, n_samples: int = 1, eps=None) -> Tensor:
    """``mean + sigma * eps`` with shape ``[n, *q.shape]``; ``eps`` may be supplied."""
    if eps is None:
        eps = rng.normal((n_samples, *q.shape))
    sigma = T.exp(0.5 * q.log_var)
    return q.mean + sigma * T._as_tensor(eps)


def bernoulli_log_prob(p: BernoulliVec, x) -> Tensor:
    """x ln s(l) + (1 - x) ln(1 - s(l)) = x l - softplus(l)."""
    x = T._as_tensor(x)
    xv = x.value
    if not np.all((xv == 0.0) | (xv == 1.0)):
        raise ValueError("bernoulli_log_prob requires binary x")
    return x * p.logits - T.softplus(p.logits)


def gauss_log_prob(q: DiagGaussian, x) -> Tensor:
    x = T._as_tensor(x)
    if x.shape[-1] != q.shape[-1]:
        raise T.ShapeError(f"width mismatch: x {x.shape} vs distribution {q.shape}")
    return -0.5 * (LOG_2PI + q.log_var + T.square(x - q.mean) / q.var)


def categorical_posterior(c: CategoricalDist) -> tuple[Tensor, Tensor]:
    """Softmax probabilities and per-row entropy."""
    log_p = T.log_softmax(c.logits, axis=-1)
    probs = T.exp(log_p)
    entropy = -T.sum(probs * log_p, axis=-1)
    return probs, entropy
