"""Differentiable CorEx bounds: single layer, anchored, stacked, and the ELBO.

All objectives share one evaluation path so that identical random streams give
identical samples across ``corex_bound``, ``anchor_bound``, ``elbo`` and the
one-layer case of ``stacked_bound``.

For a stack of L layers (z^0 = x) the evaluated quantity is::

    sum_i H(x_i) + sum_l <ln q(z^(l-1) | z^l)> + sum_{l<L} H(z^l | z^(l-1))
        - sum_i w_i KL(p(z^L_i | z^(L-1)) || r(z^L_i))

The top term uses the KL form. Per-layer gains split this total with plug-in
batch estimates of the intermediate marginal entropies, which cancel exactly
between neighbouring layers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .distributions import CategoricalDist, DiagGaussian, gauss_kl_std
from .infotheory import GaussianMixture1D
from .models import HierarchicalModel, _log_prob, decode_marginalized, encode
from .rng import Rng
from .tensor import Tensor

LOG_2PI = math.log(2.0 * math.pi)


class ConfigError(ValueError):
    pass


@dataclass
class ObjectiveConfig:
    kl_weights: np.ndarray | None = None
    layers: list | None = None  # [(kind, width), ...] checked against the model when given
    prior: str = "standard-normal"  # or "fitted-marginal"
    marginals: list | None = None  # GaussianMixture1D per top latent, for "fitted-marginal"
    mc_samples: int = 1
    entropy_offsets: np.ndarray | None = None

    @classmethod
    def anchored(cls, m: int, anchors: Sequence[int], lam: float, **kw) -> "ObjectiveConfig":
        if not 0.0 <= lam <= 1.0:
            raise ConfigError(f"anchor lambda must lie in [0, 1], got {lam}")
        w = np.ones(m)
        w[list(anchors)] = 1.0 - lam
        return cls(kl_weights=w, **kw)


@dataclass
class ObjectiveValue:
    total: Tensor
    reconstruction: Tensor  # [d] per-dimension <ln q(x_i | z)>
    kl: Tensor  # [m] per-dimension top-layer KL, unweighted
    weighted_kl: Tensor
    entropy_offset: float | None  # None: constant omitted
    per_example: np.ndarray
    layer_recon: list = field(default_factory=list)  # summed <ln q(z^(l-1)|z^l)> per layer
    layer_entropy: list = field(default_factory=list)  # summed H(z^l|z^(l-1)) for l < L
    per_layer_gain: list = field(default_factory=list)
    per_layer_gain_se: list = field(default_factory=list)
    per_layer_gain_examples: list = field(default_factory=list)

    @property
    def offset_mode(self) -> str:
        return "included" if self.entropy_offset is not None else "constant omitted"

    @property
    def std_err(self) -> float:
        n = self.per_example.size
        return float(self.per_example.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0

    @property
    def value(self) -> float:
        return float(self.total.value)


def _check_config(model: HierarchicalModel, config: ObjectiveConfig) -> None:
    if config.mc_samples < 1:
        raise ConfigError("mc_samples must be >= 1")
    if config.layers is not None:
        want = [(s.kind, s.width) for s in model.layers]
        got = [tuple(x) for x in config.layers]
        if want != got:
            raise ConfigError(f"config layers {got} do not match model layers {want}")
    if config.kl_weights is not None:
        w = np.asarray(config.kl_weights, dtype=np.float64)
        if model.top.kind == "categorical":
            raise ConfigError("KL weights apply to continuous top layers only")
        if w.shape != (model.top.width,):
            raise ConfigError(f"kl_weights needs {model.top.width} entries, got {w.shape}")
        if np.any(w < 0) or np.any(w > 1):
            raise ConfigError("kl_weights must lie in [0, 1]")
    if config.prior not in ("standard-normal", "fitted-marginal"):
        raise ConfigError(f"unknown prior {config.prior!r}")
    if config.prior == "fitted-marginal":
        if config.marginals is None or len(config.marginals) != model.top.width:
            raise ConfigError("fitted-marginal prior needs one mixture per top latent")


def mixture_log_pdf(mix: GaussianMixture1D, z: Tensor) -> Tensor:
    """Differentiable log-density of a 1-d mixture, elementwise in ``z``."""
    zv = z.value
    flat = zv.reshape(-1, 1)
    log_norm = -0.5 * (LOG_2PI + np.log(mix.variances)) - math.log(len(mix))
    comp = log_norm - 0.5 * (flat - mix.means) ** 2 / mix.variances
    mx = comp.max(axis=1, keepdims=True)
    w = np.exp(comp - mx)
    tot = w.sum(axis=1, keepdims=True)
    val = (mx + np.log(tot)).reshape(zv.shape)
    dlog = ((w / tot) * (-(flat - mix.means) / mix.variances)).sum(axis=1).reshape(zv.shape)
    return T.custom_op(val, [z], lambda g: (g * dlog,))


def _top_kl(model, config, post, sample) -> Tensor:
    """Per-row, per-dim KL for the top layer; rows x width (or rows x 1 for categorical)."""
    if isinstance(post, CategoricalDist):
        raise AssertionError("categorical KL is handled by decode_marginalized")
    if config.prior == "standard-normal":
        return gauss_kl_std(post)
    # single-sample estimate of KL(p(z_i|x) || mixture_i)
    log_post = -0.5 * (LOG_2PI + post.log_var + T.square(sample - post.mean) / post.var)
    cols = [mixture_log_pdf(mix, sample[:, i]) for i, mix in enumerate(config.marginals)]
    return log_post - T.stack(cols, axis=1)


def _batch_log_marginal(post: DiagGaussian, z: np.ndarray, max_components: int = 1024) -> np.ndarray:
    """ln of the batch aggregated posterior, per row and dim (numpy, no gradient)."""
    mu = post.mean.value[:max_components]
    var = post.var.value[:max_components]
    rows, w = z.shape
    out = np.empty((rows, w))
    log_norm = -0.5 * (LOG_2PI + np.log(var)) - math.log(mu.shape[0])
    for i in range(w):
        comp = log_norm[:, i] - 0.5 * (z[:, i:i + 1] - mu[:, i]) ** 2 / var[:, i]
        mx = comp.max(axis=1, keepdims=True)
        out[:, i] = (mx + np.log(np.exp(comp - mx).sum(axis=1, keepdims=True)))[:, 0]
    return out


def _per_example(rows_values: np.ndarray, mc: int, batch: int) -> np.ndarray:
    return rows_values.reshape(mc, batch).mean(axis=0)


def _evaluate(model: HierarchicalModel, batch, config: ObjectiveConfig, rng: Rng,
              with_gains: bool = False) -> ObjectiveValue:
    _check_config(model, config)
    x = np.asarray(batch.value if isinstance(batch, Tensor) else batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ConfigError("batch must be a non-empty matrix")
    mc, B = config.mc_samples, x.shape[0]
    path = encode(model, x, rng, mc=mc)
    L = model.n_layers
    targets = [path.inputs] + path.samples[:-1]

    offset = None
    if config.entropy_offsets is not None:
        offset = float(np.sum(config.entropy_offsets))

    layer_recon_rows, recon_dims = [], None
    entropy_rows = []
    for l in range(L):
        post = path.posteriors[l]
        if isinstance(post, CategoricalDist):
            terms = decode_marginalized(model, post.logits, targets[l])
            ll = terms.recon_per_dim
            kl_rows = T.reshape(terms.kl, (-1, 1))
        else:
            ll = _log_prob(model.conditional(l, path.samples[l]), targets[l])
            kl_rows = _top_kl(model, config, post, path.samples[l]) if l == L - 1 else None
            if l < L - 1:
                entropy_rows.append(T.sum(post.entropy(), axis=1))
        if l == 0:
            recon_dims = T.mean(ll, axis=0)
        layer_recon_rows.append(T.sum(ll, axis=1))

    weights = config.kl_weights
    kl_dims = T.mean(kl_rows, axis=0)
    wkl_dims = kl_dims if weights is None else kl_dims * np.asarray(weights, dtype=np.float64)

    if L == 1:
        total = T.sum(recon_dims) - T.sum(wkl_dims)
    else:
        total = T.sum(recon_dims)
        for r in layer_recon_rows[1:]:
            total = total + T.mean(r)
        for h in entropy_rows:
            total = total + T.mean(h)
        total = total - T.sum(wkl_dims)
    if offset is not None:
        total = offset + total

    wkl_rows = kl_rows.value if weights is None else kl_rows.value * np.asarray(weights)
    row_total = sum(r.value for r in layer_recon_rows) + sum((h.value for h in entropy_rows), 0.0) - wkl_rows.sum(1)
    per_example = _per_example(row_total, mc, B) + (offset or 0.0)

    value = ObjectiveValue(
        total=total,
        reconstruction=recon_dims,
        kl=kl_dims,
        weighted_kl=wkl_dims,
        entropy_offset=offset,
        per_example=per_example,
        layer_recon=[float(r.value.mean()) for r in layer_recon_rows],
        layer_entropy=[float(h.value.mean()) for h in entropy_rows],
    )
    if with_gains:
        _attach_gains(value, path, layer_recon_rows, entropy_rows, wkl_rows, offset, mc, B)
    return value


def _attach_gains(value, path, layer_recon_rows, entropy_rows, wkl_rows, offset, mc, B) -> None:
    L = len(layer_recon_rows)
    # plug-in ln m(z^l_i) for every intermediate continuous layer l = 1..L-1
    log_marg = []
    for l in range(L - 1):
        log_marg.append(_batch_log_marginal(path.posteriors[l], path.samples[l].value).sum(axis=1))
    gains = []
    for l in range(L):
        rows = layer_recon_rows[l].value.copy()
        if l == 0 and offset is not None:
            rows = rows + offset
        if l > 0:
            rows = rows - log_marg[l - 1]  # + H(z^(l)) of the layer below
        if l < L - 1:
            rows = rows + entropy_rows[l].value + log_marg[l]  # - H(z^(l+1))
        else:
            rows = rows - wkl_rows.sum(axis=1)
        gains.append(_per_example(rows, mc, B))
    value.per_layer_gain_examples = gains
    value.per_layer_gain = [float(g.mean()) for g in gains]
    value.per_layer_gain_se = [float(g.std(ddof=1) / math.sqrt(B)) if B > 1 else 0.0 for g in gains]


def _single_layer(model: HierarchicalModel) -> None:
    if model.n_layers != 1:
        raise ConfigError(f"this objective needs a single-layer model, got {model.n_layers} layers")


def corex_bound(model: HierarchicalModel, batch, config: ObjectiveConfig, rng: Rng) -> ObjectiveValue:
    """Variational lower bound on TC(x;z) - TC(z) for a one-layer model."""
    _single_layer(model)
    if config.kl_weights is not None:
        config = ObjectiveConfig(**{**config.__dict__, "kl_weights": None})
    return _evaluate(model, batch, config, rng)


def anchor_bound(model: HierarchicalModel, batch, config: ObjectiveConfig, rng: Rng) -> ObjectiveValue:
    """CorEx bound with each latent KL scaled by its weight (anchored dims use 1 - lambda)."""
    _single_layer(model)
    if config.kl_weights is None:
        raise ConfigError("anchor_bound needs kl_weights")
    return _evaluate(model, batch, config, rng)


def elbo(model: HierarchicalModel, batch, config: ObjectiveConfig, rng: Rng) -> Tensor:
    """<ln q(x|z)> - KL(p(z|x) || r(z)) with a fully factorized decoder."""
    _single_layer(model)
    v = corex_bound(model, batch, config, rng)
    return T.sum(v.reconstruction) - T.sum(v.kl)


def stacked_bound(model: HierarchicalModel, batch, config: ObjectiveConfig, rng: Rng,
                  with_gains: bool = True) -> ObjectiveValue:
    """Hierarchical bound for any depth, with per-layer gain estimates."""
    return _evaluate(model, batch, config, rng, with_gains=with_gains)


@dataclass
class LayerGain:
    layer: int  # 1-based, as in z^(layer)
    value: float
    std_err: float
    recommended: bool


def layer_gain_report(model: HierarchicalModel, x, config: ObjectiveConfig, rng: Rng,
                      batch_size: int = 512) -> list[LayerGain]:
    """Gain of each layer above the first over the dataset; recommended when > 3 SE above zero."""
    if model.n_layers == 1:
        return []
    x = np.asarray(x, dtype=np.float64)
    chunks = []
    for k, s in enumerate(range(0, x.shape[0], batch_size)):
        v = _evaluate(model, x[s:s + batch_size], config, rng.split(k), with_gains=True)
        chunks.append(v.per_layer_gain_examples)
    report = []
    for l in range(1, model.n_layers):
        g = np.concatenate([c[l] for c in chunks])
        mean = float(g.mean())
        se = float(g.std(ddof=1) / math.sqrt(g.size)) if g.size > 1 else 0.0
        report.append(LayerGain(l + 1, mean, se, mean > 3.0 * se))
    return report
