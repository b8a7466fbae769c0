"""Encoder/decoder stacks with an optional categorical top layer.

Layer ``l`` (0-based) owns an encoder mapping its input (x for ``l == 0``,
otherwise the sample of layer ``l - 1``) to posterior parameters, and a
decoder mapping its latent back to the distribution of its input. A
categorical layer may only sit at the top; it is never sampled, every branch
is decoded and weighted by its softmax probability instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import tensor as T
from .distributions import (
    BernoulliVec,
    CategoricalDist,
    DiagGaussian,
    bernoulli_log_prob,
    categorical_posterior,
    gauss_log_prob,
)
from .nn import MlpSpec, ParameterStore, init_params, mlp_forward
from .rng import Rng
from .tensor import Tensor

MAX_CATEGORIES = 64
LIKELIHOODS = ("bernoulli", "gaussian")


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "continuous" | "categorical"
    width: int
    encoder_net: MlpSpec
    decoder_net: MlpSpec

    def to_dict(self) -> dict:
        return {"kind": self.kind, "width": self.width,
                "encoder_net": self.encoder_net.to_dict(), "decoder_net": self.decoder_net.to_dict()}

    @classmethod
    def from_dict(cls, d) -> "LayerSpec":
        return cls(d["kind"], int(d["width"]), MlpSpec.from_dict(d["encoder_net"]), MlpSpec.from_dict(d["decoder_net"]))


class HierarchicalModel:
    def __init__(self, data_dim: int, layers: Sequence[LayerSpec], likelihood: str, params: ParameterStore):
        if not layers:
            raise ValueError("a model needs at least one latent layer")
        if likelihood not in LIKELIHOODS:
            raise ValueError(f"likelihood must be one of {LIKELIHOODS}, got {likelihood!r}")
        self.data_dim = int(data_dim)
        self.layers = list(layers)
        self.likelihood = likelihood
        self.params = params
        for l, spec in enumerate(self.layers):
            if spec.kind not in ("continuous", "categorical"):
                raise ValueError(f"layer {l}: unknown kind {spec.kind!r}")
            if spec.kind == "categorical" and l != len(self.layers) - 1:
                raise ValueError("only the top layer may be categorical")
            if spec.kind == "categorical" and spec.width > MAX_CATEGORIES:
                raise ValueError(f"categorical width {spec.width} exceeds enumeration guard {MAX_CATEGORIES}")
            n_in = self.input_width(l)
            if spec.encoder_net.layer_widths[0] != n_in:
                raise ValueError(f"layer {l}: encoder input {spec.encoder_net.layer_widths[0]} != {n_in}")
            if dict(spec.encoder_net.output_heads) != _encoder_heads(spec):
                raise ValueError(f"layer {l}: encoder heads do not match a {spec.kind} latent of width {spec.width}")
            if spec.decoder_net.layer_widths[0] != spec.width:
                raise ValueError(f"layer {l}: decoder input must equal latent width {spec.width}")
            if dict(spec.decoder_net.output_heads) != self._decoder_heads(l):
                raise ValueError(f"layer {l}: decoder heads do not match its target")

    # --- structure ---------------------------------------------------------

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def top(self) -> LayerSpec:
        return self.layers[-1]

    @property
    def top_prior(self) -> str:
        return "uniform-categorical" if self.top.kind == "categorical" else "standard-normal"

    def input_width(self, l: int) -> int:
        return self.data_dim if l == 0 else self.layers[l - 1].width

    def _decoder_heads(self, l: int) -> dict:
        w = self.input_width(l)
        if l == 0 and self.likelihood == "bernoulli":
            return {"logits": w}
        return {"mean": w, "log_var": w}

    def architecture(self) -> dict:
        return {"data_dim": self.data_dim, "likelihood": self.likelihood, "top_prior": self.top_prior,
                "layers": [s.to_dict() for s in self.layers]}

    @classmethod
    def from_architecture(cls, arch: dict, params: ParameterStore) -> "HierarchicalModel":
        return cls(arch["data_dim"], [LayerSpec.from_dict(d) for d in arch["layers"]], arch["likelihood"], params)

    # --- single-layer maps ---------------------------------------------------

    def posterior(self, l: int, inp) -> DiagGaussian | CategoricalDist:
        spec = self.layers[l]
        out = mlp_forward(spec.encoder_net, self.params, T._as_tensor(inp), f"enc{l}")
        if spec.kind == "categorical":
            return CategoricalDist(out["logits"])
        return DiagGaussian(out["mean"], out["log_var"])

    def conditional(self, l: int, z) -> BernoulliVec | DiagGaussian:
        """Distribution of layer ``l``'s input given its latent ``z``."""
        out = mlp_forward(self.layers[l].decoder_net, self.params, T._as_tensor(z), f"dec{l}")
        if "logits" in out:
            return BernoulliVec(out["logits"])
        return DiagGaussian(out["mean"], out["log_var"])


def _encoder_heads(spec: LayerSpec) -> dict:
    if spec.kind == "categorical":
        return {"logits": spec.width}
    return {"mean": spec.width, "log_var": spec.width}


def build_model(data_dim: int, layer_configs: Sequence[dict], likelihood: str, rng: Rng,
                activation: str = "relu") -> HierarchicalModel:
    """Construct and initialize a model.

    Each config holds ``kind``, ``width`` and optionally ``encoder_hidden`` /
    ``decoder_hidden``; defaults are 128-64 (mirrored) for the first layer and
    32 for higher layers.
    """
    store = ParameterStore()
    specs = []
    n_in = data_dim
    for l, cfg in enumerate(layer_configs):
        kind, width = cfg["kind"], int(cfg["width"])
        enc_hidden = cfg.get("encoder_hidden", [128, 64] if l == 0 else [32])
        dec_hidden = cfg.get("decoder_hidden", list(reversed(enc_hidden)))
        act = cfg.get("activation", activation)
        enc_heads = [("logits", width)] if kind == "categorical" else [("mean", width), ("log_var", width)]
        if l == 0 and likelihood == "bernoulli":
            dec_heads = [("logits", n_in)]
        else:
            dec_heads = [("mean", n_in), ("log_var", n_in)]
        specs.append(LayerSpec(kind, width, MlpSpec.build(n_in, enc_hidden, enc_heads, act),
                               MlpSpec.build(width, dec_hidden, dec_heads, act)))
        n_in = width
    init_rng = rng.split(0)
    for l, spec in enumerate(specs):
        init_params(spec.encoder_net, init_rng.split(2 * l), store, f"enc{l}")
        init_params(spec.decoder_net, init_rng.split(2 * l + 1), store, f"dec{l}")
    return HierarchicalModel(data_dim, specs, likelihood, store)


# --- passes ------------------------------------------------------------------

@dataclass
class EncodedPath:
    """Posteriors and samples for every layer; rows are ``mc`` copies of the batch."""

    inputs: Tensor  # x repeated mc times, sample-major
    posteriors: list
    samples: list  # samples[l] is z^(l+1); None for a categorical top
    mc: int
    batch: int


def _log_prob(dist, target) -> Tensor:
    if isinstance(dist, BernoulliVec):
        return bernoulli_log_prob(dist, target)
    return gauss_log_prob(dist, target)


def encode(model: HierarchicalModel, x, rng: Rng | None, mc: int = 1, deterministic: bool = False) -> EncodedPath:
    """Run the encoder chain. ``deterministic`` propagates posterior means."""
    x = np.asarray(x.value if isinstance(x, Tensor) else x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.data_dim:
        raise T.ShapeError(f"input shape {x.shape} does not match data width {model.data_dim}")
    batch = x.shape[0]
    inp = T.Tensor(np.tile(x, (mc, 1)))
    path = EncodedPath(inp, [], [], mc, batch)
    h = inp
    for l, spec in enumerate(model.layers):
        post = model.posterior(l, h)
        path.posteriors.append(post)
        if spec.kind == "categorical":
            path.samples.append(None)
            break
        if deterministic:
            h = post.mean
        else:
            eps = rng.normal(post.shape)
            h = post.mean + T.exp(0.5 * post.log_var) * eps
        path.samples.append(h)
    return path


def decode(model: HierarchicalModel, path: Sequence) -> list:
    """Conditionals for each layer given that layer's latent; ``[p(x|z1), p(z1|z2), ...]``."""
    out = []
    for l, z in enumerate(path):
        if z is None:
            out.append(None)
            continue
        z = T._as_tensor(z)
        if z.shape[-1] != model.layers[l].width:
            raise T.ShapeError(f"layer {l} latent width {z.shape[-1]} != {model.layers[l].width}")
        out.append(model.conditional(l, z))
    return out


def dist_mean(dist) -> Tensor:
    return dist.probs if isinstance(dist, BernoulliVec) else dist.mean


def generate(model: HierarchicalModel, z_top, rng: Rng | None = None) -> np.ndarray:
    """Decode a top-layer code down to likelihood means of x.

    Intermediate layers are sampled when ``rng`` is given, otherwise their
    conditional means are propagated.
    """
    z = T._as_tensor(z_top)
    for l in range(model.n_layers - 1, -1, -1):
        dist = model.conditional(l, z)
        if l == 0:
            return dist_mean(dist).value.copy()
        if rng is None:
            z = dist.mean
        else:
            z = dist.mean + T.exp(0.5 * dist.log_var) * rng.normal(dist.shape)
    raise AssertionError("unreachable")


@dataclass
class MarginalizedTerms:
    recon_per_dim: Tensor  # [rows, w] expected log-likelihood of the target
    kl: Tensor  # [rows] KL(softmax || uniform)
    probs: Tensor  # [rows, K]
    branch_log_lik: Tensor  # [rows, K]


def decode_marginalized(model: HierarchicalModel, categorical_logits, target) -> MarginalizedTerms:
    """Exact expectation over the categorical top layer.

    Every one-hot code is decoded, its log-likelihood of ``target`` computed,
    and the branches are weighted by the softmax probabilities.
    """
    top = model.n_layers - 1
    spec = model.top
    if spec.kind != "categorical":
        raise ValueError("decode_marginalized needs a categorical top layer")
    K = spec.width
    if K > MAX_CATEGORIES:
        raise ValueError(f"{K} categories exceed the enumeration guard {MAX_CATEGORIES}")
    target = T._as_tensor(target)
    rows, w = target.shape
    branch = model.conditional(top, np.eye(K))  # params [K, w]
    per_dim = _log_prob_branches(branch, T.repeat(target, K, axis=1))  # [rows, K, w]
    probs, entropy = categorical_posterior(CategoricalDist(categorical_logits))
    recon = T.sum(per_dim * T.repeat(probs, w, axis=2), axis=1)
    kl = math.log(K) - entropy
    return MarginalizedTerms(recon, kl, probs, T.sum(per_dim, axis=2))


def _log_prob_branches(dist, target) -> Tensor:
    if isinstance(dist, BernoulliVec):
        xv = target.value
        if not np.all((xv == 0.0) | (xv == 1.0)):
            raise ValueError("bernoulli likelihood requires binary targets")
        return target * dist.logits - T.softplus(dist.logits)
    return gauss_log_prob(dist, target)


def cluster_assign(model: HierarchicalModel, x) -> np.ndarray:
    """Argmax of the top categorical posterior along the mean path (ties -> lowest index)."""
    if model.top.kind != "categorical":
        raise ValueError("cluster_assign needs a categorical top layer")
    path = encode(model, x, None, mc=1, deterministic=True)
    return np.argmax(path.posteriors[-1].logits.value, axis=1)


def mapped_accuracy(assign, labels, n_clusters: int | None = None) -> float:
    """Accuracy under the best one-to-one cluster-to-label mapping (Hungarian)."""
    assign = np.asarray(assign, dtype=int)
    labels = np.asarray(labels, dtype=int)
    k = max(int(assign.max()) + 1, int(labels.max()) + 1, n_clusters or 0)
    counts = np.zeros((k, k))
    np.add.at(counts, (assign, labels), 1)
    r, c = linear_sum_assignment(-counts)
    return float(counts[r, c].sum() / assign.size)
