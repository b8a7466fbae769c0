"""Run configuration, dataset/model construction from config, and the training loop."""

from __future__ import annotations

import copy
import csv
import io
import json
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import tensor as T
from .data import (
    Dataset,
    SyntheticSpec,
    batch_iter,
    gen_bars,
    gen_bars_mixture,
    gen_linear_gaussian,
    load_dataset,
    load_idx,
)
from .models import HierarchicalModel, build_model
from .nn import AdamState, adam_step, load_params, save_params
from .objectives import ConfigError, ObjectiveConfig, anchor_bound, corex_bound, stacked_bound
from .rng import Rng

SEED_ENV = "CXAE_SEED"

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "data": {
        "kind": "linear-gaussian",  # linear-gaussian | bars | bars-mixture | idx | file
        "n": 20000,
        "latent_dim": 3,
        "observed_dim": 8,
        "noise_scale": 0.5,
        "mixing_seed": 0,
        "bar_prob": 0.3,
        "side": 8,
        "n_classes": 4,
        "extra_prob": 0.05,
        "flip_prob": 0.02,
        "images": None,
        "labels": None,
        "binarize": 0.5,
        "path": None,
    },
    "model": {
        "layers": [{"kind": "continuous", "width": 4}],
        "likelihood": "auto",  # auto | bernoulli | gaussian
        "activation": "relu",
    },
    "objective": {
        "kind": "corex",  # corex | anchor | stacked
        "anchors": [],
        "anchor_lambda": 0.5,
        "kl_weights": None,
        "mc_samples": 1,
        "eval_mc_samples": 8,
        "eval_n": 2048,
    },
    "optimizer": {"lr": 1e-3, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8},
    "epochs": 10,
    "batch_size": 128,
    "restarts": 1,
    "schedule": "joint",  # joint | greedy
    "checkpoint_every": 0,
    "out_dir": "run",
}

METRIC_COLUMNS = ["epoch", "bound", "bound_se", "reconstruction", "kl", "layer_gains", "layer_gains_se"]


class TrainingError(RuntimeError):
    pass


def _merge(base: dict, override: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key {where}{key!r}")
        if isinstance(base[key], dict) and isinstance(val, dict):
            out[key] = _merge(base[key], val, f"{where}{key}.")
        else:
            out[key] = copy.deepcopy(val)
    return out


def resolve_config(user: dict, env: dict | None = None) -> dict:
    """Defaults <- user config <- environment (``CXAE_SEED``)."""
    cfg = _merge(DEFAULTS, user)
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            cfg["seed"] = int(env[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from exc
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("seed must be a non-negative integer")
    if cfg["epochs"] < 0:
        raise ConfigError("epochs must be >= 0")
    if not isinstance(cfg["restarts"], int) or cfg["restarts"] < 1:
        raise ConfigError("restarts must be an integer >= 1")
    if cfg["schedule"] not in ("joint", "greedy"):
        raise ConfigError("schedule must be joint or greedy")
    if cfg["schedule"] == "greedy" and cfg["objective"]["kind"] != "stacked":
        raise ConfigError("the greedy schedule needs the stacked objective")
    if cfg["batch_size"] < 1:
        raise ConfigError("batch_size must be >= 1")
    if cfg["data"]["kind"] not in ("linear-gaussian", "bars", "bars-mixture", "idx", "file"):
        raise ConfigError(f"unknown data kind {cfg['data']['kind']!r}")
    layers = cfg["model"]["layers"]
    if not layers:
        raise ConfigError("model.layers must not be empty")
    for layer in layers:
        if layer.get("kind") not in ("continuous", "categorical") or int(layer.get("width", 0)) < 1:
            raise ConfigError(f"invalid layer spec {layer}")
    obj = cfg["objective"]
    if obj["kind"] not in ("corex", "anchor", "stacked"):
        raise ConfigError(f"unknown objective kind {obj['kind']!r}")
    if obj["kind"] in ("corex", "anchor") and len(layers) != 1:
        raise ConfigError(f"objective {obj['kind']!r} needs exactly one layer; use 'stacked'")
    if not 0.0 <= obj["anchor_lambda"] <= 1.0:
        raise ConfigError("anchor_lambda must lie in [0, 1]")
    if obj["mc_samples"] < 1 or obj["eval_mc_samples"] < 1:
        raise ConfigError("Monte Carlo sample counts must be >= 1")
    if cfg["model"]["likelihood"] not in ("auto", "bernoulli", "gaussian"):
        raise ConfigError("model.likelihood must be auto, bernoulli or gaussian")


def make_dataset(data_cfg: dict, rng: Rng) -> Dataset:
    kind = data_cfg["kind"]
    n = int(data_cfg["n"])
    if kind == "linear-gaussian":
        spec = SyntheticSpec("linear-gaussian", data_cfg["latent_dim"], data_cfg["observed_dim"],
                             data_cfg["noise_scale"], data_cfg["mixing_seed"])
        return gen_linear_gaussian(spec, rng, n)
    if kind == "bars":
        side = int(data_cfg["side"])
        spec = SyntheticSpec("bars", min(2 * side, side * side), side * side, bar_prob=data_cfg["bar_prob"])
        return gen_bars(spec, rng, n)
    if kind == "bars-mixture":
        return gen_bars_mixture(int(data_cfg["side"]), rng, n, int(data_cfg["n_classes"]),
                                data_cfg["extra_prob"], data_cfg["flip_prob"])
    if kind == "idx":
        if not data_cfg["images"]:
            raise ConfigError("data.images is required for idx datasets")
        ds = load_idx(data_cfg["images"], data_cfg["labels"], data_cfg["binarize"])
        return ds if n <= 0 or n >= ds.n else ds.subset(slice(0, n))
    if not data_cfg["path"]:
        raise ConfigError("data.path is required for file datasets")
    return load_dataset(data_cfg["path"])


def objective_config(cfg: dict, model: HierarchicalModel, data: Dataset, mc: int | None = None) -> ObjectiveConfig:
    obj = cfg["objective"]
    weights = None
    if obj["kl_weights"] is not None:
        weights = np.asarray(obj["kl_weights"], dtype=np.float64)
    elif obj["kind"] == "anchor":
        weights = np.ones(model.top.width)
        weights[list(obj["anchors"])] = 1.0 - obj["anchor_lambda"]
    return ObjectiveConfig(
        kl_weights=weights,
        layers=[(s.kind, s.width) for s in model.layers],
        mc_samples=obj["mc_samples"] if mc is None else mc,
        entropy_offsets=data.per_dim_entropy,
    )


OBJECTIVES = {"corex": corex_bound, "anchor": anchor_bound, "stacked": stacked_bound}


def make_model(cfg: dict, data: Dataset, rng: Rng) -> HierarchicalModel:
    lik = cfg["model"]["likelihood"]
    if lik == "auto":
        lik = "bernoulli" if data.is_binary else "gaussian"
    return build_model(data.d, cfg["model"]["layers"], lik, rng, cfg["model"]["activation"])


@dataclass
class TrainResult:
    model: HierarchicalModel
    data: Dataset
    config: dict
    metrics: list[dict] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)

    def metrics_csv(self) -> str:
        return metrics_to_csv(self.metrics)


def metrics_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in rows:
        w.writerow([r["epoch"], repr(r["bound"]), repr(r["bound_se"]), repr(r["reconstruction"]), repr(r["kl"]),
                    ";".join(repr(g) for g in r["layer_gains"]), ";".join(repr(g) for g in r["layer_gains_se"])])
    return buf.getvalue()


def _evaluate_epoch(model, data, cfg, rng: Rng, epoch: int) -> dict:
    obj = cfg["objective"]
    x = data.values[: int(obj["eval_n"])]
    ecfg = objective_config(cfg, model, data, mc=int(obj["eval_mc_samples"]))
    v = stacked_bound(model, x, ecfg, rng, with_gains=model.n_layers > 1)
    row = {
        "epoch": epoch,
        "bound": v.value,
        "bound_se": v.std_err,
        "reconstruction": float(v.reconstruction.value.sum()),
        "kl": float(v.kl.value.sum()),
        "layer_gains": v.per_layer_gain,
        "layer_gains_se": v.per_layer_gain_se,
    }
    for name in ("bound", "reconstruction", "kl"):
        if not math.isfinite(row[name]):
            raise TrainingError(f"non-finite {name} term in evaluation at epoch {epoch}")
    return row


def checkpoint_header(model: HierarchicalModel, cfg: dict, epoch: int) -> dict:
    return {"architecture": model.architecture(), "config": cfg, "epoch": epoch}


def _run_epochs(cfg, data, model, keys, objective, rng: Rng, eval_rng: Rng, first_epoch: int, log=None):
    """Adam on ``keys`` for ``cfg['epochs']`` epochs; returns metrics, timings and snapshots."""
    opt = cfg["optimizer"]
    state = AdamState(lr=opt["lr"], beta1=opt["beta1"], beta2=opt["beta2"], eps=opt["eps"])
    ocfg = objective_config(cfg, model, data)
    shuffle_rng, noise_rng = rng.split(3), rng.split(4)
    metrics, seconds, snapshots = [], [], {}
    every = cfg["checkpoint_every"]
    for local in range(1, cfg["epochs"] + 1):
        epoch = first_epoch + local - 1
        t0 = time.perf_counter()
        # stream keys use the stage-local epoch so the joint schedule keeps its historical streams
        epoch_noise = noise_rng.split(local)
        for b, xb in enumerate(batch_iter(data, cfg["batch_size"], shuffle_rng.split(local))):
            with T.GradTape() as tape:
                v = objective(model, xb, ocfg, epoch_noise.split(b))
                loss = -v.total
            for name, term in (("reconstruction", v.reconstruction), ("kl", v.kl)):
                if not np.all(np.isfinite(term.value)):
                    tape.clear()
                    raise TrainingError(f"non-finite {name} term at epoch {epoch}, batch {b}")
            if not math.isfinite(loss.item()):
                tape.clear()
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            grads = T.backward(tape, loss)
            adam_step(state, model.params, {k: grads.get(model.params[k], np.zeros(model.params[k].shape)) for k in keys})
        row = _evaluate_epoch(model, data, cfg, eval_rng.split(epoch), epoch)
        metrics.append(row)
        seconds.append(time.perf_counter() - t0)
        if log is not None:
            log(f"epoch {epoch}: bound {row['bound']:.4f} +- {row['bound_se']:.4f}")
        if every and epoch % every == 0:
            snapshots[epoch] = (model.params.copy(), model)
    return metrics, seconds, snapshots


def _candidate_root(root: Rng, r: int) -> Rng:
    return root if r == 0 else root.split(10 + r)


def _best(cands):
    """Candidate with the highest final evaluation bound (the first one when nothing was trained)."""
    best = cands[0]
    for c in cands[1:]:
        if c[1] and c[1][-1]["bound"] > best[1][-1]["bound"]:
            best = c
    return best


def _restart_log(log, cfg, r, prefix=""):
    if log is None:
        return None
    if cfg["restarts"] == 1:
        return (lambda m: log(prefix + m)) if prefix else log
    return lambda m: log(f"{prefix}restart {r}: {m}")


def _train_joint(cfg, data, root, eval_rng, log):
    cands = []
    for r in range(cfg["restarts"]):
        rr = _candidate_root(root, r)
        model = make_model(cfg, data, rr.split(2))
        objective = OBJECTIVES[cfg["objective"]["kind"]]
        metrics, seconds, snaps = _run_epochs(cfg, data, model, list(model.params.keys()), objective, rr,
                                              eval_rng, 1, _restart_log(log, cfg, r))
        cands.append((model, metrics, seconds, snaps))
    return _best(cands)


def _layer_keys(model: HierarchicalModel, l: int) -> list:
    return [k for k in model.params.keys() if k[0] in (f"enc{l}", f"dec{l}")]


def _train_greedy(cfg, data, root, eval_rng, log):
    """Train layer 1 alone, then add one layer at a time with the layers below frozen.

    Restarts re-initialize only the layer being added; the candidate with the best
    final bound of the partial stack is kept before moving up.
    """
    full = make_model(cfg, data, root.split(2))
    params = full.params
    metrics, seconds, snaps = [], [], {}
    for l in range(full.n_layers):
        cands = []
        for r in range(cfg["restarts"]):
            rr = _candidate_root(root, r)
            init = full if r == 0 else make_model(cfg, data, rr.split(2))
            store = params.copy()
            for k in _layer_keys(full, l):
                store.set(k, init.params[k].value)
            view = HierarchicalModel(full.data_dim, full.layers[:l + 1], full.likelihood, store)
            out = _run_epochs(cfg, data, view, _layer_keys(full, l), stacked_bound, rr.split(100 + l),
                              eval_rng, l * cfg["epochs"] + 1, _restart_log(log, cfg, r, f"layer {l + 1} "))
            cands.append((view, *out))
        view, m, s, sn = _best(cands)
        params = view.params
        metrics += m
        seconds += s
        snaps.update(sn)
    model = HierarchicalModel(full.data_dim, full.layers, full.likelihood, params)
    return model, metrics, seconds, snaps


def train(cfg: dict, out_dir: str | Path | None = None, log=None) -> TrainResult:
    """Train per a resolved config; writes artifacts when ``out_dir`` is given.

    With ``restarts > 1`` several initializations are trained and the one with the
    highest final evaluation bound is kept. All candidates are scored on the same
    evaluation noise so the comparison is not swayed by Monte Carlo luck.
    """
    root = Rng(cfg["seed"])
    data = dataset_for(cfg)
    eval_rng = root.split(5)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")

    fit = _train_greedy if cfg["schedule"] == "greedy" else _train_joint
    model, metrics, seconds, snapshots = fit(cfg, data, root, eval_rng, log)
    result = TrainResult(model, data, cfg, metrics, seconds)

    if out is not None:
        for epoch, (params, view) in snapshots.items():
            save_params(params, out / f"checkpoint_epoch{epoch}.cxae", checkpoint_header(view, cfg, epoch))
        save_params(model.params, out / "checkpoint.cxae", checkpoint_header(model, cfg, len(metrics)))
        (out / "metrics.csv").write_text(result.metrics_csv())
        timing = "epoch,seconds\n" + "".join(f"{i + 1},{s:.6f}\n" for i, s in enumerate(result.seconds))
        (out / "timing.csv").write_text(timing)
    return result


def load_run(checkpoint) -> tuple[HierarchicalModel, dict]:
    """Rebuild the model (and its config) from a checkpoint."""
    store, header = load_params(checkpoint)
    if "architecture" not in header:
        raise ConfigError("checkpoint header carries no model architecture")
    model = HierarchicalModel.from_architecture(header["architecture"], store)
    return model, header.get("config", {})


def dataset_for(cfg: dict) -> Dataset:
    """Regenerate (or reload) exactly the dataset a run was trained on."""
    return make_dataset(cfg["data"], Rng(cfg["seed"]).split(1))
