"""Command-line entry point: ``corexae <command> ...``.

Every command exits nonzero with a one-line ``error:`` message on failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from pathlib import Path

import numpy as np

from .data import load_dataset
from .models import cluster_assign, mapped_accuracy
from .objectives import layer_gain_report, stacked_bound
from .oracles import FAULTS, SUITES, run_suites
from .rng import Rng
from .sampling import (
    MarginalBank,
    TraversalSpec,
    fit_marginal_bank,
    latent_traverse,
    mi_report,
    sample_marginals,
    sample_prior,
    tightness_csv,
    tightness_report,
    tile,
    variance_report,
    write_pgm_grid,
)
from .training import dataset_for, load_run, objective_config, resolve_config, train


class CliError(Exception):
    pass


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _load(args):
    """Model, config and dataset for a checkpoint command."""
    model, cfg = load_run(args.checkpoint)
    if getattr(args, "data", None):
        data = load_dataset(args.data)
    else:
        if not cfg:
            raise CliError("checkpoint carries no run config; pass --data")
        data = dataset_for(cfg)
    if data.d != model.data_dim:
        raise CliError(f"dataset has {data.d} columns but the model expects {model.data_dim}")
    return model, cfg, data


def _seed(args, cfg) -> int:
    return args.seed if args.seed is not None else int(cfg.get("seed", 0))


def _rows(data, n):
    return data.values if n is None or n <= 0 else data.values[:n]


def _as_images(values: np.ndarray) -> np.ndarray:
    side = math.isqrt(values.shape[1])
    if side * side != values.shape[1]:
        raise CliError(f"data dimension {values.shape[1]} is not a square image; PGM output needs square images")
    return np.clip(values, 0.0, 1.0)


def cmd_train(args) -> int:
    try:
        user = json.loads(Path(args.config).read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(user, dict):
        raise CliError("config must be a JSON object")
    cfg = resolve_config(user)
    out = args.out or cfg["out_dir"]
    cfg["out_dir"] = str(out)
    result = train(cfg, out, log=None if args.quiet else lambda m: print(m, file=sys.stderr))
    last = result.metrics[-1] if result.metrics else None
    summary = f"wrote {Path(out) / 'checkpoint.cxae'}"
    if last is not None:
        summary += f"; final bound {last['bound']:.6f} +- {last['bound_se']:.6f}"
    print(summary)
    return 0


def cmd_eval(args) -> int:
    model, cfg, data = _load(args)
    x = _rows(data, args.n)
    rng = Rng(_seed(args, cfg)).split(200)
    ocfg = objective_config(cfg, model, data, mc=args.mc) if cfg else None
    if ocfg is None:
        raise CliError("checkpoint carries no run config")
    v = stacked_bound(model, x, ocfg, rng, with_gains=model.n_layers > 1)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "value", "std_err"])
    w.writerow(["bound", repr(v.value), repr(v.std_err)])
    w.writerow(["reconstruction", repr(float(v.reconstruction.value.sum())), ""])
    w.writerow(["kl", repr(float(v.kl.value.sum())), ""])
    w.writerow(["entropy_offset", "" if v.entropy_offset is None else repr(float(v.entropy_offset)), v.offset_mode])
    for g in layer_gain_report(model, x, ocfg, rng.split(1)):
        w.writerow([f"gain_layer{g.layer}", repr(g.value), repr(g.std_err)])
    if model.top.kind == "categorical" and data.labels is not None:
        acc = mapped_accuracy(cluster_assign(model, x), data.labels[: x.shape[0]], model.top.width)
        w.writerow(["mapped_accuracy", repr(acc), ""])
    _emit(buf.getvalue(), args.out)
    return 0


def _bank(args, model, data, seed):
    if getattr(args, "bank", None):
        return MarginalBank.from_json(Path(args.bank).read_text())
    return fit_marginal_bank(model, data.values, Rng(seed).split(300), n=args.components, seed=seed)


def cmd_estimate_mi(args) -> int:
    model, cfg, data = _load(args)
    seed = _seed(args, cfg)
    bank = _bank(args, model, data, seed) if args.reference == "mixture" else None
    report = mi_report(model, data.values, Rng(seed).split(301), bank, args.points, args.draws, args.reference)
    if args.sort:
        report = report.sorted()
    _emit(report.to_csv(), args.out)
    return 0


def cmd_sample(args) -> int:
    model, cfg, data = _load(args)
    rng = Rng(_seed(args, cfg)).split(400)
    if args.mode == "marginal":
        if not args.bank:
            raise CliError("--mode marginal needs a fitted marginal bank; run `corexae report` and pass --bank <dir>/bank.json")
        bank = MarginalBank.from_json(Path(args.bank).read_text())
        samples = sample_marginals(model, bank, args.n, rng)
    else:
        samples = sample_prior(model, args.n, rng)
    if args.out.endswith(".csv"):
        np.savetxt(args.out, samples, delimiter=",", fmt="%.17g")
    else:
        h, w = write_pgm_grid(tile(_as_images(samples)), args.out)
        print(f"wrote {args.out} ({h}x{w})")
    return 0


def cmd_traverse(args) -> int:
    model, cfg, data = _load(args)
    lo, hi = args.range if args.range else ((-2.0, 2.0) if model.n_layers > 1 else (-3.0, 3.0))
    spec = TraversalSpec(tuple(args.dims), lo, hi, args.steps)
    blocks = []
    for dim in spec.dims:
        if args.categories is not None or (model.top.kind == "categorical" and args.rows is None):
            cats = args.categories if args.categories is not None else list(range(model.top.width))
            blocks.append(latent_traverse(model, spec, categories=cats, dim=dim))
        else:
            blocks.append(latent_traverse(model, spec, source=data.values[: args.rows or 1], dim=dim))
    grid = np.concatenate(blocks)
    h, w = write_pgm_grid(_as_images(grid.reshape(-1, grid.shape[-1])).reshape(grid.shape), args.out)
    print(f"wrote {args.out} ({h}x{w})")
    return 0


def cmd_report(args) -> int:
    model, cfg, data = _load(args)
    seed = _seed(args, cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bank = fit_marginal_bank(model, data.values, Rng(seed).split(300), n=args.components, seed=seed)
    (out / "bank.json").write_text(bank.to_json())
    mi = mi_report(model, data.values, Rng(seed).split(301), bank, args.points, args.draws)
    (out / "mi.csv").write_text(mi.to_csv())
    vr = variance_report(bank, mi)
    (out / "variance.csv").write_text(vr.to_csv())
    (out / "variance_cdf.csv").write_text(vr.cumulative_csv())
    tight = tightness_report(model, data.values, bank, Rng(seed).split(302), args.points, args.draws)
    (out / "tightness.csv").write_text(tightness_csv(tight))
    print(f"wrote report to {out}; spearman(variance, mi) = {vr.spearman:.4f}")
    return 0


def cmd_oracle(args) -> int:
    report = run_suites(args.suites, seed=args.seed, fault=args.inject_fault, n=args.n)
    for c in report.checks:
        print(c.line())
    print(f"{'all suites passed' if report.passed else f'{len(report.failures())} check(s) failed'} "
          f"in {report.seconds:.2f}s")
    return 0 if report.passed else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="corexae", description="CorEx variational auto-encoding toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a JSON config")
    t.add_argument("config")
    t.add_argument("--out", help="output directory (overrides out_dir in the config)")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    def checkpoint_cmd(name, helptext, func):
        c = sub.add_parser(name, help=helptext)
        c.add_argument("--checkpoint", required=True)
        c.add_argument("--data", help="CXDS dataset file (default: regenerate from the run config)")
        c.add_argument("--seed", type=int, default=None)
        c.set_defaults(func=func)
        return c

    e = checkpoint_cmd("eval", "evaluate the bound on a checkpoint", cmd_eval)
    e.add_argument("--mc", type=int, default=64)
    e.add_argument("--n", type=int, default=2048, help="examples to evaluate (0 = all)")
    e.add_argument("--out")

    m = checkpoint_cmd("estimate-mi", "per-latent mutual information report", cmd_estimate_mi)
    m.add_argument("--sort", action="store_true", help="sort by decreasing MI")
    m.add_argument("--bank")
    m.add_argument("--reference", choices=["mixture", "standard"], default="mixture")
    m.add_argument("--components", type=int, default=1024)
    m.add_argument("--points", type=int, default=512)
    m.add_argument("--draws", type=int, default=256)
    m.add_argument("--out")

    s = checkpoint_cmd("sample", "decode samples to a PGM grid (or CSV)", cmd_sample)
    s.add_argument("--mode", choices=["prior", "marginal"], default="prior")
    s.add_argument("--n", type=int, default=64)
    s.add_argument("--bank")
    s.add_argument("--out", required=True)

    v = checkpoint_cmd("traverse", "latent traversal grid", cmd_traverse)
    v.add_argument("--dims", type=int, nargs="+", required=True)
    v.add_argument("--range", type=float, nargs=2, metavar=("LO", "HI"))
    v.add_argument("--steps", type=int, default=7)
    v.add_argument("--rows", type=int, help="number of seed images from the dataset")
    v.add_argument("--categories", type=int, nargs="+", help="top-layer categories used as rows")
    v.add_argument("--out", required=True)

    r = checkpoint_cmd("report", "fit the marginal bank and write MI/variance/tightness CSVs", cmd_report)
    r.add_argument("--out-dir", required=True)
    r.add_argument("--components", type=int, default=1024)
    r.add_argument("--points", type=int, default=512)
    r.add_argument("--draws", type=int, default=256)

    o = sub.add_parser("oracle", help="run exact oracle suites")
    o.add_argument("suites", nargs="*", help=f"suites to run: {', '.join(SUITES)} (default all)")
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--n", type=int, default=None, help="cases per suite")
    o.add_argument("--inject-fault", choices=FAULTS, help="negative control: corrupt a check on purpose")
    o.set_defaults(func=cmd_oracle)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ValueError, OSError, KeyError, RuntimeError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
