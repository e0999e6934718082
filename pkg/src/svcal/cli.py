"""``svcal`` command line: one subcommand per pipeline stage.

Every run writes ``<primary output>.manifest.json`` with the resolved
configuration, seeds, paths and timings. Exit codes: 0 success, 1 usage or
input error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import json
import logging
import os
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .bsiv import IV_OK, IV_REASONS, IvConfig, implied_vol_arrays
from .calibrate import (CosBrentBackend, calibrate, hessian, landscape,
                        load_problem, load_surface, resolve_weights, save_landscape, save_surface, synth_market)
from .cos import OK, STATUS_REASONS, CosConfig, price_grid
from .datagen import Dataset, SamplingRange, build_dataset, meta_path, split_dataset
from .de import DEConfig
from .errors import ImpliedVolError, NumericalError, PricingError
from .models import PARAM_NAMES, ModelKind, OptionKind, Quote, load_params, quote_arrays
from .nnet import Network, NetworkSpec, TrainConfig, evaluate, load_weights, save_weights, train

log = logging.getLogger("svcal")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _read_json(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"no such file: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{p}: invalid JSON ({exc})") from None


def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"no such file: {p}")
    return p


def _section(args, name) -> dict:
    return dict(args.config.get(name, {}))


def _cos_cfg(args) -> CosConfig:
    d = _section(args, "cos")
    if getattr(args, "cos_config", None):
        d.update(_read_json(args.cos_config))
    return CosConfig.from_dict(d)


def _iv_cfg(args) -> IvConfig:
    return IvConfig.from_dict(_section(args, "iv"))


def read_quotes(path) -> list[Quote]:
    """Quote CSV with columns ``m, tau, r`` and optional ``kind`` (default put)."""
    with open(_require(path), newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: no quotes")
    quotes = []
    for i, r in enumerate(rows):
        try:
            quotes.append(Quote(float(r["m"]), float(r["tau"]), float(r["r"]), OptionKind(r.get("kind") or "put")))
        except (KeyError, ValueError) as exc:
            raise ValueError(f"{path}: row {i}: {exc}") from None
    return quotes


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _fmt(x) -> str:
    return repr(float(x))


def _grid(spec) -> np.ndarray:
    lo, hi, n = spec
    return np.linspace(float(lo), float(hi), int(n))


# --------------------------------------------------------------------------
# subcommands; each returns (resolved config, inputs, outputs)
# --------------------------------------------------------------------------

def cmd_price(args):
    params = load_params(_require(args.params))
    quotes = read_quotes(args.quotes)
    cfg = _cos_cfg(args)
    m, tau, r, is_call = quote_arrays(quotes)
    theta = np.broadcast_to(params.to_array(), (len(quotes), len(PARAM_NAMES)))
    price, status = price_grid(theta, m, tau, r, is_call, cfg)
    bad = np.flatnonzero(status != OK)
    if bad.size:
        raise PricingError(STATUS_REASONS[int(status[bad[0]])], int(bad[0]))
    _write_rows(args.out, ["m", "tau", "r", "kind", "price"],
                [[_fmt(q.moneyness), _fmt(q.tau), _fmt(q.rate), q.kind.value, _fmt(p)] for q, p in zip(quotes, price)])
    return {"cos": cfg.to_dict(), "params": params.to_dict()}, [args.params, args.quotes], [args.out]


def cmd_iv(args):
    with open(_require(args.prices), newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{args.prices}: no rows")
    quotes = [Quote(float(r["m"]), float(r["tau"]), float(r["r"]), OptionKind(r.get("kind") or "put")) for r in rows]
    price = np.array([float(r["price"]) for r in rows])
    cfg = _iv_cfg(args)
    m, tau, r, is_call = quote_arrays(quotes)
    iv, status = implied_vol_arrays(price, m, tau, r, is_call, cfg)
    bad = np.flatnonzero(status != IV_OK)
    if bad.size:
        raise ImpliedVolError(IV_REASONS[int(status[bad[0]])], int(bad[0]))
    _write_rows(args.out, ["m", "tau", "r", "kind", "price", "iv"],
                [[_fmt(q.moneyness), _fmt(q.tau), _fmt(q.rate), q.kind.value, _fmt(p), _fmt(s)]
                 for q, p, s in zip(quotes, price, iv)])
    return {"iv": cfg.to_dict()}, [args.prices], [args.out]


def cmd_gen(args):
    model = ModelKind(args.model)
    ranges = SamplingRange.default(model)
    if "ranges" in args.config:
        ranges = SamplingRange.from_list(args.config["ranges"])
    cos_cfg, iv_cfg = _cos_cfg(args), _iv_cfg(args)
    ds = build_dataset(model, ranges, args.n, args.seed, cos_cfg, iv_cfg, args.threads)
    ds.save(args.out)
    cfg = {"model": model.value, "n": args.n, "ranges": ranges.to_list(), "cos": cos_cfg.to_dict(),
           "iv": iv_cfg.to_dict(), "rows": len(ds), "dropped": ds.meta["dropped"]}
    return cfg, [], [args.out, str(meta_path(args.out))]


def cmd_split(args):
    ds = Dataset.load(_require(args.data))
    parts = split_dataset(ds, tuple(args.fractions), args.seed)
    out_dir = Path(args.out_dir or Path(args.data).parent)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(args.data).stem
    outs = []
    for part, name in zip(parts, ("train", "val", "test")):
        p = out_dir / f"{stem}_{name}.csv"
        part.save(p)
        outs.append(str(p))
    return {"fractions": list(args.fractions), "sizes": [len(p) for p in parts]}, [args.data], outs


def cmd_train(args):
    tr = Dataset.load(_require(args.train))
    va = Dataset.load(_require(args.val))
    lo, hi = tr.input_bounds()
    net_cfg = {"hidden_layers": args.hidden_layers, "hidden_width": args.hidden_width}
    net_cfg.update(_section(args, "network"))
    spec = NetworkSpec(input_dim=len(tr.columns), seed=args.seed, **net_cfg)
    tcfg = {"epochs": args.epochs, "batch_size": args.batch_size, "initial_lr": args.lr,
            "lr_halving_period": args.lr_halving_period, "dropout_rate": args.dropout}
    tcfg.update(_section(args, "train"))
    tcfg["seed"] = args.seed
    cfg = TrainConfig.from_dict(tcfg)
    net, trace = train(Network(spec, lo, hi), tr, va, cfg, log_every=args.log_every, logger=log)
    save_weights(net, args.out)
    outs = [args.out]
    if args.trace:
        trace.to_csv(args.trace)
        outs.append(args.trace)
    resolved = {"network": asdict(spec), "train": cfg.to_dict(),
                "input_low": lo.tolist(), "input_high": hi.tolist()}
    return resolved, [args.train, args.val], outs


def cmd_eval(args):
    net = load_weights(_require(args.weights))
    ds = Dataset.load(_require(args.data))
    met = evaluate(net, ds)
    print(met.table())
    outs = []
    if args.out:
        Path(args.out).write_text(json.dumps(met.to_dict(), indent=2) + "\n")
        outs.append(args.out)
    return {"metrics": met.to_dict()}, [args.weights, args.data], outs


def _de_cfg(args, dim) -> DEConfig:
    d = _section(args, "de")
    if args.de_config:
        d.update(_read_json(args.de_config))
    d["seed"] = args.seed
    cfg = DEConfig.from_dict(d)
    if args.pop_multiplier:
        cfg = cfg.with_population_multiplier(args.pop_multiplier, dim)
    return cfg


def cmd_calibrate(args):
    cos_cfg, iv_cfg = _cos_cfg(args), _iv_cfg(args)
    problem = load_problem(_require(args.problem), args.threads, cos_cfg, iv_cfg)
    de_cfg = _de_cfg(args, len(problem.free))
    res = calibrate(problem, de_cfg, ground_check=not args.no_ground, cos_cfg=cos_cfg, iv_cfg=iv_cfg)
    res.save(args.out)
    outs = [args.out]
    if args.trace:
        res.trace.to_csv(args.trace)
        outs.append(args.trace)
    print(f"J = {res.objective:.6e}  MJ = {res.mean_objective:.6e}  evaluations = {res.function_evaluations}")
    cfg = {"de": replace(de_cfg, bounds=problem.bounds).to_dict(), "cos": cos_cfg.to_dict(), "iv": iv_cfg.to_dict(),
           "lambda_bar": problem.lambda_bar}
    return cfg, [args.problem], outs


def cmd_hessian(args):
    cos_cfg, iv_cfg = _cos_cfg(args), _iv_cfg(args)
    problem = load_problem(_require(args.problem), args.threads, cos_cfg, iv_cfg)
    point_doc = _read_json(args.point)
    missing = [n for n in problem.free_names if n not in point_doc]
    if missing:
        raise ValueError(f"{args.point}: missing values for {missing}")
    point = np.array([float(point_doc[n]) for n in problem.free_names])
    steps = None if args.steps is None else np.array(args.steps, dtype=float)
    rep = hessian(problem, point, steps)
    rep.to_csv(args.out)
    outs = [args.out]
    if args.json:
        Path(args.json).write_text(json.dumps(rep.to_dict(), indent=2) + "\n")
        outs.append(args.json)
    for name, d in zip(rep.names, rep.diagonal):
        print(f"{name:>8} {d: .6e}")
    return {"steps": rep.steps.tolist(), "cos": cos_cfg.to_dict()}, [args.problem, args.point], outs


def cmd_synth(args):
    truth = load_params(_require(args.params))
    cos_cfg, iv_cfg = _cos_cfg(args), _iv_cfg(args)
    surface = synth_market(truth, args.moneyness, args.maturities, args.rate, None, cos_cfg, iv_cfg)
    if args.weights is not None:
        spec = json.loads(args.weights)
        surface = surface.with_weights(resolve_weights(spec, surface))
    save_surface(surface, args.out)
    cfg = {"truth": truth.to_dict(), "moneyness": list(args.moneyness), "maturities": list(args.maturities),
           "rate": args.rate, "weights": args.weights, "cos": cos_cfg.to_dict(), "iv": iv_cfg.to_dict()}
    return cfg, [args.params], [args.out]


def cmd_landscape(args):
    truth = load_params(_require(args.params))
    names = tuple(args.vary)
    cos_cfg, iv_cfg = _cos_cfg(args), _iv_cfg(args)
    surface = load_surface(args.surface) if args.surface else synth_market(truth, cos_cfg=cos_cfg, iv_cfg=iv_cfg)
    g1, g2 = _grid(args.grid1), _grid(args.grid2)
    rows = landscape(truth, names, (g1, g2), surface, CosBrentBackend(cos_cfg, iv_cfg, args.threads))
    save_landscape(rows, names, args.out)
    cfg = {"vary": list(names), "grid1": list(args.grid1), "grid2": list(args.grid2), "truth": truth.to_dict(),
           "cos": cos_cfg.to_dict(), "iv": iv_cfg.to_dict()}
    return cfg, [args.params] + ([args.surface] if args.surface else []), [args.out]


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="svcal", description="Heston/Bates pricing, surrogate training and calibration.")
    p.add_argument("--seed", type=int, default=0, help="seed for every random draw of the run")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="worker threads")
    p.add_argument("--config", help="JSON with optional sections cos, iv, de, train, network, ranges")
    p.add_argument("--version", action="version", version=f"svcal {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("price", help="COS prices for a quote file")
    s.add_argument("--params", required=True)
    s.add_argument("--quotes", required=True)
    s.add_argument("--cos-config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_price)

    s = sub.add_parser("iv", help="implied vols for a price file")
    s.add_argument("--prices", required=True, help="CSV with m, tau, r, kind, price")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_iv)

    s = sub.add_parser("gen", help="generate a training dataset")
    s.add_argument("--model", choices=[k.value for k in ModelKind], default="heston")
    s.add_argument("--n", type=int, default=100_000)
    s.add_argument("--cos-config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen)

    s = sub.add_parser("split", help="train/validation/test split")
    s.add_argument("--data", required=True)
    s.add_argument("--fractions", type=float, nargs=3, default=(0.8, 0.1, 0.1))
    s.add_argument("--out-dir")
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("train", help="train the IV network")
    s.add_argument("--train", required=True)
    s.add_argument("--val", required=True)
    s.add_argument("--hidden-layers", type=int, default=4)
    s.add_argument("--hidden-width", type=int, default=200)
    s.add_argument("--epochs", type=int, default=8000)
    s.add_argument("--batch-size", type=int, default=1024)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--lr-halving-period", type=int, default=500)
    s.add_argument("--dropout", type=float, default=0.0)
    s.add_argument("--log-every", type=int, default=100)
    s.add_argument("--trace")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="MSE / MAE / MAPE / R2 of a network on a dataset")
    s.add_argument("--weights", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("calibrate", help="calibrate a problem JSON with Differential Evolution")
    s.add_argument("--problem", required=True)
    s.add_argument("--de-config")
    s.add_argument("--pop-multiplier", type=int, help="population = multiplier x free parameters")
    s.add_argument("--no-ground", action="store_true", help="skip the COS re-pricing of the result")
    s.add_argument("--cos-config")
    s.add_argument("--trace")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("hessian", help="finite-difference Hessian of the MSE objective")
    s.add_argument("--problem", required=True)
    s.add_argument("--point", required=True, help="JSON with values for the free parameters")
    s.add_argument("--steps", type=float, nargs="+")
    s.add_argument("--cos-config")
    s.add_argument("--json")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_hessian)

    s = sub.add_parser("synth", help="synthetic IV surface from known parameters")
    s.add_argument("--params", required=True)
    s.add_argument("--moneyness", type=float, nargs="+", default=list(np.linspace(0.85, 1.15, 5)))
    s.add_argument("--maturities", type=float, nargs="+", default=[0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0])
    s.add_argument("--rate", type=float, default=0.03)
    s.add_argument("--weights", help='JSON: scalar, per-quote list, or {"atm": w}')
    s.add_argument("--cos-config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("landscape", help="two-parameter MSE grid scan")
    s.add_argument("--params", required=True)
    s.add_argument("--vary", nargs=2, required=True, metavar=("NAME1", "NAME2"))
    s.add_argument("--grid1", nargs=3, type=float, default=(0.01, 0.40, 40), metavar=("LO", "HI", "N"))
    s.add_argument("--grid2", nargs=3, type=float, default=(0.1, 2.15, 42), metavar=("LO", "HI", "N"))
    s.add_argument("--surface", help="observed surface CSV; default synthesized from --params")
    s.add_argument("--cos-config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_landscape)
    return p


def _write_manifest(args, argv, resolved, inputs, outputs, wall, status):
    if not outputs:
        return
    manifest = {
        "subcommand": args.command,
        "argv": list(argv),
        "arguments": {k: v for k, v in vars(args).items() if k not in ("func", "config")},
        "global_config": args.config,
        "resolved_config": resolved,
        "seed": args.seed,
        "threads": args.threads,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "version": __version__,
        "timestamp": dt.datetime.now(dt.timezone.utc).isoformat(),
        "wall_time": wall,
        "exit_code": status,
    }
    Path(str(outputs[0]) + ".manifest.json").write_text(json.dumps(manifest, indent=2, default=str) + "\n")


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"svcal: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    t0 = time.perf_counter()
    try:
        args.config = _read_json(args.config) if args.config else {}
        if args.threads < 1:
            raise ValueError("--threads must be >= 1")
        resolved, inputs, outputs = args.func(args)
    except NumericalError as exc:
        print(f"svcal {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, FileNotFoundError, IsADirectoryError, UsageError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"svcal {args.command}: error: {msg}", file=sys.stderr)
        return EXIT_USAGE
    _write_manifest(args, argv, resolved, inputs, outputs, time.perf_counter() - t0, EXIT_OK)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
