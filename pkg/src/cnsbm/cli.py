"""Command-line entry point: simulate, fit, refine, evaluate, decompose.

Every option can also come from a TOML file given with ``--config``. Top-level
keys apply to all subcommands, a table named after the subcommand overrides
them, and explicit flags win over both.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import hashlib
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

import tomli

from . import __version__
from .cavi import FitConfig, NumericalError, fit
from .core import Priors, VariationalState, map_assignments
from .data import (CategoricalMatrix, MatrixFormatError, encode_copy_numbers, load_matrix,
                   make_holdout, make_weights, write_matrix)
from .decompose import StageConfig, chromosome_filter, two_stage
from .initialize import initialize
from .metrics import empirical_blocks, heldout_accuracy, heldout_loglik, weighted_entropy
from .refine import CapacityError, icl, refine_search
from .simulate import apply_mcar_mask, sample_block_model, sample_main_residual
from .svi import SviConfig, fit_svi

logger = logging.getLogger("cnsbm")

SCHEMA_VERSION = 1
THREADS_ENV = "CNSBM_THREADS"
EXIT_OK, EXIT_USER, EXIT_NUMERIC = 0, 1, 2

# options that never enter the config hash
_NOT_HASHED = {"config", "command", "threads", "verbose", "out", "trace", "truth", "out_dir"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------- parser

def _common(p):
    p.add_argument("--config", help="TOML file with option defaults")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None,
                   help=f"worker threads (default: ${THREADS_ENV} or all cores)")
    p.add_argument("--deterministic", action="store_true",
                   help="order-fixed reductions and no timings in outputs")
    p.add_argument("-v", "--verbose", action="count", default=0)


def _data_opts(p):
    p.add_argument("--input", help="matrix file (.csv, .tsv or .json)")
    p.add_argument("--cap", type=int, default=None, help="copy-number cap (default 11)")
    p.add_argument("--impute-seed", type=int, default=None)
    p.add_argument("--impute-per-column", action="store_true", default=None)
    p.add_argument("--holdout-fraction", type=float, default=None)
    p.add_argument("--holdout-seed", type=int, default=None)
    p.add_argument("--weights", choices=["none", "ipw"], default=None)


def _fit_opts(p):
    p.add_argument("--alpha", type=float, default=1.0, help="block Dirichlet concentration")
    p.add_argument("--alpha-row", type=float, default=1.0)
    p.add_argument("--alpha-col", type=float, default=1.0)
    p.add_argument("--init", choices=["random", "kmeans", "spectral"], default="spectral")
    p.add_argument("--spectral-variant", choices=["log", "bist"], default="log")
    p.add_argument("--spectral-components", type=int, default=None)
    p.add_argument("--tol", type=float, default=None,
                   help="CAVI: absolute ELBO change (1e-4); SVI: relative (1e-6)")
    p.add_argument("--max-iters", type=int, default=500)
    p.add_argument("--restarts", type=int, default=1, help="keep the best ELBO of this many seeds")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cnsbm", description="Categorical bipartite block model for copy-number matrices")
    parser.add_argument("--version", action="version", version=f"cnsbm {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("simulate", help="draw a matrix from a planted model")
    _common(p)
    p.add_argument("--kind", choices=["block", "main-residual"], default="block")
    p.add_argument("--N", type=int, default=200)
    p.add_argument("--M", type=int, default=400)
    p.add_argument("--K", type=int, default=4)
    p.add_argument("--L", type=int, default=6)
    p.add_argument("--n-cat", type=int, default=12)
    p.add_argument("--sharpness", type=float, default=0.9)
    p.add_argument("--n-residual", type=int, default=3)
    p.add_argument("--n-segments", type=int, default=6)
    p.add_argument("--flip", type=float, default=0.03)
    p.add_argument("--shift-width", type=int, default=100)
    p.add_argument("--mask-rate", type=float, default=0.0)
    p.add_argument("--chromosomes", default="chr1", help="comma-separated chromosome names")
    p.add_argument("--out", help="matrix file to write")
    p.add_argument("--truth", help="planted labels JSON to write")

    p = sub.add_parser("fit", help="fit the block model")
    _common(p)
    _data_opts(p)
    p.add_argument("--K", type=int)
    p.add_argument("--L", type=int)
    _fit_opts(p)
    p.add_argument("--engine", choices=["cavi", "svi"], default="cavi")
    p.add_argument("--batch-rows", type=int, default=None)
    p.add_argument("--batch-cols", type=int, default=None)
    p.add_argument("--kappa", type=float, default=0.7)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--eval-every", type=int, default=10)
    p.add_argument("--max-steps", type=int, default=2000)
    p.add_argument("--out", help="model JSON to write")
    p.add_argument("--trace", help="ELBO trace CSV to write")

    p = sub.add_parser("refine", help="split/merge search on a fitted model")
    _common(p)
    _data_opts(p)
    p.add_argument("--model", help="model JSON from fit")
    p.add_argument("--budget", type=int, default=10)
    p.add_argument("--criterion", choices=["elbo", "icl"], default="icl")
    p.add_argument("--min-rows", type=int, default=5)
    p.add_argument("--min-cols", type=int, default=10)
    p.add_argument("--refit-sweeps", type=int, default=20)
    p.add_argument("--no-splits", action="store_true")
    p.add_argument("--out", help="refined model JSON to write")

    p = sub.add_parser("evaluate", help="held-out and partition scores of a model")
    _common(p)
    _data_opts(p)
    p.add_argument("--model", help="model JSON from fit or refine")
    p.add_argument("--out", help="report JSON (default: stdout)")

    p = sub.add_parser("decompose", help="two-stage main/residual decomposition")
    _common(p)
    _data_opts(p)
    p.add_argument("--K", type=int)
    p.add_argument("--L", type=int)
    p.add_argument("--stage2-K", type=int)
    p.add_argument("--stage2-L", type=int)
    _fit_opts(p)
    p.add_argument("--exclude-chrom", action="append", default=None,
                   help="leave this chromosome out of the residual fit (repeatable)")
    p.add_argument("--min-cluster-rows", type=int, default=0)
    p.add_argument("--out-dir", help="directory for all outputs")
    return parser


_REQUIRED = {
    "simulate": ["out"],
    "fit": ["input", "K", "L", "out"],
    "refine": ["input", "model", "out"],
    "evaluate": ["input", "model"],
    "decompose": ["input", "K", "L", "stage2_K", "stage2_L", "out_dir"],
}


def _subparser(parser, name):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def _config_defaults(path, command, sub) -> dict:
    try:
        with open(path, "rb") as fh:
            raw = tomli.load(fh)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except tomli.TOMLDecodeError as exc:
        raise UsageError(f"{path}: {exc}") from None
    known = {a.dest for a in sub._actions}
    commands = set(_REQUIRED)
    merged = {k: v for k, v in raw.items() if not isinstance(v, dict)}
    for name, table in raw.items():
        if isinstance(table, dict) and name not in commands:
            raise UsageError(f"{path}: unknown section [{name}]")
    merged.update(raw.get(command, {}))
    out = {}
    for key, value in merged.items():
        dest = key.replace("-", "_")
        if dest not in known or dest in ("config", "help"):
            # top-level keys may target another subcommand
            if key in raw.get(command, {}):
                raise UsageError(f"{path}: unknown option {key!r} for {command}")
            continue
        out[dest] = value
    return out


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        raise UsageError("a subcommand is required")
    if args.config:
        sub = _subparser(parser, args.command)
        sub.set_defaults(**_config_defaults(args.config, args.command, sub))
        args = parser.parse_args(argv)
    missing = [d for d in _REQUIRED[args.command] if getattr(args, d, None) is None]
    if missing:
        raise UsageError(f"{args.command}: missing required option(s) "
                         + ", ".join("--" + m.replace("_", "-") for m in missing))
    return args


# ---------------------------------------------------------------- helpers

def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _resolved(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in _NOT_HASHED}


def _header(args, kind: str) -> dict:
    cfg = _resolved(args)
    return {"schema_version": SCHEMA_VERSION, "kind": kind, "version": __version__,
            "seed": args.seed, "config_hash": config_hash(cfg), "config": cfg}


@contextlib.contextmanager
def _atomic_path(path):
    """Yield a temporary path next to ``path``; rename over it on success."""
    path = Path(path)
    if path.parent and not path.parent.exists():
        raise FileNotFoundError(f"output directory does not exist: {path.parent}")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    os.close(fd)
    try:
        yield tmp
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def write_json(obj, path):
    with _atomic_path(path) as tmp:
        with open(tmp, "w") as fh:
            json.dump(obj, fh, indent=1, sort_keys=True)
            fh.write("\n")


def write_rows(rows, header, path):
    with _atomic_path(path) as tmp:
        with open(tmp, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)


def write_matrix_atomic(m, path, values=None):
    fmt = "tsv" if Path(path).suffix.lower() in (".tsv", ".tab") else "csv"
    with _atomic_path(path) as tmp:
        write_matrix(m, tmp, fmt, values)


def read_json(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    with open(path) as fh:
        return json.load(fh)


def set_threads(n):
    import numba
    if n is None:
        env = os.environ.get(THREADS_ENV)
        if not env:
            return
        try:
            n = int(env)
        except ValueError:
            raise UsageError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    if n < 1:
        raise UsageError("--threads must be >= 1")
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def _fill_from_model(args, model):
    """Data options left unset fall back to the values the model was fitted with."""
    saved = model.get("config", {})
    for key in ("cap", "impute_seed", "impute_per_column", "holdout_fraction",
                "holdout_seed", "weights"):
        if getattr(args, key, None) is None and saved.get(key) is not None:
            setattr(args, key, saved[key])


def load_input(args):
    """Returns (full matrix, training matrix, holdout split or None)."""
    path = Path(args.input)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    if path.suffix.lower() == ".json":
        data = CategoricalMatrix.from_json(path.read_text())
    else:
        data = load_matrix(path)
    cap = 11 if args.cap is None else args.cap
    data = encode_copy_numbers(data, cap)
    split = None
    if args.holdout_fraction:
        seed = args.seed if args.holdout_seed is None else args.holdout_seed
        split = make_holdout(data, args.holdout_fraction, seed)
        train = split.train_matrix(data)
    else:
        train = data
    return data, train, split


def _priors(args) -> Priors:
    return Priors(args.alpha, args.alpha_row, args.alpha_col)


def _priors_from_model(model) -> Priors:
    return Priors(**model["priors"])


def _weights(args, data):
    return make_weights(data, args.weights or "none")


def _model_doc(args, kind, state, priors, report=None, extra=None) -> dict:
    doc = _header(args, kind)
    doc["priors"] = {"alpha_block": priors.alpha_block, "alpha_row": priors.alpha_row,
                     "alpha_col": priors.alpha_col}
    doc["state"] = state.to_dict(include_phi=True)
    if report is not None:
        rep = report.to_dict()
        if args.deterministic:
            rep.pop("wall_time")
        doc["report"] = rep
    if extra:
        doc.update(extra)
    return doc


def _init(args, data, K, L, priors, weights, seed):
    return initialize(data, K, L, args.init, seed, priors, weights, args.spectral_variant,
                      args.spectral_components, args.impute_seed, bool(args.impute_per_column))


# ---------------------------------------------------------------- commands

def cmd_simulate(args):
    chroms = [c for c in args.chromosomes.split(",") if c]
    if args.kind == "block":
        pm = sample_block_model(args.N, args.M, args.K, args.L, args.n_cat, args.sharpness,
                                args.seed, chroms)
        data, truth = pm.data, pm.to_dict()
        truth["loglik"] = pm.loglik()
    else:
        pd = sample_main_residual(args.N, args.M, args.K, args.n_residual, args.n_segments,
                                  args.n_cat, args.flip, args.shift_width, args.seed, chroms)
        data = pd.data
        truth = {"main_labels": pd.main_labels.tolist(),
                 "residual_labels": pd.residual_labels.tolist()}
    if args.mask_rate > 0:
        data = apply_mcar_mask(data, args.mask_rate, args.seed + 1)
    write_matrix_atomic(data, args.out)
    if args.truth:
        doc = _header(args, "truth")
        doc.update(truth)
        write_json(doc, args.truth)
    logger.info("wrote %d x %d matrix to %s", data.n_rows, data.n_cols, args.out)


def _fit_once(args, train, weights, priors, seed):
    init = _init(args, train, args.K, args.L, priors, weights, seed)
    if args.engine == "cavi":
        cfg = FitConfig(max_iters=args.max_iters, tol=args.tol or 1e-4,
                        deterministic_reduction=args.deterministic)
        return fit(train, weights, priors, args.K, args.L, init, cfg)
    cfg = SviConfig(batch_rows=args.batch_rows or min(train.n_rows, 128),
                    batch_cols=args.batch_cols or min(train.n_cols, 256),
                    tau=args.tau, kappa=args.kappa, max_steps=args.max_steps,
                    eval_every=args.eval_every, tol=args.tol or 1e-6)
    return fit_svi(train, priors, args.K, args.L, init, cfg, seed, weights)


def cmd_fit(args):
    _, train, split = load_input(args)
    priors = _priors(args)
    weights = _weights(args, train)
    best = None
    for r in range(max(1, args.restarts)):
        state, report = _fit_once(args, train, weights, priors, args.seed + r)
        if best is None or report.elbo_trace[-1] > best[1].elbo_trace[-1]:
            best = (state, report)
    state, report = best
    extra = {"engine": args.engine,
             "n_heldout": 0 if split is None else len(split)}
    write_json(_model_doc(args, "model", state, priors, report, extra), args.out)
    if args.trace:
        write_rows([(i + 1, repr(float(e))) for i, e in enumerate(report.elbo_trace)],
                   ["evaluation", "elbo"], args.trace)
    logger.info("fit: ELBO %.6f after %d iterations", report.elbo_trace[-1], report.iterations)


def _load_model(args):
    model = read_json(args.model)
    if model.get("schema_version") != SCHEMA_VERSION or "state" not in model:
        raise ValueError(f"{args.model}: not a model file of schema version {SCHEMA_VERSION}")
    _fill_from_model(args, model)
    state = VariationalState.from_dict(model["state"])
    return model, state


def _check_shape(state, data):
    if (state.N, state.M, state.n_cat) != (data.n_rows, data.n_cols, data.n_cat):
        raise ValueError(f"model shape {(state.N, state.M, state.n_cat)} does not match the "
                         f"input {(data.n_rows, data.n_cols, data.n_cat)}")


def cmd_refine(args):
    model, state = _load_model(args)
    _, train, _ = load_input(args)
    _check_shape(state, train)
    priors = _priors_from_model(model)
    res = refine_search(train, state, priors, args.budget, args.criterion, args.min_rows,
                        args.min_cols, _weights(args, train), args.refit_sweeps,
                        not args.no_splits, args.seed)
    extra = {"refine": {"criterion_trace": [float(v) for v in res.trace],
                        "moves": [list(map(lambda x: x if isinstance(x, str) else int(x), m))
                                  for m in res.moves],
                        "icl": res.score.icl, "K_eff": res.score.K_eff,
                        "L_eff": res.score.L_eff},
             "engine": model.get("engine")}
    write_json(_model_doc(args, "model", res.state, priors, None, extra), args.out)


def cmd_evaluate(args):
    model, state = _load_model(args)
    _, train, split = load_input(args)
    _check_shape(state, train)
    hard = map_assignments(state)
    blocks = empirical_blocks(train, hard, train.n_cat, state.K, state.L)
    score = icl(train, state, _priors_from_model(model))
    report = _header(args, "evaluation")
    report.update({
        "heldout_loglik": None if split is None else heldout_loglik(split, hard, blocks),
        "heldout_accuracy": None if split is None or len(split) == 0
        else heldout_accuracy(split, hard, blocks),
        "n_heldout": 0 if split is None else len(split),
        "weighted_entropy": weighted_entropy(train, hard, train.n_cat),
        "icl": score.icl,
        "K_eff": score.K_eff,
        "L_eff": score.L_eff,
    })
    if args.out:
        write_json(report, args.out)
    else:
        json.dump(report, sys.stdout, indent=1, sort_keys=True)
        sys.stdout.write("\n")


def cmd_decompose(args):
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data, _, _ = load_input(args)
    priors = _priors(args)
    fit_cfg = FitConfig(max_iters=args.max_iters, tol=args.tol or 1e-4,
                        deterministic_reduction=args.deterministic)
    common = dict(priors=priors, init=args.init, spectral_variant=args.spectral_variant,
                  seed=args.seed, restarts=max(1, args.restarts),
                  weights=args.weights or "none", fit=fit_cfg)
    cfg1 = StageConfig(args.K, args.L, **common)
    cfg2 = StageConfig(args.stage2_K, args.stage2_L, **common)
    exclude = chromosome_filter(*args.exclude_chrom) if args.exclude_chrom else None
    dec = two_stage(data, cfg1, cfg2, exclude, args.min_cluster_rows)

    write_matrix_atomic(data, out / "main.csv", dec.main)
    write_matrix_atomic(data, out / "residual.csv", dec.residual_signed)
    write_json(_model_doc(args, "model", dec.stage1, priors, dec.stage1_report,
                          {"stage": 1}), out / "stage1.json")
    write_json(_model_doc(args, "model", dec.stage2, priors, dec.stage2_report,
                          {"stage": 2, "residual_offset": dec.residual_offset,
                           "residual_n_cat": dec.residual_cat.n_cat,
                           "excluded_bins": [data.col_meta[j].bin_id for j in dec.excluded_cols]
                           if data.col_meta else [],
                           "kept_rows": [data.row_ids[i] for i in dec.kept_rows]}),
               out / "stage2.json")
    rows = [(rid, a, "" if b is None else b) for rid, a, b in dec.assignment_table(data)]
    write_rows(rows, ["row_id", "stage1_cluster", "stage2_cluster"], out / "assignments.csv")


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "refine": cmd_refine,
            "evaluate": cmd_evaluate, "decompose": cmd_decompose}


def run(argv=None) -> int:
    """Execute one subcommand and return its exit code."""
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USER
    except SystemExit as exc:  # --help / --version
        return EXIT_OK if not exc.code else EXIT_USER
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        set_threads(args.threads)
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"cnsbm {args.command}: {exc}", file=sys.stderr)
        return EXIT_USER
    except (NumericalError, FloatingPointError) as exc:
        print(f"cnsbm {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError, KeyError, IndexError, CapacityError,
            MatrixFormatError, json.JSONDecodeError) as exc:
        print(f"cnsbm {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USER
    return EXIT_OK


def main():
    sys.exit(run())
