"""Command-line front end: ``medmod simulate | analyze | predict | semfit``.

Exit codes: 0 success, 1 runtime failure, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import InvalidData, MedModError, NonPSDCorrelation, RankDeficient, UnknownColumn
from .inference import (
    InferenceConfig,
    SpuriousSlopeInput,
    assess_current_memo,
    assess_mediated_moderation,
    assess_mediation,
    assess_moderation,
    predict_spurious_slope,
)
from .pathfit import build_model, fit_ml, model_covariance, product_name
from .regress import DataTable
from .simulate import StudyGrid, default_workers, run_study, table_csv

SCHEMA = "medmod/1"
SEED_ENV = "MEDMOD_SEED"
DEFAULT_SEED = 20110715


class UsageError(Exception):
    pass


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def make_manifest(subcommand, argv, config, seed=None, inputs=(), started=None):
    return {
        "schema": SCHEMA,
        "subcommand": subcommand,
        "argv": list(argv),
        "config": config,
        "seed": seed,
        "version": __version__,
        "started": started or _now(),
        "finished": _now(),
        "inputs": {str(p): file_digest(p) for p in inputs},
    }


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=False) + "\n", encoding="utf-8")


def _resolve_seed(seed):
    if seed is not None:
        return seed
    env = os.environ.get(SEED_ENV)
    if env is None or env.strip() == "":
        return DEFAULT_SEED
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from None


# -- simulate ------------------------------------------------------------------

def cmd_simulate(args, argv) -> int:
    if args.nrun < 1:
        raise UsageError("nrun must be positive")
    ns = args.n or [100, 250]
    if any(n <= 6 for n in ns):
        raise UsageError("--n must exceed 6")
    threads = args.threads if args.threads is not None else default_workers()
    if threads < 1:
        raise UsageError("--threads must be positive")
    seed = _resolve_seed(args.seed)
    cfg = InferenceConfig(alpha=args.alpha, center_first=not args.no_center)
    grid = StudyGrid(
        ns=tuple(ns),
        beta_wx=tuple(args.beta_wx or StudyGrid.beta_wx),
        rho_zw=tuple(args.rho_zw or StudyGrid.rho_zw),
        nrun=args.nrun,
    )
    started = _now()
    results = run_study(grid, cfg, seed=seed, workers=threads)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for kind in ("conjunctive", "primary"):
        (out / f"{kind}.csv").write_text(table_csv(results, kind), encoding="utf-8")
    config = {
        "ns": list(grid.ns),
        "beta_wx": list(grid.beta_wx),
        "rho_zw": list(grid.rho_zw),
        "nrun": grid.nrun,
        "threads": threads,
        "inference": cfg.to_dict(),
    }
    _write_json(out / "manifest.json", make_manifest("simulate", argv, config, seed, started=started))
    return 0


# -- analyze -------------------------------------------------------------------

def _roles(args):
    proc = args.procedure
    need = {"tree": ("x", "y", "z", "w"), "mediation": ("x", "y", "m"),
            "moderation": ("x", "y", "z"), "current-memo": ("x", "y", "z", "m")}[proc]
    roles = {}
    for r in need:
        roles[r] = getattr(args, r)
    return roles


def analyze_report(path, args) -> dict:
    roles = _roles(args)
    try:
        data = DataTable.from_csv(path, columns=list(dict.fromkeys(roles.values())))
    except (InvalidData, UnknownColumn) as exc:
        raise UsageError(str(exc)) from None
    cfg = InferenceConfig(args.alpha, args.skip_bk_step1, not args.no_center)
    r = roles
    if args.procedure == "tree":
        result = assess_mediated_moderation(data, r["x"], r["y"], r["z"], r["w"], cfg)
    elif args.procedure == "mediation":
        result = assess_mediation(data, r["x"], r["y"], r["m"], cfg)
    elif args.procedure == "moderation":
        result = assess_moderation(data, r["x"], r["y"], r["z"], cfg)
    else:
        result = assess_current_memo(data, r["x"], r["y"], r["z"], r["m"], cfg)
    return {
        "schema": SCHEMA,
        "subcommand": "analyze",
        "version": __version__,
        "input": {"path": str(path), "sha256": file_digest(path), "n": data.n},
        "config": {"procedure": args.procedure, "roles": roles, **cfg.to_dict()},
        "result": result.to_dict(),
    }


def cmd_analyze(args, argv) -> int:
    if not Path(args.csv).is_file():
        raise UsageError(f"no such file: {args.csv}")
    started = _now()
    report = analyze_report(args.csv, args)
    text = json.dumps(report, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        manifest = make_manifest("analyze", argv, report["config"], inputs=[args.csv], started=started)
        _write_json(f"{args.out}.manifest.json", manifest)
    else:
        sys.stdout.write(text)
    return 0


# -- predict -------------------------------------------------------------------

def cmd_predict(args, argv) -> int:
    try:
        inp = SpuriousSlopeInput(
            beta_wx=args.beta_wx,
            sigma_w=args.sigma_w,
            sigma_z=args.sigma_z,
            rho_zw=args.rho_zw,
            rho_wx=args.rho_wx,
            rho_zx=args.rho_zx,
        )
    except (ValueError, NonPSDCorrelation) as exc:
        raise UsageError(str(exc)) from None
    print(repr(predict_spurious_slope(inp)))
    return 0


# -- semfit --------------------------------------------------------------------

LABELS = {"memo": "Mediated moderation", "bk": "Baron and Kenny model"}


def _read_covariance(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise UsageError(f"{path}: empty covariance file")
    header = [h.strip() for h in rows[0]]
    body = rows[1:]
    if body and len(body[0]) == len(header) + 1:
        body = [r[1:] for r in body]  # leading row-label column
    try:
        S = np.array([[float(c) for c in r] for r in body])
    except ValueError:
        raise UsageError(f"{path}: non-numeric covariance entry") from None
    if S.shape != (len(header), len(header)):
        raise UsageError(f"{path}: covariance matrix must be square with a header row")
    return header, S


def _sub(header, S, names, path):
    missing = [v for v in names if v not in header]
    if missing:
        raise UsageError(f"{path}: covariance matrix lacks {missing}")
    ix = [header.index(v) for v in names]
    return S[np.ix_(ix, ix)]


def format_table3(fits) -> str:
    lines = [f"{'':<24}{'chi2':>10}{'df':>5}{'p-value':>10}{'AGFI':>8}{'TLI':>8}"]
    for kind, fit in fits:
        flag = "" if fit.converged else "  (not converged)"
        lines.append(
            f"{LABELS[kind]:<24}{fit.chi2:>10.3f}{fit.df:>5d}{fit.p:>10.3f}"
            f"{fit.agfi:>8.3f}{fit.tli:>8.3f}{flag}"
        )
    return "\n".join(lines) + "\n"


def cmd_semfit(args, argv) -> int:
    kinds = ["memo", "bk"] if args.model == "both" else [args.model]
    med = args.m or args.w or "w"
    started = _now()
    fits = []
    if args.cov:
        if args.n is None:
            raise UsageError("--n is required with covariance input")
        if args.n <= 5:
            raise UsageError("--n must exceed the number of variables")
        header, S_all = _read_covariance(args.cov)
        n = args.n
        source = args.cov
        for kind in kinds:
            model = build_model(kind, args.x, args.z, med, args.y, not args.w_on_z_only)
            S = _sub(header, S_all, model.observed, args.cov)
            try:
                fits.append((kind, fit_ml(model, S, n)))
            except ValueError as exc:
                raise UsageError(f"{args.cov}: {exc}") from None
    else:
        source = args.data
        cols = list(dict.fromkeys([args.x, args.z, med, args.y]))
        try:
            data = DataTable.from_csv(args.data, columns=cols)
        except (InvalidData, UnknownColumn) as exc:
            raise UsageError(str(exc)) from None
        for kind in kinds:
            _, S = model_covariance(data, kind, args.x, args.z, med, args.y)
            fits.append((kind, fit_ml(build_model(kind, args.x, args.z, med, args.y, not args.w_on_z_only), S, data.n)))
    sys.stdout.write(format_table3(fits))
    report = {
        "schema": SCHEMA,
        "subcommand": "semfit",
        "version": __version__,
        "input": {"path": str(source), "sha256": file_digest(source)},
        "fits": {kind: fit.to_dict() for kind, fit in fits},
    }
    if args.json:
        Path(args.json).write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
        config = {"model": args.model, "n": args.n, "w_on_x": not args.w_on_z_only, "roles": [args.x, args.z, med, args.y],
                  "products": [product_name(args.z, args.x), product_name(med, args.x)]}
        _write_json(f"{args.json}.manifest.json",
                    make_manifest("semfit", argv, config, inputs=[source], started=started))
    if not all(f.converged for _, f in fits):
        print("error: optimiser did not converge; report above is partial", file=sys.stderr)
        return 1
    return 0


# -- parser --------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="medmod", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="run the Monte Carlo study")
    s.add_argument("--n", type=int, action="append", help="sample size (repeatable)")
    s.add_argument("--beta-wx", type=float, action="append", help="W*X coefficient (repeatable)")
    s.add_argument("--rho-zw", type=float, action="append", help="corr(Z, W) (repeatable)")
    s.add_argument("--nrun", type=int, default=10_000)
    s.add_argument("--seed", type=int, default=None, help=f"master seed (falls back to ${SEED_ENV})")
    s.add_argument("--alpha", type=float, default=0.05)
    s.add_argument("--no-center", action="store_true")
    s.add_argument("--out-dir", default=".")
    s.add_argument("--threads", type=int, default=None)

    a = sub.add_parser("analyze", help="run an inference procedure on a CSV file")
    a.add_argument("csv")
    for role in ("x", "y", "z", "w", "m"):
        a.add_argument(f"--{role}", default=role, help=f"column for {role.upper()} (default {role!r})")
    a.add_argument("--procedure", choices=("tree", "mediation", "moderation", "current-memo"), default="tree")
    a.add_argument("--alpha", type=float, default=0.05)
    a.add_argument("--no-center", action="store_true")
    a.add_argument("--skip-bk-step1", action="store_true")
    a.add_argument("--out", help="write the JSON report here instead of stdout")

    r = sub.add_parser("predict", help="population spurious ZX slope")
    r.add_argument("--beta-wx", type=float, required=True)
    r.add_argument("--sigma-w", type=float, default=1.0)
    r.add_argument("--sigma-z", type=float, default=1.0)
    r.add_argument("--rho-zw", type=float, required=True)
    r.add_argument("--rho-wx", type=float, default=0.4)
    r.add_argument("--rho-zx", type=float, default=0.4)

    f = sub.add_parser("semfit", help="compare the BK and mediated-moderation path models")
    src = f.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", help="raw data CSV")
    src.add_argument("--cov", help="covariance matrix CSV (header row = variable names)")
    f.add_argument("--model", choices=("bk", "memo", "both"), default="both")
    f.add_argument("--n", type=int, help="sample size (required with --cov)")
    for role in ("x", "z", "y"):
        f.add_argument(f"--{role}", default=role)
    f.add_argument("--w", default=None, help="mediator / true moderator column")
    f.add_argument("--m", default=None, help="alias for --w")
    f.add_argument("--json", help="also write a JSON report")
    f.add_argument("--w-on-z-only", action="store_true",
                   help="MeMo model without the X -> W path (W regressed on Z alone)")
    return p


COMMANDS = {
    "simulate": cmd_simulate,
    "analyze": cmd_analyze,
    "predict": cmd_predict,
    "semfit": cmd_semfit,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        if hasattr(args, "alpha") and not 0.0 < args.alpha < 1.0:
            raise UsageError("alpha must lie in (0, 1)")
        return COMMANDS[args.command](args, argv)
    except UsageError as exc:
        print(f"medmod: error: {exc}", file=sys.stderr)
        return 2
    except RankDeficient as exc:
        where = exc.equation or "regression"
        print(f"medmod: error: rank-deficient design in {where}: {exc}", file=sys.stderr)
        return 1
    except MedModError as exc:
        print(f"medmod: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
