"""Command-line entry point: simulate | fit | tune | evaluate | bootstrap | bench."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import io, metrics
from ._parallel import resolve_threads
from .bench import METHODS, BenchSpec, interpolate_curves, run_bench, score
from .penalty import KINDS, PenaltyConfig
from .rem import ESTEP_MODES, InitSpec, StopSpec, bootstrap_bands, fit
from .simgen import SimConfig, generate_dataset
from .tuning import PATH_SCORES, TuningGrid, fit_with_lambda_path, select_K, select_rho_r

log = logging.getLogger("fmflcm")
CURVE_GRID = np.linspace(0.0, 1.0, 101)


def _floats(text: str) -> tuple:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _ints(text: str) -> tuple:
    return tuple(int(v) for v in text.split(",") if v.strip())


# ---------------------------------------------------------------------------
# argument groups


def _add_fit_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--penalty", choices=KINDS, default="fgs-net")
    p.add_argument("--rho", type=float, default=1.0, help="sparsity/ridge mix in [0, 1]")
    p.add_argument("--r", type=float, default=1e-2, help="roughness weight in the r-norm")
    p.add_argument("--gamma", type=float, default=3.7, help="SCAD concavity")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-starts", type=int, default=1)
    p.add_argument("--init", choices=("random", "labels", "kmeans-lite"), default="random")
    p.add_argument("--init-labels", type=Path, help="truth sidecar or subject_id,label CSV for --init labels")
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--max-iter", type=int, default=200)
    p.add_argument("--estep", choices=ESTEP_MODES, default="product")
    p.add_argument("--normalize", action="store_true", help="scale covariates to unit mean square")
    p.add_argument("--log-response", action="store_true")


def _add_grid_args(p: argparse.ArgumentParser) -> None:
    d = TuningGrid()
    p.add_argument("--grid-rho", type=_floats, default=d.rho_grid)
    p.add_argument("--grid-r", type=_floats, default=d.r_grid)
    p.add_argument("--grid-K", type=_ints, default=d.K_grid)
    p.add_argument("--grid-n-lambda", type=int, default=d.n_lambda)
    p.add_argument("--grid-lambda-ratio", type=float, default=d.lambda_ratio)
    p.add_argument("--grid-path-score", choices=PATH_SCORES, default=d.path_score)


def _add_sim_args(p: argparse.ArgumentParser) -> None:
    d = SimConfig()
    p.add_argument("--n", type=int, default=d.n)
    p.add_argument("--p", type=int, default=d.p)
    p.add_argument("--true-K", type=int, default=d.K, help="number of generating clusters (at most 3)")
    p.add_argument("--alpha", type=float, default=d.alpha)
    p.add_argument("--snr", type=float, default=d.snr)
    p.add_argument("--S", type=int, default=d.S)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fmflcm", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic dataset and its truth sidecar")
    _add_sim_args(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("fit", help="fit at fixed K (fixed lambda, or lambda path when --lambda is omitted)")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--K", type=int, default=3)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    _add_fit_args(p)
    _add_grid_args(p)

    p = sub.add_parser("tune", help="AIC over (rho, r) and BIC over K")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--K", type=int, default=None, help="fix K and tune only (rho, r)")
    _add_fit_args(p)
    _add_grid_args(p)
    p.add_argument("--threads", type=int, default=None)

    p = sub.add_parser("evaluate", help="score a fit or external estimates against a truth sidecar")
    p.add_argument("--truth", type=Path, required=True)
    p.add_argument("--report", type=Path, help="fit report JSON")
    p.add_argument("--labels", type=Path, help="external subject_id,label CSV")
    p.add_argument("--coef", type=Path, help="external coefficient curve CSV (t, beta_j<j>_k<k> columns)")
    p.add_argument("--data", type=Path, help="dataset CSV, to match subject ids in --labels")
    p.add_argument("--out", type=Path, required=True, help="metrics JSON")

    p = sub.add_parser("bootstrap", help="wild-bootstrap pointwise bands for a fitted report")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--report", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--B", type=int, default=200)
    p.add_argument("--level", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("bench", help="replicate study across methods with averaged metrics")
    _add_sim_args(p)
    p.add_argument("--seed", type=int, default=0, help="seed of the first replicate")
    p.add_argument("--replicates", type=int, default=20)
    p.add_argument("--methods", type=lambda s: tuple(v.strip() for v in s.split(",")), default=("fgs-net",),
                   help=f"comma list from {','.join(METHODS)}")
    p.add_argument("--K", type=int, default=None, help="fix K instead of selecting it by BIC")
    p.add_argument("--n-starts", type=int, default=1)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--max-iter", type=int, default=200)
    _add_grid_args(p)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--out", type=Path, required=True)
    return parser


# ---------------------------------------------------------------------------
# helpers


def _grid(args) -> TuningGrid:
    return TuningGrid(
        n_lambda=args.grid_n_lambda, lambda_ratio=args.grid_lambda_ratio, rho_grid=args.grid_rho,
        r_grid=args.grid_r, K_grid=args.grid_K, path_score=args.grid_path_score,
    )


def _stop(args) -> StopSpec:
    return StopSpec(tol=args.tol, max_iter=args.max_iter)


def _read_labels(path: Path, ids: list) -> np.ndarray:
    """Hard labels from a truth sidecar (JSON) or a subject_id,label CSV, ordered as ``ids``."""
    if path.suffix == ".json":
        return np.asarray(io.read_json(path)["labels"], dtype=int)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or set(rows[0]) < {"subject_id", "label"}:
        raise io.DataFormatError(f"{path}: expected columns subject_id,label")
    table = {r["subject_id"].strip(): int(r["label"]) for r in rows}
    missing = [i for i in ids if str(i) not in table]
    if missing:
        raise io.DataFormatError(f"{path}: no label for subjects {missing[:5]}")
    return np.array([table[str(i)] for i in ids], dtype=int)


def _init(args, data) -> InitSpec:
    labels = None
    if args.init == "labels":
        if args.init_labels is None:
            raise ValueError("--init labels needs --init-labels")
        labels = _read_labels(args.init_labels, data.ids)
    return InitSpec(strategy=args.init, seed=args.seed, labels=labels, n_starts=args.n_starts)


def _load(args):
    data, scale, names = io.load_long_csv(args.data, with_scale=True)
    norm = None
    if args.normalize or args.log_response:
        data, norm = io.normalize_dataset(data, log_response=args.log_response)
        names = [names[j] for j in norm.kept]
    return data, scale, names, norm


def _write_fit(out: Path, f, data, scale, names, norm, extra: dict | None = None) -> None:
    extra = dict(extra or {})
    extra["covariates"] = names
    extra["time_scale"] = {"min": scale.t_min, "max": scale.t_max}
    curves = f.curves(CURVE_GRID)
    if norm is not None:
        extra["normalization"] = norm.to_dict()
        curves_orig = norm.back_transform(curves, len(norm.kept) + len(norm.dropped))
        io.write_rows(out / "curves_original_scale.csv", _with_time(io.curve_rows(CURVE_GRID, curves_orig), scale))
    io.write_json(out / "report.json", io.fit_report(f, data, extra))
    io.write_rows(out / "curves.csv", _with_time(io.curve_rows(CURVE_GRID, curves), scale))
    from .plotting import plot_coefficients, plot_trace

    plot_coefficients(out / "coefficients.png", CURVE_GRID, curves, support=f.support or None, names=names)
    plot_trace(out / "trace.png", f.trace, f.restarts)


def _with_time(rows: list, scale) -> list:
    out = []
    for row in rows:
        out.append({"t": row["t"], "time": float(scale.from_unit(row["t"])),
                    **{k: v for k, v in row.items() if k != "t"}})
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args) -> int:
    cfg = SimConfig(n=args.n, p=args.p, K=args.true_K, alpha=args.alpha, snr=args.snr, S=args.S, seed=args.seed)
    data, truth = generate_dataset(cfg)
    io.write_long_csv(args.out / "data.csv", data)
    io.write_json(args.out / "truth.json", {"schema_version": io.SCHEMA_VERSION, **truth.to_dict(),
                                            "subject_ids": [str(i) for i in data.ids]})
    log.info("wrote %d subjects to %s", data.n, args.out)
    return 0


def cmd_fit(args) -> int:
    data, scale, names, norm = _load(args)
    init = _init(args, data)
    stop = _stop(args)
    if args.lam is not None:
        cfg = PenaltyConfig(kind=args.penalty, lam=args.lam, rho=args.rho, gamma=args.gamma, r=args.r)
        f = fit(data, args.K, cfg, init, stop, args.estep)
    else:
        f = fit_with_lambda_path(data, args.K, args.rho, args.r, init, _grid(args), args.penalty, stop,
                                 args.estep, args.gamma)
    _write_fit(args.out, f, data, scale, names, norm)
    log.info("K=%d loglik=%.4f bic=%.4f support=%s converged=%s", f.K, f.loglik, f.bic, f.support, f.converged)
    return 0


def cmd_tune(args) -> int:
    data, scale, names, norm = _load(args)
    init = _init(args, data)
    grid = _grid(args)
    threads = resolve_threads(args.threads)
    if args.K is not None:
        _, _, f, cells = select_rho_r(data, args.K, grid, init, args.penalty, _stop(args), args.estep,
                                      args.gamma, threads)
        rows = [c.row() for c in cells]
    else:
        _, f, report = select_K(data, grid, init, args.penalty, _stop(args), args.estep, args.gamma, threads)
        rows = report.table()
    io.write_rows(args.out / "tuning.csv", rows)
    _write_fit(args.out, f, data, scale, names, norm, {"grid": asdict(grid)})
    from .plotting import plot_criteria

    plot_criteria(args.out / "criteria.png", rows, x="K" if args.K is None else "rho",
                  y="bic" if args.K is None else "aic")
    log.info("selected K=%d rho=%g r=%g", f.K, f.config.rho, f.config.r)
    return 0


def _report_curves(rep: dict) -> tuple:
    f = io.fit_from_report(rep)
    curves = f.curves(metrics.MSE_GRID)
    return f.labels, curves, f.support_blocks if f.config.kind != "rp" else np.ones_like(f.support_blocks)


def _external_curves(path: Path, p: int) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or "t" not in rows[0]:
        raise io.DataFormatError(f"{path}: expected a t column and beta_j<j>_k<k> columns")
    cols = [c for c in rows[0] if c.startswith("beta_j")]
    pairs = [tuple(int(v) for v in c[len("beta_j"):].split("_k")) for c in cols]
    K = max(k for _, k in pairs)
    if max(j for j, _ in pairs) > p:
        raise io.DataFormatError(f"{path}: more covariates than the truth has")
    t = np.array([float(r["t"]) for r in rows])
    curves = np.zeros((p, K, t.size))
    for c, (j, k) in zip(cols, pairs):
        curves[j - 1, k - 1] = [float(r[c]) for r in rows]
    return interpolate_curves(curves, t)


def cmd_evaluate(args) -> int:
    truth = io.read_json(args.truth)
    cfg = truth["config"]
    truth_ids = truth.get("subject_ids")
    if args.report is not None:
        rep = io.read_json(args.report)
        labels, curves, nonzero = _report_curves(rep)
        if truth_ids and rep.get("subject_ids") and rep["subject_ids"] != truth_ids:
            order = {sid: i for i, sid in enumerate(rep["subject_ids"])}
            labels = labels[[order[sid] for sid in truth_ids]]
        source = str(args.report)
    elif args.labels is not None and args.coef is not None:
        ids = truth_ids or [str(i) for i in range(len(truth["labels"]))]
        labels = _read_labels(args.labels, ids)
        curves = _external_curves(args.coef, cfg["p"])
        nonzero = None
        source = f"{args.labels} + {args.coef}"
    else:
        raise ValueError("evaluate needs --report, or both --labels and --coef")
    scores = score(labels, curves, truth["labels"], cfg["p"], cfg["K"], nonzero=nonzero)
    io.write_json(args.out, {"schema_version": io.SCHEMA_VERSION, "source": source, **scores})
    print(" ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in scores.items()))
    return 0


def cmd_bootstrap(args) -> int:
    data = io.load_long_csv(args.data)
    rep = io.read_json(args.report)
    f = io.fit_from_report(rep)
    if "normalization" in rep:
        data, _ = io.normalize_dataset(data, rep["normalization"]["log_response"])
    bands = bootstrap_bands(f, data, B=args.B, level=args.level, seed=args.seed, t=CURVE_GRID)
    rows = []
    for s, tv in enumerate(bands.t):
        row = {"t": float(tv)}
        for j in range(f.params.p):
            for k in range(f.K):
                tag = f"j{j + 1}_k{k + 1}"
                row[f"est_{tag}"] = bands.estimate[j, k, s]
                row[f"lo_{tag}"] = bands.lower[j, k, s]
                row[f"hi_{tag}"] = bands.upper[j, k, s]
        rows.append(row)
    io.write_rows(args.out / "bands.csv", rows)
    io.write_json(args.out / "bands.json", {"schema_version": io.SCHEMA_VERSION, "B": bands.B,
                                            "dropped": bands.dropped, "level": bands.level,
                                            "method": bands.method, "seed": args.seed})
    from .plotting import plot_coefficients

    plot_coefficients(args.out / "bands.png", bands.t, bands.estimate, support=f.support or None,
                      lower=bands.lower, upper=bands.upper, names=rep.get("covariates"))
    return 0


def cmd_bench(args) -> int:
    sim = SimConfig(n=args.n, p=args.p, K=args.true_K, alpha=args.alpha, snr=args.snr, S=args.S, seed=args.seed)
    spec = BenchSpec(sim=sim, replicates=args.replicates, methods=args.methods, K=args.K, grid=_grid(args),
                     n_starts=args.n_starts, stop=_stop(args))
    res = run_bench(spec, resolve_threads(args.threads))
    io.write_rows(args.out / "replicates.csv", res.rows,
                  ["replicate", "seed", "method", "K", "ARI", "C", "IC", "MSE", "rho", "r", "lambda",
                   "converged", "n_support", "mixed", "fits_with_mixed", "fits_examined", "seconds", "error"])
    io.write_rows(args.out / "summary.csv", res.summary)
    io.write_json(args.out / "summary.json", {"schema_version": io.SCHEMA_VERSION, "sim": asdict(sim),
                                              "grid": asdict(spec.grid), "replicates": spec.replicates,
                                              "n_starts": spec.n_starts, "K": spec.K, "summary": res.summary})
    from .plotting import plot_bench

    plot_bench(args.out / "summary.png", res.summary)
    for row in res.summary:
        print(f"{row['method']:8s} ARI={row['ARI']:.3f} C={row['C']:.2f} IC={row['IC']:.2f} MSE={row['MSE']:.4f}")
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "tune": cmd_tune,
    "evaluate": cmd_evaluate,
    "bootstrap": cmd_bootstrap,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ValueError, RuntimeError, OSError, KeyError, np.linalg.LinAlgError) as exc:
        print(f"fmflcm {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
