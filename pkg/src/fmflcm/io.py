"""Long-format CSV ingestion, covariate normalization and atomic report writing."""

from __future__ import annotations

import contextlib
import csv
import json
import math
import os
import tempfile
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .fda import FunctionalDataset, MixtureParams, Responsibilities, SubjectRecord, build_basis
from .penalty import PenaltyConfig
from .rem import FitResult

SCHEMA_VERSION = "fmflcm-report/1"
DF_FORMULA = (
    "sum over nonzero (j,k) blocks of trace((G_jk + S)^+ G_jk) + (K-1) + K; "
    "G_jk the per-observation-scaled block cross-product, S the Hessian of the quadratic penalty part, "
    "blocks with no quadratic part count L"
)


# ---------------------------------------------------------------------------
# atomic writes


@contextlib.contextmanager
def atomic_open(path, mode: str = "w", **kwargs):
    """Open a temporary sibling of ``path`` and move it into place on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, mode, **kwargs) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def write_json(path, obj) -> None:
    with atomic_open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, default=_json_default, allow_nan=True)
        fh.write("\n")


def read_json(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def write_rows(path, rows: list, columns: list | None = None) -> None:
    """Write a list of dicts as CSV."""
    if columns is None:
        columns = list(rows[0].keys()) if rows else []
    with atomic_open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(row.get(k, "")) for k in columns})


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


# ---------------------------------------------------------------------------
# long CSV


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True)
class TimeScale:
    t_min: float
    t_max: float

    def to_unit(self, t):
        return (np.asarray(t, dtype=float) - self.t_min) / (self.t_max - self.t_min)

    def from_unit(self, u):
        return self.t_min + np.asarray(u, dtype=float) * (self.t_max - self.t_min)


def load_long_csv(path, with_scale: bool = False):
    """Read ``subject_id,time,y,x1,...,xp`` rows into a dataset.

    Times are rescaled to [0, 1] with the global min and max.  Missing or
    non-numeric cells, ragged rows and duplicated (subject, time) pairs are
    rejected with the offending row number.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        if len(header) < 4 or header[:3] != ["subject_id", "time", "y"]:
            raise DataFormatError(f"{path}: header must start with subject_id,time,y and name at least one covariate")
        p = len(header) - 3
        groups: dict = {}
        seen = set()
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataFormatError(f"{path}: row {lineno} has {len(row)} fields, expected {len(header)}")
            sid = row[0].strip()
            if not sid:
                raise DataFormatError(f"{path}: row {lineno} has an empty subject_id")
            try:
                vals = [float(c) for c in row[1:]]
            except ValueError:
                raise DataFormatError(f"{path}: row {lineno} has a missing or non-numeric cell") from None
            if not all(math.isfinite(v) for v in vals):
                raise DataFormatError(f"{path}: row {lineno} has a missing or non-finite value")
            key = (sid, vals[0])
            if key in seen:
                raise DataFormatError(f"{path}: row {lineno} duplicates subject {sid!r} at time {vals[0]!r}")
            seen.add(key)
            groups.setdefault(sid, []).append(vals)
    if not groups:
        raise DataFormatError(f"{path}: no data rows")
    all_t = np.array([v[0] for rows in groups.values() for v in rows])
    scale = TimeScale(float(all_t.min()), float(all_t.max()))
    if scale.t_max == scale.t_min:
        raise DataFormatError(f"{path}: all observations share one time point")
    subjects = []
    for sid, rows in groups.items():
        arr = np.array(sorted(rows, key=lambda v: v[0]))
        subjects.append(SubjectRecord(sid, np.clip(scale.to_unit(arr[:, 0]), 0.0, 1.0), arr[:, 1], arr[:, 2:]))
    data = FunctionalDataset(tuple(subjects), p)
    if with_scale:
        return data, scale, header[3:]
    return data


def write_long_csv(path, data: FunctionalDataset, covariate_names: list | None = None, scale: TimeScale | None = None) -> None:
    names = covariate_names or [f"x{j + 1}" for j in range(data.p)]
    if len(names) != data.p:
        raise ValueError("covariate_names must name every covariate")
    with atomic_open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "time", "y", *names])
        for s in data.subjects:
            t = s.times if scale is None else scale.from_unit(s.times)
            for i in range(s.n_times):
                w.writerow([s.id, repr(float(t[i])), repr(float(s.y[i])), *(repr(float(v)) for v in s.x[i])])


# ---------------------------------------------------------------------------
# normalization


@dataclass
class NormalizationRecord:
    scales: np.ndarray
    kept: list
    dropped: list = field(default_factory=list)
    log_response: bool = False
    rule: str = "each covariate divided by the root of its mean square over all observations"

    def back_transform(self, b: np.ndarray, p_original: int) -> np.ndarray:
        """Coefficients on the original covariate scale; dropped covariates get zeros."""
        b = np.asarray(b, dtype=float)
        out = np.zeros((p_original,) + b.shape[1:])
        out[self.kept] = b / self.scales.reshape((-1,) + (1,) * (b.ndim - 1))
        return out

    def to_dict(self) -> dict:
        return {
            "scales": [float(v) for v in self.scales],
            "kept": list(self.kept),
            "dropped": list(self.dropped),
            "log_response": self.log_response,
            "rule": self.rule,
        }


def normalize_dataset(data: FunctionalDataset, log_response: bool = False) -> tuple:
    """Optionally log the response and put every covariate on unit mean square.

    All-zero covariates cannot be scaled; they are dropped with a warning.
    Returns ``(dataset, NormalizationRecord)``.
    """
    y = data.y
    if log_response:
        if np.any(y <= 0):
            raise ValueError("log transform needs strictly positive responses")
        y = np.log(y)
    ms = np.mean(data.x**2, axis=0)
    kept = [j for j in range(data.p) if ms[j] > 0.0]
    dropped = [j for j in range(data.p) if ms[j] == 0.0]
    if dropped:
        warnings.warn(f"dropping covariates with zero mean square: {dropped}", stacklevel=2)
    if not kept:
        raise ValueError("every covariate is identically zero")
    scales = np.sqrt(ms[kept])
    x = data.x[:, kept] / scales
    out = data.with_values(y=y, x=x)
    return out, NormalizationRecord(scales=scales, kept=kept, dropped=dropped, log_response=log_response)


# ---------------------------------------------------------------------------
# fit reports


def fit_report(fit: FitResult, data: FunctionalDataset | None = None, extra: dict | None = None) -> dict:
    cfg = fit.config
    rep = {
        "schema_version": SCHEMA_VERSION,
        "package_version": __version__,
        "penalty": {"kind": cfg.kind, "lambda": cfg.lam, "rho": cfg.rho, "gamma": cfg.gamma, "r": cfg.r},
        "chosen": fit.chosen,
        "K": fit.K,
        "p": fit.params.p,
        "n": int(fit.labels.size),
        "n_obs": fit.n_obs,
        "basis": {"interior_knots": fit.basis.interior_knots, "r": fit.basis.r, "order": fit.basis.order},
        "params": {"b": fit.params.b, "sigma2": fit.params.sigma2, "pi": fit.params.pi},
        "labels": fit.labels,
        "omega": fit.omega.omega,
        "support": fit.support,
        "support_blocks": fit.support_blocks,
        "block_dims": fit.block_dims,
        "trace": fit.trace,
        "lambda_trace": fit.lambda_trace,
        "restarts": fit.restarts,
        "loglik": fit.loglik,
        "df": fit.df,
        "df_formula": DF_FORMULA,
        "aic": fit.aic,
        "bic": fit.bic,
        "converged": fit.converged,
        "iterations": fit.iterations,
        "degenerate": fit.degenerate,
        "estep": fit.estep,
        "seed": fit.seed,
        "extra": fit.extra,
    }
    if data is not None:
        rep["subject_ids"] = [str(i) for i in data.ids]
    if extra:
        rep.update(extra)
    return rep


def check_schema(report: dict) -> None:
    version = report.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ValueError(f"unsupported report schema {version!r}; expected {SCHEMA_VERSION!r}")


def fit_from_report(report: dict) -> FitResult:
    """Rebuild a FitResult from a JSON report."""
    check_schema(report)
    pen = report["penalty"]
    lam = pen["lambda"]
    cfg = PenaltyConfig(kind=pen["kind"], lam=tuple(lam) if isinstance(lam, list) else lam,
                        rho=pen["rho"], gamma=pen["gamma"], r=pen["r"])
    knots = np.asarray(report["basis"]["interior_knots"], dtype=float)
    basis = build_basis(np.concatenate([[0.0], knots, [1.0]]), report["basis"]["r"], max_interior=max(knots.size, 1))
    p = report["params"]
    params = MixtureParams(np.asarray(p["b"], dtype=float), np.asarray(p["sigma2"], dtype=float),
                           np.asarray(p["pi"], dtype=float))
    omega = Responsibilities(np.asarray(report["omega"], dtype=float))
    return FitResult(
        params=params,
        omega=omega,
        labels=np.asarray(report["labels"], dtype=int),
        support=list(report["support"]),
        support_blocks=np.asarray(report["support_blocks"], dtype=bool),
        trace=list(report["trace"]),
        loglik=float(report["loglik"]),
        df=float(report["df"]),
        aic=float(report["aic"]),
        bic=float(report["bic"]),
        config=cfg,
        basis=basis,
        converged=bool(report["converged"]),
        iterations=int(report["iterations"]),
        seed=int(report["seed"]),
        n_obs=int(report["n_obs"]),
        block_dims=np.asarray(report["block_dims"], dtype=float),
        lambda_trace=list(report["lambda_trace"]),
        restarts=list(report["restarts"]),
        degenerate=bool(report["degenerate"]),
        estep=report["estep"],
        extra=dict(report.get("extra", {})),
    )


def curve_rows(t, curves: np.ndarray, prefix: str = "beta") -> list:
    """Rows ``t, beta_j1_k1, ...`` from a (p, K, len(t)) array (1-based names)."""
    p, K, _ = curves.shape
    rows = []
    for s, tv in enumerate(t):
        row = {"t": float(tv)}
        for j in range(p):
            for k in range(K):
                row[f"{prefix}_j{j + 1}_k{k + 1}"] = float(curves[j, k, s])
        rows.append(row)
    return rows
