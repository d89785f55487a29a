"""File formats: delimited data, JSON model files, report tables.

Numeric text output always uses ``repr(float(x))``, the shortest string
that round-trips the exact binary value, so write -> read -> write is
byte-identical and diffs are meaningful.
"""

from __future__ import annotations

import csv
import hashlib
import json

import numpy as np

from . import __version__
from .adjustment import AdjustMethod, Constant, InfoMat, LowerBound
from .core import MixturePrior, Observation, PriorComponent, validate_prior
from .errors import DimensionMismatch, NotPSD, NotSymmetric, ParseError
from .fitting import EmConfig
from .simulation import (
    FixedNoise,
    FsrReport,
    IdentityNoise,
    RankSweepResult,
    ScenarioConfig,
    Setting,
    WishartNoise,
)

MODEL_FORMAT = "ebshrink-model"
MODEL_VERSION = 1


def fmt(x: float) -> str:
    return repr(float(x))


def read_matrix_csv(path) -> np.ndarray:
    """Headerless CSV of floats, one row per line."""
    rows: list[list[float]] = []
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, record in enumerate(csv.reader(fh), start=1):
            if not record or (len(record) == 1 and not record[0].strip()):
                continue
            try:
                rows.append([float(cell) for cell in record])
            except ValueError as exc:
                raise ParseError(f"{path}: row {lineno}: {exc}") from None
            if len(rows[-1]) != len(rows[0]):
                raise ParseError(
                    f"{path}: row {lineno} has {len(rows[-1])} fields, expected {len(rows[0])}"
                )
    if not rows:
        raise ParseError(f"{path}: no data rows")
    return np.array(rows)


def write_matrix_csv(path, matrix) -> None:
    m = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        for row in m:
            fh.write(",".join(fmt(x) for x in row) + "\n")


def load_observations(data_path, noise: str = "identity") -> list[Observation]:
    """Read observations and their noise covariances.

    ``noise`` is the keyword ``identity``, or a CSV path holding either one
    shared R x R matrix or N stacked R x R matrices (N * R rows).
    """
    x = read_matrix_csv(data_path)
    n, r = x.shape
    if noise == "identity":
        v = np.broadcast_to(np.eye(r), (n, r, r))
    else:
        raw = read_matrix_csv(noise)
        if raw.shape[1] != r:
            raise ParseError(
                f"{noise}: {raw.shape[1]} columns, expected {r} to match the data"
            )
        if raw.shape[0] == r:
            v = np.broadcast_to(raw, (n, r, r))
        elif raw.shape[0] == n * r:
            v = raw.reshape(n, r, r)
        else:
            raise ParseError(
                f"{noise}: {raw.shape[0]} rows; expected {r} (shared) or {n * r} (per-sample)"
            )
    try:
        return [Observation(x[i], v[i]) for i in range(n)]
    except (NotPSD, NotSymmetric) as exc:
        raise ParseError(f"{noise}: {exc}") from None


def _component_dict(comp: PriorComponent) -> dict:
    return {
        "weight": float(comp.weight),
        "u": [[float(x) for x in row] for row in comp.u],
        "d": [float(x) for x in comp.d],
    }


def model_to_dict(prior: MixturePrior, metadata: dict | None = None) -> dict:
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "dim": prior.dim,
        "k": prior.k,
        "components": [_component_dict(c) for c in prior.components],
        "metadata": metadata or {},
    }


def model_from_dict(doc: dict) -> tuple[MixturePrior, dict]:
    if doc.get("format") != MODEL_FORMAT:
        raise ParseError(f"not a {MODEL_FORMAT} document")
    comps = tuple(
        PriorComponent(c["weight"], np.array(c["u"]), np.array(c["d"]))
        for c in doc["components"]
    )
    prior = MixturePrior(comps)
    if prior.dim != doc.get("dim") or prior.k != doc.get("k"):
        raise ParseError("model header disagrees with its components")
    return validate_prior(prior), doc.get("metadata", {})


def save_model(path, prior: MixturePrior, metadata: dict | None = None) -> None:
    doc = model_to_dict(prior, metadata)
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def load_model(path) -> tuple[MixturePrior, dict]:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from None
    return model_from_dict(doc)


def config_digest(payload: dict) -> str:
    """Stable hash of a config dict, for provenance metadata."""
    canon = json.dumps(payload, sort_keys=True)
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def tool_metadata() -> dict:
    return {"tool": "ebshrink", "tool_version": __version__}


def write_posterior_csv(path, mean, neg_prob, lfsr, s_vals) -> None:
    """Per-effect table: one row per (observation, condition)."""
    n, r = np.asarray(mean).shape
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        fh.write("row,condition,posterior_mean,neg_prob,lfsr,s_value\n")
        for i in range(n):
            for j in range(r):
                fh.write(
                    f"{i},{j},{fmt(mean[i][j])},{fmt(neg_prob[i][j])},"
                    f"{fmt(lfsr[i][j])},{fmt(s_vals[i][j])}\n"
                )


def read_posterior_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Recover the (N, R) posterior-mean and lfsr matrices."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        needed = {"row", "condition", "posterior_mean", "lfsr"}
        if reader.fieldnames is None or not needed.issubset(reader.fieldnames):
            raise ParseError(f"{path}: expected columns {sorted(needed)}")
        cells = [(int(rec["row"]), int(rec["condition"]), float(rec["posterior_mean"]), float(rec["lfsr"])) for rec in reader]
    if not cells:
        raise ParseError(f"{path}: no rows")
    n = max(c[0] for c in cells) + 1
    r = max(c[1] for c in cells) + 1
    mean = np.full((n, r), np.nan)
    lfsr = np.full((n, r), np.nan)
    for i, j, m, l in cells:
        mean[i, j] = m
        lfsr[i, j] = l
    if np.any(np.isnan(mean)) or np.any(np.isnan(lfsr)):
        raise ParseError(f"{path}: missing (row, condition) pairs")
    return mean, lfsr


REPORT_COLUMNS = (
    "setting,alpha,mean_fsp,se_fsp,mean_fsr_hat,mean_power,se_power,"
    "mean_selected,n_reps,n_failed"
)


def write_aggregate_csv(path, reports: dict[str, FsrReport]) -> None:
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        fh.write(REPORT_COLUMNS + "\n")
        for name, rep in reports.items():
            mf, sf = rep.mean_fsp(), rep.se_fsp()
            mh = rep.mean_fsr_hat()
            mp, sp = rep.mean_power(), rep.se_power()
            with np.errstate(invalid="ignore"):
                ms = np.nanmean(rep.n_selected, axis=0)
            for j, alpha in enumerate(rep.alpha_grid):
                fh.write(
                    f"{name},{fmt(alpha)},{fmt(mf[j])},{fmt(sf[j])},{fmt(mh[j])},"
                    f"{fmt(mp[j])},{fmt(sp[j])},{fmt(ms[j])},"
                    f"{rep.n_reps - len(rep.failed_reps)},{len(rep.failed_reps)}\n"
                )


def write_replicates_csv(path, reports: dict[str, FsrReport]) -> None:
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        fh.write("setting,rep,alpha,n_selected,fsp,fsr_hat,power,failed\n")
        for name, rep in reports.items():
            for i in range(rep.n_reps):
                failed = int(i in rep.failed_reps)
                for j, alpha in enumerate(rep.alpha_grid):
                    fh.write(
                        f"{name},{i},{fmt(alpha)},{fmt(rep.n_selected[i, j])},"
                        f"{fmt(rep.fsp[i, j])},{fmt(rep.fsr_hat[i, j])},"
                        f"{fmt(rep.power[i, j])},{failed}\n"
                    )


def write_rank_sweep_csv(path, sweep: RankSweepResult) -> None:
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        fh.write("rank,arm,alpha,mean_fsp,mean_power\n")
        for rank, arm, alpha, mean_fsp, mean_power in sweep.table():
            fh.write(f"{rank},{arm},{fmt(alpha)},{fmt(mean_fsp)},{fmt(mean_power)}\n")


def parse_adjust_spec(doc: dict) -> AdjustMethod:
    method = doc.get("method")
    if method == "constant":
        return Constant(float(doc.get("value", 0.03)))
    if method in ("info-mat", "info_mat"):
        return InfoMat(float(doc.get("alpha", 0.05)))
    if method in ("lower-bound", "lower_bound"):
        return LowerBound(float(doc.get("multiplier", 2.0)))
    raise ParseError(f"unknown adjustment method {method!r}")


def _parse_noise(doc) -> IdentityNoise | FixedNoise | WishartNoise:
    if doc in (None, "identity"):
        return IdentityNoise()
    if isinstance(doc, dict):
        kind = doc.get("kind")
        if kind == "fixed":
            return FixedNoise(np.array(doc["matrix"], dtype=np.float64))
        if kind == "wishart":
            scale = doc.get("scale")
            return WishartNoise(
                df=int(doc["df"]),
                scale=None if scale is None else np.array(scale, dtype=np.float64),
                divisor=float(doc.get("divisor", 1.0)),
            )
    raise ParseError(f"unknown noise spec {doc!r}")


def parse_scenario_json(path) -> tuple[ScenarioConfig, list[Setting], str, tuple[int, ...]]:
    """Parse a scenario config file.

    Returns (config, settings, kind, ranks) where kind is "scenario" or
    "rank_sweep".
    """
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from None
    try:
        prior_doc = doc["true_prior"]
        comps = tuple(
            PriorComponent(c["weight"], np.array(c["u"]), np.array(c.get("d")) if c.get("d") else None)
            for c in prior_doc["components"]
        )
        true_prior = validate_prior(MixturePrior(comps))
        fit_doc = doc.get("fit")
        fit = None
        fit_k = None
        if fit_doc is not None:
            fit_k = int(fit_doc["k"])
            ranks_doc = fit_doc.get("rank_constraints")
            fit = EmConfig(
                max_iters=int(fit_doc.get("max_iters", 1000)),
                tol=float(fit_doc.get("tol", 1e-7)),
                rank_constraints=None if ranks_doc is None else tuple(int(r) for r in ranks_doc),
                init=fit_doc.get("init", "random_full_rank_psd"),
            )
        config = ScenarioConfig(
            n_samples=int(doc["n_samples"]),
            dim=int(doc["dim"]),
            true_prior=true_prior,
            noise=_parse_noise(doc.get("noise")),
            n_reps=int(doc.get("n_reps", 30)),
            alpha_grid=tuple(float(a) for a in doc.get("alpha_grid", (0.01, 0.02, 0.05, 0.1, 0.15, 0.2))),
            fit_k=fit_k,
            fit=fit,
            seed=int(doc.get("seed", 0)),
            selection=doc.get("selection", "lfsr"),
        )
        kind = doc.get("kind", "scenario")
        ranks = tuple(int(r) for r in doc.get("ranks", ()))
        settings = []
        for sdoc in doc.get("settings", ()):
            adjust = sdoc.get("adjust")
            settings.append(
                Setting(
                    name=sdoc["name"],
                    use_true_prior=bool(sdoc.get("use_true_prior", False)),
                    adjust=None if adjust is None else parse_adjust_spec(adjust),
                    rank=None if sdoc.get("rank") is None else int(sdoc["rank"]),
                    refit_weights=bool(sdoc.get("refit_weights", True)),
                )
            )
        if kind == "scenario" and not settings:
            settings = [Setting("fitted" if fit is not None else "oracle", use_true_prior=fit is None)]
    except (KeyError, TypeError, ValueError, DimensionMismatch) as exc:
        raise ParseError(f"{path}: {exc!r}") from None
    return config, settings, kind, ranks
