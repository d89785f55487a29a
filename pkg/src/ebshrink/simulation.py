"""Simulation harness: data generation, calibration runs, rank sweeps.

A scenario draws effects from a known mixture prior, observes them through
normal noise, optionally fits and adjusts a working prior, and tabulates
realized against nominal false sign rates over a grid of target levels.
Replicates use independent derived RNG streams so they can run in any
order (or in parallel) and still reproduce bit-identically for a fixed
seed.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .adjustment import AdjustMethod, Constant, InfoMat, LowerBound, adjust_prior
from .core import MixturePrior, Observation, PriorComponent, eigendecompose, truncate_rank
from .errors import DegenerateComponent, EbshrinkError, NoIncrease
from .fitting import EmConfig, em_fit, fit_config_with_seed, refit_weights
from .posterior import fsp, posterior_stats, reject_at_level, threshold_lfsr

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class IdentityNoise:
    """Every observation gets the identity noise covariance."""


@dataclass(frozen=True)
class FixedNoise:
    """Every observation shares one given noise covariance."""

    matrix: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "matrix", np.array(self.matrix, dtype=np.float64))


@dataclass(frozen=True)
class WishartNoise:
    """Per-sample noise covariances drawn from a scaled Wishart."""

    df: int
    scale: np.ndarray | None = None  # defaults to the identity
    divisor: float = 1.0


NoiseSpec = IdentityNoise | FixedNoise | WishartNoise


@dataclass(frozen=True)
class Setting:
    """One evaluation arm of a scenario.

    ``use_true_prior`` plugs in the generating prior (the oracle arm);
    otherwise the fitted prior is used, truncated to ``rank`` when given,
    then adjusted by ``adjust`` when given. After either modification the
    mixture weights are refit against the data with the covariances held
    fixed (disable with ``refit_weights=False``).
    """

    name: str
    use_true_prior: bool = False
    adjust: AdjustMethod | None = None
    rank: int | None = None
    refit_weights: bool = True


@dataclass(frozen=True)
class ScenarioConfig:
    """Everything needed to reproduce one simulation scenario.

    ``selection`` names the rule mapping a nominal level to a decision
    set: ``lfsr`` thresholds each effect's lfsr directly (the reporting
    convention of shrinkage software), ``s_value`` thresholds the running
    mean instead.
    """

    n_samples: int
    dim: int
    true_prior: MixturePrior
    noise: NoiseSpec = IdentityNoise()
    n_reps: int = 30
    alpha_grid: tuple[float, ...] = (0.002, 0.005, 0.01, 0.02, 0.05, 0.1, 0.15, 0.2)
    fit_k: int | None = None
    fit: EmConfig | None = None
    adjust: AdjustMethod | None = None
    seed: int = 0
    selection: str = "lfsr"

    def __post_init__(self):
        if self.selection not in ("lfsr", "s_value"):
            raise ValueError(f"unknown selection rule {self.selection!r}")
        object.__setattr__(self, "alpha_grid", tuple(float(a) for a in self.alpha_grid))
        for a in self.alpha_grid:
            if not 0.0 < a <= 0.5:
                raise ValueError(f"nominal levels must lie in (0, 0.5], got {a}")
        if isinstance(self.noise, WishartNoise) and self.noise.df < self.dim:
            raise ValueError("Wishart degrees of freedom must be at least the dimension")


def _prior_factors(prior: MixturePrior) -> list[np.ndarray]:
    """Per-component factors F with F F^T equal to the effective covariance."""
    factors = []
    for comp in prior.components:
        dec = eigendecompose(comp.effective)
        vals = np.maximum(dec.eigenvalues, 0.0)
        factors.append(dec.eigenvectors * np.sqrt(vals))
    return factors


def _sample_wishart(rng: np.random.Generator, df: int, scale_chol: np.ndarray, n: int) -> np.ndarray:
    """Bartlett construction: one chi-square diagonal plus normal lower triangle."""
    r = scale_chol.shape[0]
    a = np.zeros((n, r, r))
    for i in range(r):
        a[:, i, i] = np.sqrt(rng.chisquare(df - i, size=n))
    low = np.tril_indices(r, k=-1)
    a[:, low[0], low[1]] = rng.standard_normal((n, low[0].size))
    la = scale_chol[None] @ a
    return la @ la.transpose(0, 2, 1)


def generate_dataset(config: ScenarioConfig, rep: int) -> tuple[list[Observation], np.ndarray]:
    """Draw one replicate: observations plus the true effect matrix.

    Deterministic given (config.seed, rep); the draw order is component
    labels, effect normals, noise covariances, then noise normals.
    """
    rng = np.random.default_rng([config.seed, rep, 0])
    n, r = config.n_samples, config.dim
    prior = config.true_prior
    labels = rng.choice(prior.k, size=n, p=prior.weights / prior.weights.sum())
    z = rng.standard_normal((n, r))
    effects = np.empty((n, r))
    for k, factor in enumerate(_prior_factors(prior)):
        sel = labels == k
        effects[sel] = z[sel] @ factor.T
    noise = config.noise
    if isinstance(noise, IdentityNoise):
        covs = np.broadcast_to(np.eye(r), (n, r, r))
        x = effects + rng.standard_normal((n, r))
    elif isinstance(noise, FixedNoise):
        covs = np.broadcast_to(noise.matrix, (n, r, r))
        chol = np.linalg.cholesky(noise.matrix)
        x = effects + rng.standard_normal((n, r)) @ chol.T
    else:
        scale = np.eye(r) if noise.scale is None else np.asarray(noise.scale, dtype=np.float64)
        covs = _sample_wishart(rng, noise.df, np.linalg.cholesky(scale), n) / noise.divisor
        chol = np.linalg.cholesky(covs)
        eps = rng.standard_normal((n, r))
        x = effects + np.einsum("nab,nb->na", chol, eps)
    data = [Observation(x[i], covs[i]) for i in range(n)]
    return data, effects


@dataclass
class FsrReport:
    """Per-replicate calibration results for one setting.

    Arrays are (n_reps, n_alpha); failed replicates hold NaN throughout.
    FSP is recorded as 0 when nothing was selected (no sign claims, no
    errors) while the FSR estimate is NaN there, since the mean lfsr of an
    empty selection is undefined.
    """

    setting: str
    alpha_grid: tuple[float, ...]
    fsp: np.ndarray
    fsr_hat: np.ndarray
    n_selected: np.ndarray
    power: np.ndarray
    n_effects: int
    failed_reps: tuple[int, ...] = ()

    @property
    def n_reps(self) -> int:
        return self.fsp.shape[0]

    def mean_fsp(self) -> np.ndarray:
        return np.nanmean(self.fsp, axis=0)

    def se_fsp(self) -> np.ndarray:
        good = np.sum(~np.isnan(self.fsp), axis=0)
        return np.nanstd(self.fsp, axis=0, ddof=1) / np.sqrt(np.maximum(good, 1))

    def mean_power(self) -> np.ndarray:
        return np.nanmean(self.power, axis=0)

    def se_power(self) -> np.ndarray:
        good = np.sum(~np.isnan(self.power), axis=0)
        return np.nanstd(self.power, axis=0, ddof=1) / np.sqrt(np.maximum(good, 1))

    def mean_fsr_hat(self) -> np.ndarray:
        with np.errstate(invalid="ignore"):
            return np.nanmean(self.fsr_hat, axis=0)

    def power_at_fsr(self, target: float) -> float:
        """Mean power where the mean empirical FSR curve crosses ``target``.

        Linear interpolation over the (mean FSP, mean power) pairs traced
        out by the nominal grid, clamped at the curve's endpoints.
        """
        fsp_curve = self.mean_fsp()
        pow_curve = self.mean_power()
        ok = ~(np.isnan(fsp_curve) | np.isnan(pow_curve))
        order = np.argsort(fsp_curve[ok], kind="stable")
        return float(np.interp(target, fsp_curve[ok][order], pow_curve[ok][order]))


def _evaluate_setting(stats, truth, alpha_grid, selection="lfsr"):
    select = threshold_lfsr if selection == "lfsr" else reject_at_level
    out = np.empty((len(alpha_grid), 4))
    for j, alpha in enumerate(alpha_grid):
        decisions = select(stats.lfsr, stats.mean, alpha)
        if decisions.size == 0:
            out[j] = (0.0, np.nan, 0.0, 0.0)
            continue
        rows, cols = decisions.indices[:, 0], decisions.indices[:, 1]
        hat = float(np.mean(np.asarray(stats.lfsr)[rows, cols]))
        out[j] = (fsp(decisions, truth), hat, decisions.size, decisions.power)
    return out


def _replicate_rows(config: ScenarioConfig, settings: Sequence[Setting], rep: int):
    """Evaluate every setting on one replicate, sharing the data and fit."""
    data, truth = generate_dataset(config, rep)
    covs = np.stack([obs.v for obs in data])
    fitted = None
    trace = None
    fit_error: Exception | None = None
    if any(not s.use_true_prior for s in settings):
        if config.fit is None or config.fit_k is None:
            raise ValueError("scenario needs fit settings for non-oracle arms")
        seed = int(np.random.SeedSequence([config.seed, rep, 1]).generate_state(1)[0])
        try:
            fitted, trace = em_fit(data, config.fit_k, fit_config_with_seed(config.fit, seed))
        except (DegenerateComponent, NoIncrease) as exc:
            fit_error = exc
            logger.warning("replicate %d: fit failed: %s", rep, exc)
    rows: dict[str, np.ndarray | None] = {}
    for setting in settings:
        if setting.use_true_prior:
            prior = config.true_prior
        elif fit_error is not None:
            rows[setting.name] = None
            continue
        else:
            prior = fitted
            modified = False
            if setting.rank is not None:
                prior = MixturePrior(
                    tuple(
                        PriorComponent(c.weight, truncate_rank(c.u, setting.rank))
                        for c in prior.components
                    )
                )
                modified = True
            if setting.adjust is not None:
                try:
                    prior = adjust_prior(prior, trace, covs, setting.adjust)
                except EbshrinkError as exc:
                    logger.warning(
                        "replicate %d, %s: adjustment failed: %s", rep, setting.name, exc
                    )
                    rows[setting.name] = None
                    continue
                modified = True
            if modified and setting.refit_weights:
                prior = refit_weights(data, prior)
        stats = posterior_stats(data, prior)
        rows[setting.name] = _evaluate_setting(stats, truth, config.alpha_grid, config.selection)
    return rows


def run_settings(
    config: ScenarioConfig, settings: Sequence[Setting], threads: int = 1
) -> dict[str, FsrReport]:
    """Run all replicates of a scenario and aggregate per setting.

    Each replicate generates data once and fits once; every setting reuses
    them, so arms are compared on identical draws. Aggregation folds over
    replicate indices in order regardless of execution interleaving.
    """
    names = [s.name for s in settings]
    if len(set(names)) != len(names):
        raise ValueError("setting names must be unique")
    reps = range(config.n_reps)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda rep: _replicate_rows(config, settings, rep), reps))
    else:
        results = [_replicate_rows(config, settings, rep) for rep in reps]
    n_alpha = len(config.alpha_grid)
    reports = {}
    for setting in settings:
        fsp_arr = np.full((config.n_reps, n_alpha), np.nan)
        hat_arr = np.full((config.n_reps, n_alpha), np.nan)
        sel_arr = np.full((config.n_reps, n_alpha), np.nan)
        pow_arr = np.full((config.n_reps, n_alpha), np.nan)
        failed = []
        for rep in reps:
            block = results[rep][setting.name]
            if block is None:
                failed.append(rep)
                continue
            fsp_arr[rep] = block[:, 0]
            hat_arr[rep] = block[:, 1]
            sel_arr[rep] = block[:, 2]
            pow_arr[rep] = block[:, 3]
        reports[setting.name] = FsrReport(
            setting=setting.name,
            alpha_grid=config.alpha_grid,
            fsp=fsp_arr,
            fsr_hat=hat_arr,
            n_selected=sel_arr,
            power=pow_arr,
            n_effects=config.n_samples * config.dim,
            failed_reps=tuple(failed),
        )
    return reports


def run_scenario(config: ScenarioConfig, threads: int = 1) -> FsrReport:
    """Run the single arm described by the config itself.

    The arm is the oracle when ``config.fit`` is None, otherwise the fitted
    prior with ``config.adjust`` applied when present.
    """
    setting = Setting(
        name="oracle" if config.fit is None else "fitted",
        use_true_prior=config.fit is None,
        adjust=config.adjust,
    )
    return run_settings(config, [setting], threads=threads)[setting.name]


@dataclass
class RankSweepResult:
    """Reports per (rank, arm) from one shared set of fits."""

    ranks: tuple[int, ...]
    reports: dict[str, FsrReport]  # keyed "rank{r}" and "rank{r}_info_mat"

    def table(self) -> list[tuple[int, str, float, float, float]]:
        """(rank, arm, alpha, mean FSP, mean power) rows."""
        rows = []
        for rank in self.ranks:
            for arm in ("unadjusted", "info_mat"):
                key = f"rank{rank}" if arm == "unadjusted" else f"rank{rank}_info_mat"
                rep = self.reports[key]
                for j, alpha in enumerate(rep.alpha_grid):
                    rows.append((rank, arm, alpha, rep.mean_fsp()[j], rep.mean_power()[j]))
        return rows


def rank_sweep(
    config: ScenarioConfig, ranks: Sequence[int], threads: int = 1
) -> RankSweepResult:
    """Truncate the fitted covariances to each rank, with and without the
    information-matrix adjustment, and tabulate FSP at each nominal level."""
    settings = []
    for rank in ranks:
        settings.append(Setting(name=f"rank{rank}", rank=int(rank)))
        settings.append(Setting(name=f"rank{rank}_info_mat", rank=int(rank), adjust=InfoMat()))
    reports = run_settings(config, settings, threads=threads)
    return RankSweepResult(tuple(int(r) for r in ranks), reports)


def appendix_d_priors() -> list[np.ndarray]:
    """The three 6x6 generating covariances of the rank-sweep study.

    Each places a correlated 2x2 block (off-diagonal +0.5, -0.5, +0.5) at
    conditions (1,2), (3,4), (5,6) respectively with 0.01 elsewhere on the
    diagonal, scaled by 3.
    """
    mats = []
    for pos, rho in ((0, 0.5), (2, -0.5), (4, 0.5)):
        m = np.eye(6) * 0.01
        m[pos, pos] = m[pos + 1, pos + 1] = 1.0
        m[pos, pos + 1] = m[pos + 1, pos] = rho
        mats.append(3.0 * m)
    return mats


def _rank1(vec, scale=1.0) -> np.ndarray:
    v = np.asarray(vec, dtype=np.float64)
    return scale * np.outer(v, v)


@dataclass(frozen=True)
class Preset:
    """A named, reproducible experiment: scenario plus its arms."""

    name: str
    kind: str  # "scenario" or "rank_sweep"
    config: ScenarioConfig
    settings: tuple[Setting, ...] = ()
    ranks: tuple[int, ...] = ()


def _sec3_rank1() -> Preset:
    # The working prior is restricted to rank 1 the way the rank studies do
    # it: fit unconstrained, then truncate eigenvalues at zero.
    truth = MixturePrior((PriorComponent(1.0, _rank1([1.0, 1.0, 0.01, 0.01, 0.01])),))
    config = ScenarioConfig(
        n_samples=1000,
        dim=5,
        true_prior=truth,
        noise=IdentityNoise(),
        n_reps=30,
        fit_k=2,
        fit=EmConfig(init="pca_rank1"),
        seed=20240901,
    )
    settings = (
        Setting("rank1ED", rank=1),
        Setting("constant_0.03", rank=1, adjust=Constant(0.03)),
    )
    return Preset("sec3_rank1", "scenario", config, settings)


def _sim1(noise: NoiseSpec, name: str, seed: int) -> Preset:
    comps = (
        PriorComponent(0.5, _rank1([1.0, 1.0, 0.01, 0.01, 0.01], scale=3.0)),
        PriorComponent(0.5, _rank1([1.0, -1.0, 1.0, 0.01, 0.01], scale=3.0)),
    )
    config = ScenarioConfig(
        n_samples=1000,
        dim=5,
        true_prior=MixturePrior(comps),
        noise=noise,
        n_reps=30,
        fit_k=2,
        fit=EmConfig(init="pca_rank1"),
        seed=seed,
    )
    settings = (
        Setting("true", use_true_prior=True),
        Setting("rank1ED", rank=1),
        Setting("info_mat", rank=1, adjust=InfoMat(alpha=0.05)),
        Setting("lower_bound", rank=1, adjust=LowerBound(multiplier=2.0)),
    )
    return Preset(name, "scenario", config, settings)


def _sec6_sim2() -> Preset:
    comps = tuple(PriorComponent(1.0 / 3.0, m) for m in appendix_d_priors())
    config = ScenarioConfig(
        n_samples=2000,
        dim=6,
        true_prior=MixturePrior(comps),
        noise=IdentityNoise(),
        n_reps=20,
        alpha_grid=(0.05, 0.1),
        fit_k=3,
        fit=EmConfig(),
        seed=20240904,
    )
    return Preset("sec6_sim2_ranksweep", "rank_sweep", config, ranks=(1, 2, 3, 4, 5, 6))


_PRESET_BUILDERS = {
    "sec3_rank1": _sec3_rank1,
    "sec6_sim1_identity": lambda: _sim1(IdentityNoise(), "sec6_sim1_identity", 20240902),
    "sec6_sim1_wishart": lambda: _sim1(
        WishartNoise(df=10, divisor=10.0), "sec6_sim1_wishart", 20240903
    ),
    "sec6_sim2_ranksweep": _sec6_sim2,
}

PRESET_NAMES = tuple(sorted(_PRESET_BUILDERS))


def get_preset(
    name: str,
    n_reps: int | None = None,
    seed: int | None = None,
    n_samples: int | None = None,
) -> Preset:
    """Look up a preset by name, optionally overriding its scale knobs."""
    if name not in _PRESET_BUILDERS:
        raise KeyError(f"unknown preset {name!r}; available: {', '.join(PRESET_NAMES)}")
    preset = _PRESET_BUILDERS[name]()
    overrides = {}
    if n_reps is not None:
        overrides["n_reps"] = int(n_reps)
    if seed is not None:
        overrides["seed"] = int(seed)
    if n_samples is not None:
        overrides["n_samples"] = int(n_samples)
    if overrides:
        preset = replace(preset, config=replace(preset.config, **overrides))
    return preset


def run_preset(preset: Preset, threads: int = 1) -> tuple[dict[str, FsrReport], RankSweepResult | None]:
    """Execute a preset, returning its reports (and sweep, when applicable)."""
    if preset.kind == "rank_sweep":
        sweep = rank_sweep(preset.config, preset.ranks, threads=threads)
        return sweep.reports, sweep
    return run_settings(preset.config, list(preset.settings), threads=threads), None
