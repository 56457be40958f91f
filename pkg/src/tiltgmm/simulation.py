"""Monte Carlo bench: three sites, a binary and two continuous covariates.

Four heterogeneity settings are provided. Given the binary covariate X1, the
pair (X2, X3) follows a Clayton copula with beta marginals; the outcome is
logistic in (X1, X2, X3) with coefficients (-3, 1, 1, 1). Site 1 observes
(X1, X2), site 2 (X1, X3), site 3 (X2, X3); every site also holds a
reference sample of all three covariates.
"""

from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy import stats
from scipy.special import expit

from .copula import (
    GridConfig,
    clayton_density,
    reconstruct_density,
    sample_clayton,
    sample_synthetic,
)
from .exceptions import TiltGMMError
from .glm import LOGISTIC, FitConfig, ModelSpec, ReducedModelSpec, fit_reduced_model
from .gmm import GmmConfig
from .protocol import lead_aggregate, site_export

log = logging.getLogger(__name__)

METHODS = ("GENMETA", "dist-GMM-C", "dist-GMM-S", "Local")
COVARIATES = ("X1", "X2", "X3")
COEFFICIENTS = ("beta1", "beta2", "beta3")
BETA_TRUE = (-3.0, 1.0, 1.0, 1.0)
SITE_IDS = ("site1", "site2", "site3")
MASKS = (("X1", "X2"), ("X1", "X3"), ("X2", "X3"))
METRIC_COLUMNS = ["setting", "method", "coefficient", "bias", "sd", "esd", "ci", "n_fail"]


@dataclass(frozen=True)
class SiteDesign:
    """Covariate law at one site.

    ``marginals[level]`` holds the beta parameters ``((a2, b2), (a3, b3))``
    of X2 and X3 given ``X1 == level``.
    """

    p_x1: float
    marginals: dict
    alpha: float

    def __post_init__(self):
        if not 0 < self.p_x1 < 1:
            raise ValueError("P(X1 = 1) must lie in (0, 1)")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        for pair in self.marginals.values():
            if min(min(ab) for ab in pair) <= 0:
                raise ValueError("beta parameters must be positive")


@dataclass(frozen=True)
class SimSetting:
    setting_id: int
    sites: tuple
    beta_true: tuple = BETA_TRUE
    masks: tuple = MASKS
    n_study: tuple = (1000, 1000, 1000)
    n_ref: tuple = (500, 500, 500)

    def with_sizes(self, n_study=None, n_ref=None):
        k = len(self.sites)
        return replace(
            self,
            n_study=self.n_study if n_study is None else (int(n_study),) * k,
            n_ref=self.n_ref if n_ref is None else (int(n_ref),) * k,
        )


_BASE = {1: ((0.5, 0.5), (5.0, 2.0)), 0: ((0.2, 0.8), (2.0, 2.0))}
_SHIFTED = (
    _BASE,
    {1: ((2.0, 2.0), (1.0, 2.0)), 0: ((1.0, 2.0), (0.2, 0.8))},
    {1: ((2.0, 5.0), (0.5, 0.5)), 0: ((5.0, 2.0), (2.0, 5.0))},
)


def make_setting(setting_id, n_study=1000, n_ref=500):
    """One of the four benchmark settings.

    1: homogeneous. 2: P(X1 = 1) differs by site (0.2, 0.5, 0.8).
    3: beta marginals and Clayton alpha (1, 2, 3) differ by site.
    4: both shifts together.
    """
    if setting_id not in (1, 2, 3, 4):
        raise ValueError(f"unknown setting {setting_id}")
    p = (0.2, 0.5, 0.8) if setting_id in (2, 4) else (0.3, 0.3, 0.3)
    if setting_id in (3, 4):
        sites = tuple(SiteDesign(p[j], _SHIFTED[j], float(j + 1)) for j in range(3))
    else:
        sites = tuple(SiteDesign(p[j], _BASE, 1.0) for j in range(3))
    return SimSetting(setting_id, sites).with_sizes(n_study, n_ref)


def main_spec():
    return ModelSpec(LOGISTIC, COVARIATES, True)


def reduced_specs(setting):
    return [ReducedModelSpec(LOGISTIC, mask, True) for mask in setting.masks]


def default_grid_config(m=100, min_stratum_n=20):
    return GridConfig(m=m, bounds={"X2": (0.0, 1.0), "X3": (0.0, 1.0)}, discrete=("X1",),
                      min_stratum_n=min_stratum_n)


def draw_covariates(design, n, rng):
    x1 = (rng.uniform(size=n) < design.p_x1).astype(float)
    X = np.empty((n, 3))
    X[:, 0] = x1
    for level in (1, 0):
        rows = np.flatnonzero(x1 == level)
        if rows.size == 0:
            continue
        u = sample_clayton(rows.size, 2, design.alpha, rng)
        (a2, b2), (a3, b3) = design.marginals[level]
        X[rows, 1] = stats.beta.ppf(u[:, 0], a2, b2)
        X[rows, 2] = stats.beta.ppf(u[:, 1], a3, b3)
    return X


def generate_site_data(setting, site_index, seed):
    """Study and reference samples for site ``site_index`` (0-based).

    The study sample keeps only the site's observed covariates plus ``y``.
    """
    design = setting.sites[site_index]
    rng = np.random.default_rng(seed)
    X = draw_covariates(design, setting.n_study[site_index], rng)
    eta = setting.beta_true[0] + X @ np.asarray(setting.beta_true[1:])
    y = (rng.uniform(size=X.shape[0]) < expit(eta)).astype(float)
    ref = draw_covariates(design, setting.n_ref[site_index], rng)
    study = pd.DataFrame(X, columns=COVARIATES)
    study = study.loc[:, list(setting.masks[site_index])]
    study["y"] = y
    return study, pd.DataFrame(ref, columns=COVARIATES)


class TrueDensity:
    """Exact covariate density of one site design, columns (X1, X2, X3).

    Serves as the oracle against which reconstructed densities and tilted
    moments are checked.
    """

    names = COVARIATES

    def __init__(self, design):
        self.design = design

    def pdf(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = np.zeros(X.shape[0])
        d = self.design
        for level, prob in ((1, d.p_x1), (0, 1.0 - d.p_x1)):
            rows = X[:, 0] == level
            if not rows.any():
                continue
            (a2, b2), (a3, b3) = d.marginals[level]
            x2, x3 = X[rows, 1], X[rows, 2]
            u = np.column_stack([stats.beta.cdf(x2, a2, b2), stats.beta.cdf(x3, a3, b3)])
            u = np.clip(u, 1e-300, 1.0)
            out[rows] = (prob * stats.beta.pdf(x2, a2, b2) * stats.beta.pdf(x3, a3, b3)
                         * clayton_density(u, d.alpha))
        return out


def replicate_seeds(root_seed, setting_id, rep):
    """Child seeds for the three sites and a fourth for synthetic draws."""
    ss = np.random.SeedSequence([int(root_seed), int(setting_id), int(rep)])
    return [int(c.generate_state(1)[0]) for c in ss.spawn(len(SITE_IDS) + 1)]


def generate_replicate(setting, root_seed, rep):
    seeds = replicate_seeds(root_seed, setting.setting_id, rep)
    data = [generate_site_data(setting, j, seeds[j]) for j in range(len(setting.sites))]
    return data, seeds[-1]


# --------------------------------------------------------------------------
# methods
# --------------------------------------------------------------------------


class HistogramDensity:
    """Stratum-wise histogram on an equal partition of the continuous box."""

    def __init__(self, sample, names, discrete, bounds, bins=20):
        sample = np.asarray(sample, dtype=float)
        self.names = tuple(names)
        self._di = [self.names.index(n) for n in discrete]
        self._ci = [i for i in range(len(self.names)) if i not in self._di]
        self.edges = [np.linspace(*bounds[self.names[i]], bins + 1) for i in self._ci]
        n = sample.shape[0]
        vol = np.prod([e[1] - e[0] for e in self.edges])
        keys = np.unique(sample[:, self._di], axis=0)
        self._tables = {}
        for key in keys:
            rows = np.all(sample[:, self._di] == key, axis=1)
            counts, _ = np.histogramdd(sample[rows][:, self._ci], bins=self.edges)
            self._tables[tuple(key)] = counts / (n * vol)

    def pdf(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = np.zeros(X.shape[0])
        cells = [np.clip(np.searchsorted(e, X[:, i], side="right") - 1, 0, e.size - 2)
                 for e, i in zip(self.edges, self._ci)]
        for key, table in self._tables.items():
            rows = np.all(X[:, self._di] == np.asarray(key), axis=1)
            out[rows] = table[tuple(c[rows] for c in cells)]
        return out


@dataclass(frozen=True)
class BenchConfig:
    grid: GridConfig = field(default_factory=default_grid_config)
    gmm: GmmConfig = field(default_factory=GmmConfig)
    fit: FitConfig = field(default_factory=FitConfig)
    synthetic_size: int = None
    hist_bins: int = 20
    level: float = 0.95


@dataclass
class MethodEstimate:
    method: str
    estimates: dict
    ses: dict


def _coef_map(param_names, values):
    names = {f"X{k}": f"beta{k}" for k in (1, 2, 3)}
    return {names[n]: float(v) for n, v in zip(param_names, values) if n in names}


def run_method(method, datasets, setting, config=None, synthetic_seed=0):
    """Estimate (beta1, beta2, beta3) with one of the four compared methods.

    ``datasets`` is a list of (study, reference) frame pairs, lead site first.
    Coefficients a method cannot estimate are reported as None.
    """
    config = config or BenchConfig()
    specs = reduced_specs(setting)
    main = main_spec()
    if method == "Local":
        study = datasets[0][0]
        X = np.ascontiguousarray(study.loc[:, list(specs[0].covariate_mask)].to_numpy(float))
        fit = fit_reduced_model(X, study["y"].to_numpy(float), specs[0], config.fit)
        se = np.sqrt(np.diag(fit.sigma_hat) / fit.n_study)
        est = _coef_map(fit.param_names, fit.theta_hat)
        ses = _coef_map(fit.param_names, se)
    else:
        payloads = [site_export(study, ref, specs[j], SITE_IDS[j], config.grid, config.fit)
                    for j, (study, ref) in enumerate(datasets) if j > 0]
        overrides = None
        if method == "dist-GMM-S":
            overrides = _synthetic_densities(datasets, payloads, config, synthetic_seed)
        elif method not in ("dist-GMM-C", "GENMETA"):
            raise ValueError(f"unknown method {method!r}")
        study, ref = datasets[0]
        res = lead_aggregate(study, ref, specs[0], payloads, main, config.gmm, config.grid,
                             config.fit, tilt=(method != "GENMETA"), lead_id=SITE_IDS[0],
                             density_models=overrides)
        est = _coef_map(res.param_names, res.beta_hat)
        ses = _coef_map(res.param_names, res.standard_errors)
    for c in COEFFICIENTS:
        est.setdefault(c, None)
        ses.setdefault(c, None)
    return MethodEstimate(method, est, ses)


def _synthetic_densities(datasets, payloads, config, seed):
    grid = config.grid
    bounds = grid.bounds
    seeds = np.random.SeedSequence(seed).spawn(len(payloads))
    out = {SITE_IDS[0]: HistogramDensity(datasets[0][1].loc[:, list(COVARIATES)].to_numpy(float),
                                         COVARIATES, grid.discrete, bounds, config.hist_bins)}
    for pl, ss in zip(payloads, seeds):
        # runs at the external site; only the synthetic rows travel
        model = reconstruct_density(pl.density)
        n = config.synthetic_size or pl.density.copula.n_ref
        synth = sample_synthetic(model, n, int(ss.generate_state(1)[0]))
        idx = [model.names.index(c) for c in COVARIATES]
        out[pl.site_id] = HistogramDensity(synth[:, idx], COVARIATES, grid.discrete, bounds,
                                           config.hist_bins)
    return out


# --------------------------------------------------------------------------
# studies
# --------------------------------------------------------------------------


def _z(level):
    return stats.norm.ppf(0.5 + level / 2.0)


def run_replicate(setting, rep, root_seed, methods, config, tag=None):
    """All methods on one simulated data set; one record per coefficient."""
    datasets, synth_seed = generate_replicate(setting, root_seed, rep)
    z = _z(config.level)
    records = []
    truth = dict(zip(COEFFICIENTS, setting.beta_true[1:]))
    for method in methods:
        t0 = time.perf_counter()
        try:
            est = run_method(method, datasets, setting, config, synth_seed)
            err = ""
        except (TiltGMMError, np.linalg.LinAlgError, KeyError, ValueError) as exc:
            est, err = None, f"{type(exc).__name__}: {exc}"
            log.info("setting %s rep %s %s failed: %s", setting.setting_id, rep, method, err)
        elapsed = time.perf_counter() - t0
        for c in COEFFICIENTS:
            b = se = np.nan
            if est is not None and est.estimates[c] is not None:
                b, se = est.estimates[c], est.ses[c]
            covered = abs(b - truth[c]) <= z * se if np.isfinite(b) else np.nan
            records.append({
                "setting": setting.setting_id, "method": method, "rep": rep,
                "coefficient": c, "estimate": b, "se": se, "covered": covered,
                "failed": est is None, "absent": est is not None and np.isnan(b),
                "error": err, "seconds": elapsed, **(tag or {}),
            })
    return records


def _n_jobs(jobs):
    if jobs is None:
        jobs = int(os.environ.get("TILTGMM_JOBS", "1"))
    return max(1, int(jobs))


def _run_tasks(tasks, jobs):
    jobs = _n_jobs(jobs)
    if jobs == 1:
        out = [fn(*args) for fn, args in tasks]
    else:
        out = Parallel(n_jobs=jobs)(delayed(fn)(*args) for fn, args in tasks)
    return [r for chunk in out for r in chunk]


def _sort_records(df, keys):
    order = {m: i for i, m in enumerate(METHODS)}
    df = df.assign(_m=df["method"].map(order))
    return df.sort_values(keys[:1] + ["_m"] + keys[1:] + ["rep"], kind="mergesort") \
             .drop(columns="_m").reset_index(drop=True)


def summarize(records, truth=None, by=()):
    """Bias, SD, ESD and coverage per (setting, method, coefficient).

    Failed replicates are excluded and counted in ``n_fail``; coefficients a
    method never estimates have all metrics missing.
    """
    truth = dict(zip(COEFFICIENTS, (truth or BETA_TRUE)[1:]))
    keys = ["setting", *by, "method", "coefficient"]
    rows = []
    for key, grp in records.groupby(keys, sort=False):
        key = dict(zip(keys, key))
        ok = grp[~grp["failed"] & ~grp["absent"]]
        n_fail = int(grp["failed"].sum())
        est = ok["estimate"].to_numpy(float)
        rec = {**key, "bias": np.nan, "sd": np.nan, "esd": np.nan, "ci": np.nan,
               "n_fail": n_fail}
        if est.size:
            rec["bias"] = float(est.mean() - truth[key["coefficient"]])
            rec["sd"] = float(est.std(ddof=1)) if est.size > 1 else np.nan
            rec["esd"] = float(ok["se"].mean())
            rec["ci"] = float(ok["covered"].astype(float).mean())
        rows.append(rec)
    out = pd.DataFrame(rows, columns=keys + ["bias", "sd", "esd", "ci", "n_fail"])
    return _sort_records(out.assign(rep=0), ["setting", *by, "coefficient"]).drop(columns="rep")


def run_study(settings=(1, 2, 3, 4), methods=METHODS, reps=100, root_seed=7, config=None,
              jobs=None, n_study=1000, n_ref=500, return_records=False):
    """Replicate every setting ``reps`` times and summarize each method.

    Every method sees the same simulated data within a replicate. The result
    is deterministic given ``root_seed``.
    """
    if reps < 1:
        raise ValueError("reps must be at least 1")
    config = config or BenchConfig()
    methods = [m for m in METHODS if m in methods]
    tasks = [(run_replicate, (make_setting(s, n_study, n_ref), r, root_seed, methods, config))
             for s in settings for r in range(reps)]
    records = _sort_records(pd.DataFrame(_run_tasks(tasks, jobs)), ["setting", "coefficient"])
    metrics = summarize(records)
    return (metrics, records) if return_records else metrics


def sweep_reference_size(settings=(1, 2, 3, 4), n_values=(50, 100, 200, 300, 400, 500, 1000),
                         methods=("dist-GMM-C", "dist-GMM-S"), reps=100, root_seed=7,
                         config=None, jobs=None, n_study=1000, min_stratum_n=5):
    """RMSE against reference size, per coefficient and for the joint vector.

    The ``joint`` row is sqrt(mean over replicates of the squared error norm
    of (beta1, beta2, beta3)). ``min_stratum_n`` replaces the grid config's
    minimum stratum size, since at n = 50 a stratum may hold only ~10 rows.
    """
    config = config or BenchConfig()
    config = replace(config, grid=replace(config.grid, min_stratum_n=min_stratum_n))
    methods = [m for m in METHODS if m in methods]
    tasks = [(run_replicate, (make_setting(s, n_study, n), r, root_seed, methods, config,
                              {"n": int(n)}))
             for s in settings for n in n_values for r in range(reps)]
    records = pd.DataFrame(_run_tasks(tasks, jobs))
    truth = dict(zip(COEFFICIENTS, BETA_TRUE[1:]))
    rows = []
    for (s, m, n), grp in records.groupby(["setting", "method", "n"], sort=False):
        ok_reps = grp.groupby("rep")["failed"].any()
        good = grp[grp["rep"].isin(ok_reps.index[~ok_reps])]
        err = good["estimate"] - good["coefficient"].map(truth)
        sq = err ** 2
        for c in COEFFICIENTS:
            vals = sq[good["coefficient"] == c]
            rows.append({"setting": s, "method": m, "n": n, "coefficient": c,
                         "rmse": float(np.sqrt(vals.mean())) if len(vals) else np.nan,
                         "n_fail": int(ok_reps.sum())})
        joint = sq.groupby(good["rep"]).sum()
        rows.append({"setting": s, "method": m, "n": n, "coefficient": "joint",
                     "rmse": float(np.sqrt(joint.mean())) if len(joint) else np.nan,
                     "n_fail": int(ok_reps.sum())})
    out = pd.DataFrame(rows)
    order = {c: i for i, c in enumerate(COEFFICIENTS + ("joint",))}
    meth = {m: i for i, m in enumerate(METHODS)}
    out = out.assign(_c=out["coefficient"].map(order), _m=out["method"].map(meth))
    return out.sort_values(["setting", "_m", "n", "_c"]).drop(columns=["_c", "_m"]) \
              .reset_index(drop=True)


def sweep_grid_density(settings=(1, 2, 3, 4), m_values=(50, 100, 200), reps=100, root_seed=7,
                       config=None, jobs=None, n_study=1000, n_ref=500):
    """dist-GMM-C metrics for several grid sizes on common simulated data."""
    config = config or BenchConfig()
    tasks = []
    for m in m_values:
        cfg = replace(config, grid=replace(config.grid, m=int(m)))
        tasks += [(run_replicate, (make_setting(s, n_study, n_ref), r, root_seed,
                                   ["dist-GMM-C"], cfg, {"m": int(m)}))
                  for s in settings for r in range(reps)]
    records = pd.DataFrame(_run_tasks(tasks, jobs))
    out = summarize(records, by=("m",))
    return out.sort_values(["setting", "m"], kind="mergesort").reset_index(drop=True)


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------


def emit_report(metrics, path=None, fmt="csv"):
    """Render metrics as long-format CSV or a grouped markdown table.

    Returns the rendered text and writes it to ``path`` when given. Missing
    cells (coefficients a method cannot estimate) are left empty.
    """
    if fmt == "csv":
        text = metrics.to_csv(index=False, lineterminator="\n")
    elif fmt == "markdown":
        text = _markdown(metrics)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    if path is not None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return text


def _cell(v):
    return "" if v is None or (isinstance(v, float) and np.isnan(v)) else f"{v:.2f}"


def _markdown(metrics):
    group = "m" if "m" in metrics.columns else "method"
    cols = list(dict.fromkeys(metrics[group].tolist()))
    if group == "method":
        cols = [m for m in METHODS if m in cols]
    stats_ = ("bias", "sd", "esd", "ci")
    label = (lambda c: f"m={c}") if group == "m" else str
    head1 = "| Setting | Coefficient | " + " | ".join(
        f"{label(c)} {s.upper() if s != 'bias' else 'Bias'}" for c in cols for s in stats_) + " |"
    sep = "|" + "---|" * (2 + 4 * len(cols))
    lines = [head1, sep]
    idx = metrics.set_index(["setting", "coefficient", group])
    for s in sorted(metrics["setting"].unique()):
        for c in COEFFICIENTS:
            if not ((metrics["setting"] == s) & (metrics["coefficient"] == c)).any():
                continue
            cells = []
            for g in cols:
                key = (s, c, g)
                row = idx.loc[key] if key in idx.index else None
                cells += [_cell(None if row is None else float(row[st])) for st in stats_]
            lines.append(f"| {s} | {c} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def read_metrics(path):
    return pd.read_csv(path, float_precision="round_trip")
