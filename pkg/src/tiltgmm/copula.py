"""Copula summaries of a site's covariate distribution.

A site reduces its reference sample to, per stratum of the discrete
covariates, grid-valued empirical marginal CDFs of the continuous covariates
plus one exchangeable Clayton dependence parameter. The lead site rebuilds an
evaluable density from those numbers alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, stats

from .exceptions import DensityError

ALPHA_FLOOR = 1e-6
ALPHA_CEIL = 100.0
DENSITY_FLOOR = 1e-8
RATIO_CAP = 1e4
# sampler output is kept off {0, 1}, where the Clayton density is singular
U_CLIP = 1e-10


# --------------------------------------------------------------------------
# Clayton family
# --------------------------------------------------------------------------


def clayton_cdf(u, alpha):
    """Exchangeable Clayton copula ``(sum u_k^-a - (d-1))^(-1/a)``.

    ``u`` is a d-vector or an (n, d) array. Small ``alpha`` is evaluated via
    ``expm1``/``log1p`` so the independence limit stays accurate.
    """
    u = np.asarray(u, dtype=float)
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    logu = np.log(np.clip(u, 1e-300, 1.0))
    out = np.exp(-_log_generator_sum(logu, alpha) / alpha)
    return np.clip(out, 0.0, 1.0)


def _log_generator_sum(logu, alpha):
    """``log(sum_k u_k^-alpha - d + 1)`` without overflow.

    Near the independence limit the ``expm1`` form keeps precision; when some
    ``u_k^-alpha`` is huge a log-sum-exp form avoids overflow.
    """
    a = -alpha * logu
    top = np.max(a, axis=-1)
    small = np.log1p(np.sum(np.expm1(np.minimum(a, 50.0)), axis=-1))
    d = logu.shape[-1]
    with np.errstate(over="ignore", under="ignore"):
        big = top + np.log(np.sum(np.exp(a - top[..., None]), axis=-1) - (d - 1) * np.exp(-top))
    return np.where(top > 50.0, big, small)


def clayton_logpdf(u, alpha):
    u = np.asarray(u, dtype=float)
    d = u.shape[-1]
    logu = np.log(u)
    const = np.sum(np.log1p(alpha * np.arange(d)))
    return (const - (alpha + 1.0) * np.sum(logu, axis=-1)
            - (1.0 / alpha + d) * _log_generator_sum(logu, alpha))


def clayton_density(u, alpha):
    """Clayton copula density for any dimension d >= 2.

    c(u) = prod_{k<d}(1 + k a) * prod(u)^(-a-1) * (sum u^-a - d + 1)^(-1/a - d)
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    return np.exp(clayton_logpdf(u, alpha))


def sample_clayton(n, d, alpha, rng):
    """Draw n points from a d-variate Clayton copula (gamma frailty)."""
    v = rng.gamma(1.0 / alpha, 1.0, size=(n, 1))
    e = rng.exponential(1.0, size=(n, d))
    u = np.exp(-np.log1p(e / v) / alpha)
    return np.clip(u, U_CLIP, 1.0 - U_CLIP)


def pseudo_observations(sample):
    """Column-wise ranks divided by ``n + 1``."""
    sample = np.asarray(sample, dtype=float)
    n = sample.shape[0]
    return stats.rankdata(sample, axis=0) / (n + 1.0)


@dataclass(frozen=True)
class ClaytonFit:
    alpha: float
    loglik: float
    at_floor: bool
    converged: bool


def fit_clayton(pseudo_obs, floor=ALPHA_FLOOR, ceil=ALPHA_CEIL):
    """Maximum-likelihood Clayton parameter from pseudo-observations.

    The search runs over ``log(alpha)`` in ``[log(floor), log(ceil)]``. When
    the optimum sits at the floor (independent data), the floor is returned
    and ``at_floor`` is set.
    """
    u = np.asarray(pseudo_obs, dtype=float)
    if u.ndim != 2 or u.shape[1] < 2:
        raise ValueError("pseudo_obs must be an (n, d) array with d >= 2")
    if np.any(u <= 0) or np.any(u >= 1):
        raise ValueError("pseudo-observations must lie strictly inside (0, 1)")

    def nll(log_a):
        return -float(np.sum(clayton_logpdf(u, np.exp(log_a))))

    lo, hi = np.log(floor), np.log(ceil)
    res = optimize.minimize_scalar(nll, bounds=(lo, hi), method="bounded",
                                   options={"xatol": 1e-7})
    log_a = float(res.x)
    # bounded Brent never evaluates the endpoints; compare explicitly
    if nll(lo) <= res.fun:
        log_a = lo
    alpha = float(np.exp(log_a))
    at_floor = log_a - lo < 1e-3
    if at_floor:
        alpha = float(floor)
    return ClaytonFit(alpha=alpha, loglik=-nll(np.log(alpha)), at_floor=at_floor,
                      converged=bool(res.success))


# --------------------------------------------------------------------------
# Grids and marginals
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Grid:
    """Per-covariate strictly increasing evaluation points."""

    points: tuple
    scheme: str = "quantile"

    def __post_init__(self):
        pts = tuple(np.asarray(p, dtype=float) for p in self.points)
        for k, p in enumerate(pts):
            if p.ndim != 1 or p.size < 2:
                raise ValueError(f"grid for covariate {k} needs at least 2 points")
            if np.any(np.diff(p) <= 0):
                raise ValueError(f"grid for covariate {k} is not strictly increasing")
        object.__setattr__(self, "points", pts)

    @property
    def sizes(self):
        return tuple(p.size for p in self.points)


def make_grid(sample, m=100, scheme="quantile", bounds=None):
    """Choose m interior points per column of ``sample``.

    ``quantile`` uses the sample quantiles at levels i/(m+1); ``equal`` uses
    evenly spaced interior points of ``bounds`` (or of the sample range).
    Tied quantiles are collapsed, so a column may end up with fewer points.
    """
    sample = np.asarray(sample, dtype=float)
    levels = np.arange(1, m + 1) / (m + 1.0)
    pts = []
    for k in range(sample.shape[1]):
        col = sample[:, k]
        if scheme == "quantile":
            p = np.unique(np.quantile(col, levels))
        elif scheme == "equal":
            lo, hi = bounds[k] if bounds is not None else (col.min(), col.max())
            p = lo + (hi - lo) * levels
        else:
            raise ValueError(f"unknown grid scheme {scheme!r}")
        pts.append(p)
    return Grid(points=tuple(pts), scheme=scheme)


@dataclass(frozen=True)
class MarginalSummary:
    grid: Grid
    cdf_values: tuple
    support_bounds: tuple

    def __post_init__(self):
        vals = tuple(np.asarray(v, dtype=float) for v in self.cdf_values)
        for v in vals:
            if np.any(np.diff(v) < 0) or np.any(v < 0) or np.any(v > 1):
                raise ValueError("cdf values must be nondecreasing within [0, 1]")
        object.__setattr__(self, "cdf_values", vals)
        object.__setattr__(self, "support_bounds",
                           tuple((float(lo), float(hi)) for lo, hi in self.support_bounds))


def _support(col, pts, bounds):
    if bounds is not None:
        lo, hi = float(bounds[0]), float(bounds[1])
    else:
        lo, hi = float(col.min()), float(col.max())
    lo = min(lo, pts[0])
    hi = max(hi, pts[-1])
    if lo >= pts[0]:
        lo = pts[0] - (pts[1] - pts[0])
    if hi <= pts[-1]:
        hi = pts[-1] + (pts[-1] - pts[-2])
    return lo, hi


def empirical_marginals(ref_sample, grid, bounds=None, names=None):
    """Empirical CDF of each column at its grid points, rank / (n + 1).

    Parameters
    ----------
    ref_sample : (n, d) array of continuous covariates.
    grid : Grid with d point sets.
    bounds : sequence of (lower, upper) or None entries, optional
        Declared support per column. Defaults to the sample range, widened
        by one grid spacing when a grid point touches it.
    names : column labels used in error messages.
    """
    ref_sample = np.asarray(ref_sample, dtype=float)
    if ref_sample.ndim == 1:
        ref_sample = ref_sample[:, None]
    n, d = ref_sample.shape
    names = names or [f"column {k}" for k in range(d)]
    if n < 2:
        raise DensityError("reference sample needs at least 2 rows")
    if len(grid.points) != d:
        raise ValueError("grid dimension does not match the sample")
    values, support = [], []
    for k in range(d):
        col = ref_sample[:, k]
        if np.ptp(col) == 0:
            raise DensityError(f"covariate {names[k]} is constant; its density is undefined")
        pts = grid.points[k]
        counts = np.searchsorted(np.sort(col), pts, side="right")
        values.append(counts / (n + 1.0))
        support.append(_support(col, pts, None if bounds is None else bounds[k]))
    return MarginalSummary(grid=grid, cdf_values=tuple(values), support_bounds=tuple(support))


class PiecewiseLinearCDF:
    """Monotone piecewise-linear CDF through stored knots.

    The CDF is 0 at the lower support bound and 1 at the upper one; its
    derivative is piecewise constant and floored at ``density_floor`` inside
    the support.
    """

    def __init__(self, points, cdf_values, support, density_floor=DENSITY_FLOOR):
        lo, hi = support
        self.xp = np.concatenate([[lo], np.asarray(points, float), [hi]])
        self.fp = np.concatenate([[0.0], np.asarray(cdf_values, float), [1.0]])
        self.slopes = np.diff(self.fp) / np.diff(self.xp)
        self.density_floor = density_floor

    def cdf(self, x):
        return np.interp(x, self.xp, self.fp)

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        seg = np.clip(np.searchsorted(self.xp, x, side="right") - 1, 0, self.slopes.size - 1)
        slope = self.slopes[seg]
        # at an interior knot the derivative is the mean of the one-sided slopes
        at_knot = (x == self.xp[seg]) & (seg > 0)
        slope = np.where(at_knot, 0.5 * (slope + self.slopes[seg - 1]), slope)
        out = np.maximum(slope, self.density_floor)
        inside = (x >= self.xp[0]) & (x <= self.xp[-1])
        return np.where(inside, out, 0.0)

    def ppf(self, u):
        # invert on strictly increasing pieces; flat pieces carry no mass
        keep = np.concatenate([[True], np.diff(self.fp) > 0])
        return np.interp(u, self.fp[keep], self.xp[keep])


def interpolate_cdf(summary, k, density_floor=DENSITY_FLOOR):
    """Callable CDF and density for covariate ``k`` of a marginal summary."""
    pl = PiecewiseLinearCDF(summary.grid.points[k], summary.cdf_values[k],
                            summary.support_bounds[k], density_floor)
    return pl.cdf, pl.pdf


# --------------------------------------------------------------------------
# Whole-site density summaries
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class GridConfig:
    """How a site summarizes its reference sample.

    ``discrete`` names the stratifying covariates; ``None`` treats every
    integer-valued column with at most ``max_levels`` levels as discrete.
    ``bounds`` maps continuous covariate names to a declared support.
    """

    m: int = 100
    scheme: str = "quantile"
    bounds: dict = field(default_factory=dict)
    discrete: tuple = None
    max_levels: int = 2
    min_stratum_n: int = 20
    alpha_floor: float = ALPHA_FLOOR


@dataclass(frozen=True)
class CopulaSummary:
    family: str
    alpha_hat: tuple
    stratum_probs: tuple
    n_ref: int
    at_floor: tuple = ()

    def __post_init__(self):
        probs = np.asarray(self.stratum_probs, dtype=float)
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
            raise ValueError("stratum probabilities must be nonnegative and sum to 1")
        if any(a <= 0 for a in self.alpha_hat):
            raise ValueError("alpha_hat must be positive")


@dataclass(frozen=True)
class DensitySummary:
    """Everything a site transmits about its covariate distribution."""

    names: tuple
    discrete: tuple
    continuous: tuple
    strata: tuple
    marginals: tuple
    copula: CopulaSummary

    @property
    def n_values(self):
        """Number of transmitted CDF values, sum of grid sizes over strata."""
        return sum(sum(ms.grid.sizes) for ms in self.marginals if ms is not None)


def _discrete_columns(ref, names, config):
    if config.discrete is not None:
        return tuple(config.discrete)
    out = []
    for k, name in enumerate(names):
        col = ref[:, k]
        if np.all(col == np.round(col)) and np.unique(col).size <= config.max_levels:
            out.append(name)
    return tuple(out)


def summarize_density(ref_sample, names, config=None):
    """Reduce a full-covariate reference sample to a :class:`DensitySummary`."""
    config = config or GridConfig()
    ref = np.asarray(ref_sample, dtype=float)
    names = tuple(names)
    n = ref.shape[0]
    if n < 2:
        raise DensityError("reference sample is empty or has a single row")
    discrete = _discrete_columns(ref, names, config)
    continuous = tuple(nm for nm in names if nm not in discrete)
    di = [names.index(nm) for nm in discrete]
    ci = [names.index(nm) for nm in continuous]

    if di:
        keys, inverse, counts = np.unique(ref[:, di], axis=0, return_inverse=True,
                                          return_counts=True)
        inverse = inverse.ravel()
    else:
        keys, inverse, counts = np.zeros((1, 0)), np.zeros(n, dtype=int), np.array([n])

    strata, marginals, alphas, floors = [], [], [], []
    for s, key in enumerate(keys):
        label = dict(zip(discrete, key.tolist()))
        if counts[s] < config.min_stratum_n:
            raise DensityError(
                f"stratum {label} has {counts[s]} reference rows, fewer than "
                f"min_stratum_n={config.min_stratum_n}; its density is unidentifiable"
            )
        sub = ref[inverse == s][:, ci]
        strata.append(tuple(float(v) for v in key))
        if not ci:
            marginals.append(None)
            alphas.append(config.alpha_floor)
            floors.append(True)
            continue
        for k, nm in enumerate(continuous):
            if np.ptp(sub[:, k]) == 0:
                raise DensityError(f"covariate {nm} is constant in stratum {label}")
        bounds = [config.bounds.get(nm) for nm in continuous]
        grid = make_grid(sub, config.m, config.scheme, bounds if config.scheme == "equal" else None)
        marginals.append(empirical_marginals(sub, grid, bounds, list(continuous)))
        if len(ci) >= 2:
            fit = fit_clayton(pseudo_observations(sub), floor=config.alpha_floor)
            alphas.append(fit.alpha)
            floors.append(fit.at_floor)
        else:
            alphas.append(config.alpha_floor)
            floors.append(True)

    probs = counts / float(n)
    copula = CopulaSummary(family="clayton", alpha_hat=tuple(alphas),
                           stratum_probs=tuple(float(p) for p in probs), n_ref=int(n),
                           at_floor=tuple(bool(f) for f in floors))
    return DensitySummary(names=names, discrete=discrete, continuous=continuous,
                          strata=tuple(strata), marginals=tuple(marginals), copula=copula)


class DensityModel:
    """Evaluable site density rebuilt from a :class:`DensitySummary`.

    ``pdf`` expects rows whose columns follow ``names``. Immutable after
    construction and safe to share between threads.
    """

    def __init__(self, summary, density_floor=DENSITY_FLOOR):
        self.summary = summary
        self.names = summary.names
        self.density_floor = density_floor
        self._di = [summary.names.index(nm) for nm in summary.discrete]
        self._ci = [summary.names.index(nm) for nm in summary.continuous]
        self._keys = [np.asarray(k) for k in summary.strata]
        # empirical copula resolution is 1/(n_s + 1); clip to half a step
        n_s = np.asarray(summary.copula.stratum_probs) * summary.copula.n_ref
        self._u_clip = 0.5 / (np.maximum(n_s, 1.0) + 1.0)
        self._cdfs = []
        for ms in summary.marginals:
            if ms is None:
                self._cdfs.append([])
                continue
            self._cdfs.append([
                PiecewiseLinearCDF(ms.grid.points[k], ms.cdf_values[k], ms.support_bounds[k],
                                   density_floor)
                for k in range(len(ms.grid.points))
            ])

    @property
    def copula(self):
        return self.summary.copula

    def pdf(self, X, return_unmatched=False):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = np.full(X.shape[0], np.nan)
        probs = self.copula.stratum_probs
        alphas = self.copula.alpha_hat
        for s, key in enumerate(self._keys):
            rows = np.all(X[:, self._di] == key, axis=1) if self._di else np.ones(X.shape[0], bool)
            if not rows.any():
                continue
            dens = np.full(rows.sum(), probs[s])
            if self._cdfs[s]:
                xc = X[rows][:, self._ci]
                u = np.empty_like(xc)
                for k, pl in enumerate(self._cdfs[s]):
                    dens = dens * pl.pdf(xc[:, k])
                    u[:, k] = pl.cdf(xc[:, k])
                if len(self._ci) >= 2:
                    eps = self._u_clip[s]
                    dens = dens * clayton_density(np.clip(u, eps, 1.0 - eps), alphas[s])
            out[rows] = dens
        unmatched = np.isnan(out)
        out[unmatched] = self.density_floor
        if return_unmatched:
            return out, int(unmatched.sum())
        return out


def reconstruct_density(summary, density_floor=DENSITY_FLOOR):
    return DensityModel(summary, density_floor)


def tilt_ratios(X, f_num, f_den, density_floor=DENSITY_FLOOR, ratio_cap=RATIO_CAP):
    """Vectorized ``f_num(x) / f_den(x)`` with floor and cap.

    Both densities are floored so a model against itself gives exactly 1.
    Returns the ratios and the number of capped evaluations.
    """
    num = np.maximum(f_num.pdf(X), density_floor)
    den = np.maximum(f_den.pdf(X), density_floor)
    r = num / den
    capped = r > ratio_cap
    return np.minimum(r, ratio_cap), int(capped.sum())


def density_ratio(x, f_num, f_den, density_floor=DENSITY_FLOOR, ratio_cap=RATIO_CAP):
    """Density ratio at one covariate vector (or each row of a matrix)."""
    x = np.asarray(x, dtype=float)
    r, _ = tilt_ratios(np.atleast_2d(x), f_num, f_den, density_floor, ratio_cap)
    return float(r[0]) if x.ndim == 1 else r


def sample_synthetic(model, n, seed):
    """Draw ``n`` synthetic covariate rows from a reconstructed density.

    Strata follow the transmitted probabilities; continuous parts are Clayton
    draws pushed through the inverse interpolated marginal CDFs.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    summ = model.summary
    probs = np.asarray(summ.copula.stratum_probs)
    which = rng.choice(len(probs), size=n, p=probs / probs.sum())
    out = np.empty((n, len(summ.names)))
    for s, key in enumerate(model._keys):
        rows = np.flatnonzero(which == s)
        if rows.size == 0:
            continue
        if model._di:
            out[np.ix_(rows, model._di)] = key
        cdfs = model._cdfs[s]
        if not cdfs:
            continue
        d = len(cdfs)
        if d >= 2:
            u = sample_clayton(rows.size, d, summ.copula.alpha_hat[s], rng)
        else:
            u = rng.uniform(size=(rows.size, 1))
        for k, pl in enumerate(cdfs):
            out[rows, model._ci[k]] = pl.ppf(u[:, k])
    return out
