"""Main and reduced generalized linear models.

Two outcome families are supported, ``"binary-logistic"`` and
``"gaussian-linear"``. Covariate masks always name substantive covariates; an
intercept is a prepended constant column handled here.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .exceptions import ConvergenceError, RankDeficientError, SeparationError, TiltGMMError

LOGISTIC = "binary-logistic"
GAUSSIAN = "gaussian-linear"
FAMILIES = (LOGISTIC, GAUSSIAN)


def _check_family(family):
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}; expected one of {FAMILIES}")


@dataclass(frozen=True)
class ModelSpec:
    """The shared regression model for Y given the full covariate vector."""

    family: str
    covariate_names: tuple
    includes_intercept: bool = True
    dispersion: float = 1.0

    def __post_init__(self):
        _check_family(self.family)
        names = tuple(self.covariate_names)
        object.__setattr__(self, "covariate_names", names)
        if len(names) < 1:
            raise ValueError("a model needs at least one covariate")
        if len(set(names)) != len(names):
            raise ValueError(f"covariate names are not unique: {names}")
        if self.dispersion <= 0:
            raise ValueError("dispersion must be positive")

    @property
    def p(self):
        return len(self.covariate_names)

    @property
    def n_params(self):
        return self.p + int(self.includes_intercept)

    @property
    def param_names(self):
        lead = ("(Intercept)",) if self.includes_intercept else ()
        return lead + self.covariate_names

    def index_of(self, names):
        """Positions of ``names`` within the covariate list."""
        missing = [n for n in names if n not in self.covariate_names]
        if missing:
            raise KeyError(f"unresolved covariate names: {missing}")
        return [self.covariate_names.index(n) for n in names]


@dataclass(frozen=True)
class ReducedModelSpec:
    """Working model fitted at a site on the covariates it observes."""

    family: str
    covariate_mask: tuple
    includes_intercept: bool = True
    dispersion: float = 1.0

    def __post_init__(self):
        _check_family(self.family)
        mask = tuple(self.covariate_mask)
        object.__setattr__(self, "covariate_mask", mask)
        if len(mask) + int(self.includes_intercept) < 1:
            raise ValueError("reduced model has no parameters")
        if len(set(mask)) != len(mask):
            raise ValueError(f"duplicate names in covariate mask: {mask}")

    @property
    def n_params(self):
        return len(self.covariate_mask) + int(self.includes_intercept)

    @property
    def param_names(self):
        lead = ("(Intercept)",) if self.includes_intercept else ()
        return lead + self.covariate_mask


@dataclass(frozen=True)
class FitConfig:
    tol: float = 1e-8
    max_iter: int = 100
    max_halvings: int = 40


@dataclass(frozen=True)
class SiteFit:
    """Reduced-model estimate with its sandwich covariance.

    ``sigma_hat`` is the covariance of ``sqrt(n_study) * (theta_hat - theta*)``,
    so the covariance of ``theta_hat`` itself is ``sigma_hat / n_study``.
    """

    theta_hat: np.ndarray
    sigma_hat: np.ndarray
    n_study: int
    converged: bool = True
    iterations: int = 0
    param_names: tuple = field(default=())


def design_matrix(X, intercept=True):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if intercept:
        return np.column_stack([np.ones(X.shape[0]), X])
    return X


def mean_function(eta, family):
    """Conditional mean of Y at linear predictor ``eta`` and its derivative."""
    if family == LOGISTIC:
        mu = expit(eta)
        return mu, mu * (1.0 - mu)
    if family == GAUSSIAN:
        eta = np.asarray(eta, dtype=float)
        return eta, np.ones_like(eta)
    raise ValueError(f"unknown family {family!r}")


def _check_rank(Z, names):
    """Raise naming the first column that adds no rank to its predecessors."""
    if np.linalg.matrix_rank(Z) == Z.shape[1]:
        return
    collinear = []
    keep = []
    for k in range(Z.shape[1]):
        trial = keep + [k]
        if np.linalg.matrix_rank(Z[:, trial]) < len(trial):
            collinear.append(names[k])
        else:
            keep.append(k)
    raise RankDeficientError(
        f"design matrix is rank deficient; collinear columns: {collinear}",
        columns=collinear,
        stage="reduced-model fit",
    )


def _check_outcomes(y, family):
    if not np.all(np.isfinite(y)):
        raise TiltGMMError("outcomes contain non-finite values")
    if family == LOGISTIC and not np.all((y == 0) | (y == 1)):
        raise TiltGMMError("binary-logistic outcomes must be 0 or 1")


def _logistic_loglik(Z, y, theta):
    eta = Z @ theta
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def _newton_logistic(Z, y, config):
    n, k = Z.shape
    theta = np.zeros(k)
    ll = _logistic_loglik(Z, y, theta)
    sign = 2.0 * y - 1.0
    for it in range(1, config.max_iter + 1):
        eta = Z @ theta
        mu = expit(eta)
        score = Z.T @ (y - mu)
        if np.max(np.abs(score)) < config.tol:
            return theta, it - 1, True
        if it > 5 and np.all(sign * eta > 0):
            raise SeparationError(
                "complete separation detected: coefficients diverge "
                f"(|theta|={np.linalg.norm(theta):.3g} after {it - 1} iterations)"
            )
        info = (Z * (mu * (1.0 - mu))[:, None]).T @ Z
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            raise SeparationError("information matrix became singular; data are separated")
        t = 1.0
        for _ in range(config.max_halvings):
            cand = theta + t * step
            ll_new = _logistic_loglik(Z, y, cand)
            if ll_new >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
        theta, ll = cand, ll_new
        if np.linalg.norm(theta) > 1e4:
            raise SeparationError(f"coefficient norm diverged to {np.linalg.norm(theta):.3g}")
    score = Z.T @ (y - expit(Z @ theta))
    if np.max(np.abs(score)) < config.tol:
        return theta, config.max_iter, True
    raise ConvergenceError(
        f"Newton-Raphson did not converge in {config.max_iter} iterations "
        f"(max |score| = {np.max(np.abs(score)):.3g})",
        last_iterate=theta,
        stage="reduced-model fit",
    )


def sandwich_covariance(Z, y, theta, family, dispersion=1.0):
    """Robust covariance ``B^-1 M B^-T`` of ``sqrt(N) (theta_hat - theta*)``."""
    n = Z.shape[0]
    mu, dmu = mean_function(Z @ theta, family)
    scores = Z * ((y - mu) / dispersion)[:, None]
    bread = (Z * (dmu / dispersion)[:, None]).T @ Z / n
    meat = scores.T @ scores / n
    bread_inv = np.linalg.inv(bread)
    cov = bread_inv @ meat @ bread_inv.T
    return 0.5 * (cov + cov.T)


def fit_reduced_model(X, y, spec, config=None):
    """Fit the working model on site-local data.

    Parameters
    ----------
    X : array-like, shape (N, len(spec.covariate_mask))
        Observed covariates, columns in mask order.
    y : array-like, shape (N,)
    spec : ReducedModelSpec
    config : FitConfig, optional

    Returns
    -------
    SiteFit
    """
    config = config or FitConfig()
    y = np.asarray(y, dtype=float).ravel()
    Z = design_matrix(X, spec.includes_intercept)
    if Z.shape[0] != y.shape[0]:
        raise ValueError("X and y have different numbers of rows")
    if Z.shape[1] != spec.n_params:
        raise ValueError(f"expected {spec.n_params} design columns, got {Z.shape[1]}")
    if Z.shape[0] <= Z.shape[1]:
        raise TiltGMMError(f"need more than {Z.shape[1]} observations, got {Z.shape[0]}")
    _check_outcomes(y, spec.family)
    _check_rank(Z, spec.param_names)

    if spec.family == LOGISTIC:
        theta, iters, converged = _newton_logistic(Z, y, config)
    else:
        # normal equations; well conditioned after the rank check
        theta = np.linalg.solve(Z.T @ Z, Z.T @ y)
        iters, converged = 1, True
    sigma = sandwich_covariance(Z, y, theta, spec.family, spec.dispersion)
    return SiteFit(
        theta_hat=theta,
        sigma_hat=sigma,
        n_study=int(Z.shape[0]),
        converged=converged,
        iterations=iters,
        param_names=spec.param_names,
    )


def outcome_density(y, x, beta, spec):
    """Evaluate f(y | x; beta) for the main model."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    beta = np.asarray(beta, dtype=float)
    if beta.shape[-1] != spec.n_params:
        raise ValueError(f"beta has {beta.shape[-1]} entries, model needs {spec.n_params}")
    z = design_matrix(x[None, :] if x.ndim == 1 else x, spec.includes_intercept)
    eta = z @ beta
    y = np.asarray(y, dtype=float)
    if spec.family == LOGISTIC:
        if not np.all((y == 0) | (y == 1)):
            raise ValueError("binary outcome must be 0 or 1")
        mu = expit(eta)
        out = np.where(y == 1, mu, 1.0 - mu)
    else:
        if not np.all(np.isfinite(y)):
            raise ValueError("gaussian outcome must be finite")
        s2 = spec.dispersion
        out = np.exp(-0.5 * (y - eta) ** 2 / s2) / np.sqrt(2.0 * np.pi * s2)
    return float(out[0]) if out.size == 1 else out


def reduced_score(y, x_sub, theta, spec):
    """Score of the reduced model's log-likelihood in theta.

    Works for a single observation (``x_sub`` 1-D) or a batch (2-D, one row
    per observation); ``y`` may be a continuous relaxation of a binary value.
    """
    x_sub = np.asarray(x_sub, dtype=float)
    single = x_sub.ndim <= 1
    z = design_matrix(np.atleast_1d(x_sub)[None, :] if single else x_sub, spec.includes_intercept)
    theta = np.asarray(theta, dtype=float)
    if z.shape[1] != theta.shape[0]:
        raise ValueError(f"theta has {theta.shape[0]} entries, design has {z.shape[1]}")
    mu, _ = mean_function(z @ theta, spec.family)
    resid = np.asarray(y, dtype=float) - mu
    if spec.family == GAUSSIAN:
        resid = resid / spec.dispersion
    out = z * np.reshape(resid, (-1, 1))
    return out[0] if single else out
