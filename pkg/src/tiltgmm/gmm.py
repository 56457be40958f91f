"""GMM estimation over a stacked moment system.

``minimize`` is a Gauss-Newton solver for ``Q(beta) = g_bar' W g_bar``;
``solve`` wraps it in the iterated optimal-weight scheme and computes the
plug-in sandwich covariance of the estimate.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, stats

from .exceptions import ConvergenceError, RankDeficientError

log = logging.getLogger(__name__)

WEIGHT_SCHEMES = ("identity", "two-step", "iterated")


@dataclass(frozen=True)
class GmmConfig:
    weight_scheme: str = "iterated"
    max_weight_iter: int = 10
    weight_tol: float = 1e-6
    include_gamma: bool = True
    ridge: float = 1e-8
    # on the gradient of the objective with W normalized to max|W| = 1
    grad_tol: float = 1e-12
    step_tol: float = 1e-12
    max_iter: int = 200
    level: float = 0.95

    def __post_init__(self):
        if self.weight_scheme not in WEIGHT_SCHEMES:
            raise ValueError(f"weight_scheme must be one of {WEIGHT_SCHEMES}")
        if min(self.weight_tol, self.grad_tol, self.step_tol) <= 0 or self.ridge < 0:
            raise ValueError("tolerances must be positive")
        if not 0 < self.level < 1:
            raise ValueError("confidence level must lie in (0, 1)")


@dataclass
class MinimizeResult:
    beta: np.ndarray
    objective_trace: list
    iterations: int
    converged: bool
    grad_norm: float
    gradient_steps: int = 0


@dataclass
class GmmResult:
    """Final estimate with its plug-in covariance.

    ``covariance`` is the covariance of ``beta_hat`` itself, already divided
    by the lead reference sample size.
    """

    beta_hat: np.ndarray
    covariance: np.ndarray
    weight: np.ndarray
    A_hat: np.ndarray
    omega_hat: np.ndarray
    gamma_hat: np.ndarray
    objective_trace: list
    param_names: tuple = ()
    n_ref: int = 0
    level: float = 0.95
    diagnostics: dict = field(default_factory=dict)

    @property
    def standard_errors(self):
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    def confidence_intervals(self, level=None):
        return confidence_intervals(self, self.level if level is None else level)


def _objective(g, W):
    return float(g @ W @ g)


def _scaled_result(beta, trace, iterations, converged, gnorm, grad_steps, scale):
    return MinimizeResult(beta, [q * scale for q in trace], iterations, converged,
                          gnorm * scale, grad_steps)


def minimize(system, weight, beta_init, config=None):
    """Gauss-Newton with backtracking on ``g_bar' W g_bar``.

    ``system`` needs ``g_bar(beta)`` and ``jacobian(beta)``. Stops when the
    gradient max-norm (for the normalized weight) drops below ``grad_tol`` or
    the accepted step below ``step_tol``. A singular Gauss-Newton system falls
    back to a steepest descent step.

    The iterations run on ``W / max|W|`` so that the stopping rule, and
    hence the returned estimate, does not depend on the overall scale of
    the weight; the reported objective trace and gradient norm are in the
    caller's scale.
    """
    config = config or GmmConfig()
    W = np.asarray(weight, dtype=float)
    scale = float(np.max(np.abs(W)))
    if not np.isfinite(scale) or scale <= 0:
        raise ValueError("weight matrix must be finite and nonzero")
    W = W / scale
    beta = np.asarray(beta_init, dtype=float).copy()
    g = system.g_bar(beta)
    Q = _objective(g, W)
    trace = [Q]
    grad_steps = 0
    best = beta.copy()
    for it in range(1, config.max_iter + 1):
        J = system.jacobian(beta)
        JW = J.T @ W
        grad = 2.0 * JW @ g
        gnorm = float(np.max(np.abs(grad)))
        if gnorm < config.grad_tol:
            return _scaled_result(beta, trace, it - 1, True, gnorm, grad_steps, scale)
        H = JW @ J
        try:
            if np.linalg.cond(H) > 1e14:
                raise np.linalg.LinAlgError
            step = -np.linalg.solve(H, JW @ g)
        except np.linalg.LinAlgError:
            log.warning("singular Gauss-Newton system at iteration %d; using gradient step", it)
            grad_steps += 1
            step = -grad
        slope = float(grad @ step)
        if slope >= 0:
            step, slope = -grad, -float(grad @ grad)
            grad_steps += 1
        t = 1.0
        accepted = False
        for _ in range(60):
            cand = beta + t * step
            g_new = system.g_bar(cand)
            Q_new = _objective(g_new, W)
            if Q_new <= Q + 1e-4 * t * slope:
                accepted = True
                break
            t *= 0.5
        if not accepted or Q_new > Q:
            # no representable decrease left
            return _scaled_result(beta, trace, it, True, gnorm, grad_steps, scale)
        moved = float(np.max(np.abs(cand - beta)))
        beta, g, Q = cand, g_new, Q_new
        best = beta.copy()
        trace.append(Q)
        if moved < config.step_tol:
            return _scaled_result(beta, trace, it, True, gnorm, grad_steps, scale)
    raise ConvergenceError(
        f"GMM minimization exceeded {config.max_iter} iterations", last_iterate=best,
        stage="GMM minimization",
    )


def estimate_omega(system, beta_hat):
    """Mean outer product of the stacked moments over the reference sample."""
    G = system.g_matrix(beta_hat)
    omega = G.T @ G / G.shape[0]
    return 0.5 * (omega + omega.T)


def estimate_gamma(system, beta_hat, site_fits, sample_sizes=None, c=None):
    """Block-diagonal correction for estimated reduced-model parameters.

    Block j is ``c_j B_j Sigma_j B_j'`` with ``c_j = n_ref / N_j`` unless
    ``c`` supplies the ratios directly.
    """
    if c is None:
        sizes = sample_sizes or [f.n_study for f in site_fits]
        c = [system.n_ref / float(N) for N in sizes]
    B = system.theta_jacobians(beta_hat)
    blocks = []
    for Bj, fit, cj in zip(B, site_fits, c):
        blk = cj * Bj @ np.asarray(fit.sigma_hat) @ Bj.T
        blocks.append(0.5 * (blk + blk.T))
    return linalg.block_diag(*blocks)


def sandwich(A, W, S):
    """``(A'WA)^-1 A'W S W'A (A'WA)^-1``."""
    bread = np.linalg.inv(A.T @ W @ A)
    cov = bread @ A.T @ W @ S @ W.T @ A @ bread
    return 0.5 * (cov + cov.T)


def _initial_beta(system):
    main = system.main_spec
    lead = system.components[0]
    beta = np.zeros(main.n_params)
    names = main.param_names
    for name, val in zip(lead.reduced.param_names, np.asarray(lead.theta_hat, float)):
        if name in names:
            beta[names.index(name)] = val
    return beta


def solve(system, site_fits, config=None, beta_init=None, c=None):
    """Iterated-weight GMM estimate with plug-in covariance.

    Parameters
    ----------
    system : MomentSystem
    site_fits : sequence of SiteFit aligned with ``system.components``.
    config : GmmConfig
    beta_init : optional start; defaults to the lead reduced fit mapped onto
        the shared coordinates.
    c : optional per-site ratios n_ref / N_j overriding the fitted sizes.
    """
    config = config or GmmConfig()
    q, p = system.q, system.p
    if q < p:
        raise RankDeficientError(f"{q} moment conditions cannot identify {p} parameters")
    beta = _initial_beta(system) if beta_init is None else np.asarray(beta_init, float)

    W = np.eye(q)
    res = minimize(system, W, beta, config)
    traces = [res.objective_trace]
    beta = res.beta
    n_weight = 0
    max_updates = {"identity": 0, "two-step": 1, "iterated": config.max_weight_iter}
    ridge_conds = []
    for _ in range(max_updates[config.weight_scheme]):
        S = estimate_omega(system, beta)
        if config.include_gamma:
            S = S + estimate_gamma(system, beta, site_fits, c=c)
        ridge_conds.append(float(np.linalg.cond(S)))
        W = np.linalg.inv(S + config.ridge * np.eye(q))
        W = 0.5 * (W + W.T)
        res = minimize(system, W, beta, config)
        traces.append(res.objective_trace)
        n_weight += 1
        change = float(np.max(np.abs(res.beta - beta)))
        beta = res.beta
        if change < config.weight_tol:
            break

    A = system.jacobian(beta)
    if np.linalg.matrix_rank(A) < p:
        raise RankDeficientError(
            "estimated Jacobian A is not of full column rank; beta is not identified "
            "by the supplied moment conditions", stage="GMM covariance",
        )
    omega = estimate_omega(system, beta)
    gamma = (estimate_gamma(system, beta, site_fits, c=c) if config.include_gamma
             else np.zeros((q, q)))
    S = omega + gamma
    cov = sandwich(A, W, S) / system.n_ref

    # algebraic check: sandwich at the exact optimal weight vs its closed form
    W_opt = np.linalg.inv(S)
    lhs = sandwich(A, W_opt, S)
    rhs = np.linalg.inv(A.T @ W_opt @ A)
    identity_rtol = float(np.max(np.abs(lhs - rhs)) / np.max(np.abs(rhs)))

    diagnostics = {
        "weight_iterations": n_weight,
        "weight_scheme": config.weight_scheme,
        "include_gamma": config.include_gamma,
        "final_grad_norm": float(np.max(np.abs(2.0 * A.T @ W @ system.g_bar(beta)))),
        "gradient_steps": res.gradient_steps,
        "cond_moment_cov": float(np.linalg.cond(S)),
        "cond_weight_targets": ridge_conds,
        "rank_A": int(np.linalg.matrix_rank(A)),
        "capped_ratio_counts": list(getattr(system, "capped_counts", [])),
        "sandwich_identity_rtol": identity_rtol,
        "objective_traces": traces,
    }
    return GmmResult(
        beta_hat=beta,
        covariance=cov,
        weight=W,
        A_hat=A,
        omega_hat=omega,
        gamma_hat=gamma,
        objective_trace=[t[-1] for t in traces],
        param_names=tuple(system.main_spec.param_names),
        n_ref=system.n_ref,
        level=config.level,
        diagnostics=diagnostics,
    )


def confidence_intervals(result, level=0.95):
    """Symmetric normal intervals, returned as an array of (lower, upper) rows."""
    beta = np.asarray(result.beta_hat, dtype=float)
    se = np.sqrt(np.clip(np.diag(result.covariance), 0.0, None))
    z = stats.norm.ppf(0.5 + level / 2.0)
    return np.column_stack([beta - z * se, beta + z * se])


@dataclass
class BootstrapResult:
    covariance: np.ndarray
    draws: np.ndarray
    n_fail: int


def bootstrap(system, site_fits, config=None, n_boot=200, seed=0, rebuild=None):
    """Covariance of beta_hat from resampling the lead reference rows.

    ``rebuild(rows)`` may return a fresh system for a row index vector (for
    instance re-estimating the lead density); by default rows are subset and
    the stored density ratios reused.
    """
    config = config or GmmConfig()
    base = solve(system, site_fits, config)
    seeds = np.random.SeedSequence(seed).spawn(n_boot)
    draws, n_fail = [], 0
    for ss in seeds:
        rng = np.random.default_rng(ss)
        rows = rng.integers(0, system.n_ref, size=system.n_ref)
        sub = rebuild(rows) if rebuild is not None else system.subset(rows)
        try:
            draws.append(solve(sub, site_fits, config, beta_init=base.beta_hat).beta_hat)
        except (ConvergenceError, RankDeficientError, np.linalg.LinAlgError):
            n_fail += 1
    draws = np.asarray(draws)
    cov = np.cov(draws, rowvar=False) if len(draws) > 1 else np.full((system.p, system.p), np.nan)
    return BootstrapResult(covariance=np.atleast_2d(cov), draws=draws, n_fail=n_fail)
