"""Bridging estimating functions and their density-tilted stack.

For site j the bridging function is the reduced-model score averaged over the
main model's outcome distribution. Because every supported reduced score is
linear in y, it collapses to ``z_j * (E[Y | x; beta] - m_j(theta_j' z_j))``.
Blocks from external sites are reweighted by ``f_j(x) / f_1(x)`` and averaged
over the lead site's reference sample.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .copula import DENSITY_FLOOR, RATIO_CAP
from .exceptions import TiltGMMError
from .glm import GAUSSIAN, LOGISTIC, design_matrix, mean_function, outcome_density, reduced_score


def _check_pair(main, reduced):
    if main.family == GAUSSIAN and reduced.family == LOGISTIC:
        raise TiltGMMError("a binary-logistic reduced model cannot bridge a gaussian-linear main model")


def _score_scale(reduced):
    return 1.0 / reduced.dispersion if reduced.family == GAUSSIAN else 1.0


def bridge_s(x, beta, theta, reduced, main):
    """Closed-form bridging function at one full covariate vector ``x``."""
    _check_pair(main, reduced)
    x = np.asarray(x, dtype=float)
    xb = design_matrix(x[None, :], main.includes_intercept)[0]
    cols = main.index_of(reduced.covariate_mask)
    z = design_matrix(x[cols][None, :], reduced.includes_intercept)[0]
    mu, _ = mean_function(xb @ np.asarray(beta, float), main.family)
    m, _ = mean_function(z @ np.asarray(theta, float), reduced.family)
    return z * (mu - m) * _score_scale(reduced)


def _gauss_normal_expectation(fun, mu, sd, n_nodes):
    t, w = np.polynomial.legendre.leggauss(n_nodes)
    half = 12.0
    y = mu + sd * half * t
    dens = np.exp(-0.5 * (half * t) ** 2) / np.sqrt(2.0 * np.pi)
    vals = np.array([fun(yy) for yy in y])
    return half * np.tensordot(w * dens, vals, axes=1)


def bridge_s_quadrature(x, beta, theta, reduced, main, tol=1e-8):
    """Bridging function by direct integration of score times f(y|x).

    Binary outcomes sum over y in {0, 1}; gaussian outcomes use
    Gauss-Legendre on +-12 standard deviations, checked against a doubled
    node count.
    """
    _check_pair(main, reduced)
    x = np.asarray(x, dtype=float)
    cols = main.index_of(reduced.covariate_mask)
    xs = x[cols]

    def score(y):
        return reduced_score(y, xs, theta, reduced)

    if main.family == LOGISTIC:
        return sum(score(y) * outcome_density(y, x, beta, main) for y in (0.0, 1.0))
    xb = design_matrix(x[None, :], main.includes_intercept)[0]
    mu = float(xb @ np.asarray(beta, float))
    sd = np.sqrt(main.dispersion)
    coarse = _gauss_normal_expectation(score, mu, sd, 96)
    fine = _gauss_normal_expectation(score, mu, sd, 192)
    if np.max(np.abs(fine - coarse)) > tol:
        raise TiltGMMError("quadrature of the bridging integral did not converge")
    return fine


@dataclass(frozen=True)
class SiteComponent:
    """One block of the stacked moment function."""

    site_id: str
    reduced: object
    theta_hat: np.ndarray
    density: object = None


class MomentSystem:
    """Stacked tilted moments evaluated on the lead reference sample.

    Parameters
    ----------
    main_spec : ModelSpec
    components : sequence of SiteComponent
        The first entry is the lead site; its block is never tilted.
    lead_density : density model of the lead site, or None when ``tilt`` is off.
    lead_ref_sample : (n, p) array, columns in ``main_spec.covariate_names`` order.
    tilt : bool
        When False every ratio is 1 (the homogeneous-GMM baseline).
    ratios : optional list of precomputed per-component ratio vectors.
    """

    def __init__(self, main_spec, components, lead_density, lead_ref_sample, tilt=True,
                 density_floor=DENSITY_FLOOR, ratio_cap=RATIO_CAP, ratios=None):
        self.main_spec = main_spec
        self.components = tuple(components)
        self.lead_density = lead_density
        self.tilt = tilt
        self.density_floor = density_floor
        self.ratio_cap = ratio_cap
        ref = np.atleast_2d(np.asarray(lead_ref_sample, dtype=float))
        if ref.shape[0] < 1:
            raise TiltGMMError("lead reference sample is empty")
        if ref.shape[1] != main_spec.p:
            raise ValueError(f"reference sample has {ref.shape[1]} columns, model has {main_spec.p}")
        self.lead_ref_sample = ref
        self.X = design_matrix(ref, main_spec.includes_intercept)

        self._Z, self._m, self._dm, self._scale = [], [], [], []
        for comp in self.components:
            _check_pair(main_spec, comp.reduced)
            cols = main_spec.index_of(comp.reduced.covariate_mask)
            Z = design_matrix(ref[:, cols], comp.reduced.includes_intercept)
            theta = np.asarray(comp.theta_hat, dtype=float)
            if theta.shape != (Z.shape[1],):
                raise ValueError(f"site {comp.site_id}: theta has shape {theta.shape}, "
                                 f"expected ({Z.shape[1]},)")
            m, dm = mean_function(Z @ theta, comp.reduced.family)
            self._Z.append(Z)
            self._m.append(m)
            self._dm.append(dm)
            self._scale.append(_score_scale(comp.reduced))

        self.capped_counts = [0] * len(self.components)
        if ratios is not None:
            self.ratios = [np.asarray(r, dtype=float) for r in ratios]
        else:
            self.ratios = [np.ones(ref.shape[0]) for _ in self.components]
            if tilt:
                for j, comp in enumerate(self.components[1:], start=1):
                    self.ratios[j], self.capped_counts[j] = self._ratio(comp.density)
        self.sizes = [Z.shape[1] for Z in self._Z]
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)]).astype(int)
        self.q = int(self.offsets[-1])

    def _ratio(self, density):
        lead = self.lead_density
        num_X = self._reorder(density)
        den_X = self._reorder(lead)
        num = np.maximum(density.pdf(num_X), self.density_floor)
        den = np.maximum(lead.pdf(den_X), self.density_floor)
        r = num / den
        return np.minimum(r, self.ratio_cap), int(np.sum(r > self.ratio_cap))

    def _reorder(self, density):
        names = getattr(density, "names", self.main_spec.covariate_names)
        idx = self.main_spec.index_of(names)
        return self.lead_ref_sample[:, idx]

    @property
    def n_ref(self):
        return self.X.shape[0]

    @property
    def p(self):
        return self.X.shape[1]

    def subset(self, rows):
        """Same system restricted to (possibly repeated) reference rows."""
        rows = np.asarray(rows)
        return MomentSystem(self.main_spec, self.components, self.lead_density,
                            self.lead_ref_sample[rows], tilt=self.tilt,
                            density_floor=self.density_floor, ratio_cap=self.ratio_cap,
                            ratios=[r[rows] for r in self.ratios])

    def g_matrix(self, beta):
        """Per-observation stacked moments, shape (n_ref, q)."""
        mu, _ = mean_function(self.X @ np.asarray(beta, float), self.main_spec.family)
        blocks = [Z * ((mu - m) * r * c)[:, None]
                  for Z, m, r, c in zip(self._Z, self._m, self.ratios, self._scale)]
        return np.hstack(blocks)

    def g_bar(self, beta):
        return self.g_matrix(beta).mean(axis=0)

    def jacobian(self, beta):
        """Analytic derivative of ``g_bar`` with respect to beta, shape (q, p)."""
        _, dmu = mean_function(self.X @ np.asarray(beta, float), self.main_spec.family)
        n = self.n_ref
        rows = [(Z * (dmu * r * c)[:, None]).T @ self.X / n
                for Z, r, c in zip(self._Z, self.ratios, self._scale)]
        return np.vstack(rows)

    def theta_jacobians(self, beta=None):
        """Tilted reference means of d s_j / d theta_j, one (q_j, q_j) per site.

        For the supported families these do not depend on beta.
        """
        n = self.n_ref
        return [-(Z * (dm * r * c)[:, None]).T @ Z / n
                for Z, dm, r, c in zip(self._Z, self._dm, self.ratios, self._scale)]


def stacked_g(x, beta, system):
    """Stacked tilted moment vector at a single covariate vector ``x``."""
    x = np.asarray(x, dtype=float)
    out = []
    for j, comp in enumerate(system.components):
        s = bridge_s(x, beta, comp.theta_hat, comp.reduced, system.main_spec)
        if j > 0 and system.tilt:
            names = system.main_spec.covariate_names
            num = x[system.main_spec.index_of(getattr(comp.density, "names", names))]
            den = x[system.main_spec.index_of(getattr(system.lead_density, "names", names))]
            fn = max(float(comp.density.pdf(num[None, :])[0]), system.density_floor)
            fd = max(float(system.lead_density.pdf(den[None, :])[0]), system.density_floor)
            s = s * min(fn / fd, system.ratio_cap)
        out.append(s)
    return np.concatenate(out)


def g_bar(beta, system):
    return system.g_bar(beta)


def g_bar_jacobian(beta, system):
    return system.jacobian(beta)
