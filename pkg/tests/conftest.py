"""Shared fixtures.

The Monte Carlo fixtures are session scoped: the R = 100 method comparison
and the two sweeps are computed once and reused by the module tests and the
acceptance suite.
"""

import numpy as np
import pytest
from scipy.special import expit

from tiltgmm import simulation as sim
from tiltgmm.copula import CopulaSummary, DensitySummary, Grid, MarginalSummary
from tiltgmm.glm import FAMILIES, ReducedModelSpec, SiteFit
from tiltgmm.moments import SiteComponent
from tiltgmm.protocol import SitePayload

BETA_STAR = np.array(sim.BETA_TRUE)
ROOT_SEED = 7
REPS = 100

# acceptance verdicts, filled by tests/test_acceptance.py and printed at the end
ACCEPTANCE_LINES = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: Monte Carlo runs taking more than a few seconds")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def method_comparison():
    """Metrics and per-replicate records of the four-method comparison."""
    return sim.run_study(settings=(1, 2, 3, 4), methods=sim.METHODS, reps=REPS,
                         root_seed=ROOT_SEED, return_records=True)


@pytest.fixture(scope="session")
def grid_sweep():
    return sim.sweep_grid_density(settings=(1, 2, 3, 4), m_values=(50, 100, 200), reps=REPS,
                                  root_seed=ROOT_SEED)


@pytest.fixture(scope="session")
def ref_sweep():
    return sim.sweep_reference_size(settings=(1, 2, 3, 4), reps=REPS, root_seed=ROOT_SEED)


@pytest.fixture(scope="session")
def setting1_replicate():
    """One Setting-1 replicate: ((study, ref) per site, synthetic seed)."""
    setting = sim.make_setting(1)
    data, seed = sim.generate_replicate(setting, ROOT_SEED, 0)
    return setting, data, seed


def write_site_files(data, directory):
    """Write each site's study and reference sample as CSV; returns the paths."""
    paths = []
    for j, (study, ref) in enumerate(data):
        s, r = directory / f"study{j + 1}.csv", directory / f"ref{j + 1}.csv"
        study.to_csv(s, index=False)
        ref.to_csv(r, index=False)
        paths.append((s, r))
    return paths


def metric(table, setting, method, coefficient, column):
    row = table[(table.setting == setting) & (table.method == method)
                & (table.coefficient == coefficient)]
    assert len(row) == 1, (setting, method, coefficient)
    return float(row[column].iloc[0])


def population_theta(design, mask, n=2_000_000, seed=0):
    """Limit of the reduced-model MLE: root of E[z (expit(beta* x) - expit(theta z))].

    Solved by Newton on a large covariate sample with fractional outcomes, so
    it does not share code with the library's fitter.
    """
    X = sim.draw_covariates(design, n, np.random.default_rng(seed))
    mu = expit(BETA_STAR[0] + X @ BETA_STAR[1:])
    cols = [sim.COVARIATES.index(c) for c in mask]
    Z = np.column_stack([np.ones(n), X[:, cols]])
    theta = np.zeros(Z.shape[1])
    for _ in range(50):
        m = expit(Z @ theta)
        score = Z.T @ (mu - m) / n
        if np.max(np.abs(score)) < 1e-13:
            break
        theta += np.linalg.solve((Z * (m * (1 - m))[:, None]).T @ Z / n, score)
    return theta


@pytest.fixture(scope="session")
def oracle_components():
    """True densities and population reduced parameters for Settings 1 and 4."""
    out = {}
    for sid in (1, 4):
        setting = sim.make_setting(sid)
        specs = sim.reduced_specs(setting)
        comps = [SiteComponent(sim.SITE_IDS[j], specs[j],
                               population_theta(setting.sites[j], setting.masks[j], seed=j),
                               sim.TrueDensity(setting.sites[j]))
                 for j in range(3)]
        out[sid] = (setting, comps)
    return out


def _wild_floats(rng, size):
    """Finite doubles across many magnitudes, including subnormals and zeros."""
    mant = rng.uniform(-1, 1, size)
    expo = rng.integers(-330, 300, size).astype(float)
    vals = mant * 10.0 ** expo
    vals[rng.uniform(size=size) < 0.05] = 0.0
    return np.where(np.isfinite(vals), vals, 1.0)


def random_payload(rng):
    """A structurally valid payload with arbitrary (finite) numeric content."""
    names = tuple(f"V{k}" for k in range(int(rng.integers(1, 5))))
    n_disc = int(rng.integers(0, len(names)))
    discrete, continuous = names[:n_disc], names[n_disc:]
    n_strata = int(rng.integers(1, 4))
    strata, marginals = [], []
    for s in range(n_strata):
        strata.append(tuple(float(v) for v in rng.integers(0, 3, n_disc) + s))
        if rng.uniform() < 0.15:
            marginals.append(None)
            continue
        pts, cdfs, support = [], [], []
        for _ in continuous:
            m = int(rng.integers(2, 30))
            p = np.unique(rng.normal(0, 10.0 ** rng.integers(-5, 6), m))
            if p.size < 2:
                p = np.array([0.0, 1.0])
            pts.append(p)
            cdfs.append(np.sort(rng.uniform(size=p.size)))
            support.append((float(p[0] - rng.uniform()), float(p[-1] + rng.uniform())))
        marginals.append(MarginalSummary(Grid(tuple(pts), "quantile"), tuple(cdfs),
                                         tuple(support)))
    probs = rng.dirichlet(np.ones(n_strata))
    probs[-1] = 1.0 - probs[:-1].sum()
    copula = CopulaSummary("clayton", tuple(float(a) for a in rng.uniform(1e-6, 100, n_strata)),
                           tuple(float(v) for v in probs), int(rng.integers(1, 10**6)),
                           tuple(bool(b) for b in rng.uniform(size=n_strata) < 0.2))
    density = DensitySummary(names, discrete, continuous, tuple(strata), tuple(marginals),
                             copula)
    mask = tuple(n for n in names if rng.uniform() < 0.6)
    spec = ReducedModelSpec(FAMILIES[int(rng.integers(2))], mask,
                            not mask or bool(rng.integers(2)),
                            float(rng.uniform(0.1, 5)))
    k = len(mask) + spec.includes_intercept
    fit = SiteFit(_wild_floats(rng, k), _wild_floats(rng, k * k).reshape(k, k),
                  int(rng.integers(1, 10**7)), bool(rng.integers(2)), int(rng.integers(0, 50)),
                  tuple(f"p{i}" for i in range(k)))
    return SitePayload(f"site-{int(rng.integers(10**6))}", spec, fit, density)


def _same_array(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return a.shape == b.shape and a.tobytes() == b.tobytes()


def payloads_identical(a, b):
    """Field-by-field equality; floats compared through their bit patterns."""
    if (a.site_id, a.schema_version, a.reduced_spec) != (b.site_id, b.schema_version,
                                                        b.reduced_spec):
        return False
    fa, fb = a.fit, b.fit
    if not (_same_array(fa.theta_hat, fb.theta_hat) and _same_array(fa.sigma_hat, fb.sigma_hat)
            and (fa.n_study, fa.converged, fa.iterations, tuple(fa.param_names))
            == (fb.n_study, fb.converged, fb.iterations, tuple(fb.param_names))):
        return False
    da, db = a.density, b.density
    if (da.names, da.discrete, da.continuous) != (db.names, db.discrete, db.continuous):
        return False
    if not (_same_array(da.strata, db.strata) and len(da.marginals) == len(db.marginals)):
        return False
    ca, cb = da.copula, db.copula
    if not (ca.family == cb.family and ca.n_ref == cb.n_ref and ca.at_floor == cb.at_floor
            and _same_array(ca.alpha_hat, cb.alpha_hat)
            and _same_array(ca.stratum_probs, cb.stratum_probs)):
        return False
    for ma, mb in zip(da.marginals, db.marginals):
        if (ma is None) != (mb is None):
            return False
        if ma is None:
            continue
        if ma.grid.scheme != mb.grid.scheme or len(ma.grid.points) != len(mb.grid.points):
            return False
        for pa, pb, va, vb in zip(ma.grid.points, mb.grid.points, ma.cdf_values, mb.cdf_values):
            if not (_same_array(pa, pb) and _same_array(va, vb)):
                return False
        if not _same_array(ma.support_bounds, mb.support_bounds):
            return False
    return True
