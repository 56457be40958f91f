"""One-shot federation protocol.

Each external site calls :func:`site_export` once and ships the resulting
:class:`SitePayload` (as canonical JSON bytes, conventionally a ``.fmpay``
file). The lead site calls :func:`lead_aggregate` with its own local data and
the received payloads; nothing is sent back.

Canonical JSON here means UTF-8, lexicographically sorted keys, no
insignificant whitespace, and floats written as the shortest decimal that
round-trips the 64-bit value (Python's ``repr``).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .copula import (
    CopulaSummary,
    DensitySummary,
    Grid,
    GridConfig,
    MarginalSummary,
    reconstruct_density,
    summarize_density,
)
from .exceptions import ModelUnidentifiedError, PayloadError
from .glm import FitConfig, ReducedModelSpec, SiteFit, fit_reduced_model
from .gmm import GmmConfig, GmmResult, confidence_intervals, solve
from .moments import MomentSystem, SiteComponent

SCHEMA_VERSION = 1
PAYLOAD_SUFFIX = ".fmpay"
RESULT_SUFFIX = ".fmres"
OUTCOME = "y"


@dataclass(frozen=True)
class SitePayload:
    """The only message a site sends: its reduced fit and density summary."""

    site_id: str
    reduced_spec: ReducedModelSpec
    fit: SiteFit
    density: DensitySummary
    schema_version: int = SCHEMA_VERSION


# --------------------------------------------------------------------------
# canonical JSON
# --------------------------------------------------------------------------


def _floats(a):
    return [float(v) for v in np.asarray(a, dtype=float).ravel()]


def _matrix(a):
    a = np.atleast_2d(np.asarray(a, dtype=float))
    return [[float(v) for v in row] for row in a]


def canonical_dumps(obj):
    """Serialize ``obj`` to canonical JSON bytes; non-finite floats are rejected."""
    try:
        text = json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False,
                          allow_nan=False)
    except ValueError as exc:
        raise PayloadError(f"cannot encode non-finite number: {exc}") from None
    return text.encode("utf-8")


def canonical_loads(data):
    if isinstance(data, (bytes, bytearray)):
        try:
            data = bytes(data).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise PayloadError(f"document is not UTF-8: {exc}") from None

    def reject(token):
        raise PayloadError(f"non-finite number {token} in document")

    try:
        return json.loads(data, parse_constant=reject)
    except json.JSONDecodeError as exc:
        raise PayloadError(f"malformed document: {exc}") from None


def _check_version(doc, kind):
    if not isinstance(doc, dict) or doc.get("kind") != kind:
        raise PayloadError(f"document is not a {kind}")
    found = doc.get("schema_version")
    if found != SCHEMA_VERSION:
        raise PayloadError(
            f"unsupported schema_version: expected {SCHEMA_VERSION}, found {found!r}")


def payload_to_dict(payload):
    spec = payload.reduced_spec
    fit = payload.fit
    dens = payload.density
    strata = []
    for s, key in enumerate(dens.strata):
        ms = dens.marginals[s]
        covs = []
        if ms is not None:
            for k, name in enumerate(dens.continuous):
                covs.append({
                    "name": name,
                    "grid": _floats(ms.grid.points[k]),
                    "cdf": _floats(ms.cdf_values[k]),
                    "support": [float(ms.support_bounds[k][0]), float(ms.support_bounds[k][1])],
                })
        strata.append({
            "key": [float(v) for v in key],
            "prob": float(dens.copula.stratum_probs[s]),
            "alpha_hat": float(dens.copula.alpha_hat[s]),
            "alpha_at_floor": bool(dens.copula.at_floor[s]) if dens.copula.at_floor else False,
            "grid_scheme": ms.grid.scheme if ms is not None else None,
            "marginals": covs,
        })
    return {
        "kind": "site-payload",
        "schema_version": int(payload.schema_version),
        "site_id": str(payload.site_id),
        "reduced_model": {
            "family": spec.family,
            "covariate_mask": list(spec.covariate_mask),
            "includes_intercept": bool(spec.includes_intercept),
            "dispersion": float(spec.dispersion),
        },
        "fit": {
            "theta_hat": _floats(fit.theta_hat),
            "sigma_hat": _matrix(fit.sigma_hat),
            "n_study": int(fit.n_study),
            "converged": bool(fit.converged),
            "iterations": int(fit.iterations),
            "param_names": list(fit.param_names),
        },
        "density": {
            "copula_family": dens.copula.family,
            "names": list(dens.names),
            "discrete": list(dens.discrete),
            "continuous": list(dens.continuous),
            "n_ref": int(dens.copula.n_ref),
            "strata": strata,
        },
    }


def payload_from_dict(doc):
    _check_version(doc, "site-payload")
    try:
        rm = doc["reduced_model"]
        spec = ReducedModelSpec(rm["family"], tuple(rm["covariate_mask"]),
                                bool(rm["includes_intercept"]), float(rm["dispersion"]))
        f = doc["fit"]
        fit = SiteFit(
            theta_hat=np.array(f["theta_hat"], dtype=float),
            sigma_hat=np.array(f["sigma_hat"], dtype=float).reshape(len(f["theta_hat"]), -1),
            n_study=int(f["n_study"]),
            converged=bool(f["converged"]),
            iterations=int(f["iterations"]),
            param_names=tuple(f["param_names"]),
        )
        d = doc["density"]
        continuous = tuple(d["continuous"])
        strata, marginals, probs, alphas, floors = [], [], [], [], []
        for st in d["strata"]:
            strata.append(tuple(float(v) for v in st["key"]))
            probs.append(float(st["prob"]))
            alphas.append(float(st["alpha_hat"]))
            floors.append(bool(st["alpha_at_floor"]))
            covs = st["marginals"]
            if not covs:
                marginals.append(None)
                continue
            if [c["name"] for c in covs] != list(continuous):
                raise PayloadError("marginal covariates do not match the continuous names")
            grid = Grid(points=tuple(np.array(c["grid"], float) for c in covs),
                        scheme=st["grid_scheme"])
            marginals.append(MarginalSummary(
                grid=grid,
                cdf_values=tuple(np.array(c["cdf"], float) for c in covs),
                support_bounds=tuple(tuple(c["support"]) for c in covs),
            ))
        copula = CopulaSummary(family=d["copula_family"], alpha_hat=tuple(alphas),
                               stratum_probs=tuple(probs), n_ref=int(d["n_ref"]),
                               at_floor=tuple(floors))
        density = DensitySummary(names=tuple(d["names"]), discrete=tuple(d["discrete"]),
                                 continuous=continuous, strata=tuple(strata),
                                 marginals=tuple(marginals), copula=copula)
        return SitePayload(site_id=str(doc["site_id"]), reduced_spec=spec, fit=fit,
                           density=density, schema_version=int(doc["schema_version"]))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, PayloadError):
            raise
        raise PayloadError(f"malformed site payload: {exc!r}") from None


def encode_payload(payload):
    return canonical_dumps(payload_to_dict(payload))


def decode_payload(data):
    return payload_from_dict(canonical_loads(data))


def _finite_or_none(obj):
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, (list, tuple)):
        return [_finite_or_none(v) for v in obj]
    if isinstance(obj, dict):
        return {str(k): _finite_or_none(v) for k, v in obj.items()}
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return _finite_or_none(obj.item())
    if isinstance(obj, np.ndarray):
        return _finite_or_none(obj.tolist())
    return obj


def result_to_dict(result):
    ci = confidence_intervals(result, result.level)
    return {
        "kind": "gmm-result",
        "schema_version": SCHEMA_VERSION,
        "param_names": list(result.param_names),
        "beta_hat": _floats(result.beta_hat),
        "standard_errors": _floats(result.standard_errors),
        "ci_lower": _floats(ci[:, 0]),
        "ci_upper": _floats(ci[:, 1]),
        "level": float(result.level),
        "covariance": _matrix(result.covariance),
        "weight": _matrix(result.weight),
        "A_hat": _matrix(result.A_hat),
        "omega_hat": _matrix(result.omega_hat),
        "gamma_hat": _matrix(result.gamma_hat),
        "objective_trace": _floats(result.objective_trace),
        "n_ref": int(result.n_ref),
        "diagnostics": _finite_or_none(result.diagnostics),
    }


def result_from_dict(doc):
    _check_version(doc, "gmm-result")
    try:
        return GmmResult(
            beta_hat=np.array(doc["beta_hat"], float),
            covariance=np.array(doc["covariance"], float),
            weight=np.array(doc["weight"], float),
            A_hat=np.array(doc["A_hat"], float),
            omega_hat=np.array(doc["omega_hat"], float),
            gamma_hat=np.array(doc["gamma_hat"], float),
            objective_trace=list(doc["objective_trace"]),
            param_names=tuple(doc["param_names"]),
            n_ref=int(doc["n_ref"]),
            level=float(doc["level"]),
            diagnostics=dict(doc["diagnostics"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise PayloadError(f"malformed result document: {exc!r}") from None


def encode_result(result):
    return canonical_dumps(result_to_dict(result))


def decode_result(data):
    return result_from_dict(canonical_loads(data))


# --------------------------------------------------------------------------
# roles
# --------------------------------------------------------------------------


def _frame_array(frame, names):
    # a fixed memory layout keeps results bit-identical however the frame
    # was built (in memory or parsed from CSV)
    return np.ascontiguousarray(frame.loc[:, list(names)].to_numpy(dtype=float))


def _study_arrays(study, spec):
    missing = [c for c in (*spec.covariate_mask, OUTCOME) if c not in study.columns]
    if missing:
        raise KeyError(f"study sample lacks columns {missing}")
    X = _frame_array(study, spec.covariate_mask)
    y = np.ascontiguousarray(study[OUTCOME].to_numpy(dtype=float))
    return X, y


def site_export(study, ref, reduced_spec, site_id, grid_config=None, fit_config=None):
    """Build the payload a site sends to the lead.

    Parameters
    ----------
    study : DataFrame with the masked covariates and an outcome column ``y``.
    ref : DataFrame holding every covariate of the shared model (no outcome).
    reduced_spec : ReducedModelSpec
    site_id : str
    """
    X, y = _study_arrays(study, reduced_spec)
    fit = fit_reduced_model(X, y, reduced_spec, fit_config or FitConfig())
    names = [c for c in ref.columns if c != OUTCOME]
    density = summarize_density(_frame_array(ref, names), names,
                                grid_config or GridConfig())
    return SitePayload(site_id=str(site_id), reduced_spec=reduced_spec, fit=fit, density=density)


def _validate_payloads(payloads, main_spec, lead_spec, lead_id):
    known = set(main_spec.covariate_names)
    seen = {lead_id}
    for pl in payloads:
        if pl.schema_version != SCHEMA_VERSION:
            raise PayloadError(f"site {pl.site_id}: unsupported schema_version: expected "
                               f"{SCHEMA_VERSION}, found {pl.schema_version}")
        if pl.site_id in seen:
            raise PayloadError(f"duplicate payload for site {pl.site_id!r}")
        seen.add(pl.site_id)
        names = set(pl.reduced_spec.covariate_mask) | set(pl.density.names)
        unresolved = sorted(names - known)
        if unresolved:
            raise PayloadError(f"site {pl.site_id}: unresolved covariate names {unresolved}")
        absent = sorted(known - set(pl.density.names))
        if absent:
            raise PayloadError(f"site {pl.site_id}: density summary lacks covariates {absent}")
    covered = set(lead_spec.covariate_mask)
    for pl in payloads:
        covered |= set(pl.reduced_spec.covariate_mask)
    uncovered = [n for n in main_spec.covariate_names if n not in covered]
    if uncovered:
        raise ModelUnidentifiedError(
            f"model unidentified: no site observes covariates {uncovered}")


def build_lead_system(study, ref, reduced_spec, payloads, main_spec, grid_config=None,
                      fit_config=None, tilt=True, lead_id="site1", density_models=None):
    """Assemble the lead site's moment system and the aligned site fits.

    ``density_models`` optionally maps site ids (the lead included) to density
    objects with ``names`` and ``pdf`` that replace the copula reconstruction.
    """
    payloads = sorted(payloads, key=lambda pl: pl.site_id)
    _validate_payloads(payloads, main_spec, reduced_spec, lead_id)
    X, y = _study_arrays(study, reduced_spec)
    lead_fit = fit_reduced_model(X, y, reduced_spec, fit_config or FitConfig())
    names = list(main_spec.covariate_names)
    missing = [n for n in names if n not in ref.columns]
    if missing:
        raise KeyError(f"lead reference sample lacks covariates {missing}")
    ref_arr = _frame_array(ref, names)
    overrides = density_models or {}

    lead_density = None
    if tilt:
        lead_density = overrides.get(lead_id) or reconstruct_density(
            summarize_density(ref_arr, names, grid_config or GridConfig()))
    components = [SiteComponent(lead_id, reduced_spec, lead_fit.theta_hat, lead_density)]
    fits = [lead_fit]
    for pl in payloads:
        dens = None
        if tilt:
            dens = overrides.get(pl.site_id) or reconstruct_density(pl.density)
        components.append(SiteComponent(pl.site_id, pl.reduced_spec, pl.fit.theta_hat, dens))
        fits.append(pl.fit)
    q = sum(c.reduced.n_params for c in components)
    if q < main_spec.n_params:
        raise ModelUnidentifiedError(
            f"model unidentified: {q} moment conditions for {main_spec.n_params} parameters")
    system = MomentSystem(main_spec, components, lead_density, ref_arr, tilt=tilt)
    return system, fits


def lead_aggregate(study, ref, reduced_spec, payloads, main_spec, gmm_config=None,
                   grid_config=None, fit_config=None, tilt=True, lead_id="site1",
                   density_models=None):
    """Run the lead-site pipeline and return the GMM estimate.

    Payload order does not matter; blocks are sorted by site id.
    """
    system, fits = build_lead_system(study, ref, reduced_spec, payloads, main_spec,
                                     grid_config, fit_config, tilt, lead_id, density_models)
    result = solve(system, fits, gmm_config or GmmConfig())
    result.diagnostics["payloads_consumed"] = [c.site_id for c in system.components[1:]]
    result.diagnostics["lead_site"] = lead_id
    result.diagnostics["tilt"] = bool(tilt)
    return result
