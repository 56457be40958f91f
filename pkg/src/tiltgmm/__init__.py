"""Density-tilted GMM for one-shot distributed regression with
heterogeneous covariate distributions and structurally missing covariates."""

from .copula import (
    DensityModel,
    GridConfig,
    clayton_cdf,
    clayton_density,
    density_ratio,
    empirical_marginals,
    fit_clayton,
    interpolate_cdf,
    reconstruct_density,
    sample_synthetic,
    summarize_density,
)
from .exceptions import TiltGMMError
from .glm import ModelSpec, ReducedModelSpec, SiteFit, fit_reduced_model
from .gmm import GmmConfig, GmmResult, confidence_intervals, solve
from .moments import MomentSystem, SiteComponent
from .protocol import (
    SitePayload,
    decode_payload,
    decode_result,
    encode_payload,
    encode_result,
    lead_aggregate,
    site_export,
)

__version__ = "0.1.0"
