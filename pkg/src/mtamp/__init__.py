"""Multi-terminal approximate message passing for linearly correlated sources."""

__version__ = "0.1.0"

from mtamp.source import (
    SourceSpec,
    reference_spec,
    rid,
    rid_conditional,
    sample_source,
    source_covariance,
)
from mtamp.estimator import (
    NoiseModel,
    PosteriorSummary,
    denoise,
    jacobian_diag,
    posterior,
    scalar_channel_mmse,
)

__all__ = [
    "SourceSpec",
    "reference_spec",
    "rid",
    "rid_conditional",
    "sample_source",
    "source_covariance",
    "NoiseModel",
    "PosteriorSummary",
    "denoise",
    "jacobian_diag",
    "posterior",
    "scalar_channel_mmse",
]
