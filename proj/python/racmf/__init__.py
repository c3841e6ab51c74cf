"""Region-adaptive conditional MeanFlow enhancement for synthetic CT phantoms.

Images are 2-D float32 arrays normalized to [-1, 1]; masks are uint8 arrays.
"""

from ._core import (
    Backbone,
    ContractError,
    Controller,
    DimensionError,
    FeatureUndefinedError,
    FormatError,
    IoError,
    NumericalError,
    PreconditionError,
    RacmfError,
    SpecError,
    ccc,
    feature_vector,
    load_manifest,
    make_pair,
    nps,
    profile_distance,
    psnr,
    read_enhanced,
    read_pair,
    ssim,
)

__all__ = [
    "Backbone",
    "ContractError",
    "Controller",
    "DimensionError",
    "FeatureUndefinedError",
    "FormatError",
    "IoError",
    "NumericalError",
    "PreconditionError",
    "RacmfError",
    "SpecError",
    "ccc",
    "feature_vector",
    "load_manifest",
    "make_pair",
    "nps",
    "profile_distance",
    "psnr",
    "read_enhanced",
    "read_pair",
    "ssim",
]
