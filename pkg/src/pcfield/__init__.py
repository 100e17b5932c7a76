"""Probabilistic coordinate fields for image correspondence.

Encodes pixel positions of an image pair as barycentric coordinates over
shared triangles, estimates per-pixel confidence from forward/backward flow
agreement with a constrained two-component Gaussian mixture, and assembles
multi-system coordinate sets plus sparse downstream helpers.
"""

from .bcs_builder import (
    BcsPair,
    BuilderConfig,
    DensityMap,
    Fallback,
    build_bcs_pair,
    build_with_reselection,
    density_to_png,
    flow_density,
    select_origin,
)
from .downstream import (
    MultiHomogConfig,
    SparseCoords,
    assemble_filter_input,
    clip_sparse,
    estimate_homography_ransac,
    filter_flags,
    masked_attention,
    multi_head_masked_attention,
    multi_homography_classify,
    read_correspondences_csv,
    write_homographies_json,
    write_labels_csv,
)
from .errors import (
    BadMagic,
    Degenerate,
    DegenerateAfterRetries,
    DegenerateBcs,
    DimMismatch,
    EmptyFlow,
    EmptySamples,
    EmptySet,
    InsufficientData,
    InvalidFlowAtVertex,
    LengthMismatch,
    NoCandidate,
    NonFinite,
    NonPositiveVariance,
    PcfError,
    SingularHomography,
    TooFewPoints,
    TruncatedFile,
)
from .flowfield import (
    FlowField,
    HomographyMap,
    ScalarField,
    error_map,
    read_flo,
    sample_bilinear,
    synth_flow_homography,
    upsample_bilinear,
    warp_field,
    write_flo,
)
from .geometry import (
    AffineMap,
    BarycentricCoord,
    Bcs,
    CoordField,
    Point2,
    apply_affine,
    bary_coords,
    encode_field,
    load_coord_field,
    read_cfld,
    save_coord_field,
    signed_area,
    transform_bcs,
    write_cfld,
    zero_score_normalize,
)
from .pcf import (
    Pcf,
    PcfEntry,
    PcfSet,
    assemble_pcf,
    build_pcf_set,
    cartesian_coord_field,
    coverage_iou,
    load_pcf_set,
    save_pcf_set,
)
from .probmodel import (
    ConfidenceField,
    GmmConstraints,
    GmmParamField,
    GmmParams,
    OptimizerConfig,
    confidence,
    confidence_field_from_flow_pair,
    confidence_to_png,
    constrain,
    distance_map,
    fit_params,
    gaussian2d,
    gmm_pdf,
    load_confidence_field,
    nll,
    nll_gradient,
    save_confidence_field,
    save_param_field,
)

__version__ = "0.1.0"

__all__ = [
    "AffineMap",
    "BadMagic",
    "BarycentricCoord",
    "Bcs",
    "BcsPair",
    "BuilderConfig",
    "ConfidenceField",
    "CoordField",
    "Degenerate",
    "DegenerateAfterRetries",
    "DegenerateBcs",
    "DensityMap",
    "DimMismatch",
    "EmptyFlow",
    "EmptySamples",
    "EmptySet",
    "Fallback",
    "FlowField",
    "GmmConstraints",
    "GmmParamField",
    "GmmParams",
    "HomographyMap",
    "InsufficientData",
    "InvalidFlowAtVertex",
    "LengthMismatch",
    "MultiHomogConfig",
    "NoCandidate",
    "NonFinite",
    "NonPositiveVariance",
    "OptimizerConfig",
    "Pcf",
    "PcfEntry",
    "PcfError",
    "PcfSet",
    "Point2",
    "ScalarField",
    "SingularHomography",
    "SparseCoords",
    "TooFewPoints",
    "TruncatedFile",
    "apply_affine",
    "assemble_filter_input",
    "assemble_pcf",
    "bary_coords",
    "build_bcs_pair",
    "build_pcf_set",
    "build_with_reselection",
    "cartesian_coord_field",
    "clip_sparse",
    "confidence",
    "confidence_field_from_flow_pair",
    "confidence_to_png",
    "constrain",
    "coverage_iou",
    "density_to_png",
    "distance_map",
    "encode_field",
    "error_map",
    "estimate_homography_ransac",
    "filter_flags",
    "fit_params",
    "flow_density",
    "gaussian2d",
    "gmm_pdf",
    "load_confidence_field",
    "load_coord_field",
    "load_pcf_set",
    "masked_attention",
    "multi_head_masked_attention",
    "multi_homography_classify",
    "nll",
    "nll_gradient",
    "read_cfld",
    "read_correspondences_csv",
    "read_flo",
    "sample_bilinear",
    "save_confidence_field",
    "save_coord_field",
    "save_param_field",
    "save_pcf_set",
    "select_origin",
    "signed_area",
    "synth_flow_homography",
    "transform_bcs",
    "upsample_bilinear",
    "warp_field",
    "write_cfld",
    "write_flo",
    "write_homographies_json",
    "write_labels_csv",
    "zero_score_normalize",
]
