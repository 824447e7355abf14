"""sfgrad: surface reconstruction from gradient and normal fields.

A numpy/scipy toolkit for the surface-from-gradients problem: classical
integrability-enforcing solvers, a spectral neural-operator integrator with
self-learned discontinuity attention, and a one-pass weighted least-squares
refinement for the detected discontinuities.
"""

from .errors import DataError, NumericalError
from .geometry import (
    AttentionWeightMap,
    CameraModel,
    DepthMap,
    GradientField,
    NormalMap,
    PointCloud,
    central_diff_gradient,
    depth_to_points,
    gradients_from_normals,
    normalized_coords,
    normals_from_depth,
    one_sided_diffs,
)
from .classical import (
    forward_diff_gradient,
    integrate_dct,
    integrate_dense_lsq,
    integrate_fft,
)
from .fno import (
    FeatureField,
    FninParams,
    FourierLayer,
    SpectralWeights,
    attention_weights,
    downsample_normals,
    fnin_forward,
    fourier_layer_apply,
    init_params,
    lift,
    spectral_conv,
    upsample_depth,
)
from .training import (
    DatasetSpec,
    SyntheticSample,
    TrainConfig,
    detail_weighted_loss,
    grad_check,
    multires_loss,
    synth_dataset,
    train_toy,
)
from .discontinuity import (
    DirectionalWeights,
    SparseSystem,
    assemble_system,
    directional_weights_from_attention,
    refine,
    sigmoid_weights,
    solve_cg,
)
from .evaluate import align_depth, error_map, mae_mm
from .fileio import (
    export_obj,
    load_camera,
    load_params,
    read_mask,
    read_pfm,
    save_camera,
    save_params,
    write_pfm,
)
from .cli import cli_main

__version__ = "0.1.0"
