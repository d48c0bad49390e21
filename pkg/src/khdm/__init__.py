"""Koopman/Hankel DMD toolkit: data generation, DMD fitting, adaptive
deep-learning training, and mutual-information diagnostics."""

from .autodiff import (
    AveragingSpec,
    DifferentiableMatrix,
    GradientTape,
    SvdFactors,
    constant,
    lstsq,
    matmul,
    matrix_power_apply,
    reduce_loss,
    svd,
    variable,
)
from .autoencoder import Autoencoder, decode, encode
from .data import (
    Dataset,
    Trajectory,
    export_dataset_csv,
    load_dataset,
    sample_dataset,
    save_dataset,
    white_noise_dataset,
)
from .dmd import (
    HankelStack,
    KoopmanFit,
    SpectrumReport,
    build_hankel,
    fit_global,
    fit_local,
    hdmd_pipeline,
    load_fit,
    max_relative_error,
    reconstruct,
    reconstruction_errors,
    save_fit,
    spectrum,
    window_columns,
)
from .ks import PodReduction, ks_dataset, ks_generate, pod_reduce
from .lyapunov import largest_lyapunov, lyapunov_from_rhs
from .mi import ALSITable, alsi, alsi_compare, mutual_information
from .systems import SystemSpec, make_spec, rk4_integrate
from .training import (
    LossReport,
    TrainConfig,
    TrainResult,
    adam_step,
    compute_losses,
    config_for,
    load_checkpoint,
    save_checkpoint,
    train,
    tune,
    update_n_ob_bar,
)

__version__ = "0.1.0"

__all__ = [
    "ALSITable",
    "Autoencoder",
    "AveragingSpec",
    "Dataset",
    "DifferentiableMatrix",
    "GradientTape",
    "HankelStack",
    "KoopmanFit",
    "LossReport",
    "PodReduction",
    "SpectrumReport",
    "SvdFactors",
    "SystemSpec",
    "TrainConfig",
    "TrainResult",
    "Trajectory",
    "adam_step",
    "alsi",
    "alsi_compare",
    "build_hankel",
    "compute_losses",
    "config_for",
    "constant",
    "decode",
    "encode",
    "export_dataset_csv",
    "fit_global",
    "fit_local",
    "hdmd_pipeline",
    "ks_dataset",
    "ks_generate",
    "largest_lyapunov",
    "load_checkpoint",
    "load_dataset",
    "load_fit",
    "save_fit",
    "lstsq",
    "lyapunov_from_rhs",
    "make_spec",
    "matmul",
    "matrix_power_apply",
    "max_relative_error",
    "mutual_information",
    "pod_reduce",
    "reconstruct",
    "reconstruction_errors",
    "reduce_loss",
    "rk4_integrate",
    "sample_dataset",
    "save_checkpoint",
    "save_dataset",
    "spectrum",
    "svd",
    "train",
    "tune",
    "update_n_ob_bar",
    "variable",
    "white_noise_dataset",
    "window_columns",
]
