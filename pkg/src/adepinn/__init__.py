"""Inverse advection-diffusion parameter estimation with a physics-informed
neural surrogate.

The package recovers a diffusion coefficient and an advection velocity from
sparse voxel concentration measurements by fitting a tanh network that
satisfies the transport equation at collocation points, then classifies the
transport regime through the Peclet number.
"""

__version__ = "0.1.0"

from .autodiff import Tape, TapeError
from .data import (SampleBatch, ScaleRecord, SynthSpec, VoxelSeries,
                   generate_synthetic, load_voxel_series, normalize_intensity,
                   nondimensionalize, prepare_batch, redimensionalize,
                   sample_points, save_voxel_series)
from .fdsolver import Grid, analytic_gaussian, solve_ade_fd
from .network import MlpParams, forward, forward_with_derivs, init_glorot
from .physics import (PecletReport, PhysicsParams, classify_regime,
                      make_peclet_report, peclet)
from .trainer import TrainingConfig, TrainRecord, mse, predict, train

__all__ = [
    "Tape", "TapeError", "SampleBatch", "ScaleRecord", "SynthSpec",
    "VoxelSeries", "generate_synthetic", "load_voxel_series",
    "normalize_intensity", "nondimensionalize", "prepare_batch",
    "redimensionalize", "sample_points", "save_voxel_series", "Grid",
    "analytic_gaussian", "solve_ade_fd", "MlpParams", "forward",
    "forward_with_derivs", "init_glorot", "PecletReport", "PhysicsParams",
    "classify_regime", "make_peclet_report", "peclet", "TrainingConfig",
    "TrainRecord", "mse", "predict", "train",
]
