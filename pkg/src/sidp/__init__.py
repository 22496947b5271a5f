"""Differentially private training with scale-invariant noisy weights.

A small numpy autodiff engine, normalized layers, the two private update rules
(noise added to the weights every step versus a clean mean path with freshly
sampled weights), a Renyi accountant and an experiment runner.
"""

from .accountant import (ORDERS, CalibrationError, RdpLedger, calibrate_z, compose_and_convert,
                         epsilon_for, rdp_gaussian, rdp_subsampled_gaussian, rdp_to_epsilon,
                         single_step_epsilon)
from .autodiff import ShapeError, Tape, Tensor, per_sample_backward
from .data import (Dataset, DisjointnessError, IdxError, LotSampler, PublicBatch, load_idx,
                   load_public_batch, read_idx, save_idx, write_idx)
from .layers import Sequential, build_model, lenet5, mlp
from .noisy import NoisyParam, RngStream, noisy_train, sample_weights
from .optim import (CouplingError, DpTrainConfig, ParamState, clip, dp_train, dpsgd_step,
                    load_release, save_release, sidpsgd_bn_infer, sidpsgd_step)

__version__ = "0.1.0"

__all__ = [
    "ORDERS",
    "CalibrationError",
    "RdpLedger",
    "calibrate_z",
    "compose_and_convert",
    "epsilon_for",
    "rdp_gaussian",
    "rdp_subsampled_gaussian",
    "rdp_to_epsilon",
    "single_step_epsilon",
    "ShapeError",
    "Tape",
    "Tensor",
    "per_sample_backward",
    "Dataset",
    "DisjointnessError",
    "IdxError",
    "LotSampler",
    "PublicBatch",
    "load_idx",
    "load_public_batch",
    "read_idx",
    "save_idx",
    "write_idx",
    "Sequential",
    "build_model",
    "lenet5",
    "mlp",
    "NoisyParam",
    "RngStream",
    "noisy_train",
    "sample_weights",
    "CouplingError",
    "DpTrainConfig",
    "ParamState",
    "clip",
    "dp_train",
    "dpsgd_step",
    "load_release",
    "save_release",
    "sidpsgd_bn_infer",
    "sidpsgd_step",
]
