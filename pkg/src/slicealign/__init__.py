"""Slice alignment and fusion toolkit for multi-sequence cardiac MR.

Mutual-information registration (rigid, affine, diffeomorphic), selective
order-preserving slice matching, numerical fusion operators, segmentation
metrics and a synthetic phantom generator.
"""
from ._core import BACKEND
from .image import Label, Mask2D, Modality, Slice2D, Volume, normalize_intensity, standardize_grid
from .matching import MatchResult, brute_force_matching, pair_score, reconstruct_registered, select_matches
from .metrics import MetricReport, UndefinedMetricError, dice, hd95
from .mi import build_joint_histogram, mmi_loss
from .phantom import PhantomCase, PhantomConfig, gen_phantom
from .registration import RegistrationConfig, RegistrationResult, register_pair
from .transforms import (
    AffineParams,
    DisplacementField,
    RigidParams,
    TransformChain,
    VelocityField,
    compose_chain,
    exponentiate,
    warp,
)

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "Label", "Mask2D", "Modality", "Slice2D", "Volume", "normalize_intensity", "standardize_grid",
    "MatchResult", "brute_force_matching", "pair_score", "reconstruct_registered", "select_matches",
    "MetricReport", "UndefinedMetricError", "dice", "hd95",
    "build_joint_histogram", "mmi_loss",
    "PhantomCase", "PhantomConfig", "gen_phantom",
    "RegistrationConfig", "RegistrationResult", "register_pair",
    "AffineParams", "DisplacementField", "RigidParams", "TransformChain", "VelocityField",
    "compose_chain", "exponentiate", "warp",
]
