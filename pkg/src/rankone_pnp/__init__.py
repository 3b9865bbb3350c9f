"""Unrolled plug-and-play reconstruction with rank-one per-domain weight modulation."""

from .modulation import DomainRegistry, ModulationSet, init_modulation, modulated_conv, zero_modulation
from .operators import GaussianMatrixOperator, MaskedFourierOperator, make_mask
from .prior import PriorNetwork, build_prior
from .solver import SolverConfig, momentum_step, unrolled_reconstruct

__all__ = [
    "DomainRegistry",
    "GaussianMatrixOperator",
    "MaskedFourierOperator",
    "ModulationSet",
    "PriorNetwork",
    "SolverConfig",
    "build_prior",
    "init_modulation",
    "make_mask",
    "modulated_conv",
    "momentum_step",
    "unrolled_reconstruct",
    "zero_modulation",
]

__version__ = "0.1.0"
