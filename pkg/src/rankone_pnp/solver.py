"""Unrolled plug-and-play FISTA with a learned artifact-removal step."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch

from .errors import NonFiniteError
from .modulation import ModulationSet
from .operators import MeasurementOperator, grad_data_fidelity
from .prior import PriorNetwork, ar_apply

MOMENTUM_MODES = ("fista", "fixed_q1")


@dataclass
class SolverConfig:
    iterations: int = 33
    gamma: float = 1.5
    # fixed_q1 (q_k = 1, no extrapolation) is the reported best operating point
    momentum: str = "fixed_q1"
    # overrides the prior's averaging coefficient when set
    alpha: Optional[float] = None

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError(f"iterations must be >= 0, got {self.iterations}")
        if not self.gamma > 0:
            raise ValueError(f"gamma must be > 0, got {self.gamma}")
        if self.momentum not in MOMENTUM_MODES:
            raise ValueError(f"momentum must be one of {MOMENTUM_MODES}, got {self.momentum!r}")


def momentum_step(q_prev: float, mode: str = "fista") -> tuple[float, float]:
    """Return ``(q_k, beta_k)`` from ``q_{k-1}``."""
    if q_prev < 1:
        raise ValueError(f"q must be >= 1, got {q_prev}")
    if mode == "fixed_q1":
        return 1.0, 0.0
    if mode != "fista":
        raise ValueError(f"unknown momentum mode {mode!r}")
    q = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * q_prev * q_prev))
    return q, (q_prev - 1.0) / q


def unrolled_reconstruct(y: torch.Tensor, op: MeasurementOperator, net: Optional[PriorNetwork],
                         modulation: Optional[ModulationSet] = None,
                         config: Optional[SolverConfig] = None) -> torch.Tensor:
    """Run ``config.iterations`` PnP-FISTA steps from the zero-filled estimate ``A^H y``.

    ``net=None`` replaces the artifact-removal step by the identity. Every
    operation is differentiable in the network weights and modulation factors.
    """
    config = config or SolverConfig()
    x = op.adjoint(y)
    if net is not None:
        x = x.to(net.dtype)
        weights = net.layer_weights(modulation)
    s_prev = x
    q = 1.0
    for k in range(1, config.iterations + 1):
        z = x - config.gamma * grad_data_fidelity(op, x, y)
        s = z if net is None else ar_apply(z, net, weights=weights, alpha=config.alpha)
        q, beta = momentum_step(q, config.momentum)
        x = s + beta * (s - s_prev) if beta else s
        s_prev = s
        if not torch.isfinite(x).all():
            raise NonFiniteError(f"non-finite estimate at iteration {k}")
    return x
