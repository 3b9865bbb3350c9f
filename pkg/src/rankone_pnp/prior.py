"""Artifact-removal prior: a DnCNN-style residual CNN with spectral normalization.

The network ``f`` has ``blocks`` conv+ReLU layers followed by one plain output
conv, so the full-scale profile (12 blocks) has 13 convolutions. The
artifact-removal operator is applied in averaged form ``x - alpha * f(x)``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import safetensors.torch
import torch
import torch.nn as nn
import torch.nn.functional as F
from safetensors import safe_open

from .errors import FingerprintMismatchError
from .modulation import ModulationSet, _atomic_write_bytes, effective_weights, safetensors_bytes

SIGMA_FLOOR = 1e-12


@dataclass(frozen=True)
class ConvBlockSpec:
    kernel: int
    in_channels: int
    out_channels: int
    has_activation: bool
    spectral_norm: bool = True

    def __post_init__(self):
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel size must be odd and positive, got {self.kernel}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be >= 1")

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, self.kernel, self.kernel)


class SpectralNormState:
    """Persistent power-iteration vectors for one unfolded ``(C_out, k*k*C_in)`` weight."""

    def __init__(self, u: torch.Tensor, v: torch.Tensor):
        self.u = u
        self.v = v


def _normalize(t: torch.Tensor, fallback: torch.Tensor) -> torch.Tensor:
    norm = torch.linalg.vector_norm(t)
    if norm <= SIGMA_FLOOR:
        return fallback
    return t / norm


def power_iteration(weight: torch.Tensor, state: SpectralNormState, n_iterations: int = 1) -> None:
    mat = weight.detach().reshape(weight.shape[0], -1)
    with torch.no_grad():
        u, v = state.u, state.v
        for _ in range(n_iterations):
            v = _normalize(mat.T @ u, v)
            u = _normalize(mat @ v, u)
        state.u.copy_(u)
        state.v.copy_(v)


def estimated_sigma(weight: torch.Tensor, state: SpectralNormState) -> torch.Tensor:
    mat = weight.reshape(weight.shape[0], -1)
    return torch.clamp(state.u @ (mat @ state.v), min=SIGMA_FLOOR)


def spectral_normalize(weight: torch.Tensor, state: SpectralNormState, n_iterations: int = 1) -> torch.Tensor:
    """Advance the power iteration ``n_iterations`` steps in place, return ``W / sigma_hat``.

    Pass ``n_iterations=0`` to use the frozen estimate. The division is
    differentiable in ``weight``; the vectors are treated as constants.
    """
    if n_iterations:
        power_iteration(weight, state, n_iterations)
    return weight / estimated_sigma(weight, state)


class PriorNetwork(nn.Module):
    """Residual CNN ``f``. Weights are shared by every unrolled iteration."""

    def __init__(self, specs: Sequence[ConvBlockSpec], alpha: float = 0.2, seed: int = 0):
        super().__init__()
        self.specs = tuple(specs)
        self.alpha = float(alpha)
        self.seed = int(seed)
        self.weights = nn.ParameterList(nn.Parameter(torch.empty(s.weight_shape)) for s in self.specs)
        self.biases = nn.ParameterList(nn.Parameter(torch.zeros(s.out_channels)) for s in self.specs)
        for l, s in enumerate(self.specs):
            self.register_buffer(f"sn_u{l}", torch.zeros(s.out_channels))
            self.register_buffer(f"sn_v{l}", torch.zeros(s.in_channels * s.kernel * s.kernel))

    @property
    def channels(self) -> int:
        return self.specs[0].in_channels

    @property
    def num_layers(self) -> int:
        return len(self.specs)

    @property
    def layer_shapes(self) -> list[tuple[int, int, int, int]]:
        return [s.weight_shape for s in self.specs]

    @property
    def dtype(self) -> torch.dtype:
        return self.weights[0].dtype

    def sn_state(self, l: int) -> SpectralNormState:
        return SpectralNormState(getattr(self, f"sn_u{l}"), getattr(self, f"sn_v{l}"))

    def weight_count(self) -> int:
        return sum(w.numel() for w in self.weights)

    def bias_count(self) -> int:
        return sum(b.numel() for b in self.biases)

    def update_spectral_norm(self, n_iterations: int = 1) -> None:
        for l, s in enumerate(self.specs):
            if s.spectral_norm:
                power_iteration(self.weights[l], self.sn_state(l), n_iterations)

    def normalized_weight(self, l: int) -> torch.Tensor:
        w = self.weights[l]
        if not self.specs[l].spectral_norm:
            return w
        return spectral_normalize(w, self.sn_state(l), n_iterations=0)

    def layer_weights(self, modulation: Optional[ModulationSet] = None) -> list[torch.Tensor]:
        """Effective per-layer weights: spectrally normalized, then modulated."""
        if modulation is not None:
            modulation.validate_against(self.layer_shapes)
        out = []
        for l in range(self.num_layers):
            w = self.normalized_weight(l)
            if modulation is not None and l in modulation.factors:
                factors = modulation.factors[l].map(lambda t: t.to(w.dtype))
                w = effective_weights(w, factors)
            out.append(w)
        return out

    def residual(self, x: torch.Tensor, modulation: Optional[ModulationSet] = None,
                 weights: Optional[list[torch.Tensor]] = None) -> torch.Tensor:
        """``f(x)``; pass precomputed ``weights`` to reuse them across iterations."""
        if x.shape[-3] != self.channels:
            raise ValueError(f"input has {x.shape[-3]} channels, network expects {self.channels}")
        if weights is None:
            weights = self.layer_weights(modulation)
        h = x
        for l, s in enumerate(self.specs):
            h = F.conv2d(h, weights[l], self.biases[l], padding=s.kernel // 2)
            if s.has_activation:
                h = F.relu(h)
        return h

    def forward(self, x: torch.Tensor, modulation: Optional[ModulationSet] = None) -> torch.Tensor:
        return ar_apply(x, self, modulation)

    def fingerprint(self) -> str:
        """SHA-256 over every parameter and spectral-norm buffer, in layer order."""
        h = hashlib.sha256()
        for name, t in self.state_dict().items():
            h.update(name.encode())
            h.update(str(t.dtype).encode())
            h.update(json.dumps(list(t.shape)).encode())
            h.update(t.detach().contiguous().cpu().numpy().tobytes())
        return h.hexdigest()

    def describe(self) -> dict:
        return {
            "channels": self.channels,
            "alpha": self.alpha,
            "seed": self.seed,
            "layers": [asdict(s) for s in self.specs],
        }


def prior_specs(channels: int, blocks: int = 12, features: int = 64, kernel: int = 3) -> list[ConvBlockSpec]:
    if blocks < 1:
        raise ValueError(f"need at least one block, got {blocks}")
    specs = [ConvBlockSpec(kernel, channels, features, True)]
    specs += [ConvBlockSpec(kernel, features, features, True) for _ in range(blocks - 1)]
    specs.append(ConvBlockSpec(kernel, features, channels, False))
    return specs


def build_prior(channels: int, seed: int = 0, blocks: int = 12, features: int = 64, kernel: int = 3,
                alpha: float = 0.2, dtype: torch.dtype = torch.float32, sn_warmup: int = 30) -> PriorNetwork:
    """Deterministically initialized prior.

    Weights are He-uniform, biases zero; the spectral-norm vectors are run for
    ``sn_warmup`` power iterations so the initial estimate is already tight.
    """
    if channels not in (1, 2, 3):
        raise ValueError(f"channels must be 1, 2 or 3, got {channels}")
    net = PriorNetwork(prior_specs(channels, blocks, features, kernel), alpha=alpha, seed=seed)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for l, s in enumerate(net.specs):
            fan_in = s.in_channels * s.kernel * s.kernel
            bound = math.sqrt(6.0 / fan_in)
            net.weights[l].copy_((torch.rand(s.weight_shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound)
            u = torch.randn(s.out_channels, generator=gen, dtype=torch.float64)
            v = torch.randn(fan_in, generator=gen, dtype=torch.float64)
            getattr(net, f"sn_u{l}").copy_(u / u.norm())
            getattr(net, f"sn_v{l}").copy_(v / v.norm())
    net.to(torch.float64)
    net.update_spectral_norm(sn_warmup)
    return net.to(dtype)


def ar_apply(x: torch.Tensor, net: PriorNetwork, modulation: Optional[ModulationSet] = None,
             weights: Optional[list[torch.Tensor]] = None, alpha: Optional[float] = None) -> torch.Tensor:
    """Averaged artifact-removal step ``x - alpha * f(x)``; ``alpha`` defaults to ``net.alpha``."""
    alpha = net.alpha if alpha is None else alpha
    return x - alpha * net.residual(x, modulation, weights)


# --------------------------------------------------------------------------- checkpoints


def save_checkpoint(net: PriorNetwork, path, extra: Optional[dict] = None) -> str:
    """Write named tensors and metadata atomically; returns the backbone fingerprint."""
    tensors = {}
    for l in range(net.num_layers):
        tensors[f"layer{l:02d}.weight"] = net.weights[l].detach().contiguous()
        tensors[f"layer{l:02d}.bias"] = net.biases[l].detach().contiguous()
        tensors[f"layer{l:02d}.sn_u"] = getattr(net, f"sn_u{l}").detach().contiguous()
        tensors[f"layer{l:02d}.sn_v"] = getattr(net, f"sn_v{l}").detach().contiguous()
    fp = net.fingerprint()
    meta = {
        "architecture": json.dumps(net.describe(), sort_keys=True),
        "fingerprint": fp,
        "extra": json.dumps(extra or {}, sort_keys=True, default=str),
    }
    _atomic_write_bytes(Path(path), safetensors_bytes(tensors, meta))
    return fp


def load_checkpoint(path) -> tuple[PriorNetwork, dict]:
    path = Path(path)
    with safe_open(str(path), framework="pt") as fh:
        meta = fh.metadata()
    tensors = safetensors.torch.load_file(str(path))
    arch = json.loads(meta["architecture"])
    specs = [ConvBlockSpec(**s) for s in arch["layers"]]
    net = PriorNetwork(specs, alpha=arch["alpha"], seed=arch["seed"])
    net.to(tensors["layer00.weight"].dtype)
    with torch.no_grad():
        for l in range(net.num_layers):
            net.weights[l].copy_(tensors[f"layer{l:02d}.weight"])
            net.biases[l].copy_(tensors[f"layer{l:02d}.bias"])
            getattr(net, f"sn_u{l}").copy_(tensors[f"layer{l:02d}.sn_u"])
            getattr(net, f"sn_v{l}").copy_(tensors[f"layer{l:02d}.sn_v"])
    if net.fingerprint() != meta["fingerprint"]:
        raise FingerprintMismatchError(f"checkpoint {path} content does not match its recorded fingerprint")
    return net, json.loads(meta["extra"])
