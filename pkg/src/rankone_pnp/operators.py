"""Measurement model ``y = A x + noise``.

Sampling masks live on the centered (fftshifted) frequency grid; the masked
Fourier operator uses orthonormal FFTs so ``||A||_2 = 1``. Complex signals are
carried as two real channels ``(real, imag)`` on the image side.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np
import torch

PATTERNS = ("radial", "cartesian", "gaussian_density", "spiral", "full")
FRACTION_TOLERANCE = 0.03
CENTER_BAND_FRACTION = 0.08


@dataclass(frozen=True)
class SamplingMask:
    grid_shape: tuple[int, int]
    pattern: str
    acceleration: float
    entries: np.ndarray
    seed: int = 0

    def __post_init__(self):
        entries = np.asarray(self.entries, dtype=bool)
        if entries.shape != tuple(self.grid_shape):
            raise ValueError(f"mask entries {entries.shape} do not match grid {self.grid_shape}")
        entries = entries.copy()
        entries.flags.writeable = False
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "grid_shape", tuple(int(s) for s in self.grid_shape))

    @property
    def fraction(self) -> float:
        return float(self.entries.mean())

    @property
    def num_samples(self) -> int:
        return int(self.entries.sum())

    def header(self) -> dict:
        return {
            "pattern": self.pattern,
            "grid_shape": list(self.grid_shape),
            "acceleration": float(self.acceleration),
            "seed": int(self.seed),
        }


def _center(grid_shape):
    return grid_shape[0] // 2, grid_shape[1] // 2


def _rasterize(rows, cols, grid_shape) -> np.ndarray:
    mask = np.zeros(grid_shape, dtype=bool)
    r = np.rint(rows).astype(np.int64)
    c = np.rint(cols).astype(np.int64)
    keep = (r >= 0) & (r < grid_shape[0]) & (c >= 0) & (c < grid_shape[1])
    mask[r[keep], c[keep]] = True
    return mask


def _radial(grid_shape, n_spokes: int) -> np.ndarray:
    cr, cc = _center(grid_shape)
    half = float(max(grid_shape))
    t = np.arange(-half, half + 0.25, 0.25)
    angles = np.pi * np.arange(n_spokes) / n_spokes
    rows = cr + np.outer(np.sin(angles), t)
    cols = cc + np.outer(np.cos(angles), t)
    return _rasterize(rows.ravel(), cols.ravel(), grid_shape)


def _spiral(grid_shape, pitch: float) -> np.ndarray:
    # Archimedean r = a * theta, sampled at ~0.25 px arc length.
    cr, cc = _center(grid_shape)
    r_max = math.hypot(*grid_shape) / 2 + 1
    theta_max = r_max / pitch
    arc = pitch * theta_max**2 / 2
    s = np.arange(0.0, arc + 0.25, 0.25)
    theta = np.sqrt(2 * s / pitch)
    r = pitch * theta
    return _rasterize(cr + r * np.sin(theta), cc + r * np.cos(theta), grid_shape)


def _gaussian_probabilities(grid_shape, width: float) -> np.ndarray:
    cr, cc = _center(grid_shape)
    rr, ccol = np.meshgrid(np.arange(grid_shape[0]) - cr, np.arange(grid_shape[1]) - cc, indexing="ij")
    return np.exp(-(rr**2 + ccol**2) / (2 * width**2))


def _bisect_integer(fraction_of: Callable[[int], float], target: float, lo: int, hi: int) -> int:
    """Smallest-error integer parameter for a (roughly) increasing fraction."""
    a, b = lo, hi
    while b - a > 1:
        mid = (a + b) // 2
        if fraction_of(mid) < target:
            a = mid
        else:
            b = mid
    candidates = range(max(lo, a - 3), min(hi, b + 3) + 1)
    return min(candidates, key=lambda n: (abs(fraction_of(n) - target), n))


def _bisect_float(fraction_of: Callable[[float], float], target: float, lo: float, hi: float,
                  increasing: bool, iters: int = 60) -> float:
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        below = fraction_of(mid) < target
        if below == increasing:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def make_mask(pattern: str, grid_shape, acceleration: float, seed: int = 0) -> SamplingMask:
    """Generate a sampling mask reaching ``1/acceleration`` within +-0.03.

    Raises ``ValueError`` for unknown patterns, bad arguments, or when the
    pattern cannot reach the requested fraction on this grid.
    """
    if pattern not in PATTERNS:
        raise ValueError(f"unknown sampling pattern {pattern!r}; expected one of {PATTERNS}")
    grid_shape = (int(grid_shape[0]), int(grid_shape[1]))
    if min(grid_shape) < 16:
        raise ValueError(f"grid dimensions must be >= 16, got {grid_shape}")
    if not acceleration >= 1:
        raise ValueError(f"acceleration must be >= 1, got {acceleration}")
    target = 1.0 / acceleration
    rows, cols = grid_shape

    if pattern == "full":
        if acceleration != 1:
            raise ValueError(f"pattern 'full' samples everything; acceleration must be 1, got {acceleration}")
        entries = np.ones(grid_shape, dtype=bool)
    elif pattern == "radial":
        n = _bisect_integer(lambda k: _radial(grid_shape, k).mean(), target, 1, 8 * max(grid_shape))
        entries = _radial(grid_shape, n)
    elif pattern == "spiral":
        pitch = _bisect_float(lambda a: _spiral(grid_shape, a).mean(), target, 0.05, float(max(grid_shape)),
                              increasing=False, iters=40)
        entries = _spiral(grid_shape, pitch)
    elif pattern == "cartesian":
        rng = np.random.default_rng(seed)
        n_lines = max(1, int(round(cols * target)))
        n_center = min(n_lines, max(1, int(round(CENTER_BAND_FRACTION * cols))))
        start = cols // 2 - n_center // 2
        center = np.arange(start, start + n_center)
        outer = np.setdiff1d(np.arange(cols), center)
        chosen = rng.choice(outer, size=n_lines - n_center, replace=False)
        entries = np.zeros(grid_shape, dtype=bool)
        entries[:, np.concatenate([center, chosen])] = True
    else:  # gaussian_density
        rng = np.random.default_rng(seed)
        width = _bisect_float(lambda s: _gaussian_probabilities(grid_shape, s).mean(), target,
                              1e-3, 10.0 * max(grid_shape), increasing=True)
        prob = _gaussian_probabilities(grid_shape, width)
        entries = rng.random(grid_shape) < prob
        entries[_center(grid_shape)] = True

    fraction = float(entries.mean())
    if pattern != "full" and abs(fraction - target) > FRACTION_TOLERANCE:
        raise ValueError(
            f"pattern {pattern!r} on grid {grid_shape} cannot reach sampling fraction "
            f"{target:.4f} +- {FRACTION_TOLERANCE}; achievable fraction is {fraction:.4f}"
        )
    return SamplingMask(grid_shape, pattern, float(acceleration), entries, int(seed))


def save_mask(mask: SamplingMask, path: Union[str, Path]) -> None:
    np.savez(Path(path), entries=mask.entries, header=np.array(json.dumps(mask.header(), sort_keys=True)))


def load_mask(path: Union[str, Path]) -> SamplingMask:
    with np.load(Path(path)) as data:
        header = json.loads(str(data["header"]))
        entries = data["entries"].astype(bool)
    return SamplingMask(tuple(header["grid_shape"]), header["pattern"], header["acceleration"],
                        entries, header["seed"])


# --------------------------------------------------------------------------- operators


def _to_complex(x: torch.Tensor) -> torch.Tensor:
    return torch.complex(x[..., 0, :, :], x[..., 1, :, :])


def _to_channels(z: torch.Tensor) -> torch.Tensor:
    return torch.stack([z.real, z.imag], dim=-3)


class MeasurementOperator:
    """Linear map from images of shape ``input_shape`` to ``output_size`` measurements.

    Inputs may carry a leading batch dimension; measurements are then ``(B, m)``.
    """

    kind: str
    input_shape: tuple[int, ...]
    output_size: int
    field: str

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def adjoint(self, y: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def config(self) -> dict:
        raise NotImplementedError

    @property
    def measurement_is_complex(self) -> bool:
        return False

    def _check_image(self, x: torch.Tensor) -> None:
        if tuple(x.shape[-len(self.input_shape):]) != self.input_shape or x.dim() not in (
            len(self.input_shape), len(self.input_shape) + 1
        ):
            raise ValueError(f"image shape {tuple(x.shape)} does not match operator input {self.input_shape}")

    def _check_measurements(self, y: torch.Tensor) -> None:
        if y.dim() not in (1, 2) or y.shape[-1] != self.output_size:
            raise ValueError(f"measurement shape {tuple(y.shape)} does not match operator output size {self.output_size}")


class MaskedFourierOperator(MeasurementOperator):
    """Orthonormal 2-D DFT followed by selection of the sampled coefficients.

    ``field='complex'`` maps 2-channel (real, imag) images; ``field='real'``
    maps 1-channel real images and its adjoint keeps the real part, which is
    the adjoint under the real inner product.
    """

    kind = "masked_fourier"

    def __init__(self, mask: SamplingMask, field: str = "complex"):
        if field not in ("complex", "real"):
            raise ValueError(f"field must be 'complex' or 'real', got {field!r}")
        self.mask = mask
        self.field = field
        rows, cols = mask.grid_shape
        self.input_shape = (2 if field == "complex" else 1, rows, cols)
        # DC sits at index 0 of the unshifted FFT.
        unshifted = np.fft.ifftshift(mask.entries)
        self._index = torch.from_numpy(np.flatnonzero(unshifted.ravel()))
        self.output_size = int(self._index.numel())

    @property
    def measurement_is_complex(self) -> bool:
        return True

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self._check_image(x)
        z = _to_complex(x) if self.field == "complex" else x[..., 0, :, :].to(torch.promote_types(x.dtype, torch.complex64))
        k = torch.fft.fft2(z, norm="ortho")
        return k.flatten(-2)[..., self._index]

    def adjoint(self, y: torch.Tensor) -> torch.Tensor:
        self._check_measurements(y)
        rows, cols = self.mask.grid_shape
        grid = torch.zeros(y.shape[:-1] + (rows * cols,), dtype=y.dtype)
        grid[..., self._index] = y
        z = torch.fft.ifft2(grid.reshape(y.shape[:-1] + (rows, cols)), norm="ortho")
        if self.field == "complex":
            return _to_channels(z)
        return z.real.unsqueeze(-3)

    def config(self) -> dict:
        cfg = {"kind": self.kind, "field": self.field}
        cfg.update(self.mask.header())
        return cfg


class GaussianMatrixOperator(MeasurementOperator):
    """Dense ``m x n`` matrix with i.i.d. N(0, 1/m) entries, frozen per ``(m, n, seed)``."""

    kind = "gaussian_matrix"
    field = "real"

    def __init__(self, m: int, input_shape, seed: int = 0):
        self.input_shape = tuple(int(s) for s in input_shape)
        n = int(np.prod(self.input_shape))
        if m < 1:
            raise ValueError(f"m must be >= 1, got {m}")
        self.output_size = int(m)
        self.seed = int(seed)
        rng = np.random.default_rng(seed)
        self.matrix = torch.from_numpy(rng.normal(0.0, 1.0 / math.sqrt(m), size=(m, n)))

    @property
    def n(self) -> int:
        return self.matrix.shape[1]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self._check_image(x)
        flat = x.flatten(-len(self.input_shape))
        return flat @ self.matrix.to(x.dtype).T

    def adjoint(self, y: torch.Tensor) -> torch.Tensor:
        self._check_measurements(y)
        return (y @ self.matrix.to(y.dtype)).unflatten(-1, self.input_shape)

    def config(self) -> dict:
        return {"kind": self.kind, "m": self.output_size, "input_shape": list(self.input_shape), "seed": self.seed}


@dataclass
class OperatorConfig:
    kind: str = "masked_fourier"
    pattern: str = "radial"
    acceleration: float = 4.0
    seed: int = 0
    field: str = "complex"
    # gaussian_matrix only; defaults to n / acceleration when unset
    m: Optional[int] = None


def build_operator(cfg: OperatorConfig, image_size) -> MeasurementOperator:
    """Instantiate an operator for square or ``(rows, cols)`` grayscale images."""
    if isinstance(image_size, int):
        image_size = (image_size, image_size)
    rows, cols = image_size
    if cfg.kind == "masked_fourier":
        mask = make_mask(cfg.pattern, (rows, cols), cfg.acceleration, cfg.seed)
        return MaskedFourierOperator(mask, cfg.field)
    if cfg.kind == "gaussian_matrix":
        shape = (1, rows, cols)
        m = cfg.m if cfg.m is not None else int(round(rows * cols / cfg.acceleration))
        return GaussianMatrixOperator(m, shape, cfg.seed)
    raise ValueError(f"unknown operator kind {cfg.kind!r}")


def apply_forward(op: MeasurementOperator, x: torch.Tensor) -> torch.Tensor:
    return op.forward(x)


def apply_adjoint(op: MeasurementOperator, y: torch.Tensor) -> torch.Tensor:
    return op.adjoint(y)


def grad_data_fidelity(op: MeasurementOperator, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Gradient of ``0.5 * ||y - A x||^2``, i.e. ``A^H (A x - y)``."""
    residual = op.forward(x)
    if residual.shape != y.shape:
        raise ValueError(f"measurement shape {tuple(y.shape)} does not match A x shape {tuple(residual.shape)}")
    return op.adjoint(residual - y)


def data_fidelity(op: MeasurementOperator, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    return 0.5 * (op.forward(x) - y).abs().pow(2).sum(-1)


def embed_image(images: torch.Tensor, op: MeasurementOperator) -> torch.Tensor:
    """Lift 1-channel real images into the operator's signal representation."""
    channels = op.input_shape[0]
    if images.shape[-3] == channels:
        return images
    if images.shape[-3] == 1 and channels == 2:
        return torch.cat([images, torch.zeros_like(images)], dim=-3)
    raise ValueError(f"cannot embed {images.shape[-3]}-channel images into {channels}-channel operator input")


# --------------------------------------------------------------------------- noise


@dataclass(frozen=True)
class NoiseSpec:
    target_snr_db: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        if self.target_snr_db is not None and not 0 <= self.target_snr_db <= 60:
            raise ValueError(f"target_snr_db must be in [0, 60] or None, got {self.target_snr_db}")


def add_noise(y: torch.Tensor, spec: NoiseSpec) -> torch.Tensor:
    """Add Gaussian noise scaled per measurement vector to hit ``spec.target_snr_db`` exactly.

    SNR is ``10 log10(||y||^2 / ||noise||^2)`` on the noiseless vector; complex
    measurements get circularly symmetric noise.
    """
    if y.numel() == 0:
        raise ValueError("cannot add noise to empty measurements")
    if spec.target_snr_db is None:
        return y
    gen = torch.Generator().manual_seed(int(spec.seed))
    if y.is_complex():
        draw = torch.complex(torch.randn(y.shape, generator=gen, dtype=torch.float64),
                             torch.randn(y.shape, generator=gen, dtype=torch.float64))
    else:
        draw = torch.randn(y.shape, generator=gen, dtype=torch.float64)
    y64 = y.detach().to(draw.dtype)
    signal = torch.linalg.vector_norm(y64, dim=-1, keepdim=True)
    if torch.any(signal == 0):
        raise ValueError("cannot calibrate noise for an all-zero measurement vector")
    scale = signal / (torch.linalg.vector_norm(draw, dim=-1, keepdim=True) * 10 ** (spec.target_snr_db / 20))
    noise = (draw * scale).to(y.dtype)
    return y + noise


def snr_db(clean: torch.Tensor, noisy: torch.Tensor) -> torch.Tensor:
    noise = noisy - clean
    return 20 * torch.log10(torch.linalg.vector_norm(clean, dim=-1) / torch.linalg.vector_norm(noise, dim=-1))
