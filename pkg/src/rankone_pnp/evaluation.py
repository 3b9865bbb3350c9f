"""Reconstruction metrics, cross-domain evaluation matrices and report emission."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import torch
from PIL import Image
from scipy.ndimage import gaussian_filter

from .domains import PreparedDomain
from .errors import MissingModulationError, UnknownDomainError
from .modulation import DomainRegistry, ModulationSet, _atomic_write_bytes, combine_factors
from .prior import PriorNetwork
from .solver import SolverConfig, unrolled_reconstruct

PSNR_CAP = 100.0
SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 3.5  # 11x11 window at sigma 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


def _np(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def psnr(x, x_hat, peak: float = 1.0) -> float:
    """``10 log10(peak^2 / MSE)``, capped at 100 dB (exact match included)."""
    if peak <= 0:
        raise ValueError(f"peak must be positive, got {peak}")
    x, x_hat = _np(x), _np(x_hat)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {x_hat.shape}")
    mse = float(np.mean((x - x_hat) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10 * np.log10(peak**2 / mse))


def _ssim_2d(a: np.ndarray, b: np.ndarray, data_range: float) -> float:
    c1, c2 = (SSIM_K1 * data_range) ** 2, (SSIM_K2 * data_range) ** 2

    def blur(img):
        return gaussian_filter(img, SSIM_SIGMA, truncate=SSIM_TRUNCATE, mode="reflect")

    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a**2
    var_b = blur(b * b) - mu_b**2
    cov = blur(a * b) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
    pad = int(SSIM_TRUNCATE * SSIM_SIGMA + 0.5)
    return float(s[pad:-pad, pad:-pad].mean())


def ssim(x, x_hat, data_range: float = 1.0) -> float:
    """Single-scale Gaussian-window SSIM; multi-channel inputs ``(C, H, W)`` are channel-averaged."""
    x, x_hat = _np(x), _np(x_hat)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {x_hat.shape}")
    if x.ndim == 2:
        return _ssim_2d(x, x_hat, data_range)
    flat_x = x.reshape(-1, *x.shape[-2:])
    flat_y = x_hat.reshape(-1, *x.shape[-2:])
    return float(np.mean([_ssim_2d(a, b, data_range) for a, b in zip(flat_x, flat_y)]))


def metric_image(x: torch.Tensor) -> torch.Tensor:
    """Image used for scoring: magnitude for 2-channel complex signals, identity otherwise."""
    if x.shape[-3] == 2:
        return torch.sqrt(x[..., :1, :, :] ** 2 + x[..., 1:, :, :] ** 2)
    return x


def residual_figure(x, x_hat, gain: float = 20.0, path=None) -> np.ndarray:
    """``clip(gain * |x - x_hat|, 0, 1)``; written as an 8-bit PNG when ``path`` is given."""
    res = np.clip(gain * np.abs(_np(x) - _np(x_hat)), 0.0, 1.0)
    if path is not None:
        save_png(res, path)
    return res


def save_png(img, path) -> None:
    arr = _np(img)
    arr = arr.reshape(arr.shape[-2:]) if arr.ndim > 2 and arr.shape[0] == 1 else arr
    if arr.ndim == 3:
        arr = np.moveaxis(arr, 0, -1)
    data = (np.clip(arr, 0, 1) * 255 + 0.5).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(data).save(path, format="PNG")


# --------------------------------------------------------------------------- evaluation matrix


@dataclass
class Reconstructor:
    """A network plus a rule for choosing its modulation per test domain.

    ``modulated=True`` looks the domain up in the registry passed to
    ``eval_matrix``; ``modulations`` pins explicit per-domain sets instead.
    """

    name: str
    net: PriorNetwork
    modulated: bool = False
    modulations: Optional[Mapping[str, Optional[ModulationSet]]] = None

    def modulation_for(self, domain_id: str, registry: Optional[DomainRegistry]) -> Optional[ModulationSet]:
        if self.modulations is not None:
            if domain_id not in self.modulations:
                raise MissingModulationError(f"{self.name}: no modulation for domain {domain_id!r}")
            return self.modulations[domain_id]
        if not self.modulated:
            return None
        if registry is None:
            raise MissingModulationError(f"{self.name}: modulated cell for {domain_id!r} needs a registry")
        try:
            return registry.resolve(domain_id, self.net.fingerprint())
        except UnknownDomainError as exc:
            raise MissingModulationError(f"{self.name}: {exc}") from exc


def reconstruct_split(domain: PreparedDomain, net: Optional[PriorNetwork], modulation: Optional[ModulationSet],
                      solver: SolverConfig, split: str = "test", batch_size: int = 16) -> torch.Tensor:
    y_all = domain.measurements[split]
    outs = []
    with torch.no_grad():
        for start in range(0, y_all.shape[0], batch_size):
            outs.append(unrolled_reconstruct(y_all[start:start + batch_size], domain.op, net, modulation, solver))
    return torch.cat(outs) if outs else torch.empty(0)


def score(truth: torch.Tensor, recon: torch.Tensor) -> tuple[list[float], list[float]]:
    t, r = metric_image(truth), metric_image(recon)
    p = [psnr(a, b) for a, b in zip(t, r)]
    s = [ssim(a, b) for a, b in zip(t, r)]
    return p, s


@dataclass
class EvalMatrix:
    rows: list[str]
    columns: list[str]
    psnr: dict[str, dict[str, float]]
    ssim: dict[str, dict[str, float]]
    counts: dict[str, int]
    samples: dict[str, dict[str, dict[str, list[float]]]] = field(default_factory=dict)

    def average(self, metric: str = "psnr") -> dict[str, float]:
        table = getattr(self, metric)
        return {c: float(np.mean([table[r][c] for r in self.rows])) for c in self.columns}

    def to_dict(self) -> dict:
        return {"rows": self.rows, "columns": self.columns, "psnr": self.psnr, "ssim": self.ssim,
                "counts": self.counts, "samples": self.samples,
                "avg": {"psnr": self.average("psnr"), "ssim": self.average("ssim")}}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalMatrix":
        return cls(d["rows"], d["columns"], d["psnr"], d["ssim"], d["counts"], d.get("samples", {}))

    def table(self, metric: str = "psnr") -> str:
        values = getattr(self, metric)
        width = max(12, *(len(c) + 2 for c in self.columns))
        head = f"{'test domain':<16}" + "".join(f"{c:>{width}}" for c in self.columns) + f"{'n':>6}"
        lines = [f"average {metric.upper()}", head, "-" * len(head)]
        for r in self.rows:
            lines.append(f"{r:<16}" + "".join(f"{values[r][c]:>{width}.2f}" for c in self.columns)
                         + f"{self.counts[r]:>6d}")
        lines.append("-" * len(head))
        avg = self.average(metric)
        lines.append(f"{'avg':<16}" + "".join(f"{avg[c]:>{width}.2f}" for c in self.columns))
        return "\n".join(lines) + "\n"


def eval_matrix(domains: Sequence[PreparedDomain], reconstructors: Sequence[Reconstructor],
                registry: Optional[DomainRegistry] = None, solver: Optional[SolverConfig] = None,
                split: str = "test") -> EvalMatrix:
    """Score every reconstructor on every domain's ``split``.

    The solver's step size comes from each domain's spec unless ``solver``
    is given, in which case only its other settings are used.
    """
    solver = solver or SolverConfig()
    rows, cols = [d.domain_id for d in domains], [r.name for r in reconstructors]
    psnr_t = {r: {} for r in rows}
    ssim_t = {r: {} for r in rows}
    samples = {r: {} for r in rows}
    counts = {}
    for d in domains:
        if d.size(split) < 1:
            raise ValueError(f"domain {d.domain_id!r} has no {split} samples")
        counts[d.domain_id] = d.size(split)
        cfg = SolverConfig(solver.iterations, d.spec.gamma, solver.momentum, solver.alpha)
        for rec in reconstructors:
            mod = rec.modulation_for(d.domain_id, registry)
            out = reconstruct_split(d, rec.net, mod, cfg, split)
            p, s = score(d.images[split], out)
            psnr_t[d.domain_id][rec.name] = float(np.mean(p))
            ssim_t[d.domain_id][rec.name] = float(np.mean(s))
            samples[d.domain_id][rec.name] = {"psnr": p, "ssim": s}
    return EvalMatrix(rows, cols, psnr_t, ssim_t, counts, samples)


# --------------------------------------------------------------------------- modulation analysis


@dataclass
class NormProfile:
    domain_id: str
    ratios: list[float]
    normalized: list[float]


def norm_profile(modulation: ModulationSet, net: PriorNetwork) -> NormProfile:
    """Per-layer ``||M_l|| / ||W_l||`` (Frobenius), min-max normalized.

    ``M_l`` is the additive term (without the identity), ``W_l`` the
    spectrally normalized backbone weight; unmodulated layers score zero.
    """
    modulation.validate_against(net.layer_shapes)
    ratios = []
    with torch.no_grad():
        for l in range(net.num_layers):
            if l not in modulation.factors:
                ratios.append(0.0)
                continue
            m = combine_factors(modulation.factors[l].map(lambda t: t.to(torch.float64)))
            w = net.normalized_weight(l).to(torch.float64)
            ratios.append(float(torch.linalg.vector_norm(m) / torch.linalg.vector_norm(w)))
    lo, hi = min(ratios), max(ratios)
    normalized = [0.0] * len(ratios) if hi == lo else [(r - lo) / (hi - lo) for r in ratios]
    return NormProfile(modulation.domain_id, ratios, normalized)


# --------------------------------------------------------------------------- reports


def _dump_json(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode()


def emit_report(matrix: Optional[EvalMatrix], profiles: Optional[Mapping[str, NormProfile]] = None,
                figures: Optional[Mapping[str, np.ndarray]] = None, out_dir=".",
                extra: Optional[dict] = None) -> dict[str, Path]:
    """Write ``report.json`` + ``matrix.txt`` (+ profile CSV and PNG figures).

    Output bytes depend only on the inputs, so re-running is idempotent.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory {out} is not writable: {exc}") from exc
    written = {}
    report = {"extra": extra or {}}
    if matrix is not None:
        report["matrix"] = matrix.to_dict()
        text = matrix.table("psnr") + "\n" + matrix.table("ssim")
        _atomic_write_bytes(out / "matrix.txt", text.encode())
        written["table"] = out / "matrix.txt"
    if profiles:
        report["profiles"] = {k: {"ratios": p.ratios, "normalized": p.normalized} for k, p in sorted(profiles.items())}
        rows = ["domain," + ",".join(f"layer{l}" for l in range(len(next(iter(profiles.values())).normalized)))]
        rows += [k + "," + ",".join(f"{v:.6f}" for v in p.normalized) for k, p in sorted(profiles.items())]
        _atomic_write_bytes(out / "profiles.csv", ("\n".join(rows) + "\n").encode())
        written["profiles"] = out / "profiles.csv"
    for name, img in sorted((figures or {}).items()):
        path = out / "figures" / f"{name}.png"
        save_png(img, path)
        written[f"figure:{name}"] = path
    _atomic_write_bytes(out / "report.json", _dump_json(report))
    written["report"] = out / "report.json"
    return written


def load_report(path) -> dict:
    report = json.loads(Path(path).read_text())
    if "matrix" in report:
        report["matrix"] = EvalMatrix.from_dict(report["matrix"])
    return report
