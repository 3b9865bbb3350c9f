"""Backbone training, frozen-backbone modulation training, and the tuning baselines."""

from __future__ import annotations

import copy
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional

import numpy as np
import torch

from .domains import PreparedDomain
from .errors import BackboneMutatedError, NonFiniteError
from .evaluation import metric_image, psnr, ssim
from .modulation import (
    CHANNEL_ONLY,
    RANK_ONE,
    DomainRegistry,
    ModulationSet,
    _atomic_write_bytes,
    count_channel_params,
    count_modulation_params,
    init_modulation,
)
from .prior import PriorNetwork
from .solver import SolverConfig, unrolled_reconstruct

log = logging.getLogger(__name__)


@dataclass
class TrainingConfig:
    epochs: int = 100
    lr_base: float = 1e-4
    lr_modulation: float = 1e-2
    # both learning rates are multiplied by lr_decay_factor from epoch lr_decay_epoch + 1 on
    lr_decay_epoch: int = 50
    lr_decay_factor: float = 0.5
    batch_size: int = 4
    loss: str = "mse"
    seed: int = 0
    # global-norm clip; None disables
    grad_clip: Optional[float] = 1.0
    validation_metric: str = "psnr"

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.lr_base < 0 or self.lr_modulation < 0:
            raise ValueError("learning rates must be non-negative")
        if not 0 < self.lr_decay_factor <= 1:
            raise ValueError(f"lr_decay_factor must be in (0, 1], got {self.lr_decay_factor}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.loss != "mse":
            raise ValueError(f"unsupported loss {self.loss!r}")
        if self.validation_metric not in ("psnr", "ssim"):
            raise ValueError(f"unsupported validation metric {self.validation_metric!r}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive or None")

    def lr_at(self, base_lr: float, epoch: int) -> float:
        """Learning rate used during 1-indexed ``epoch``."""
        return base_lr * self.lr_decay_factor if epoch > self.lr_decay_epoch else base_lr


def loss(x_hat: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Mean squared error."""
    if x_hat.shape != x.shape:
        raise ValueError(f"shape mismatch {tuple(x_hat.shape)} vs {tuple(x.shape)}")
    return torch.mean((x_hat - x) ** 2)


@dataclass
class TrainReport:
    kind: str
    domain_id: str
    curves: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val: float = float("-inf")
    steps: int = 0
    trainable_params: int = 0
    backbone_fingerprint: str = ""
    seconds: float = 0.0
    notes: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------- shared loop


def validate(domain: PreparedDomain, net: Optional[PriorNetwork], modulation: Optional[ModulationSet],
             solver: SolverConfig, split: str = "val", batch_size: int = 16) -> dict[str, float]:
    x_all, y_all = domain.images[split], domain.measurements[split]
    if x_all.shape[0] == 0:
        raise ValueError(f"domain {domain.domain_id!r} has an empty {split} split")
    p, s = [], []
    with torch.no_grad():
        for start in range(0, x_all.shape[0], batch_size):
            out = unrolled_reconstruct(y_all[start:start + batch_size], domain.op, net, modulation, solver)
            for a, b in zip(metric_image(x_all[start:start + batch_size]), metric_image(out)):
                p.append(psnr(a, b))
                s.append(ssim(a, b))
    return {"psnr": float(np.mean(p)), "ssim": float(np.mean(s))}


def _grad_norm(params: list[torch.Tensor]) -> float:
    grads = [p.grad.detach().reshape(-1) for p in params if p.grad is not None]
    if not grads:
        return 0.0
    return float(torch.linalg.vector_norm(torch.cat(grads)))


def _batch_order(n: int, seed: int, epoch: int) -> torch.Tensor:
    gen = torch.Generator().manual_seed(int(seed) * 100_003 + epoch)
    return torch.randperm(n, generator=gen)


def _fit(domain: PreparedDomain, net: PriorNetwork, modulation: Optional[ModulationSet],
         params: list[torch.Tensor], base_lr: float, config: TrainingConfig, solver: SolverConfig,
         report: TrainReport, update_sn: bool, snapshot: Callable[[], object],
         state_path: Optional[Path] = None, log_path: Optional[Path] = None,
         max_steps: Optional[int] = None):
    """Mini-batch Adam through the unrolled solver, keeping the best-on-validation snapshot."""
    torch.manual_seed(config.seed)
    opt = torch.optim.Adam(params, lr=base_lr)
    x_train, y_train = domain.images["train"], domain.measurements["train"]
    n = x_train.shape[0]
    if n == 0:
        raise ValueError(f"domain {domain.domain_id!r} has an empty train split")

    start_epoch, step = 1, 0
    best_state = None
    if state_path is not None and state_path.exists():
        resumed = _load_train_state(state_path, net, modulation, opt)
        start_epoch, step = resumed["epoch"] + 1, resumed["step"]
        report.curves = resumed["curves"]
        report.best_epoch, report.best_val = resumed["best_epoch"], resumed["best_val"]
        best_state = resumed["best_state"]
        log.info("resumed %s at epoch %d", report.kind, start_epoch)
    else:
        metrics = validate(domain, net, modulation, solver)
        report.curves.append({"epoch": 0, "step": 0, "train_loss": None, "val_psnr": metrics["psnr"],
                              "val_ssim": metrics["ssim"], "lr": base_lr})
        report.best_epoch, report.best_val = 0, metrics[config.validation_metric]
        best_state = snapshot()
        _log_line(log_path, report.curves[-1])

    for epoch in range(start_epoch, config.epochs + 1):
        lr = config.lr_at(base_lr, epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        order = _batch_order(n, config.seed, epoch)
        losses = []
        for b, start in enumerate(range(0, n, config.batch_size)):
            if max_steps is not None and step >= max_steps:
                break
            idx = order[start:start + config.batch_size]
            if update_sn:
                net.update_spectral_norm(1)
            opt.zero_grad(set_to_none=True)
            out = unrolled_reconstruct(y_train[idx], domain.op, net, modulation, solver)
            value = loss(out, x_train[idx])
            if not torch.isfinite(value):
                raise NonFiniteError(f"non-finite loss at epoch {epoch}, batch {b}: grad norm before step "
                                     f"{_grad_norm(params):.3e}, loss {value.item()}")
            value.backward()
            gnorm = _grad_norm(params)
            if not np.isfinite(gnorm):
                raise NonFiniteError(f"non-finite gradient at epoch {epoch}, batch {b}: grad norm {gnorm}")
            if config.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
            opt.step()
            step += 1
            losses.append(value.item())
        metrics = validate(domain, net, modulation, solver)
        record = {"epoch": epoch, "step": step, "train_loss": float(np.mean(losses)) if losses else None,
                  "val_psnr": metrics["psnr"], "val_ssim": metrics["ssim"], "lr": lr}
        report.curves.append(record)
        _log_line(log_path, record)
        if metrics[config.validation_metric] > report.best_val:
            report.best_epoch, report.best_val = epoch, metrics[config.validation_metric]
            best_state = snapshot()
        if state_path is not None:
            _save_train_state(state_path, net, modulation, opt, epoch, step, report, best_state)
        if max_steps is not None and step >= max_steps:
            break
    report.steps = step
    return best_state


def _log_line(path: Optional[Path], record: dict) -> None:
    log.info("epoch %(epoch)d step %(step)d val_psnr %(val_psnr).3f", record)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "a") as fh:
            fh.write(json.dumps(record) + "\n")


def _save_train_state(path: Path, net, modulation, opt, epoch, step, report, best_state) -> None:
    buf = io.BytesIO()
    torch.save({
        "net": net.state_dict(),
        "modulation": modulation.detached() if modulation is not None else None,
        "optimizer": opt.state_dict(),
        "epoch": epoch,
        "step": step,
        "curves": report.curves,
        "best_epoch": report.best_epoch,
        "best_val": report.best_val,
        "best_state": best_state,
    }, buf)
    _atomic_write_bytes(path, buf.getvalue())


def _load_train_state(path: Path, net, modulation, opt) -> dict:
    state = torch.load(path, weights_only=False)
    net.load_state_dict(state["net"])
    if modulation is not None:
        with torch.no_grad():
            for l, f in state["modulation"].factors.items():
                for dst, src in zip(modulation.factors[l].tensors(), f.tensors()):
                    dst.copy_(src)
    opt.load_state_dict(state["optimizer"])
    return state


# --------------------------------------------------------------------------- base training


def train_base(domain: PreparedDomain, net: PriorNetwork, config: TrainingConfig,
               solver: Optional[SolverConfig] = None, state_path=None, log_path=None,
               max_steps: Optional[int] = None, kind: str = "base") -> tuple[PriorNetwork, TrainReport]:
    """Train every backbone parameter end-to-end through the unrolled solver.

    ``net`` is trained in place; the returned network is a separate copy
    holding the best-on-validation weights. Passing ``state_path`` writes a
    resumable state after each epoch and resumes from it when present.
    """
    solver = solver or SolverConfig(gamma=domain.spec.gamma)
    net.requires_grad_(True)
    params = list(net.parameters())
    report = TrainReport(kind, domain.domain_id, trainable_params=sum(p.numel() for p in params))
    t0 = time.perf_counter()
    best = _fit(domain, net, None, params, config.lr_base, config, solver, report, update_sn=True,
                snapshot=lambda: copy.deepcopy(net.state_dict()),
                state_path=Path(state_path) if state_path else None,
                log_path=Path(log_path) if log_path else None, max_steps=max_steps)
    out = copy.deepcopy(net)
    out.load_state_dict(best)
    report.seconds = time.perf_counter() - t0
    report.backbone_fingerprint = out.fingerprint()
    return out, report


def full_tune(domain: PreparedDomain, net: PriorNetwork, config: TrainingConfig,
              solver: Optional[SolverConfig] = None, **kwargs) -> tuple[PriorNetwork, TrainReport]:
    """Retrain a clone of the backbone on ``domain``; the source network is untouched."""
    clone = copy.deepcopy(net)
    tuned, report = train_base(domain, clone, config, solver, kind="full_tune", **kwargs)
    report.notes["initialization"] = "base checkpoint"
    report.notes["source_fingerprint"] = net.fingerprint()
    return tuned, report


# --------------------------------------------------------------------------- modulation training


def adapt_domain(domain: PreparedDomain, net: PriorNetwork, config: TrainingConfig,
                 solver: Optional[SolverConfig] = None, layers: Optional[Iterable[int]] = None,
                 mode: str = RANK_ONE, registry: Optional[DomainRegistry] = None,
                 modulation: Optional[ModulationSet] = None, log_path=None,
                 max_steps: Optional[int] = None) -> tuple[ModulationSet, TrainReport]:
    """Train only modulation factors for ``domain`` on a frozen backbone.

    The backbone fingerprint (weights, biases and spectral-norm vectors) is
    compared before and after; any change raises ``BackboneMutatedError``.
    The best-on-validation set is registered when ``registry`` is given.
    """
    solver = solver or SolverConfig(gamma=domain.spec.gamma)
    layers = None if layers is None else list(layers)
    if modulation is None:
        modulation = init_modulation(net, domain.domain_id, seed=config.seed, layers=layers, mode=mode)
    modulation = modulation.to(net.dtype).requires_grad_(True)
    modulation.domain_id = domain.domain_id

    expected = (count_channel_params if modulation.mode == CHANNEL_ONLY else count_modulation_params)(net, layers)
    params = modulation.parameters()
    registered = sum(p.numel() for p in params)
    if registered != expected:
        raise AssertionError(f"optimizer holds {registered} parameters, expected {expected}")

    fingerprint = net.fingerprint()
    grad_flags = [p.requires_grad for p in net.parameters()]
    net.requires_grad_(False)
    report = TrainReport(f"adapt:{modulation.mode}", domain.domain_id, trainable_params=registered,
                         backbone_fingerprint=fingerprint, notes={"layers": modulation.layers})
    t0 = time.perf_counter()
    try:
        best = _fit(domain, net, modulation, params, config.lr_modulation, config, solver, report,
                    update_sn=False, snapshot=modulation.detached,
                    log_path=Path(log_path) if log_path else None, max_steps=max_steps)
    finally:
        for p, flag in zip(net.parameters(), grad_flags):
            p.requires_grad_(flag)
    if net.fingerprint() != fingerprint:
        raise BackboneMutatedError(f"backbone changed while adapting to {domain.domain_id!r}")
    report.seconds = time.perf_counter() - t0

    best.backbone_fingerprint = fingerprint
    best.metadata = {"best_epoch": report.best_epoch, "best_val": report.best_val, "steps": report.steps}
    if registry is not None:
        registry.put(best)
    return best, report


def adapt_channel_only(domain: PreparedDomain, net: PriorNetwork, config: TrainingConfig,
                       solver: Optional[SolverConfig] = None, **kwargs) -> tuple[ModulationSet, TrainReport]:
    """Baseline: one trainable scale per input channel of every convolution."""
    return adapt_domain(domain, net, config, solver, mode=CHANNEL_ONLY, **kwargs)


def adapt_partial(domain: PreparedDomain, net: PriorNetwork, layer_subset: Iterable[int], config: TrainingConfig,
                  solver: Optional[SolverConfig] = None, **kwargs) -> tuple[ModulationSet, TrainReport]:
    layer_subset = list(layer_subset)
    if not layer_subset:
        raise ValueError("layer subset must be non-empty")
    return adapt_domain(domain, net, config, solver, layers=layer_subset, **kwargs)


def standard_subsets(n_layers: int) -> dict[str, list[int]]:
    """Named layer subsets for the partial-modulation sweep.

    For 13 layers these are the first/middle/last 5, first/last 7 and all.
    For other depths the block widths scale as ``round(5/13 n)`` and
    ``round(7/13 n)``; the halves split at ``n // 2`` (the output layer
    belongs to the last half).
    """
    if n_layers < 2:
        raise ValueError("need at least two layers for a sweep")
    five = max(1, round(5 * n_layers / 13))
    seven = max(1, round(7 * n_layers / 13))
    mid = (n_layers - five) // 2
    half = n_layers // 2
    return {
        f"first_{five}": list(range(five)),
        f"middle_{five}": list(range(mid, mid + five)),
        f"last_{five}": list(range(n_layers - five, n_layers)),
        f"first_{seven}": list(range(seven)),
        f"last_{seven}": list(range(n_layers - seven, n_layers)),
        "first_half": list(range(half)),
        "last_half": list(range(half, n_layers)),
        "all": list(range(n_layers)),
    }
