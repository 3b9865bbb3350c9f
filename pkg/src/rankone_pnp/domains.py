"""Domain definitions: data family + forward operator + noise level + step size."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import torch

from .data import Dataset, DatasetSpec, ingest
from .operators import MeasurementOperator, NoiseSpec, OperatorConfig, add_noise, build_operator, embed_image

SPLITS = ("train", "val", "test")


@dataclass
class NoiseConfig:
    snr_db: Optional[float] = None
    seed: int = 0


@dataclass
class DomainSpec:
    domain_id: str
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    operator: OperatorConfig = field(default_factory=OperatorConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    gamma: float = 1.5


@dataclass
class PreparedDomain:
    """Concrete operator plus per-split ground truth and measurements."""

    spec: DomainSpec
    op: MeasurementOperator
    images: dict[str, torch.Tensor]
    measurements: dict[str, torch.Tensor]
    dataset: Dataset

    @property
    def domain_id(self) -> str:
        return self.spec.domain_id

    def size(self, split: str) -> int:
        return self.images[split].shape[0]


def simulate_measurements(op: MeasurementOperator, signals: torch.Tensor, noise: NoiseConfig,
                          seed_offset: int = 0) -> torch.Tensor:
    y = op.forward(signals.to(torch.float64))
    if noise.snr_db is not None and y.shape[0] > 0:
        y = add_noise(y, NoiseSpec(noise.snr_db, noise.seed + seed_offset))
    return y


def prepare_domain(spec: DomainSpec, dtype: torch.dtype = torch.float32, dataset: Optional[Dataset] = None,
                   manifest_path=None) -> PreparedDomain:
    dataset = dataset if dataset is not None else ingest(spec.dataset, manifest_path)
    op = build_operator(spec.operator, spec.dataset.size)
    images, measurements = {}, {}
    for i, split in enumerate(SPLITS):
        signals = embed_image(torch.from_numpy(dataset[split]), op)
        y = simulate_measurements(op, signals, spec.noise, seed_offset=1000 * i)
        images[split] = signals.to(dtype)
        complex_dtype = torch.complex64 if dtype == torch.float32 else torch.complex128
        measurements[split] = y.to(complex_dtype if y.is_complex() else dtype)
    return PreparedDomain(spec, op, images, measurements, dataset)
