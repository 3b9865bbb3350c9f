"""Declarative run configuration with commented YAML serialization and dotted overrides."""

from __future__ import annotations

import copy
import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

import yaml

from .data import DatasetSpec
from .domains import DomainSpec, NoiseConfig
from .errors import ConfigError
from .operators import OperatorConfig
from .solver import SolverConfig
from .training import TrainingConfig

ENV_OUTPUT_ROOT = "RANKONE_OUTPUT_ROOT"
ENV_WORKERS = "RANKONE_WORKERS"


@dataclass
class PriorConfig:
    blocks: int = 12
    features: int = 64
    kernel: int = 3
    alpha: float = 0.2
    seed: int = 0
    # power iterations run once at initialization
    sn_warmup: int = 30
    dtype: str = "float32"


@dataclass
class OutputConfig:
    directory: str = "runs/default"
    workers: int = 1


@dataclass
class RunConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    operator: OperatorConfig = field(default_factory=OperatorConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    prior: PriorConfig = field(default_factory=PriorConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    # used by adapt, full-tune and the baselines
    adaptation: TrainingConfig = field(default_factory=TrainingConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    source_domain: str = "source"
    # each entry: domain_id plus optional dataset/operator/noise overrides and gamma
    domains: list = field(default_factory=list)

    # ------------------------------------------------------------------ domains

    def source_spec(self) -> DomainSpec:
        return DomainSpec(self.source_domain, copy.deepcopy(self.dataset), copy.deepcopy(self.operator),
                          copy.deepcopy(self.noise), self.solver.gamma)

    def domain_ids(self) -> list[str]:
        ids = [self.source_domain] + [d["domain_id"] for d in self.domains]
        return list(dict.fromkeys(ids))

    def domain_spec(self, domain_id: str) -> DomainSpec:
        from .errors import UnknownDomainError

        if domain_id == self.source_domain:
            return self.source_spec()
        for entry in self.domains:
            if entry["domain_id"] == domain_id:
                return _domain_from_entry(self, entry)
        raise UnknownDomainError(domain_id, self.domain_ids())

    def output_dir(self) -> Path:
        root = os.environ.get(ENV_OUTPUT_ROOT)
        out = Path(self.output.directory)
        return Path(root) / out if root and not out.is_absolute() else out

    def workers(self) -> int:
        return int(os.environ.get(ENV_WORKERS, self.output.workers))


BLOCKS = {
    "dataset": DatasetSpec,
    "operator": OperatorConfig,
    "noise": NoiseConfig,
    "solver": SolverConfig,
    "prior": PriorConfig,
    "training": TrainingConfig,
    "adaptation": TrainingConfig,
    "output": OutputConfig,
}

COMMENTS = {
    "dataset": "training images: synthetic kind (shepp_logan | texture_faces | ct_like) or 'directory' + source;\n"
               "split = train/val/test fractions, images are scaled to [0, 1]",
    "operator": "forward model: masked_fourier (pattern radial | cartesian | gaussian_density | spiral | full,\n"
                "acceleration R) or gaussian_matrix (m rows)",
    "noise": "measurement noise as target SNR in dB (null = noiseless)",
    "solver": "unrolled PnP-FISTA: K iterations, step gamma, momentum fista | fixed_q1,\n"
              "alpha overrides the prior's averaging coefficient when set",
    "prior": "artifact-removal CNN: conv+ReLU blocks plus one output conv",
    "training": "backbone training (Adam); lr decays by lr_decay_factor after lr_decay_epoch; grad_clip null disables",
    "adaptation": "per-domain modulation training (lr_modulation) and full-tuning baseline (lr_base)",
    "output": "run directory (prefixed by $" + ENV_OUTPUT_ROOT + " when relative); worker count ($" + ENV_WORKERS + ")",
    "source_domain": "id under which the backbone's own training domain is evaluated",
    "domains": "shifted domains: overrides of the dataset/operator/noise blocks above",
}

DOMAIN_KEYS = {"domain_id", "dataset", "operator", "noise", "gamma"}


def _domain_from_entry(cfg: RunConfig, entry: dict) -> DomainSpec:
    def merged(base, key):
        data = dataclasses.asdict(base)
        data.update(entry.get(key) or {})
        return _build(type(base), data, f"domains.{entry['domain_id']}.{key}")

    return DomainSpec(entry["domain_id"], merged(cfg.dataset, "dataset"), merged(cfg.operator, "operator"),
                      merged(cfg.noise, "noise"), float(entry.get("gamma", cfg.solver.gamma)))


def _build(cls, data: dict, where: str):
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown config key {where}.{key}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid value in {where}: {exc}") from exc


def to_dict(cfg: RunConfig) -> dict:
    out = {}
    for name in BLOCKS:
        out[name] = dataclasses.asdict(getattr(cfg, name))
    out["source_domain"] = cfg.source_domain
    out["domains"] = copy.deepcopy(cfg.domains)
    return out


def from_dict(data: dict) -> RunConfig:
    data = data or {}
    unknown = set(data) - set(BLOCKS) - {"source_domain", "domains"}
    if unknown:
        raise ConfigError(f"unknown config key {sorted(unknown)[0]}")
    kwargs = {}
    for name, cls in BLOCKS.items():
        block = data.get(name) or {}
        if not isinstance(block, dict):
            raise ConfigError(f"config key {name} must be a mapping")
        defaults = dataclasses.asdict(cls())
        defaults.update(block)
        kwargs[name] = _build(cls, defaults, name)
    domains = data.get("domains") or []
    for i, entry in enumerate(domains):
        if not isinstance(entry, dict) or "domain_id" not in entry:
            raise ConfigError(f"config key domains.{i} needs a domain_id")
        bad = set(entry) - DOMAIN_KEYS
        if bad:
            raise ConfigError(f"unknown config key domains.{i}.{sorted(bad)[0]}")
    cfg = RunConfig(**kwargs, source_domain=str(data.get("source_domain", "source")), domains=list(domains))
    for entry in cfg.domains:
        _domain_from_entry(cfg, entry)  # validate overrides eagerly
    if cfg.prior.dtype not in ("float32", "float64"):
        raise ConfigError(f"invalid value in prior.dtype: {cfg.prior.dtype!r}")
    return cfg


def _dump(value) -> str:
    return yaml.safe_dump(value, sort_keys=False, default_flow_style=False, width=100)


def dumps(cfg: RunConfig) -> str:
    """Commented YAML; ``dumps(loads(text)) == text`` for any text produced here."""
    data = to_dict(cfg)
    parts = []
    for key, value in data.items():
        comment = "\n".join(f"# {line}" for line in COMMENTS[key].splitlines())
        parts.append(comment + "\n" + _dump({key: value}))
    return "\n".join(parts)


def loads(text: str) -> RunConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigError("config must be a mapping at top level")
    return from_dict(data or {})


def load(path) -> RunConfig:
    return loads(Path(path).read_text())


def save(cfg: RunConfig, path) -> None:
    from .modulation import _atomic_write_bytes

    _atomic_write_bytes(Path(path), dumps(cfg).encode())


def apply_overrides(cfg: RunConfig, overrides: Sequence[str]) -> RunConfig:
    """Apply ``a.b.c=value`` assignments; values are parsed as YAML scalars."""
    data = to_dict(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value")
        key, raw = item.split("=", 1)
        path = key.strip().split(".")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse value for {key}: {exc}") from exc
        node: Any = data
        for i, part in enumerate(path[:-1]):
            node = _child(node, part, ".".join(path[: i + 1]))
        last = path[-1]
        if isinstance(node, list):
            node[_index(node, last, key)] = value
        elif isinstance(node, dict):
            if last not in node and not _open_mapping(path):
                raise ConfigError(f"unknown config key {key}")
            node[last] = value
        else:
            raise ConfigError(f"unknown config key {key}")
    return from_dict(data)


def _open_mapping(path: list[str]) -> bool:
    # domain override blocks may introduce keys that the entry does not list yet
    return len(path) >= 3 and path[0] == "domains"


def _index(node: list, part: str, key: str) -> int:
    try:
        i = int(part)
        node[i]
        return i
    except (ValueError, IndexError):
        raise ConfigError(f"unknown config key {key}") from None


def _child(node, part: str, key: str):
    if isinstance(node, list):
        return node[_index(node, part, key)]
    if isinstance(node, dict):
        if part not in node:
            if len(key.split(".")) == 3 and key.startswith("domains.") and part in DOMAIN_KEYS:
                node[part] = {}
            else:
                raise ConfigError(f"unknown config key {key}")
        if node[part] is None:
            node[part] = {}
        return node[part]
    raise ConfigError(f"unknown config key {key}")


# --------------------------------------------------------------------------- profiles


def desk_profile(output_dir: str = "runs/desk") -> RunConfig:
    """Tiny CPU profile: shepp_logan + radial 4x source, four shifted domains."""
    return RunConfig(
        dataset=DatasetSpec(kind="shepp_logan", n_images=64, size=64, split=[0.75, 0.125, 0.125], seed=0),
        operator=OperatorConfig(kind="masked_fourier", pattern="radial", acceleration=4.0),
        noise=NoiseConfig(snr_db=None, seed=0),
        solver=SolverConfig(iterations=8, gamma=1.5, momentum="fixed_q1"),
        prior=PriorConfig(blocks=5, features=16),
        training=TrainingConfig(epochs=100, lr_base=1e-3, lr_modulation=1e-2, lr_decay_epoch=50, batch_size=8),
        adaptation=TrainingConfig(epochs=30, lr_base=1e-3, lr_modulation=1e-2, lr_decay_epoch=15, batch_size=8),
        output=OutputConfig(directory=output_dir),
        source_domain="radial4",
        domains=[
            {"domain_id": "cartesian4", "operator": {"pattern": "cartesian"}},
            {"domain_id": "radial10", "operator": {"acceleration": 10.0}},
            {"domain_id": "noise20", "noise": {"snr_db": 20.0, "seed": 1}},
            {"domain_id": "ct_like", "dataset": {"kind": "ct_like"}},
        ],
    )


def full_profile(output_dir: str = "runs/full") -> RunConfig:
    """Full-size backbone (12 blocks, 64 features) with the reference optimizer settings."""
    cfg = desk_profile(output_dir)
    cfg.dataset = DatasetSpec(kind="shepp_logan", n_images=1000, size=256, split=[0.8, 0.1, 0.1], seed=0)
    cfg.solver = SolverConfig()
    cfg.prior = PriorConfig()
    cfg.training = TrainingConfig(epochs=100, lr_base=1e-4, batch_size=4)
    cfg.adaptation = TrainingConfig(epochs=100, lr_base=1e-4, lr_modulation=1e-2, batch_size=4)
    return cfg


PROFILES = {"desk": desk_profile, "full": full_profile}
