"""Rank-one weight modulation and the per-domain modulation store.

Convolution weights use PyTorch layout ``(C_out, C_in, k, k)``. A layer's
modulation is the outer product of four vectors (kernel rows, kernel columns,
input channels, output channels) and is applied multiplicatively as
``W * (1 + M)``, so all-zero factors leave the backbone untouched.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Optional, Sequence

import torch
import torch.nn.functional as F
import safetensors.torch
from safetensors import safe_open

from .errors import FingerprintMismatchError, UnknownDomainError

FACTOR_NAMES = ("kernel_row", "kernel_col", "in_channel", "out_channel")
RANK_ONE = "rank_one"
CHANNEL_ONLY = "channel_only"


@dataclass
class LayerFactors:
    kernel_row: torch.Tensor
    kernel_col: torch.Tensor
    in_channel: torch.Tensor
    out_channel: torch.Tensor

    def tensors(self) -> tuple[torch.Tensor, ...]:
        return (self.kernel_row, self.kernel_col, self.in_channel, self.out_channel)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        """Shape of the weight tensor these factors modulate, ``(C_out, C_in, k, k)``."""
        return (self.out_channel.numel(), self.in_channel.numel(), self.kernel_row.numel(), self.kernel_col.numel())

    def map(self, fn) -> "LayerFactors":
        return LayerFactors(*(fn(t) for t in self.tensors()))


def combine_factors(factors: LayerFactors) -> torch.Tensor:
    """``M[o, i, a, b] = out[o] * in[i] * row[a] * col[b]``."""
    for name, t in zip(FACTOR_NAMES, factors.tensors()):
        if t.dim() != 1:
            raise ValueError(f"factor {name} must be a vector, got shape {tuple(t.shape)}")
    return torch.einsum("o,i,a,b->oiab", factors.out_channel, factors.in_channel,
                        factors.kernel_row, factors.kernel_col)


def _check_shape(weight: torch.Tensor, factors: LayerFactors) -> None:
    if tuple(weight.shape) != factors.shape:
        raise ValueError(f"factors for weight shape {factors.shape} do not match weight {tuple(weight.shape)}")


def effective_weights(weight: torch.Tensor, factors: LayerFactors) -> torch.Tensor:
    _check_shape(weight, factors)
    return weight * (1 + combine_factors(factors))


def modulated_conv(u: torch.Tensor, weight: torch.Tensor, factors: Optional[LayerFactors],
                   bias: Optional[torch.Tensor] = None, path: str = "dense") -> torch.Tensor:
    """Same-padded convolution of ``u`` with ``weight * (1 + M)``.

    ``path='dense'`` forms the modulated weight and convolves once.
    ``path='decomposed'`` never touches the combined tensor: it adds to the
    plain convolution a term that scales input channels, convolves with
    kernel-modulated filters and scales output channels.
    """
    pad = weight.shape[-1] // 2
    if u.shape[-3] != weight.shape[1]:
        raise ValueError(f"input has {u.shape[-3]} channels, weight expects {weight.shape[1]}")
    if factors is None:
        return F.conv2d(u, weight, bias, padding=pad)
    _check_shape(weight, factors)
    if path == "dense":
        return F.conv2d(u, effective_weights(weight, factors), bias, padding=pad)
    if path != "decomposed":
        raise ValueError(f"unknown path {path!r}")
    plain = F.conv2d(u, weight, bias, padding=pad)
    u_mod = u * factors.in_channel[:, None, None]
    w_mod = weight * torch.outer(factors.kernel_row, factors.kernel_col)
    product = F.conv2d(u_mod, w_mod, padding=pad) * factors.out_channel[:, None, None]
    return plain + product


@dataclass
class ModulationSet:
    """Per-layer rank-one factors for one domain.

    Layers missing from ``factors`` are unmodulated. ``trainable`` names the
    factor vectors that are free parameters (all four for rank-one modulation,
    only ``in_channel`` for the channel-only baseline).
    """

    domain_id: str
    factors: dict[int, LayerFactors]
    backbone_fingerprint: Optional[str] = None
    seed: int = 0
    mode: str = RANK_ONE
    trainable: tuple[str, ...] = FACTOR_NAMES
    metadata: dict = field(default_factory=dict)

    @property
    def layers(self) -> list[int]:
        return sorted(self.factors)

    def parameters(self) -> list[torch.Tensor]:
        return [getattr(self.factors[l], name) for l in self.layers for name in self.trainable]

    @property
    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def to(self, dtype: torch.dtype) -> "ModulationSet":
        return self._with(lambda t: t.detach().to(dtype).clone())

    def detached(self) -> "ModulationSet":
        return self._with(lambda t: t.detach().clone())

    def requires_grad_(self, flag: bool = True) -> "ModulationSet":
        for p in self.parameters():
            p.requires_grad_(flag)
        return self

    def _with(self, fn) -> "ModulationSet":
        return ModulationSet(self.domain_id, {l: f.map(fn) for l, f in self.factors.items()},
                             self.backbone_fingerprint, self.seed, self.mode, tuple(self.trainable),
                             dict(self.metadata))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for l in self.layers:
            for name, t in zip(FACTOR_NAMES, self.factors[l].tensors()):
                h.update(f"{l}.{name}".encode())
                h.update(t.detach().to(torch.float64).contiguous().numpy().tobytes())
        return h.hexdigest()

    def validate_against(self, layer_shapes: Sequence[tuple[int, int, int, int]]) -> None:
        for l, f in self.factors.items():
            if not 0 <= l < len(layer_shapes):
                raise ValueError(f"modulation layer {l} outside network with {len(layer_shapes)} layers")
            if f.shape != tuple(layer_shapes[l]):
                raise ValueError(f"modulation for layer {l} has shape {f.shape}, network layer is {tuple(layer_shapes[l])}")


def _layer_shapes(net) -> list[tuple[int, int, int, int]]:
    return [tuple(s) for s in net.layer_shapes]


def _resolve_layers(net, layers: Optional[Iterable[int]]) -> list[int]:
    n = len(_layer_shapes(net))
    if layers is None:
        return list(range(n))
    layers = sorted(set(int(l) for l in layers))
    if not layers:
        raise ValueError("layer subset must be non-empty")
    bad = [l for l in layers if not 0 <= l < n]
    if bad:
        raise ValueError(f"layers {bad} outside network with {n} layers")
    return layers


def init_modulation(net, domain_id: str, seed: int = 0, layers: Optional[Iterable[int]] = None,
                    mode: str = RANK_ONE) -> ModulationSet:
    """Draw each factor vector i.i.d. from ``U[-1/sqrt(f), 1/sqrt(f)]`` with ``f`` its length.

    In ``channel_only`` mode the kernel and output-channel vectors are fixed to
    ones, so the layer multiplier reduces to a per-input-channel scale.
    """
    gen = torch.Generator().manual_seed(int(seed))
    shapes = _layer_shapes(net)
    factors = {}

    def draw(n):
        bound = 1.0 / math.sqrt(n)
        return (torch.rand(n, generator=gen, dtype=torch.float64) * 2 - 1) * bound

    for l in _resolve_layers(net, layers):
        c_out, c_in, kh, kw = shapes[l]
        if mode == RANK_ONE:
            factors[l] = LayerFactors(draw(kh), draw(kw), draw(c_in), draw(c_out))
        elif mode == CHANNEL_ONLY:
            factors[l] = LayerFactors(torch.ones(kh, dtype=torch.float64), torch.ones(kw, dtype=torch.float64),
                                      draw(c_in), torch.ones(c_out, dtype=torch.float64))
        else:
            raise ValueError(f"unknown modulation mode {mode!r}")
    trainable = FACTOR_NAMES if mode == RANK_ONE else ("in_channel",)
    fp = net.fingerprint() if hasattr(net, "fingerprint") else None
    return ModulationSet(domain_id, factors, fp, int(seed), mode, trainable)


def zero_modulation(net, domain_id: str = "zero", layers: Optional[Iterable[int]] = None) -> ModulationSet:
    shapes = _layer_shapes(net)
    factors = {}
    for l in _resolve_layers(net, layers):
        c_out, c_in, kh, kw = shapes[l]
        factors[l] = LayerFactors(*(torch.zeros(n, dtype=torch.float64) for n in (kh, kw, c_in, c_out)))
    fp = net.fingerprint() if hasattr(net, "fingerprint") else None
    return ModulationSet(domain_id, factors, fp)


def count_modulation_params(net, layer_subset: Optional[Iterable[int]] = None) -> int:
    """Number of rank-one parameters, ``sum(k + k + C_in + C_out)`` over the subset."""
    shapes = _layer_shapes(net)
    return sum(kh + kw + c_in + c_out for c_out, c_in, kh, kw in (shapes[l] for l in _resolve_layers(net, layer_subset)))


def count_channel_params(net, layer_subset: Optional[Iterable[int]] = None) -> int:
    shapes = _layer_shapes(net)
    return sum(shapes[l][1] for l in _resolve_layers(net, layer_subset))


# --------------------------------------------------------------------------- persistence


def _atomic_write_bytes(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def safetensors_bytes(tensors: dict, metadata: dict) -> bytes:
    """Serialize with a canonical header so equal inputs give byte-identical files.

    The library emits the metadata map in hash order; the header is re-encoded
    with sorted keys and re-padded to 8 bytes (tensor offsets are relative to
    the data section, so they stay valid).
    """
    raw = safetensors.torch.save(tensors, metadata=metadata)
    n = int.from_bytes(raw[:8], "little")
    header = json.loads(raw[8 : 8 + n])
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    text += b" " * (-len(text) % 8)
    return len(text).to_bytes(8, "little") + text + raw[8 + n :]


def save_modulation(mod: ModulationSet, path) -> None:
    """Write factors in double precision plus a JSON metadata header (atomic)."""
    path = Path(path)
    tensors = {}
    for l in mod.layers:
        for name, t in zip(FACTOR_NAMES, mod.factors[l].tensors()):
            tensors[f"layer{l:02d}.{name}"] = t.detach().to(torch.float64).contiguous()
    meta = {
        "domain_id": mod.domain_id,
        "backbone_fingerprint": mod.backbone_fingerprint or "",
        "seed": str(mod.seed),
        "mode": mod.mode,
        "trainable": json.dumps(list(mod.trainable)),
        "layers": json.dumps(mod.layers),
        "training": json.dumps(mod.metadata, sort_keys=True, default=str),
    }
    _atomic_write_bytes(path, safetensors_bytes(tensors, meta))


def load_modulation(path) -> ModulationSet:
    path = Path(path)
    with safe_open(str(path), framework="pt") as fh:
        meta = fh.metadata()
    tensors = safetensors.torch.load_file(str(path))
    layers = json.loads(meta["layers"])
    factors = {l: LayerFactors(*(tensors[f"layer{l:02d}.{name}"] for name in FACTOR_NAMES)) for l in layers}
    return ModulationSet(
        domain_id=meta["domain_id"],
        factors=factors,
        backbone_fingerprint=meta["backbone_fingerprint"] or None,
        seed=int(meta["seed"]),
        mode=meta["mode"],
        trainable=tuple(json.loads(meta["trainable"])),
        metadata=json.loads(meta["training"]),
    )


def _file_sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class DomainRegistry:
    """Directory of per-domain modulation files bound to one backbone.

    Layout: ``index.json`` plus ``domains/<domain_id>.safetensors``. Writes go
    through temp-file + rename; other entries are never rewritten.
    """

    INDEX = "index.json"

    def __init__(self, root, backbone_fingerprint: str, source_domain: Optional[str] = None):
        self.root = Path(root)
        index_path = self.root / self.INDEX
        if index_path.exists():
            index = json.loads(index_path.read_text())
            if index["backbone_fingerprint"] != backbone_fingerprint:
                raise FingerprintMismatchError(
                    f"registry at {self.root} is bound to backbone {index['backbone_fingerprint'][:12]}, "
                    f"not {backbone_fingerprint[:12]}"
                )
            if source_domain is not None and index.get("source_domain") not in (None, source_domain):
                raise ValueError(f"registry source domain is {index['source_domain']!r}, not {source_domain!r}")
            self._index = index
            if source_domain is not None and index.get("source_domain") is None:
                self._index["source_domain"] = source_domain
                self._write_index()
        else:
            self._index = {"backbone_fingerprint": backbone_fingerprint, "source_domain": source_domain, "entries": {}}
            self._write_index()

    @classmethod
    def open(cls, root) -> "DomainRegistry":
        index = json.loads((Path(root) / cls.INDEX).read_text())
        return cls(root, index["backbone_fingerprint"])

    @property
    def backbone_fingerprint(self) -> str:
        return self._index["backbone_fingerprint"]

    @property
    def source_domain(self) -> Optional[str]:
        return self._index.get("source_domain")

    def _write_index(self) -> None:
        data = json.dumps(self._index, indent=2, sort_keys=True).encode()
        _atomic_write_bytes(self.root / self.INDEX, data)

    def path_for(self, domain_id: str) -> Path:
        safe = "".join(c if c.isalnum() or c in "-_." else "_" for c in domain_id)
        return self.root / "domains" / f"{safe}.safetensors"

    def put(self, mod: ModulationSet) -> Path:
        if mod.backbone_fingerprint != self.backbone_fingerprint:
            raise FingerprintMismatchError(
                f"modulation {mod.domain_id!r} is bound to backbone {str(mod.backbone_fingerprint)[:12]}, "
                f"registry holds {self.backbone_fingerprint[:12]}"
            )
        path = self.path_for(mod.domain_id)
        save_modulation(mod, path)
        self._index["entries"][mod.domain_id] = {
            "file": str(path.relative_to(self.root)),
            "sha256": _file_sha256(path),
            "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
            "mode": mod.mode,
            "layers": mod.layers,
            "param_count": mod.param_count,
            "metadata": json.loads(json.dumps(mod.metadata, default=str)),
        }
        self._write_index()
        return path

    def get(self, domain_id: str, backbone_fingerprint: Optional[str] = None) -> ModulationSet:
        if backbone_fingerprint is not None and backbone_fingerprint != self.backbone_fingerprint:
            raise FingerprintMismatchError(
                f"requested backbone {backbone_fingerprint[:12]} but registry holds {self.backbone_fingerprint[:12]}"
            )
        entry = self._index["entries"].get(domain_id)
        if entry is None:
            raise UnknownDomainError(domain_id, self.list())
        mod = load_modulation(self.root / entry["file"])
        if mod.backbone_fingerprint != self.backbone_fingerprint:
            raise FingerprintMismatchError(f"stored modulation {domain_id!r} is bound to a different backbone")
        return mod

    def resolve(self, domain_id: str, backbone_fingerprint: Optional[str] = None) -> Optional[ModulationSet]:
        """Modulation for ``domain_id``; ``None`` for the backbone's own source domain."""
        if domain_id == self.source_domain and domain_id not in self._index["entries"]:
            if backbone_fingerprint is not None and backbone_fingerprint != self.backbone_fingerprint:
                raise FingerprintMismatchError("backbone fingerprint does not match registry")
            return None
        return self.get(domain_id, backbone_fingerprint)

    def list(self) -> list[str]:
        return sorted(self._index["entries"])

    def entries(self) -> dict[str, dict]:
        return json.loads(json.dumps(self._index["entries"]))

    def remove(self, domain_id: str) -> None:
        entry = self._index["entries"].pop(domain_id, None)
        if entry is None:
            raise UnknownDomainError(domain_id, self.list())
        self._write_index()
        (self.root / entry["file"]).unlink(missing_ok=True)

    def __contains__(self, domain_id: str) -> bool:
        return domain_id in self._index["entries"]
