"""Datasets: synthetic desk-scale families and directory ingestion with manifests."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .errors import DataError, ManifestError
from .modulation import _atomic_write_bytes

log = logging.getLogger(__name__)

SYNTHETIC_KINDS = ("shepp_logan", "texture_faces", "ct_like")
LOSSLESS_SUFFIXES = {".png", ".tif", ".tiff", ".bmp", ".pgm", ".ppm", ".npy"}
IMAGE_SUFFIXES = LOSSLESS_SUFFIXES | {".jpg", ".jpeg", ".webp"}


# --------------------------------------------------------------------------- synthetic families


def _grid(size: int, oversample: int):
    n = size * oversample
    c = (np.arange(n) + 0.5) / n * 2 - 1
    return np.meshgrid(c, c, indexing="ij")


def _downsample(img: np.ndarray, factor: int) -> np.ndarray:
    n = img.shape[0] // factor
    return img.reshape(n, factor, n, factor).mean(axis=(1, 3))


def _ellipse(rr, cc, center, axes, angle):
    cos, sin = np.cos(angle), np.sin(angle)
    dr, dc = rr - center[0], cc - center[1]
    u = dr * cos + dc * sin
    v = -dr * sin + dc * cos
    return (u / axes[0]) ** 2 + (v / axes[1]) ** 2 <= 1


def _shepp_logan(rng: np.random.Generator, size: int) -> np.ndarray:
    """Randomized ellipse phantom: bright skull, darker brain, a handful of inner ellipses."""
    rr, cc = _grid(size, 2)
    img = np.zeros_like(rr)
    a0, b0 = rng.uniform(0.78, 0.9), rng.uniform(0.6, 0.72)
    tilt = rng.uniform(-0.2, 0.2)
    img[_ellipse(rr, cc, (0, 0), (a0, b0), tilt)] = rng.uniform(0.85, 1.0)
    img[_ellipse(rr, cc, (-0.02, 0), (a0 - 0.07, b0 - 0.06), tilt)] = rng.uniform(0.25, 0.35)
    for _ in range(rng.integers(5, 9)):
        center = rng.uniform(-0.45, 0.45, size=2)
        axes = rng.uniform(0.06, 0.28, size=2)
        mask = _ellipse(rr, cc, center, axes, rng.uniform(0, np.pi))
        inside = _ellipse(rr, cc, (-0.02, 0), (a0 - 0.08, b0 - 0.07), tilt)
        img[mask & inside] += rng.choice([-1, 1]) * rng.uniform(0.1, 0.3)
    return np.clip(_downsample(img, 2), 0, 1)


def _texture_faces(rng: np.random.Generator, size: int) -> np.ndarray:
    """Smoothly shaded face-like blob on a soft background with a few soft edges."""
    rr, cc = _grid(size, 1)
    img = 0.35 + 0.15 * (rng.uniform(-1, 1) * rr + rng.uniform(-1, 1) * cc)
    for _ in range(rng.integers(4, 7)):
        center = rng.uniform(-0.8, 0.8, size=2)
        width = rng.uniform(0.25, 0.6)
        img += rng.uniform(-0.25, 0.25) * np.exp(-((rr - center[0]) ** 2 + (cc - center[1]) ** 2) / (2 * width**2))
    a, b = rng.uniform(0.5, 0.65), rng.uniform(0.38, 0.5)
    dist = (rr / a) ** 2 + (cc / b) ** 2
    face = 1 / (1 + np.exp((dist - 1) / 0.08))
    shade = 0.55 + 0.2 * np.exp(-dist)
    img = img * (1 - face) + face * shade
    for side in (-1, 1):
        img -= 0.25 * np.exp(-((rr + 0.15) ** 2 + (cc - side * 0.2 * b / 0.45) ** 2) / (2 * 0.06**2)) * face
    img -= 0.15 * np.exp(-((rr - 0.3) ** 2) / (2 * 0.04**2) - cc**2 / (2 * 0.15**2)) * face
    return np.clip(img, 0, 1)


def _ct_like(rng: np.random.Generator, size: int) -> np.ndarray:
    """Piecewise-constant chest slice: body, dark lungs, bone ring and thin bright vessels."""
    rr, cc = _grid(size, 2)
    img = np.zeros_like(rr)
    a, b = rng.uniform(0.62, 0.72), rng.uniform(0.85, 0.95)
    body = _ellipse(rr, cc, (0, 0), (a, b), 0)
    img[body] = rng.uniform(0.45, 0.55)
    ring = body & ~_ellipse(rr, cc, (0, 0), (a - 0.05, b - 0.05), 0)
    img[ring] = 0.95
    for side in (-1, 1):
        lung = _ellipse(rr, cc, (rng.uniform(-0.1, 0.05), side * rng.uniform(0.38, 0.45)),
                        (rng.uniform(0.38, 0.48), rng.uniform(0.2, 0.26)), rng.uniform(-0.2, 0.2))
        img[lung] = rng.uniform(0.05, 0.12)
        for _ in range(rng.integers(7, 11)):
            p0 = np.array([rng.uniform(-0.35, 0.3), side * rng.uniform(0.25, 0.6)])
            direction = rng.normal(size=2)
            direction /= np.linalg.norm(direction)
            length, width = rng.uniform(0.1, 0.35), rng.uniform(0.012, 0.022)
            t = np.clip((rr - p0[0]) * direction[0] + (cc - p0[1]) * direction[1], 0, length)
            d2 = (rr - p0[0] - t * direction[0]) ** 2 + (cc - p0[1] - t * direction[1]) ** 2
            img[lung & (d2 <= width**2)] = rng.uniform(0.7, 0.9)
    img[_ellipse(rr, cc, (0.55, 0), (0.09, 0.09), 0)] = 0.95
    img[_ellipse(rr, cc, (-0.1, 0.02), (0.12, 0.1), 0)] = 0.65
    return np.clip(_downsample(img, 2), 0, 1)


_GENERATORS = {"shepp_logan": _shepp_logan, "texture_faces": _texture_faces, "ct_like": _ct_like}


def synth_dataset(kind: str, n: int, size: int = 64, seed: int = 0) -> np.ndarray:
    """``(n, 1, size, size)`` float64 images in [0, 1]; image ``i`` depends only on ``(seed, i)``."""
    if kind not in _GENERATORS:
        raise ValueError(f"unknown synthetic kind {kind!r}; expected one of {SYNTHETIC_KINDS}")
    gen = _GENERATORS[kind]
    images = [gen(np.random.default_rng([seed, i]), size) for i in range(n)]
    return np.stack(images)[:, None].astype(np.float64)


def mean_gradient_magnitude(images: np.ndarray) -> np.ndarray:
    """Per-image mean of ``|grad|`` (forward differences, pixel units)."""
    images = np.asarray(images)
    gr, gc = np.gradient(images, axis=(-2, -1))
    mag = np.sqrt(gr**2 + gc**2)
    return mag.reshape(mag.shape[0], -1).mean(axis=1)


# --------------------------------------------------------------------------- dataset specs


@dataclass
class DatasetSpec:
    # a synthetic kind, or "directory" to read image files from ``source``
    kind: str = "shepp_logan"
    source: Optional[str] = None
    n_images: int = 64
    size: int = 64
    channels: int = 1
    split: list = field(default_factory=lambda: [0.75, 0.125, 0.125])
    seed: int = 0

    def __post_init__(self):
        if len(self.split) != 3 or any(f < 0 for f in self.split) or abs(sum(self.split) - 1) > 1e-9:
            raise ValueError(f"split fractions must be three non-negative numbers summing to 1, got {self.split}")
        if self.kind not in SYNTHETIC_KINDS + ("directory",):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if self.kind == "directory" and not self.source:
            raise ValueError("dataset kind 'directory' needs a source path")


@dataclass
class Dataset:
    images: dict[str, np.ndarray]
    manifest: dict

    def __getitem__(self, split: str) -> np.ndarray:
        return self.images[split]


def split_counts(n: int, fractions) -> tuple[int, int, int]:
    n_train = int(round(n * fractions[0]))
    n_val = min(n - n_train, int(round(n * fractions[1])))
    return n_train, n_val, n - n_train - n_val


def _split_indices(n: int, fractions, seed: int) -> dict[str, np.ndarray]:
    order = np.random.default_rng(seed).permutation(n)
    n_train, n_val, _ = split_counts(n, fractions)
    return {"train": np.sort(order[:n_train]), "val": np.sort(order[n_train:n_train + n_val]),
            "test": np.sort(order[n_train + n_val:])}


def _checksum(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _center_crop_resize(img: Image.Image, size: int) -> Image.Image:
    w, h = img.size
    side = min(w, h)
    left, top = (w - side) // 2, (h - side) // 2
    img = img.crop((left, top, left + side, top + side))
    if side != size:
        img = img.resize((size, size), Image.BICUBIC)
    return img


def _load_image(path: Path, size: int, channels: int) -> np.ndarray:
    if path.suffix.lower() == ".npy":
        arr = np.load(path).astype(np.float64)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.shape[-2:] != (size, size):
            raise DataError(f"{path}: array shape {arr.shape} does not match size {size}")
    else:
        with Image.open(path) as img:
            img = img.convert("L" if channels == 1 else "RGB")
            img = _center_crop_resize(img, size)
            arr = np.asarray(img, dtype=np.float64)
        arr = arr[None] if arr.ndim == 2 else np.moveaxis(arr, -1, 0)
    lo, hi = arr.min(), arr.max()
    arr = (arr - lo) / (hi - lo) if hi > lo else np.zeros_like(arr)
    if arr.shape[0] != channels:
        raise DataError(f"{path}: has {arr.shape[0]} channels, expected {channels}")
    return arr


def ingest(spec: DatasetSpec, manifest_path=None) -> Dataset:
    """Load, normalize to [0, 1], split deterministically, and optionally write a manifest.

    Undecodable files are skipped with a warning; their count is recorded.
    """
    if spec.kind == "directory":
        root = Path(spec.source)
        files = sorted(p for p in root.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
        arrays, records, skipped = [], [], 0
        for p in files:
            try:
                arr = _load_image(p, spec.size, spec.channels)
            except Exception as exc:  # noqa: BLE001 - any decode failure is a skip
                log.warning("skipping undecodable file %s: %s", p, exc)
                skipped += 1
                continue
            arrays.append(arr)
            records.append({"path": str(p.relative_to(root)), "checksum": _checksum(p.read_bytes()),
                            "lossy": p.suffix.lower() not in LOSSLESS_SUFFIXES})
        if not arrays:
            raise DataError(f"no decodable images under {root}")
        images = np.stack(arrays)
        source = str(root)
    else:
        images = synth_dataset(spec.kind, spec.n_images, spec.size, spec.seed)
        records = [{"path": f"{spec.kind}:{spec.seed}:{i}", "checksum": _checksum(images[i].tobytes()), "lossy": False}
                   for i in range(len(images))]
        skipped = 0
        source = f"synthetic:{spec.kind}"

    idx = _split_indices(len(images), spec.split, spec.seed)
    for name, frac in zip(("train", "val", "test"), spec.split):
        if frac > 0 and len(idx[name]) == 0:
            raise DataError(f"split {name!r} is empty ({len(images)} images, fraction {frac})")
    split_of = {int(i): name for name, ids in idx.items() for i in ids}
    for i, rec in enumerate(records):
        rec["split"] = split_of[i]
    manifest = {"source": source, "kind": spec.kind, "size": spec.size, "channels": spec.channels,
                "split": list(spec.split), "seed": spec.seed, "skipped": skipped, "files": records}
    if manifest_path is not None:
        write_manifest(manifest, manifest_path)
    return Dataset({name: images[ids] for name, ids in idx.items()}, manifest)


def write_manifest(manifest: dict, path) -> None:
    _atomic_write_bytes(Path(path), (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())


def verify_manifest(manifest_path) -> None:
    """Raise ``ManifestError`` if any file listed in a directory manifest changed on disk."""
    manifest = json.loads(Path(manifest_path).read_text())
    if not manifest["source"].startswith("synthetic:"):
        root = Path(manifest["source"])
        bad = [r["path"] for r in manifest["files"]
               if not (root / r["path"]).exists() or _checksum((root / r["path"]).read_bytes()) != r["checksum"]]
    else:
        images = synth_dataset(manifest["kind"], len(manifest["files"]), manifest["size"], manifest["seed"])
        bad = [r["path"] for i, r in enumerate(manifest["files"]) if _checksum(images[i].tobytes()) != r["checksum"]]
    if bad:
        raise ManifestError(f"{len(bad)} manifest entries do not match their checksums, e.g. {bad[0]}")
