import json

import numpy as np
import pytest
import torch
from PIL import Image

from rankone_pnp.data import DatasetSpec, ingest, mean_gradient_magnitude, split_counts, synth_dataset, verify_manifest
from rankone_pnp.domains import DomainSpec, NoiseConfig, prepare_domain
from rankone_pnp.errors import DataError, ManifestError
from rankone_pnp.operators import OperatorConfig, snr_db


@pytest.mark.parametrize("kind", ["shepp_logan", "texture_faces", "ct_like"])
def test_synth_deterministic_and_range(kind):
    a = synth_dataset(kind, 3, size=64, seed=0)
    assert a.shape == (3, 1, 64, 64)
    assert np.array_equal(a, synth_dataset(kind, 3, size=64, seed=0))
    assert a.min() >= 0 and a.max() <= 1
    assert not np.array_equal(a, synth_dataset(kind, 3, size=64, seed=1))


def test_single_shepp_logan_twice():
    assert np.array_equal(synth_dataset("shepp_logan", 1, 64, 0), synth_dataset("shepp_logan", 1, 64, 0))


def test_families_separate_by_gradient_statistic():
    stats = {k: mean_gradient_magnitude(synth_dataset(k, 100, 64, seed=0))
             for k in ("shepp_logan", "texture_faces", "ct_like")}
    kinds = list(stats)
    for i in range(3):
        for j in range(i + 1, 3):
            a, b = stats[kinds[i]], stats[kinds[j]]
            sigma = max(a.std(), b.std())
            assert abs(a.mean() - b.mean()) > 3 * sigma


def test_split_counts():
    assert split_counts(100, [0.85, 0.15, 0.0]) == (85, 15, 0)
    assert split_counts(200, [0.75, 0.15, 0.10]) == (150, 30, 20)


def test_ingest_synthetic_splits_and_manifest(tmp_path):
    spec = DatasetSpec(kind="shepp_logan", n_images=100, size=32, split=[0.85, 0.15, 0.0], seed=4)
    ds = ingest(spec, tmp_path / "m1.json")
    assert [len(ds[s]) for s in ("train", "val", "test")] == [85, 15, 0]
    ingest(spec, tmp_path / "m2.json")
    assert (tmp_path / "m1.json").read_bytes() == (tmp_path / "m2.json").read_bytes()
    manifest = json.loads((tmp_path / "m1.json").read_text())
    assert {r["split"] for r in manifest["files"]} == {"train", "val"}
    verify_manifest(tmp_path / "m1.json")


def test_ct_style_split():
    ds = ingest(DatasetSpec(kind="ct_like", n_images=200, size=16, split=[0.75, 0.15, 0.10]))
    assert [len(ds[s]) for s in ("train", "val", "test")] == [150, 30, 20]


def test_split_fraction_validation():
    with pytest.raises(ValueError):
        DatasetSpec(split=[0.5, 0.2, 0.2])
    with pytest.raises(ValueError):
        DatasetSpec(kind="mnist")
    with pytest.raises(DataError, match="empty"):
        ingest(DatasetSpec(n_images=2, size=16, split=[0.8, 0.1, 0.1]))


def write_images(root, n=6, size=40):
    rng = np.random.default_rng(0)
    root.mkdir(parents=True, exist_ok=True)
    for i in range(n):
        arr = (rng.random((size, size + 8)) * 200 + 20).astype(np.uint8)
        Image.fromarray(arr).save(root / f"img{i}.png")
    return root


def test_ingest_directory(tmp_path, caplog):
    root = write_images(tmp_path / "imgs")
    (root / "broken.png").write_bytes(b"not an image")
    Image.fromarray(np.zeros((40, 40, 3), np.uint8) + 90).save(root / "photo.jpg")
    ds = ingest(DatasetSpec(kind="directory", source=str(root), size=32, split=[0.5, 0.5, 0.0]),
                tmp_path / "manifest.json")
    assert "broken.png" in caplog.text
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["skipped"] == 1
    assert len(manifest["files"]) == 7
    lossy = {r["path"]: r["lossy"] for r in manifest["files"]}
    assert lossy["photo.jpg"] and not lossy["img0.png"]
    images = np.concatenate([ds["train"], ds["val"]])
    assert images.shape[1:] == (1, 32, 32)
    assert images.min() >= 0 and images.max() <= 1
    verify_manifest(tmp_path / "manifest.json")
    Image.fromarray(np.zeros((40, 48), np.uint8)).save(root / "img0.png")
    with pytest.raises(ManifestError):
        verify_manifest(tmp_path / "manifest.json")


def test_prepare_domain_measurements():
    spec = DomainSpec("d", DatasetSpec(n_images=8, size=32, split=[0.5, 0.25, 0.25]),
                      OperatorConfig(pattern="radial", acceleration=4.0), NoiseConfig(snr_db=20.0, seed=2))
    dom = prepare_domain(spec)
    assert dom.images["train"].shape == (4, 2, 32, 32)
    assert torch.count_nonzero(dom.images["train"][:, 1]) == 0  # zero imaginary channel
    clean = dom.op.forward(dom.images["test"].double())
    realized = snr_db(clean, dom.measurements["test"].to(torch.complex128))
    assert (realized - 20).abs().max() < 0.1
    again = prepare_domain(spec)
    assert torch.equal(again.measurements["val"], dom.measurements["val"])


def test_prepare_domain_gaussian_operator():
    spec = DomainSpec("g", DatasetSpec(n_images=4, size=16, split=[0.5, 0.25, 0.25]),
                      OperatorConfig(kind="gaussian_matrix", m=64), gamma=1.2)
    dom = prepare_domain(spec)
    assert dom.images["train"].shape == (2, 1, 16, 16)
    assert dom.measurements["train"].shape == (2, 64) and not dom.measurements["train"].is_complex()
