
import numpy as np
import pytest
import torch
from PIL import Image
from skimage.metrics import structural_similarity

from rankone_pnp.domains import DomainSpec, prepare_domain
from rankone_pnp.data import DatasetSpec
from rankone_pnp.errors import MissingModulationError
from rankone_pnp.evaluation import (
    EvalMatrix,
    NormProfile,
    Reconstructor,
    emit_report,
    eval_matrix,
    load_report,
    metric_image,
    norm_profile,
    psnr,
    residual_figure,
    ssim,
)
from rankone_pnp.modulation import DomainRegistry, init_modulation, zero_modulation
from rankone_pnp.operators import OperatorConfig
from rankone_pnp.prior import build_prior
from rankone_pnp.solver import SolverConfig, unrolled_reconstruct


def skimage_ssim(a, b):
    return structural_similarity(a, b, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                 use_sample_covariance=False)


# --------------------------------------------------------------------------- PSNR


def test_psnr_cap_and_uniform_error(rng):
    x = rng.random((16, 16))
    assert psnr(x, x) == 100.0
    assert psnr(x, x + 0.1) == pytest.approx(20.0, abs=1e-9)


def test_psnr_loop_oracle(rng):
    x, y = rng.random((12, 9)), rng.random((12, 9))
    total = 0.0
    for i in range(12):
        for j in range(9):
            total += (x[i, j] - y[i, j]) ** 2
    expect = 10 * np.log10(1.0 / (total / 108))
    assert psnr(x, y) == pytest.approx(expect, rel=1e-12)
    assert psnr(x, y, peak=2.0) == pytest.approx(expect + 20 * np.log10(2), rel=1e-12)


def test_psnr_errors(rng):
    with pytest.raises(ValueError):
        psnr(rng.random((4, 4)), rng.random((4, 5)))
    with pytest.raises(ValueError):
        psnr(rng.random((4, 4)), rng.random((4, 4)), peak=0)


def test_metric_symmetry(rng):
    a, b = rng.random((32, 32)), rng.random((32, 32))
    assert psnr(a, b) == psnr(b, a)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-15)


def test_psnr_decreases_with_noise(rng):
    x = rng.random((32, 32))
    x_hat = x + 0.01 * rng.standard_normal((32, 32))
    base = psnr(x, x_hat)
    noisy = [psnr(x, x_hat + 0.02 * rng.standard_normal((32, 32))) for _ in range(50)]
    assert np.mean(noisy) < base


# --------------------------------------------------------------------------- SSIM


def test_ssim_identical_and_range(rng):
    x = rng.random((32, 32))
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)
    assert -1 <= ssim(x, rng.random((32, 32))) <= 1


def test_ssim_matches_skimage(rng):
    for _ in range(5):
        a = rng.random((40, 40))
        b = np.clip(a + 0.1 * rng.standard_normal((40, 40)), 0, 1)
        assert ssim(a, b) == pytest.approx(skimage_ssim(a, b), abs=1e-6)


def test_ssim_inverted_pattern_low():
    checker = (np.indices((32, 32)).sum(0) // 4 % 2).astype(float)
    assert ssim(checker, 1 - checker) < 0.5


def test_ssim_constant_images_finite():
    s = ssim(np.full((24, 24), 0.2), np.full((24, 24), 0.7))
    assert np.isfinite(s) and -1 <= s <= 1


def test_ssim_channel_average(rng):
    a, b = rng.random((2, 32, 32)), rng.random((2, 32, 32))
    assert ssim(a, b) == pytest.approx(0.5 * (ssim(a[0], b[0]) + ssim(a[1], b[1])))


def test_metric_image_magnitude():
    x = torch.tensor([[[[3.0]], [[4.0]]]])
    assert metric_image(x).item() == 5.0
    y = torch.ones(1, 1, 2, 2)
    assert metric_image(y) is y


# --------------------------------------------------------------------------- residual figure


def test_residual_figure(tmp_path, rng):
    x = rng.random((16, 16))
    assert np.count_nonzero(residual_figure(x, x)) == 0
    # 0.05 is not exactly representable, so start from zeros to keep the error exactly 0.05
    zero = np.zeros((16, 16))
    assert np.all(residual_figure(zero, zero + 0.05) == 1.0)
    assert np.all(residual_figure(x, x + 0.05) >= 1.0 - 1e-12)
    y = rng.random((16, 16))
    res = residual_figure(x, y, gain=20, path=tmp_path / "r.png")
    for i in range(16):
        for j in range(16):
            assert res[i, j] == min(1.0, max(0.0, 20 * abs(x[i, j] - y[i, j])))
    img = np.asarray(Image.open(tmp_path / "r.png"))
    assert img.shape == (16, 16) and img.dtype == np.uint8


# --------------------------------------------------------------------------- norm profile


def test_norm_profile_single_layer():
    net = build_prior(1, seed=0, blocks=3, features=8, dtype=torch.float64)
    mod = zero_modulation(net)
    mod.factors[2] = init_modulation(net, "d", seed=1).factors[2]
    prof = norm_profile(mod, net)
    assert prof.normalized == [0.0, 0.0, 1.0, 0.0]


def test_norm_profile_degenerate_all_zeros():
    net = build_prior(1, seed=0, blocks=3, features=8)
    assert norm_profile(zero_modulation(net), net).normalized == [0.0] * 4


def test_norm_profile_ratio_definition():
    net = build_prior(1, seed=0, blocks=2, features=4, dtype=torch.float64)
    mod = init_modulation(net, "d", seed=3)
    prof = norm_profile(mod, net)
    from rankone_pnp.modulation import combine_factors

    for l in range(net.num_layers):
        expect = combine_factors(mod.factors[l]).norm() / net.normalized_weight(l).detach().norm()
        assert prof.ratios[l] == pytest.approx(expect.item(), rel=1e-12)
    assert min(prof.normalized) == 0.0 and max(prof.normalized) == 1.0


# --------------------------------------------------------------------------- eval matrix


@pytest.fixture(scope="module")
def small_domains():
    ds = DatasetSpec(kind="shepp_logan", n_images=8, size=32, split=[0.5, 0.25, 0.25])
    src = prepare_domain(DomainSpec("src", ds, OperatorConfig(pattern="radial", acceleration=4.0)))
    ds2 = DatasetSpec(kind="ct_like", n_images=8, size=32, split=[0.5, 0.25, 0.25])
    shifted = prepare_domain(DomainSpec("ct", ds2, OperatorConfig(pattern="radial", acceleration=4.0)))
    return src, shifted


def test_single_domain_base_is_mean_psnr(small_domains):
    src, _ = small_domains
    net = build_prior(2, seed=0, blocks=2, features=4)
    cfg = SolverConfig(iterations=3)
    m = eval_matrix([src], [Reconstructor("base", net)], solver=cfg)
    out = unrolled_reconstruct(src.measurements["test"], src.op, net, None, cfg)
    truth, rec = metric_image(src.images["test"]), metric_image(out)
    expect = np.mean([psnr(a, b) for a, b in zip(truth, rec)])
    assert m.psnr["src"]["base"] == pytest.approx(expect, abs=1e-9)
    assert m.counts["src"] == 2 and len(m.samples["src"]["base"]["psnr"]) == 2


def test_modulated_source_equals_base(small_domains, tmp_path):
    src, shifted = small_domains
    net = build_prior(2, seed=0, blocks=2, features=4)
    reg = DomainRegistry(tmp_path, net.fingerprint(), source_domain="src")
    reg.put(init_modulation(net, "ct", seed=1))
    recons = [Reconstructor("base", net), Reconstructor("modulated", net, modulated=True)]
    m = eval_matrix([src, shifted], recons, reg, SolverConfig(iterations=3))
    assert m.psnr["src"]["modulated"] == m.psnr["src"]["base"]
    assert m.psnr["ct"]["modulated"] != m.psnr["ct"]["base"]
    avg = m.average()
    assert avg["base"] == pytest.approx((m.psnr["src"]["base"] + m.psnr["ct"]["base"]) / 2)
    again = eval_matrix([src, shifted], recons, reg, SolverConfig(iterations=3))
    assert again.to_dict() == m.to_dict()


def test_missing_modulation_raises(small_domains, tmp_path):
    src, shifted = small_domains
    net = build_prior(2, seed=0, blocks=2, features=4)
    reg = DomainRegistry(tmp_path, net.fingerprint(), source_domain="src")
    with pytest.raises(MissingModulationError, match="ct"):
        eval_matrix([src, shifted], [Reconstructor("modulated", net, modulated=True)], reg,
                    SolverConfig(iterations=1))
    with pytest.raises(MissingModulationError):
        eval_matrix([shifted], [Reconstructor("m", net, modulations={"src": None})], None,
                    SolverConfig(iterations=1))


# --------------------------------------------------------------------------- reports


def toy_matrix():
    return EvalMatrix(["a", "b"], ["base", "mod"],
                      {"a": {"base": 30.123456789, "mod": 31.0}, "b": {"base": 25.5, "mod": 28.25}},
                      {"a": {"base": 0.9, "mod": 0.91}, "b": {"base": 0.8, "mod": 0.85}},
                      {"a": 4, "b": 3})


def test_emit_report_table_only(tmp_path):
    written = emit_report(toy_matrix(), None, None, tmp_path)
    assert set(written) == {"table", "report"}
    assert not (tmp_path / "figures").exists()
    text = (tmp_path / "matrix.txt").read_text()
    assert "avg" in text and "30.12" in text


def test_emit_report_idempotent_and_round_trip(tmp_path, rng):
    prof = {"b": NormProfile("b", [0.1, 0.3], [0.0, 1.0])}
    figs = {"residual": rng.random((8, 8))}
    emit_report(toy_matrix(), prof, figs, tmp_path, extra={"k": 1})
    first = {p.name: p.read_bytes() for p in tmp_path.rglob("*") if p.is_file()}
    emit_report(toy_matrix(), prof, figs, tmp_path, extra={"k": 1})
    second = {p.name: p.read_bytes() for p in tmp_path.rglob("*") if p.is_file()}
    assert first == second
    back = load_report(tmp_path / "report.json")["matrix"]
    assert back.psnr == toy_matrix().psnr and back.ssim == toy_matrix().ssim
    assert back.average() == toy_matrix().average()


def test_emit_report_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="not writable"):
        emit_report(toy_matrix(), None, None, blocker / "sub")
