import pytest
import torch

from rankone_pnp.modulation import zero_modulation
from rankone_pnp.prior import (
    ConvBlockSpec,
    SpectralNormState,
    ar_apply,
    build_prior,
    estimated_sigma,
    load_checkpoint,
    power_iteration,
    save_checkpoint,
    spectral_normalize,
)
from rankone_pnp.errors import FingerprintMismatchError

from conftest import rel_err


def fresh_state(weight, seed=0):
    g = torch.Generator().manual_seed(seed)
    u = torch.randn(weight.shape[0], generator=g, dtype=weight.dtype)
    v = torch.randn(weight[0].numel(), generator=g, dtype=weight.dtype)
    return SpectralNormState(u / u.norm(), v / v.norm())


def test_full_scale_parameter_count():
    net = build_prior(1, seed=0)
    assert net.num_layers == 13
    manual = 3 * 3 * 1 * 64 + 11 * 3 * 3 * 64 * 64 + 3 * 3 * 64 * 1
    assert net.weight_count() == manual == 406_656
    assert net.bias_count() == 64 * 12 + 1
    acts = [s.has_activation for s in net.specs]
    assert acts == [True] * 12 + [False]


def test_two_channel_io_layers():
    net = build_prior(2, seed=0, blocks=3, features=8)
    shapes = net.layer_shapes
    assert shapes[0] == (8, 2, 3, 3) and shapes[-1] == (2, 8, 3, 3)
    assert shapes[1:-1] == [(8, 8, 3, 3)] * 2


def test_build_is_deterministic():
    a, b = build_prior(1, seed=5, blocks=3, features=8), build_prior(1, seed=5, blocks=3, features=8)
    for (ka, ta), (kb, tb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert ka == kb and torch.equal(ta, tb)
    assert a.fingerprint() == b.fingerprint()
    assert build_prior(1, seed=6, blocks=3, features=8).fingerprint() != a.fingerprint()


def test_build_argument_validation():
    with pytest.raises(ValueError):
        build_prior(4)
    with pytest.raises(ValueError):
        ConvBlockSpec(2, 1, 1, True)
    with pytest.raises(ValueError):
        ConvBlockSpec(3, 0, 1, True)


def test_spectral_norm_ceiling_after_build():
    net = build_prior(1, seed=0)
    for l in range(net.num_layers):
        w = net.normalized_weight(l).double().reshape(net.layer_shapes[l][0], -1)
        assert torch.linalg.matrix_norm(w, ord=2) <= 1.05


# --------------------------------------------------------------------------- spectral normalization


def test_power_iteration_rank_one_oracle(gen):
    a = torch.randn(6, generator=gen, dtype=torch.float64)
    b = torch.randn(4 * 3 * 3, generator=gen, dtype=torch.float64)
    w = torch.outer(a, b).reshape(6, 4, 3, 3)
    s = torch.linalg.svdvals(w.reshape(6, -1))[0]
    state = fresh_state(w)
    power_iteration(w, state, 50)
    assert 0.99 <= float(estimated_sigma(w, state) / s) <= 1.01


def test_power_iteration_general_matrix_against_svd(gen):
    w = torch.randn(8, 5, 3, 3, generator=gen, dtype=torch.float64)
    state = fresh_state(w)
    power_iteration(w, state, 500)
    s = torch.linalg.svdvals(w.reshape(8, -1))[0]
    assert abs(float(estimated_sigma(w, state) / s) - 1) < 1e-3


def test_unit_norm_fixed_point(gen):
    w = torch.randn(6, 4, 3, 3, generator=gen, dtype=torch.float64)
    w = w / torch.linalg.svdvals(w.reshape(6, -1))[0]
    w_hat = spectral_normalize(w, fresh_state(w), n_iterations=200)
    assert (w_hat - w).abs().max() <= 0.01 * w.abs().max()


def test_scale_invariance(gen):
    w = torch.randn(6, 4, 3, 3, generator=gen, dtype=torch.float64)
    a = spectral_normalize(w, fresh_state(w), n_iterations=100)
    b = spectral_normalize(10 * w, fresh_state(w), n_iterations=100)
    assert torch.allclose(a, b, atol=1e-12)


def test_zero_weight_floor():
    w = torch.zeros(3, 2, 3, 3, dtype=torch.float64)
    state = fresh_state(w)
    out = spectral_normalize(w, state, n_iterations=1)
    assert torch.isfinite(out).all() and torch.count_nonzero(out) == 0
    assert float(estimated_sigma(w, state)) == 1e-12


def test_sn_state_frozen_in_forward(gen):
    net = build_prior(1, seed=0, blocks=2, features=4)
    before = net.fingerprint()
    net(torch.randn(1, 1, 8, 8, generator=gen))
    assert net.fingerprint() == before
    net.update_spectral_norm(1)
    assert net.fingerprint() != before


def test_spectral_norm_gradient_flows_through_sigma(gen):
    w = torch.randn(3, 2, 3, 3, generator=gen, dtype=torch.float64, requires_grad=True)
    state = fresh_state(w.detach())
    power_iteration(w, state, 20)
    out = spectral_normalize(w, state)
    # d/dW (W / u^T W v) applied to W itself vanishes (scale invariance)
    (grad,) = torch.autograd.grad(out, w, grad_outputs=out.detach())
    direction = torch.sum(grad * w.detach())
    assert abs(float(direction)) < 1e-10


# --------------------------------------------------------------------------- AR operator


def test_zero_weights_identity(gen):
    net = build_prior(1, seed=0, blocks=3, features=8, dtype=torch.float64)
    with torch.no_grad():
        for w, b in zip(net.weights, net.biases):
            w.zero_()
            b.zero_()
    x = torch.randn(2, 1, 16, 16, generator=gen, dtype=torch.float64)
    assert torch.equal(ar_apply(x, net), x)


def test_alpha_zero_identity(gen):
    net = build_prior(2, seed=0, blocks=3, features=8, dtype=torch.float64)
    x = torch.randn(2, 2, 16, 16, generator=gen, dtype=torch.float64)
    assert torch.equal(ar_apply(x, net, alpha=0.0), x)


def test_residual_structure_and_shape(gen):
    net = build_prior(1, seed=1, blocks=3, features=8, dtype=torch.float64)
    x = torch.randn(3, 1, 20, 12, generator=gen, dtype=torch.float64)
    out = ar_apply(x, net)
    assert out.shape == x.shape
    assert torch.allclose(out - x, -0.2 * net.residual(x), atol=1e-14)


def test_alpha_affine(gen):
    net = build_prior(1, seed=1, blocks=3, features=8, dtype=torch.float64)
    x = torch.randn(2, 1, 16, 16, generator=gen, dtype=torch.float64)
    lhs = ar_apply(x, net, alpha=0.2)
    rhs = 0.2 * ar_apply(x, net, alpha=1.0) + 0.8 * x
    assert (lhs - rhs).abs().max() <= 1e-10


def test_zero_modulation_matches_plain(gen):
    net = build_prior(1, seed=2, blocks=3, features=8)
    x = torch.randn(2, 1, 16, 16, generator=gen)
    assert rel_err(ar_apply(x, net, zero_modulation(net)), ar_apply(x, net)) <= 1e-6


def test_channel_mismatch_and_bad_modulation(gen):
    net = build_prior(1, seed=2, blocks=3, features=8)
    with pytest.raises(ValueError):
        ar_apply(torch.zeros(1, 2, 8, 8), net)
    other = build_prior(1, seed=2, blocks=3, features=4)
    with pytest.raises(ValueError):
        ar_apply(torch.zeros(1, 1, 8, 8), net, zero_modulation(other))


def test_modulation_applied_after_normalization(gen):
    from rankone_pnp.modulation import combine_factors, init_modulation

    net = build_prior(1, seed=3, blocks=2, features=4, dtype=torch.float64)
    mod = init_modulation(net, "d", seed=1)
    weights = net.layer_weights(mod)
    for l in range(net.num_layers):
        expect = net.normalized_weight(l) * (1 + combine_factors(mod.factors[l]))
        assert torch.allclose(weights[l], expect, atol=1e-15)


# --------------------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip(tmp_path, gen):
    net = build_prior(2, seed=4, blocks=3, features=8)
    fp = save_checkpoint(net, tmp_path / "net.safetensors", {"note": "x"})
    back, extra = load_checkpoint(tmp_path / "net.safetensors")
    assert fp == net.fingerprint() == back.fingerprint()
    assert extra == {"note": "x"}
    x = torch.randn(1, 2, 16, 16, generator=gen)
    assert torch.equal(back(x), net(x))


def test_checkpoint_tamper_detected(tmp_path):
    import safetensors.torch
    from safetensors import safe_open

    net = build_prior(1, seed=4, blocks=2, features=4)
    path = tmp_path / "net.safetensors"
    save_checkpoint(net, path)
    with safe_open(str(path), framework="pt") as fh:
        meta = fh.metadata()
    tensors = safetensors.torch.load_file(str(path))
    tensors["layer00.bias"] = tensors["layer00.bias"] + 1
    safetensors.torch.save_file(tensors, str(path), metadata=meta)
    with pytest.raises(FingerprintMismatchError):
        load_checkpoint(path)
