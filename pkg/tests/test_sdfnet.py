"""Conditional SDF decoder, windowed cross-view attention, pretraining loop."""

import numpy as np
import pytest

from cardiofield import autodiff as ad
from cardiofield import nn
from cardiofield.autodiff import Tensor
from cardiofield.dataset import DatasetConfig, generate_dataset
from cardiofield.sdfnet import (
    ConditionalSdf,
    EcaConfig,
    EncoderConfig,
    MaskEncoder,
    PretrainConfig,
    QkvParams,
    SdfNetConfig,
    fit_code,
    eca_attend,
    pretrain,
    sdf_mae,
)
from cardiofield.shapes import ShapeFamilyConfig, generate_shape, sample_sdf

from oracles import check_grad_fd

TINY = SdfNetConfig(latent_dim=8, hidden=(16, 16), posenc_frequencies=2)


def _zeroed_model(cfg=TINY, bias=0.5):
    model = ConditionalSdf(cfg, np.random.default_rng(0))
    w, b = model.mlp.layers[-1]
    w.data[:] = 0.0
    b.data[:] = bias
    return model


def test_constant_network_returns_clamped_bias():
    model = _zeroed_model(bias=0.5)
    z = np.zeros(8)
    x = np.random.default_rng(0).uniform(-1, 1, (20, 3))
    f = model.evaluate_np(z, x)
    expected = TINY.clamp * np.tanh(0.5 / TINY.clamp)
    assert np.allclose(f, expected, atol=1e-12)


def test_evaluation_is_deterministic():
    model = ConditionalSdf(TINY, np.random.default_rng(1))
    z = np.random.default_rng(2).normal(size=8)
    x = np.random.default_rng(3).uniform(-1, 1, (50, 3))
    assert np.array_equal(model.evaluate_np(z, x), model.evaluate_np(z, x))


def test_output_bounded_by_clamp():
    model = ConditionalSdf(TINY, np.random.default_rng(4))
    for w, b in model.mlp.layers:
        w.data *= 20.0
    f = model.evaluate_np(np.ones(8) * 3, np.random.default_rng(0).uniform(-1, 1, (100, 3)))
    assert np.all(np.abs(f) <= TINY.clamp + 1e-12)


def test_spatial_grad_constant_network_is_zero():
    model = _zeroed_model()
    g = model.spatial_grad(np.zeros(8), np.random.default_rng(0).uniform(-1, 1, (10, 3)))
    assert np.allclose(g, 0.0)


def test_spatial_grad_matches_finite_differences():
    model = ConditionalSdf(TINY, np.random.default_rng(5))
    z = np.random.default_rng(6).normal(size=8) * 0.3
    x = np.random.default_rng(7).uniform(-0.8, 0.8, (6, 3))
    g = model.spatial_grad(z, x)
    h = 1e-5
    for i in range(len(x)):
        for k in range(3):
            xp, xm = x.copy(), x.copy()
            xp[i, k] += h
            xm[i, k] -= h
            fd = (model.evaluate_np(z, xp)[i] - model.evaluate_np(z, xm)[i]) / (2 * h)
            assert abs(fd - g[i, k]) <= 1e-4 * max(abs(fd), abs(g[i, k]), 1e-3)


def test_parameter_gradients_match_finite_differences():
    model = ConditionalSdf(TINY, np.random.default_rng(8))
    z = Tensor(np.random.default_rng(9).normal(size=8) * 0.5, requires_grad=True)
    x = np.random.default_rng(10).uniform(-1, 1, (12, 3))
    coeff = np.random.default_rng(11).normal(size=12)

    def forward():
        return (model.evaluate(z, x) * Tensor(coeff)).sum()

    forward().backward()
    params = model.parameters() + [z]

    def re_eval(_):
        with ad.no_grad():
            return forward().item()

    check_grad_fd(re_eval, [p.data for p in params], [p.grad for p in params], n_probes=120)


# -- attention ---------------------------------------------------------------


def _identity_qkv(c, v_bias=None, v_zero=False):
    eye = np.eye(c).reshape(c, c, 1, 1)
    mk = lambda w, b: nn.Conv2dParams(
        weight=Tensor(w, requires_grad=True),
        bias=Tensor(b, requires_grad=True),
        stride=1,
        pad=0,
    )
    q = mk(eye.copy(), np.zeros(c))
    k = mk(eye.copy(), np.zeros(c))
    if v_zero:
        v = mk(np.zeros((c, c, 1, 1)), v_bias if v_bias is not None else np.zeros(c))
    else:
        v = mk(eye.copy(), np.zeros(c))
    return QkvParams(q=q, k=k, v=v)


def test_eca_constant_value_adds_v0_per_view():
    rng = np.random.default_rng(0)
    c, h, w = 3, 8, 8
    f0 = Tensor(rng.normal(size=(1, c, h, w)))
    aux = [Tensor(rng.normal(size=(1, c, h, w))) for _ in range(2)]
    v0 = np.array([0.5, -1.0, 2.0])
    qkv = _identity_qkv(c, v_bias=v0, v_zero=True)
    out = eca_attend(f0, aux, qkv, EcaConfig(window_halfheight=2, temperature=1.0))
    expected = f0.data + 2 * v0.reshape(1, c, 1, 1)  # one v0 per aux view
    assert np.allclose(out.data, expected, atol=1e-9)


def test_eca_huge_temperature_matches_window_mean():
    rng = np.random.default_rng(1)
    c, h, w = 2, 10, 6
    f0 = Tensor(rng.normal(size=(1, c, h, w)))
    aux_arr = rng.normal(size=(1, c, h, w))
    qkv = _identity_qkv(c)
    r = 2
    out = eca_attend(f0, [Tensor(aux_arr)], qkv, EcaConfig(window_halfheight=r, temperature=1e6))
    # brute-force window mean of aux values
    expected = f0.data.copy()
    for y in range(h):
        lo, hi = max(0, y - r), min(h, y + r + 1)
        expected[0, :, y, :] += aux_arr[0, :, lo:hi, :].mean(axis=1)
    assert np.allclose(out.data, expected, atol=1e-6)


def test_eca_r0_singleton_window():
    rng = np.random.default_rng(2)
    c, h, w = 3, 6, 6
    f0 = Tensor(rng.normal(size=(1, c, h, w)))
    aux_arr = rng.normal(size=(1, c, h, w))
    out = eca_attend(f0, [Tensor(aux_arr)], _identity_qkv(c), EcaConfig(window_halfheight=0, temperature=1.0))
    assert np.allclose(out.data, f0.data + aux_arr, atol=1e-12)


def test_eca_zero_value_projection_is_identity():
    rng = np.random.default_rng(3)
    c, h, w = 4, 8, 8
    f0 = Tensor(rng.normal(size=(2, c, h, w)))
    aux = [Tensor(rng.normal(size=(2, c, h, w)))]
    qkv = _identity_qkv(c, v_zero=True)
    out = eca_attend(f0, aux, qkv, EcaConfig(window_halfheight=2, temperature=1.0))
    assert np.array_equal(out.data, f0.data)


def test_eca_softmax_weights_sum_to_one_any_window():
    # constant V plus nontrivial Q/K still adds exactly v0 (normalization)
    rng = np.random.default_rng(4)
    c, h, w = 3, 8, 5
    f0 = Tensor(rng.normal(size=(1, c, h, w)))
    aux = [Tensor(rng.normal(size=(1, c, h, w)))]
    v0 = np.array([1.0, 2.0, 3.0])
    qkv = _identity_qkv(c, v_bias=v0, v_zero=True)
    qkv.q.weight.data = rng.normal(size=(c, c, 1, 1))
    qkv.k.weight.data = rng.normal(size=(c, c, 1, 1))
    out = eca_attend(f0, aux, qkv, EcaConfig(window_halfheight=3, temperature=0.7))
    assert np.allclose(out.data, f0.data + v0.reshape(1, c, 1, 1), atol=1e-9)


def test_eca_rejects_mismatched_shapes():
    c = 2
    f0 = Tensor(np.zeros((1, c, 8, 8)))
    bad = Tensor(np.zeros((1, c, 8, 4)))
    with pytest.raises(ad.ShapeError):
        eca_attend(f0, [bad], _identity_qkv(c), EcaConfig())


def test_eca_config_validation():
    with pytest.raises(ValueError):
        EcaConfig(window_halfheight=99).resolve(channels=4, height=8)
    with pytest.raises(ValueError):
        EcaConfig(temperature=-1.0).resolve(channels=4, height=8)


# -- encoder -----------------------------------------------------------------

SMALL_ENC = EncoderConfig(latent_dim=8, channels=(4, 6, 8, 10), mask_resolution=32)


def test_encoder_all_zero_masks_finite_code():
    enc = MaskEncoder(SMALL_ENC, np.random.default_rng(0))
    z = enc.encode(np.zeros((3, 32, 32)))
    assert z.shape == (8,)
    assert np.isfinite(z.data).all()


def test_encoder_single_view_equals_no_attention_path():
    enc = MaskEncoder(SMALL_ENC, np.random.default_rng(1))
    mask = (np.random.default_rng(2).uniform(size=(32, 32)) > 0.5).astype(float)
    z1 = enc.encode(mask[None])
    # manual no-attention path: backbone -> fusion -> pool -> head
    with ad.no_grad():
        x = Tensor(mask[None, None])
        for blk in enc.backbone:
            x = ad.relu(nn.conv2d_forward(blk, x))
        for blk in enc.fusion:
            x = ad.relu(nn.conv2d_forward(blk, x))
        z2 = nn.mlp_forward(enc.head, x.mean(axis=(2, 3)))[0]
    assert np.allclose(z1.data, z2.data, atol=1e-12)


def test_encoder_rejects_empty_view_list():
    enc = MaskEncoder(SMALL_ENC, np.random.default_rng(3))
    with pytest.raises(ValueError):
        enc.encode(np.zeros((0, 32, 32)))


def test_encoder_gradients_match_finite_differences():
    enc = MaskEncoder(EncoderConfig(latent_dim=4, channels=(2, 3, 4, 5), mask_resolution=16), np.random.default_rng(4))
    masks = (np.random.default_rng(5).uniform(size=(2, 16, 16)) > 0.5).astype(float)
    coeff = np.random.default_rng(6).normal(size=4)

    def forward():
        return (enc.encode(masks) * Tensor(coeff)).sum()

    forward().backward()
    params = enc.parameters()

    def re_eval(_):
        with ad.no_grad():
            return forward().item()

    check_grad_fd(re_eval, [p.data for p in params], [p.grad for p in params], n_probes=100)


# -- pretraining ---------------------------------------------------------------


@pytest.fixture(scope="module")
def single_sphere_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("sphere_ds")
    cfg = DatasetConfig(
        count=1,
        samples_per_shape=5000,
        seed=5,
        test_fraction=0.0,
        mask_resolution=32,
        family=ShapeFamilyConfig.sphere(0.8, pulse_scale=0.0),
    )
    return generate_dataset(root, cfg)


def test_overfit_sphere_500_steps_accurate_everywhere(single_sphere_dataset):
    # raw-coordinate input: low-frequency shape, smoothest learned field
    model = ConditionalSdf(
        SdfNetConfig(latent_dim=8, hidden=(64, 64, 64), posenc_frequencies=0),
        np.random.default_rng(0),
    )
    cfg = PretrainConfig(
        steps=500, batch_shapes=1, points_per_shape=4096, seed=0, lr_net=5e-3, lr_final_scale=0.02
    )
    result = pretrain(model, single_sphere_dataset, cfg)
    # max |f - (|x| - 0.8)| < 0.05 on held-out points (clamped targets)
    shape = generate_shape([0.0], ShapeFamilyConfig.sphere(0.8, pulse_scale=0.0))
    held = sample_sdf(shape, 1000, "mixed", np.random.default_rng(99))
    f = model.evaluate_np(result.codes[0], held.points)
    ref = np.clip(np.linalg.norm(held.points, axis=1) - 0.8, -model.cfg.clamp, model.cfg.clamp)
    assert np.max(np.abs(f - ref)) < 0.05


def test_pretrain_single_shape_l1_under_budget(single_sphere_dataset):
    model = ConditionalSdf(SdfNetConfig(latent_dim=8, hidden=(48, 48, 48)), np.random.default_rng(0))
    cfg = PretrainConfig(steps=2000, batch_shapes=1, points_per_shape=512, seed=0, lr_net=2e-3)
    result = pretrain(model, single_sphere_dataset, cfg)
    assert result.final_l1 < 0.01


def test_pretrain_log_decomposition_and_descent(single_sphere_dataset):
    model = ConditionalSdf(TINY, np.random.default_rng(1))
    cfg = PretrainConfig(steps=120, batch_shapes=1, points_per_shape=256, seed=1)
    result = pretrain(model, single_sphere_dataset, cfg)
    for step, l1, reg, total in result.log:
        assert abs(total - (l1 + cfg.reg_weight * reg)) < 1e-10
    assert result.log[-1][1] < result.log[0][1]


def test_pretrain_strong_regularizer_shrinks_codes(single_sphere_dataset):
    model = ConditionalSdf(TINY, np.random.default_rng(2))
    cfg = PretrainConfig(steps=300, batch_shapes=1, points_per_shape=128, seed=2, reg_weight=1e3, code_init_std=0.5)
    result = pretrain(model, single_sphere_dataset, cfg)
    norms = [reg for _, _, reg, _ in result.log]
    assert all(b <= a + 1e-12 for a, b in zip(norms, norms[1:]))  # monotone toward zero
    assert norms[-1] < norms[0] * 0.7


def test_fit_code_recovers_latent(single_sphere_dataset):
    model = ConditionalSdf(SdfNetConfig(latent_dim=8, hidden=(32, 32)), np.random.default_rng(3))
    cfg = PretrainConfig(steps=400, batch_shapes=1, points_per_shape=256, seed=3)
    result = pretrain(model, single_sphere_dataset, cfg)
    rec = single_sphere_dataset.records["s0000"]
    z = fit_code(model, rec.samples.points, rec.samples.distances, steps=200, seed=0)
    mae = sdf_mae(model, z, rec.samples.points, rec.samples.distances)
    assert mae < 2.5 * result.final_l1 + 5e-3
