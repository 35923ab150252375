"""Contracts for encoders, hypernetworks and the two field MLPs."""

import math

import numpy as np
import pytest

from tars import autodiff as ad
from tars import nets
from tars.nets import FieldNetworks, ModelConfig, compose_canonical, positional_encode


def tiny_config(**kw):
    base = dict(latent_dim=8, k=4, hidden_dim=8, trunk_layers=2,
                freq_point=2, freq_feat=1, lstm_dim=4, hyper_hidden=8,
                uncond_hidden=6, enc_channels=(4, 8), image_size=8)
    base.update(kw)
    return ModelConfig(**base)


# ---------------------------------------------------------------------------
# positional encoding
# ---------------------------------------------------------------------------

def test_posenc_zero():
    out = positional_encode(ad.Tensor([0.0]), 2)
    np.testing.assert_allclose(out.data, [0.0, 1.0, 0.0, 1.0], atol=1e-15)


def test_posenc_one():
    out = positional_encode(ad.Tensor([1.0]), 1)
    np.testing.assert_allclose(out.data, [math.sin(math.pi), -1.0], atol=1e-12)


def test_posenc_quarter():
    out = positional_encode(ad.Tensor([0.25]), 2)
    expect = [math.sin(math.pi / 4), math.cos(math.pi / 4),
              math.sin(math.pi / 2), math.cos(math.pi / 2)]
    np.testing.assert_allclose(out.data, expect, atol=1e-12)


def test_posenc_width():
    out = positional_encode(ad.Tensor(np.zeros((5, 3))), 6)
    assert out.shape == (5, 36)


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------

def test_encoder_zero_image_finite_and_deterministic():
    net = FieldNetworks(tiny_config(), seed=3)
    img = np.zeros((8, 8, 3))
    p = net.constants()
    a = net.encode(p, img)
    b = net.encode(p, img)
    assert np.all(np.isfinite(a.data))
    assert a.shape == (1, 8)
    assert np.array_equal(a.data, b.data)


def test_encoder_rejects_wrong_resolution():
    net = FieldNetworks(tiny_config(), seed=3)
    with pytest.raises(ValueError, match="encoder"):
        net.encode(net.constants(), np.zeros((16, 16, 3)))


# ---------------------------------------------------------------------------
# hypernetworks
# ---------------------------------------------------------------------------

def test_hypernet_zero_everything_gives_zero_weights():
    net = FieldNetworks(tiny_config(), seed=5)
    for e in net.stores["shape_hyper"].entries.values():
        e.value[...] = 0.0
    gw = net.shape_weights(net.constants(), ad.Tensor(np.zeros((1, 8))))
    for w, b in gw.trunk + list(gw.heads.values()):
        assert np.all(w.data == 0.0) and np.all(b.data == 0.0)


def test_generated_param_count_matches_spec():
    cfg = tiny_config()
    net = FieldNetworks(cfg, seed=5)
    latent = ad.Tensor(np.random.default_rng(0).normal(size=(1, 8)))
    gw = net.shape_weights(net.constants(), latent)
    assert gw.param_count() == cfg.shape_spec().param_count()
    gd = net.deform_weights(net.constants(), latent)
    assert gd.param_count() == cfg.deform_spec().param_count()
    expected = sum(fi * fo + fo for _, fi, fo in cfg.shape_spec().layers())
    assert cfg.shape_spec().param_count() == expected


def test_hypernet_latent_dim_mismatch():
    net = FieldNetworks(tiny_config(), seed=5)
    with pytest.raises(ValueError, match="latent dim"):
        net.shape_weights(net.constants(), ad.Tensor(np.zeros((1, 5))))


def test_perturbing_hyper_param_changes_generated_weights():
    net = FieldNetworks(tiny_config(), seed=5)
    latent = ad.Tensor(np.ones((1, 8)))
    base = net.shape_weights(net.constants(), latent).trunk[0][0].data.copy()
    name = "shape/trunk0/b2"
    net.stores["shape_hyper"][name].value[0] += 1e-3
    bumped = net.shape_weights(net.constants(), latent).trunk[0][0].data
    assert np.any(base != bumped)


# ---------------------------------------------------------------------------
# deformnet / shape generator / compose
# ---------------------------------------------------------------------------

def _zero_heads(net, prefix):
    store_name = "deform_hyper" if prefix == "deform" else "shape_hyper"
    for name, e in net.stores[store_name].entries.items():
        if "/head_" in name and (name.endswith("w2") or name.endswith("b2")):
            e.value[...] = 0.0


def test_deformnet_zero_heads_is_identity():
    net = FieldNetworks(tiny_config(), seed=7)
    _zero_heads(net, "deform")
    x = ad.Tensor(np.random.default_rng(1).uniform(-1, 1, (6, 3)))
    out = net.deform_forward(net.deform_weights(net.constants(),
                                                ad.Tensor(np.ones((1, 8)))), x)
    assert np.all(out.delta.data == 0.0)
    assert np.all(out.features.data == 0.0)
    can = compose_canonical(x, out)
    assert np.array_equal(can.xyz.data, x.data)


def test_deformnet_output_dims():
    cfg = tiny_config()
    net = FieldNetworks(cfg, seed=7)
    x = ad.Tensor(np.zeros((5, 3)))
    out = net.deform_forward(net.deform_weights(net.constants(),
                                                ad.Tensor(np.ones((1, 8)))), x)
    assert out.delta.shape == (5, 3)
    assert out.features.shape == (5, cfg.k)
    assert out.rgb.shape == (5, 3)
    assert np.all((out.rgb.data >= 0) & (out.rgb.data <= 1))
    can = compose_canonical(x, out)
    assert can.xyz.shape[-1] + can.feat.shape[-1] == 3 + cfg.k


def test_compose_additivity():
    rng = np.random.default_rng(2)
    x = ad.Tensor(rng.normal(size=(4, 3)))
    v = rng.normal(size=(4, 3))
    delta = ad.Tensor(rng.normal(size=(4, 3)))
    out1 = nets.DeformOutput(delta=delta, features=None, rgb=ad.Tensor(np.zeros((4, 3))),
                             trunk=ad.Tensor(np.zeros((4, 2))))
    out2 = nets.DeformOutput(delta=ad.Tensor(delta.data - v), features=None,
                             rgb=ad.Tensor(np.zeros((4, 3))),
                             trunk=ad.Tensor(np.zeros((4, 2))))
    a = compose_canonical(x, out1).xyz.data
    b = compose_canonical(ad.Tensor(x.data + v), out2).xyz.data
    np.testing.assert_allclose(a, b, atol=1e-15)


def test_shape_generator_zero_weights_gives_zero_sdf():
    net = FieldNetworks(tiny_config(), seed=9)
    for e in net.stores["shape_hyper"].entries.values():
        e.value[...] = 0.0
    gw = net.shape_weights(net.constants(), ad.Tensor(np.ones((1, 8))))
    out = net.shape_forward(gw, ad.Tensor(np.random.default_rng(0).normal(size=(9, 3))),
                            ad.Tensor(np.zeros((9, 4))))
    assert np.all(out.sdf.data == 0.0)


def test_shape_generator_k0_needs_no_features():
    cfg = tiny_config(k=0)
    net = FieldNetworks(cfg, seed=9)
    gw = net.shape_weights(net.constants(), ad.Tensor(np.ones((1, 8))))
    out = net.shape_forward(gw, ad.Tensor(np.zeros((3, 3))), None)
    assert out.sdf.shape == (3, 1)
    assert len(net.stores["uncond"].entries) == 0
    dw = net.deform_weights(net.constants(), ad.Tensor(np.ones((1, 8))))
    assert net.deform_forward(dw, ad.Tensor(np.zeros((3, 3)))).features is None


def test_uncond_features_contract():
    cfg = tiny_config()
    net = FieldNetworks(cfg, seed=11)
    x = ad.Tensor(np.random.default_rng(3).uniform(-1, 1, (7, 3)))
    p = net.constants()
    a = net.uncond_features(p, x)
    b = net.uncond_features(p, x)
    assert a.shape == (7, cfg.k)
    assert np.array_equal(a.data, b.data)
    for e in net.stores["uncond"].entries.values():
        e.value[...] = 0.0
    z = net.uncond_features(net.constants(), x)
    assert np.all(z.data == 0.0)


def test_forward_passes_pure_bitwise():
    net = FieldNetworks(tiny_config(), seed=13)
    x = ad.Tensor(np.random.default_rng(4).uniform(-1, 1, (5, 3)))
    latent = ad.Tensor(np.random.default_rng(5).normal(size=(1, 8)))
    p = net.constants()
    runs = []
    for _ in range(2):
        gw = net.shape_weights(p, latent)
        feat = net.uncond_features(p, x)
        runs.append(net.shape_forward(gw, x, feat).sdf.data.copy())
    assert np.array_equal(runs[0], runs[1])


# ---------------------------------------------------------------------------
# end-to-end gradient check: encoder -> hypernet -> field MLP
# ---------------------------------------------------------------------------

def test_end_to_end_gradients_match_finite_differences():
    cfg = tiny_config(enc_channels=(3, 4), hyper_hidden=4, hidden_dim=6,
                      trunk_layers=2, k=2, freq_feat=1)
    net = FieldNetworks(cfg, seed=17)
    rng = np.random.default_rng(6)
    image = rng.uniform(0, 1, (8, 8, 3))
    x = rng.uniform(-1, 1, (4, 3))
    trainable = {"encoder", "shape_hyper", "uncond"}

    def run(tape=None):
        if tape is None:
            p = net.constants()
        else:
            p = net.watch(tape, trainable)
        latent = net.encode(p, image)
        gw = net.shape_weights(p, latent)
        xt = ad.Tensor(x)
        out = net.shape_forward(gw, xt, net.uncond_features(p, xt))
        return ad.tmean(ad.square(out.sdf))

    tape = ad.Tape()
    p = net.watch(tape, trainable)
    latent = net.encode(p, image)
    gw = net.shape_weights(p, latent)
    xt = ad.Tensor(x)
    out = net.shape_forward(gw, xt, net.uncond_features(p, xt))
    loss = ad.tmean(ad.square(out.sdf))
    grads = tape.backward(loss)
    net.accumulate(p, grads, trainable)

    checked = 0
    fd_rng = np.random.default_rng(7)
    for sname in sorted(trainable):
        store = net.stores[sname]
        for pname, e in store.entries.items():
            flat = e.value.reshape(-1)
            gflat = e.grad.reshape(-1)
            idxs = fd_rng.choice(flat.size, size=min(4, flat.size), replace=False)
            for i in idxs:
                orig = flat[i]
                flat[i] = orig + 1e-4
                fp = run().item()
                flat[i] = orig - 1e-4
                fm = run().item()
                flat[i] = orig
                fd = (fp - fm) / 2e-4
                denom = max(abs(fd), abs(gflat[i]), 1e-6)
                assert abs(fd - gflat[i]) / denom < 1e-3, (pname, i)
                checked += 1
    assert checked > 50
