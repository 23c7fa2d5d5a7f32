import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from panelfusion.core import Adam, ConfigError, Rng, Tensor, grad_check, mse
from panelfusion.data import generate_synthetic_corpus, to_tensor
from panelfusion.model import (
    AutoencoderConfig,
    UNet,
    UNetConfig,
    ae_decode,
    ae_encode,
    ae_train_step,
    clone_params,
    init_autoencoder,
    init_unet,
    param_count,
    time_embedding,
    unet_forward,
)
from panelfusion.train import train_autoencoder

SMALL = UNetConfig(base_channels=8, cond_dim=6, time_embed_dim=8, groups=2)


def _randomized(cfg, seed=0):
    """Parameters with the zero-initialized output conv replaced, so outputs depend on everything."""
    p = init_unet(cfg, seed)
    p["conv_out.weight"] = Tensor(Rng(seed + 100).normal(p["conv_out.weight"].shape) * 0.1, requires_grad=True)
    return p


def test_time_embedding_pattern_and_range():
    np.testing.assert_array_equal(time_embedding(0, 6).data, [0, 1, 0, 1, 0, 1])
    e = time_embedding(57, 64).data
    assert np.array_equal(e, time_embedding(57, 64).data)
    assert np.abs(e).max() <= 1.0
    assert e[0] == pytest.approx(np.sin(57.0), abs=1e-6) and e[1] == pytest.approx(np.cos(57.0), abs=1e-6)
    with pytest.raises(ConfigError):
        time_embedding(3, 5)


@settings(max_examples=10, deadline=None)
@given(st.integers(1, 100), st.sampled_from([4, 8, 12]), st.integers(1, 5))
def test_unet_output_shape(t, size, length):
    p = _randomized(SMALL)
    x = Tensor(Rng(t).normal((1, size, size)))
    cond = Tensor(Rng(1).normal((length, 6)))
    assert unet_forward(p, x, t, cond, SMALL).shape == x.shape


def test_unet_indivisible_and_mismatched_inputs():
    p = init_unet(SMALL)
    cond = Tensor(np.zeros((2, 6)))
    with pytest.raises(ConfigError):
        unet_forward(p, Tensor(np.zeros((1, 6, 6))), 1, cond, SMALL)
    with pytest.raises(ConfigError):
        unet_forward(p, Tensor(np.zeros((2, 8, 8))), 1, cond, SMALL)
    with pytest.raises(ConfigError):
        unet_forward(p, Tensor(np.zeros((1, 8, 8))), 1, Tensor(np.zeros((2, 5))), SMALL)


def test_cond_changes_output():
    p = _randomized(SMALL)
    x = Tensor(Rng(0).normal((1, 8, 8)))
    a = unet_forward(p, x, 10, Tensor(Rng(1).normal((3, 6))), SMALL).data
    b = unet_forward(p, x, 10, Tensor(Rng(2).normal((3, 6))), SMALL).data
    assert np.abs(a - b).max() > 0


def test_cond_ignored_without_attention():
    cfg = UNetConfig(base_channels=8, cond_dim=6, time_embed_dim=8, groups=2, attn_resolutions=())
    p = _randomized(cfg)
    x = Tensor(Rng(0).normal((1, 8, 8)))
    a = unet_forward(p, x, 10, Tensor(Rng(1).normal((3, 6))), cfg).data
    b = unet_forward(p, x, 10, Tensor(Rng(2).normal((3, 6))), cfg).data
    assert np.array_equal(a, b)


def test_zero_initialized_output_conv():
    p = init_unet(SMALL)
    out = unet_forward(p, Tensor(Rng(0).normal((1, 8, 8))), 5, Tensor(np.zeros((1, 6))), SMALL)
    assert np.array_equal(out.data, np.zeros((1, 8, 8)))
    assert not any(v.data.any() for k, v in p.items() if k.endswith(".bias"))


def test_unet_deterministic_and_count_stable():
    p1, p2 = init_unet(SMALL, 3), init_unet(SMALL, 3)
    assert list(p1) == list(p2) and param_count(p1) == param_count(p2)
    assert all(np.array_equal(p1[k].data, p2[k].data) for k in p1)
    model = UNet(SMALL, _randomized(SMALL))
    x, c = Tensor(Rng(0).normal((1, 8, 8))), Tensor(Rng(1).normal((2, 6)))
    assert np.array_equal(model(x, 4, c).data, model(x, 4, c).data)


def test_attention_paths_cover_all_projections():
    paths = UNet(SMALL, init_unet(SMALL)).attention_paths()
    assert paths == sorted(
        f"mid.{kind}.{proj}.weight" for kind in ("cross_attn", "self_attn") for proj in ("to_k", "to_out", "to_q", "to_v")
    )


def test_unet_gradients_pass_grad_check():
    """Every parameter tensor of a tiny U-Net, float64, subsampled elements."""
    cfg = UNetConfig(base_channels=4, cond_dim=3, time_embed_dim=4, groups=2, depth=1, attn_resolutions=(0, 1))
    base = clone_params(_randomized(cfg, 1), dtype=np.float64, requires_grad=False)
    x = Tensor(Rng(2).normal((1, 4, 4)), dtype=np.float64)
    cond = Tensor(Rng(3).normal((2, 3)), dtype=np.float64)
    target = Tensor(Rng(4).normal((1, 4, 4)), dtype=np.float64)
    worst = 0.0
    for name in base:

        def f(w, name=name):
            return mse(unet_forward({**base, name: w}, x, 7, cond, cfg), target)

        worst = max(worst, grad_check(f, base[name], max_elements=6, seed=len(name)))
    assert worst <= 1e-3
    # and w.r.t. the input
    assert grad_check(lambda xx: mse(unet_forward(base, xx, 7, cond, cfg), target), x, max_elements=8) <= 1e-3


@pytest.mark.parametrize("m,size,expected", [(0, 8, 8), (2, 32, 8), (1, 16, 8)])
def test_autoencoder_shapes(m, size, expected):
    cfg = AutoencoderConfig(m=m, hidden=8)
    p = init_autoencoder(cfg)
    x = Tensor(Rng(0).normal((1, size, size)))
    z = ae_encode(p, x, cfg)
    assert z.shape == (cfg.latent_channels, expected, expected)
    assert ae_decode(p, z, cfg).shape == x.shape
    assert cfg.f == 2**m


def test_autoencoder_rejects_indivisible():
    cfg = AutoencoderConfig(m=2, hidden=8)
    with pytest.raises(ConfigError):
        ae_encode(init_autoencoder(cfg), Tensor(np.zeros((1, 10, 10))), cfg)


def test_ae_constant_dataset_converges():
    cfg = AutoencoderConfig(m=2, hidden=8)
    p = init_autoencoder(cfg, seed=0)
    opt = Adam(p)
    batch = [Tensor(np.full((1, 16, 16), 0.4))]
    losses = [ae_train_step(p, batch, opt, 1e-2, cfg) for _ in range(500)]
    assert min(losses) >= 0
    assert losses[-1] < 1e-3


def test_ae_frozen_params_give_identical_loss():
    cfg = AutoencoderConfig(m=1, hidden=8)
    p = init_autoencoder(cfg)
    x = Tensor(Rng(0).normal((1, 8, 8)))
    a = mse(ae_decode(p, ae_encode(p, x, cfg), cfg), x).item()
    b = mse(ae_decode(p, ae_encode(p, x, cfg), cfg), x).item()
    assert a == b


@pytest.mark.slow
def test_autoencoder_heldout_reconstruction():
    panels = [to_tensor(im) for im in generate_synthetic_corpus("shape_panels", 120, seed=5)]
    cfg = AutoencoderConfig(m=2)
    params, losses, scale = train_autoencoder(panels[:100], cfg, steps=600, lr=2e-3, seed=0)
    held = [float(np.mean((ae_decode(params, ae_encode(params, x, cfg), cfg).data - x.data) ** 2)) for x in panels[100:]]
    assert np.mean(held) < 0.05
    assert scale > 0 and np.isfinite(losses).all()
