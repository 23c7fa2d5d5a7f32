"""Tiny time-conditioned U-Net with cross-attention, and the convolutional autoencoder.

Parameters live in flat ``dict[str, Tensor]`` maps keyed by dotted paths.
Attention projections are named ``<block>.to_q/to_k/to_v/to_out.weight`` so
adapters can target them by pattern.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .core import (
    ConfigError,
    Rng,
    Tensor,
    attention,
    avg_pool2x,
    concat,
    conv2d,
    group_norm,
    linear,
    silu,
    upsample2x,
)

ModelParams = dict  # str -> Tensor

INIT_STD = 0.02


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 1
    base_channels: int = 32
    depth: int = 2
    time_embed_dim: int = 64
    cond_dim: int = 32
    attn_resolutions: tuple[int, ...] = (2,)
    self_attention: bool = True
    groups: int = 8

    def stage_channels(self) -> list[int]:
        return [self.base_channels * 2**i for i in range(self.depth + 1)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attn_resolutions"] = list(self.attn_resolutions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        d = dict(d)
        d["attn_resolutions"] = tuple(d.get("attn_resolutions", ()))
        return cls(**d)


@dataclass(frozen=True)
class AutoencoderConfig:
    m: int = 2
    latent_channels: int = 4
    in_channels: int = 1
    hidden: int = 32

    @property
    def f(self) -> int:
        return 2**self.m

    def to_dict(self) -> dict:
        return asdict(self)


# -- initialisation helpers -----------------------------------------------


def _w(rng: Rng, *shape) -> Tensor:
    return Tensor(rng.truncated_normal(shape, INIT_STD), requires_grad=True)


def _zeros(*shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)


def _ones(*shape) -> Tensor:
    return Tensor(np.ones(shape, dtype=np.float32), requires_grad=True)


def _conv_params(p: dict, name: str, rng: Rng, cin: int, cout: int, k: int = 3, zero: bool = False) -> None:
    p[f"{name}.weight"] = _zeros(cout, cin, k, k) if zero else _w(rng, cout, cin, k, k)
    p[f"{name}.bias"] = _zeros(cout)


def _norm_params(p: dict, name: str, c: int) -> None:
    p[f"{name}.gamma"] = _ones(c)
    p[f"{name}.beta"] = _zeros(c)


def _resblock_params(p: dict, name: str, rng: Rng, cin: int, cout: int, tdim: int) -> None:
    _norm_params(p, f"{name}.norm1", cin)
    _conv_params(p, f"{name}.conv1", rng, cin, cout)
    p[f"{name}.time.weight"] = _w(rng, cout, tdim)
    p[f"{name}.time.bias"] = _zeros(cout)
    _norm_params(p, f"{name}.norm2", cout)
    _conv_params(p, f"{name}.conv2", rng, cout, cout)
    if cin != cout:
        _conv_params(p, f"{name}.skip", rng, cin, cout, k=1)


def _attn_params(p: dict, name: str, rng: Rng, c: int, ctx_dim: int) -> None:
    _norm_params(p, f"{name}.norm", c)
    p[f"{name}.to_q.weight"] = _w(rng, c, c)
    p[f"{name}.to_k.weight"] = _w(rng, c, ctx_dim)
    p[f"{name}.to_v.weight"] = _w(rng, c, ctx_dim)
    p[f"{name}.to_out.weight"] = _w(rng, c, c)
    p[f"{name}.to_out.bias"] = _zeros(c)


def init_unet(cfg: UNetConfig, seed: int = 0) -> ModelParams:
    if cfg.time_embed_dim % 2:
        raise ConfigError("time_embed_dim must be even")
    rng = Rng(seed)
    chs = cfg.stage_channels()
    for c in chs:
        if c % cfg.groups:
            raise ConfigError(f"channel count {c} not divisible by {cfg.groups} groups")
    td = cfg.time_embed_dim
    p: dict[str, Tensor] = {}
    p["time_mlp.0.weight"] = _w(rng, td, td)
    p["time_mlp.0.bias"] = _zeros(td)
    p["time_mlp.1.weight"] = _w(rng, td, td)
    p["time_mlp.1.bias"] = _zeros(td)
    _conv_params(p, "conv_in", rng, cfg.in_channels, chs[0])
    for i in range(cfg.depth):
        _resblock_params(p, f"down.{i}.res", rng, chs[i], chs[i], td)
        if i in cfg.attn_resolutions:
            _stage_attn_params(p, f"down.{i}", rng, chs[i], cfg)
        _conv_params(p, f"down.{i}.downsample", rng, chs[i], chs[i + 1])
    mid = chs[cfg.depth]
    _resblock_params(p, "mid.res1", rng, mid, mid, td)
    if cfg.depth in cfg.attn_resolutions:
        _stage_attn_params(p, "mid", rng, mid, cfg)
    _resblock_params(p, "mid.res2", rng, mid, mid, td)
    for i in reversed(range(cfg.depth)):
        _resblock_params(p, f"up.{i}.res", rng, chs[i + 1] + chs[i], chs[i], td)
        if i in cfg.attn_resolutions:
            _stage_attn_params(p, f"up.{i}", rng, chs[i], cfg)
    _norm_params(p, "norm_out", chs[0])
    _conv_params(p, "conv_out", rng, chs[0], cfg.in_channels, zero=True)
    return p


def _stage_attn_params(p: dict, prefix: str, rng: Rng, c: int, cfg: UNetConfig) -> None:
    if cfg.self_attention:
        _attn_params(p, f"{prefix}.self_attn", rng, c, c)
    _attn_params(p, f"{prefix}.cross_attn", rng, c, cfg.cond_dim)


# -- forward ----------------------------------------------------------------


def time_embedding(t: int, dim: int) -> Tensor:
    """Sinusoidal embedding: [sin(t/10000^(2i/dim)), cos(...)] interleaved."""
    if dim % 2:
        raise ConfigError(f"time embedding dim must be even, got {dim}")
    i = np.arange(dim // 2, dtype=np.float64)
    freq = t / np.power(10000.0, 2.0 * i / dim)
    out = np.empty(dim, dtype=np.float64)
    out[0::2] = np.sin(freq)
    out[1::2] = np.cos(freq)
    return Tensor(out.astype(np.float32))


class _Projector:
    """Routes attention projections through LoRA adapters when present."""

    def __init__(self, params: ModelParams, adapters=None):
        self.params = params
        self.adapters = adapters

    def __call__(self, name: str, x: Tensor) -> Tensor:
        w = self.params[f"{name}.weight"]
        b = self.params.get(f"{name}.bias")
        if self.adapters is not None:
            ad = self.adapters.get(f"{name}.weight")
            if ad is not None:
                from .lora import effective_forward

                return effective_forward(ad, w, x, b)
        return linear(x, w, b)


def _resblock(p: ModelParams, name: str, x: Tensor, temb: Tensor, groups: int) -> Tensor:
    h = silu(group_norm(x, groups, p[f"{name}.norm1.gamma"], p[f"{name}.norm1.beta"]))
    h = conv2d(h, p[f"{name}.conv1.weight"], p[f"{name}.conv1.bias"], padding=1)
    tb = linear(temb, p[f"{name}.time.weight"], p[f"{name}.time.bias"])
    h = h + tb.reshape(-1, 1, 1)
    h = silu(group_norm(h, groups, p[f"{name}.norm2.gamma"], p[f"{name}.norm2.beta"]))
    h = conv2d(h, p[f"{name}.conv2.weight"], p[f"{name}.conv2.bias"], padding=1)
    if f"{name}.skip.weight" in p:
        x = conv2d(x, p[f"{name}.skip.weight"], p[f"{name}.skip.bias"])
    return x + h


def _attn_block(p: ModelParams, proj: _Projector, name: str, x: Tensor, ctx: Tensor | None, groups: int) -> Tensor:
    c, hgt, wid = x.shape
    h = group_norm(x, groups, p[f"{name}.norm.gamma"], p[f"{name}.norm.beta"])
    tokens = h.reshape(c, hgt * wid).T
    source = tokens if ctx is None else ctx
    q = proj(f"{name}.to_q", tokens)
    k = proj(f"{name}.to_k", source)
    v = proj(f"{name}.to_v", source)
    a = attention(q, k, v)
    out = proj(f"{name}.to_out", a)
    return x + out.T.reshape(c, hgt, wid)


def _stage_attn(p, proj, prefix, h, cond, cfg):
    if cfg.self_attention:
        h = _attn_block(p, proj, f"{prefix}.self_attn", h, None, cfg.groups)
    if cond is None:
        return h
    return _attn_block(p, proj, f"{prefix}.cross_attn", h, cond, cfg.groups)


def unet_forward(
    params: ModelParams,
    x_t: Tensor,
    t: int,
    cond: Tensor,
    cfg: UNetConfig,
    adapters=None,
) -> Tensor:
    """Predict the noise in ``x_t`` (C x H x W) at step ``t`` given ``cond`` (L x cond_dim)."""
    c, hgt, wid = x_t.shape
    div = 2**cfg.depth
    if hgt % div or wid % div:
        raise ConfigError(f"spatial size {hgt}x{wid} not divisible by 2^depth={div}")
    if c != cfg.in_channels:
        raise ConfigError(f"expected {cfg.in_channels} input channels, got {c}")
    if cond is not None and cond.shape[-1] != cfg.cond_dim:
        raise ConfigError(f"cond width {cond.shape[-1]} != cond_dim {cfg.cond_dim}")
    p = params
    proj = _Projector(params, adapters)
    temb = time_embedding(t, cfg.time_embed_dim).reshape(1, -1)
    temb = silu(linear(temb, p["time_mlp.0.weight"], p["time_mlp.0.bias"]))
    temb = linear(temb, p["time_mlp.1.weight"], p["time_mlp.1.bias"])

    h = conv2d(x_t, p["conv_in.weight"], p["conv_in.bias"], padding=1)
    skips = []
    for i in range(cfg.depth):
        h = _resblock(p, f"down.{i}.res", h, temb, cfg.groups)
        if i in cfg.attn_resolutions:
            h = _stage_attn(p, proj, f"down.{i}", h, cond, cfg)
        skips.append(h)
        h = conv2d(avg_pool2x(h), p[f"down.{i}.downsample.weight"], p[f"down.{i}.downsample.bias"], padding=1)
    h = _resblock(p, "mid.res1", h, temb, cfg.groups)
    if cfg.depth in cfg.attn_resolutions:
        h = _stage_attn(p, proj, "mid", h, cond, cfg)
    h = _resblock(p, "mid.res2", h, temb, cfg.groups)
    for i in reversed(range(cfg.depth)):
        h = concat([upsample2x(h), skips[i]], axis=0)
        h = _resblock(p, f"up.{i}.res", h, temb, cfg.groups)
        if i in cfg.attn_resolutions:
            h = _stage_attn(p, proj, f"up.{i}", h, cond, cfg)
    h = silu(group_norm(h, cfg.groups, p["norm_out.gamma"], p["norm_out.beta"]))
    return conv2d(h, p["conv_out.weight"], p["conv_out.bias"], padding=1)


@dataclass
class UNet:
    """Callable noise predictor bundling config, parameters and optional adapters."""

    cfg: UNetConfig
    params: ModelParams
    adapters: object = None

    def __call__(self, x_t: Tensor, t: int, cond: Tensor | None) -> Tensor:
        return unet_forward(self.params, x_t, t, cond, self.cfg, self.adapters)

    def attention_paths(self) -> list[str]:
        return sorted(k for k in self.params if ".to_" in k and k.endswith(".weight"))


# -- autoencoder --------------------------------------------------------------


def init_autoencoder(cfg: AutoencoderConfig, seed: int = 0) -> ModelParams:
    rng = Rng(seed)
    h = cfg.hidden
    p: dict[str, Tensor] = {}
    _conv_params(p, "enc.conv_in", rng, cfg.in_channels, h)
    for i in range(cfg.m):
        _conv_params(p, f"enc.down.{i}", rng, h, h)
    _conv_params(p, "enc.conv_out", rng, h, cfg.latent_channels)
    _conv_params(p, "dec.conv_in", rng, cfg.latent_channels, h)
    for i in range(cfg.m):
        _conv_params(p, f"dec.up.{i}", rng, h, h)
    _conv_params(p, "dec.conv_out", rng, h, cfg.in_channels)
    return p


def _check_f(x: Tensor, f: int) -> None:
    if x.shape[1] % f or x.shape[2] % f:
        raise ConfigError(f"downsampling factor {f} does not divide {x.shape[1]}x{x.shape[2]}")


def ae_encode(params: ModelParams, x: Tensor, cfg: AutoencoderConfig) -> Tensor:
    _check_f(x, cfg.f)
    p = params
    h = silu(conv2d(x, p["enc.conv_in.weight"], p["enc.conv_in.bias"], padding=1))
    for i in range(cfg.m):
        h = silu(conv2d(avg_pool2x(h), p[f"enc.down.{i}.weight"], p[f"enc.down.{i}.bias"], padding=1))
    return conv2d(h, p["enc.conv_out.weight"], p["enc.conv_out.bias"], padding=1)


def ae_decode(params: ModelParams, z: Tensor, cfg: AutoencoderConfig) -> Tensor:
    p = params
    h = silu(conv2d(z, p["dec.conv_in.weight"], p["dec.conv_in.bias"], padding=1))
    for i in range(cfg.m):
        h = silu(conv2d(upsample2x(h), p[f"dec.up.{i}.weight"], p[f"dec.up.{i}.bias"], padding=1))
    return conv2d(h, p["dec.conv_out.weight"], p["dec.conv_out.bias"], padding=1)


def ae_train_step(params: ModelParams, batch: list[Tensor], opt_state, lr: float, cfg: AutoencoderConfig) -> float:
    """One Adam step on mean reconstruction MSE over ``batch``; returns the loss."""
    from .core import mse

    total = None
    for x in batch:
        loss = mse(ae_decode(params, ae_encode(params, x, cfg), cfg), x)
        total = loss if total is None else total + loss
    total = total * (1.0 / len(batch))
    total.backward()
    opt_state.step(lr)
    return total.item()


def param_count(params: ModelParams) -> int:
    return sum(t.size for t in params.values())


def clone_params(params: ModelParams, dtype=np.float32, requires_grad: bool | None = None) -> ModelParams:
    return {
        k: Tensor(v.data.copy(), requires_grad=v.requires_grad if requires_grad is None else requires_grad, dtype=dtype)
        for k, v in params.items()
    }

