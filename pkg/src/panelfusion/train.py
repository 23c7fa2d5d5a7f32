"""Training loops, learning-rate schedule and model bundles.

A :class:`Bundle` is everything a pipeline needs to generate: the U-Net and
its config, the text encoder and vocabulary, the noise schedule, an optional
autoencoder for latent mode, and optional LoRA adapters.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .core import Adam, ConfigError, NumericError, Rng, Tensor, no_grad
from .data import DatasetManifest, load_image, to_tensor
from .diffusion import NoiseSchedule, ddpm_loss, default_schedule
from .lora import LoRASet, adapters_from_tensors
from .model import (
    AutoencoderConfig,
    UNet,
    UNetConfig,
    ae_decode,
    ae_encode,
    ae_train_step,
    init_autoencoder,
    init_unet,
)
from .text import TextEncoderParams, Vocab, encode_text, init_text_encoder, tokenize

log = logging.getLogger(__name__)


def cosine_restart_lr(step: int, lr0: float, period: int) -> float:
    """lr0 * (1 + cos(pi * (step mod period) / period)) / 2, restarting every ``period`` steps."""
    if step < 0:
        raise ConfigError(f"step must be >= 0, got {step}")
    if period < 1:
        raise ConfigError(f"period must be >= 1, got {period}")
    phase = (step % period) / period
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * phase))


def expected_pairs_per_timestep(total_steps: int, T: int) -> float:
    return total_steps / T


@dataclass
class TrainConfig:
    total_steps: int = 5000
    batch_size: int = 1
    lr0: float = 1e-4
    lr_period: int | None = None  # defaults to total_steps // 2
    seed: int = 0
    checkpoint_every: int = 0
    latent_mode: bool = False
    log_every: int = 50

    def __post_init__(self):
        if self.total_steps < 1:
            raise ConfigError("total_steps must be >= 1")
        if self.lr_period is None:
            self.lr_period = max(1, self.total_steps // 2)
        if self.lr_period < 1:
            raise ConfigError("lr_period must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    meta: dict

    def save(self, path) -> None:
        save_checkpoint(self.tensors, self.meta, path)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls(*load_checkpoint(path))


# -- bundles ------------------------------------------------------------------------


@dataclass
class Bundle:
    unet: UNet
    text: TextEncoderParams
    vocab: Vocab
    schedule: NoiseSchedule
    ae_cfg: AutoencoderConfig | None = None
    ae_params: dict | None = None
    latent_scale: float = 1.0

    @property
    def latent_mode(self) -> bool:
        return self.ae_params is not None

    @property
    def adapters(self) -> LoRASet | None:
        return self.unet.adapters

    def cond(self, prompt: str) -> Tensor:
        return encode_text(tokenize(prompt, self.vocab), self.text)

    def encode(self, x: Tensor) -> Tensor:
        if not self.latent_mode:
            return x
        with no_grad():
            return ae_encode(self.ae_params, x, self.ae_cfg) * np.float32(self.latent_scale)

    def decode(self, z: Tensor) -> Tensor:
        if not self.latent_mode:
            return z
        with no_grad():
            return ae_decode(self.ae_params, z * np.float32(1.0 / self.latent_scale), self.ae_cfg)

    def sample_shape(self, image_size: int) -> tuple[int, int, int]:
        if self.latent_mode:
            s = image_size // self.ae_cfg.f
            return (self.ae_cfg.latent_channels, s, s)
        return (self.unet.cfg.in_channels, image_size, image_size)

    def base_tensors(self) -> dict[str, np.ndarray]:
        out = {f"unet.{k}": v.data for k, v in self.unet.params.items()}
        out.update({k: v.data for k, v in self.text.tensors().items()})
        if self.ae_params is not None:
            out.update({f"ae.{k}": v.data for k, v in self.ae_params.items()})
        return out

    def base_meta(self) -> dict:
        return {
            "kind": "base",
            "unet": self.unet.cfg.to_dict(),
            "schedule": self.schedule.to_dict(),
            "vocab": self.vocab.tokens,
            "ae": None if self.ae_cfg is None else self.ae_cfg.to_dict(),
            "latent_scale": self.latent_scale,
        }

    def save(self, path, extra_meta: dict | None = None) -> None:
        save_checkpoint(self.base_tensors(), {**self.base_meta(), **(extra_meta or {})}, path)


def new_bundle(
    unet_cfg: UNetConfig | None = None,
    vocab: Vocab | None = None,
    schedule: NoiseSchedule | None = None,
    seed: int = 0,
    ae: tuple[AutoencoderConfig, dict, float] | None = None,
) -> Bundle:
    vocab = vocab or Vocab()
    if ae is not None:
        ae_cfg = ae[0]
        unet_cfg = unet_cfg or UNetConfig()
        if unet_cfg.in_channels != ae_cfg.latent_channels:
            unet_cfg = UNetConfig(**{**unet_cfg.to_dict(), "in_channels": ae_cfg.latent_channels,
                                     "attn_resolutions": unet_cfg.attn_resolutions})
    unet_cfg = unet_cfg or UNetConfig()
    text = init_text_encoder(len(vocab), unet_cfg.cond_dim, seed=seed + 1)
    bundle = Bundle(UNet(unet_cfg, init_unet(unet_cfg, seed)), text, vocab, schedule or default_schedule())
    if ae is not None:
        bundle.ae_cfg, bundle.ae_params, bundle.latent_scale = ae
        for t in bundle.ae_params.values():
            t.requires_grad = False
    return bundle


def _bundle_from_base(tensors: dict, meta: dict) -> Bundle:
    cfg = UNetConfig.from_dict(meta["unet"])
    params = {k[5:]: Tensor(v, requires_grad=True) for k, v in tensors.items() if k.startswith("unet.")}
    text = TextEncoderParams.from_tensors(tensors)
    text.table.requires_grad = True
    ae_cfg = ae_params = None
    if meta.get("ae"):
        ae_cfg = AutoencoderConfig(**meta["ae"])
        ae_params = {k[3:]: Tensor(v) for k, v in tensors.items() if k.startswith("ae.")}
    return Bundle(
        UNet(cfg, params),
        text,
        Vocab.from_list(meta["vocab"]),
        NoiseSchedule.from_dict(meta["schedule"]),
        ae_cfg,
        ae_params,
        float(meta.get("latent_scale", 1.0)),
    )


def load_bundle(path, base_override=None) -> Bundle:
    """Load a base checkpoint, or an adapter checkpoint together with its base."""
    tensors, meta = load_checkpoint(path)
    if not meta.get("adapter_only"):
        return _bundle_from_base(tensors, meta)
    base_path = base_override or meta.get("base_checkpoint")
    if base_path is None:
        raise ConfigError(f"{path} is an adapter checkpoint without a base checkpoint reference")
    base_path = Path(base_path)
    if not base_path.is_absolute() and not base_path.exists():
        base_path = Path(path).parent / base_path
    bundle = _bundle_from_base(*load_checkpoint(base_path))
    bundle.unet.adapters = adapters_from_tensors(tensors, meta, bundle.unet.params)
    if "text.table" in tensors:
        bundle.text = TextEncoderParams.from_tensors(tensors)
    return bundle


def load_manifest_images(manifest: DatasetManifest, channels: int = 1) -> list[Tensor]:
    mode = "L" if channels == 1 else "RGB"
    return [to_tensor(load_image(p, mode)) for p, _ in manifest.records]


# -- training loops -----------------------------------------------------------------


LogFn = Callable[[dict], None]


def _diffusion_loop(
    bundle: Bundle,
    images: list[Tensor],
    captions: list[str],
    trainable: dict[str, Tensor],
    cfg: TrainConfig,
    on_log: LogFn | None,
    on_checkpoint: Callable[[int], None] | None,
) -> list[float]:
    if not images:
        raise ConfigError("training set is empty")
    rng = Rng(cfg.seed)
    opt = Adam(trainable)
    token_cache = {c: tokenize(c, bundle.vocab) for c in set(captions)}
    x0_cache: dict[int, Tensor] = {}
    T = bundle.schedule.T
    losses = []
    for step in range(cfg.total_steps):
        lr = cosine_restart_lr(step, cfg.lr0, cfg.lr_period)
        total = None
        t_sampled = []
        try:
            for _ in range(cfg.batch_size):
                i = rng.randint(0, len(images))
                t = rng.randint(1, T + 1)
                t_sampled.append(t)
                if i not in x0_cache:
                    x0_cache[i] = bundle.encode(images[i])
                cond = encode_text(token_cache[captions[i]], bundle.text)
                loss = ddpm_loss(bundle.unet, x0_cache[i], t, cond, rng, bundle.schedule)
                total = loss if total is None else total + loss
            if cfg.batch_size > 1:
                total = total * (1.0 / cfg.batch_size)
            total.backward()
        except NumericError as exc:
            log.error("non-finite loss at step %d (lr=%g): %s", step, lr, exc)
            raise NumericError(f"non-finite loss at step {step} (lr={lr:g})") from exc
        opt.step(lr)
        value = total.item()
        losses.append(value)
        if on_log is not None and cfg.log_every and (step % cfg.log_every == 0 or step == cfg.total_steps - 1):
            on_log({"step": step, "loss": value, "lr": lr, "t_sampled": t_sampled[0] if len(t_sampled) == 1 else t_sampled})
        if on_checkpoint is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            on_checkpoint(step + 1)
    return losses


def train_base(
    bundle: Bundle,
    images: list[Tensor],
    captions: list[str],
    cfg: TrainConfig,
    on_log: LogFn | None = None,
) -> list[float]:
    """Full-parameter training of the U-Net and text table (stands in for a pretrained base)."""
    trainable = {f"unet.{k}": v for k, v in bundle.unet.params.items()}
    trainable["text.table"] = bundle.text.table
    for t in trainable.values():
        t.requires_grad = True
    return _diffusion_loop(bundle, images, captions, trainable, cfg, on_log, None)


@dataclass
class LoRARun:
    checkpoint: Checkpoint
    losses: list[float] = field(default_factory=list)


def lora_checkpoint(bundle: Bundle, lora: LoRASet, cfg: TrainConfig, step: int, base_path=None) -> Checkpoint:
    tensors = {k: v.data.copy() for k, v in lora.parameters().items()}
    tensors.update({k: v.data.copy() for k, v in bundle.text.tensors().items()})
    meta = {
        "adapter_only": True,
        "step": step,
        "lora": {"rank": lora.adapters[0].rank, "targets": [a.target_path for a in lora.adapters]},
        "config": asdict(cfg),
    }
    if base_path is not None:
        meta["base_checkpoint"] = str(Path(base_path).resolve())
    return Checkpoint(tensors, meta)


def train_lora(
    bundle: Bundle,
    lora: LoRASet,
    manifest: DatasetManifest,
    cfg: TrainConfig,
    images: list[Tensor] | None = None,
    base_path=None,
    checkpoint_dir=None,
    on_log: LogFn | None = None,
) -> LoRARun:
    """Fine-tune adapter factors and the text table; base U-Net weights stay frozen.

    Each step draws an image index and a timestep uniformly from the seeded
    stream, then the noise for the epsilon-MSE loss from the same stream.
    """
    if len(manifest) == 0:
        raise ConfigError("manifest is empty")
    if bundle.unet.adapters is not lora:
        bundle.unet.adapters = lora
    if any(t.requires_grad for t in lora.frozen_base.values()):
        raise ConfigError("base parameters must be frozen before LoRA training")
    if images is None:
        images = load_manifest_images(manifest, _pixel_channels(bundle))
    captions = [c for _, c in manifest.records]
    trainable = dict(lora.parameters())
    bundle.text.table.requires_grad = True
    trainable["text.table"] = bundle.text.table

    def emit(step):
        if checkpoint_dir is not None:
            lora_checkpoint(bundle, lora, cfg, step, base_path).save(Path(checkpoint_dir) / f"lora_step{step:06d}.pnlf")

    losses = _diffusion_loop(bundle, images, captions, trainable, cfg, on_log, emit)
    return LoRARun(lora_checkpoint(bundle, lora, cfg, cfg.total_steps, base_path), losses)


def _pixel_channels(bundle: Bundle) -> int:
    return bundle.ae_cfg.in_channels if bundle.latent_mode else bundle.unet.cfg.in_channels


def train_autoencoder(
    images: list[Tensor],
    cfg: AutoencoderConfig,
    steps: int = 2000,
    lr: float = 1e-3,
    batch_size: int = 4,
    seed: int = 0,
) -> tuple[dict, list[float], float]:
    """Plain-MSE reconstruction training. Returns (params, losses, latent_scale)."""
    if not images:
        raise ConfigError("no images to train the autoencoder on")
    params = init_autoencoder(cfg, seed)
    opt = Adam(params)
    rng = Rng(seed)
    losses = []
    for _ in range(steps):
        batch = [images[rng.randint(0, len(images))] for _ in range(batch_size)]
        losses.append(ae_train_step(params, batch, opt, lr, cfg))
    with no_grad():
        lat = np.concatenate([ae_encode(params, x, cfg).data.ravel() for x in images[:64]])
    scale = float(1.0 / max(lat.std(), 1e-6))
    for t in params.values():
        t.requires_grad = False
    return params, losses, scale


def save_autoencoder(path, cfg: AutoencoderConfig, params: dict, latent_scale: float) -> None:
    save_checkpoint(
        {f"ae.{k}": v.data for k, v in params.items()},
        {"kind": "autoencoder", "ae": cfg.to_dict(), "latent_scale": latent_scale},
        path,
    )


def load_autoencoder(path) -> tuple[AutoencoderConfig, dict, float]:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "autoencoder":
        raise ConfigError(f"{path} is not an autoencoder checkpoint")
    params = {k[3:]: Tensor(v) for k, v in tensors.items() if k.startswith("ae.")}
    return AutoencoderConfig(**meta["ae"]), params, float(meta["latent_scale"])


class JsonlLogger:
    """Append one JSON object per call to a file."""

    def __init__(self, path):
        self.fh = open(path, "w", encoding="utf-8", newline="\n")

    def __call__(self, record: dict) -> None:
        self.fh.write(json.dumps(record) + "\n")
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()

