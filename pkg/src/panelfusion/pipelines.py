"""Generation pipelines: text-to-image, image-to-image, edge-map-to-image and per-frame video."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import ConfigError, Rng, Tensor
from .data import IMAGE_SUFFIXES, edge_map, from_tensor, load_image, save_png, to_tensor
from .diffusion import denoise, noise_to_step
from .train import Bundle

MODES = ("txt2img", "img2img", "edge2img", "video")
DEFAULT_STRENGTH = 0.6


@dataclass
class GenerationRequest:
    mode: str = "txt2img"
    prompt: str = "CNH3000"
    input_path: str | None = None
    strength: float = DEFAULT_STRENGTH
    seed: int = 0
    output_path: str | None = None
    count: int = 1
    image_size: int = 32
    edge_low: float = 50.0
    edge_high: float = 100.0
    clip_output: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.mode != "txt2img" and self.input_path is None:
            raise ConfigError(f"mode {self.mode} requires an input path")
        if not 0.0 <= self.strength <= 1.0:
            raise ConfigError(f"strength must be in [0, 1], got {self.strength}")
        if self.count < 1:
            raise ConfigError("count must be >= 1")


@dataclass
class TemporalReport:
    ti_input: float | None
    ti_output: float | None
    input_diffs: list[float] = field(default_factory=list)
    output_diffs: list[float] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def _write(images: list[np.ndarray], out_dir, stem: str, seeds: list[int]) -> list[Path]:
    paths = []
    for img, s in zip(images, seeds):
        p = Path(out_dir) / f"{stem}_seed{s}.png"
        save_png(img, p)
        paths.append(p)
    return paths


def _pixel_mode(bundle: Bundle) -> str:
    ch = bundle.ae_cfg.in_channels if bundle.latent_mode else bundle.unet.cfg.in_channels
    return "L" if ch == 1 else "RGB"


def txt2img(req: GenerationRequest, bundle: Bundle) -> list[np.ndarray]:
    """Sample ``req.count`` images with seeds ``seed, seed+1, ...`` from pure noise."""
    cond = bundle.cond(req.prompt)
    shape = bundle.sample_shape(req.image_size)
    seeds = [req.seed + i for i in range(req.count)]
    images = []
    for s in seeds:
        rng = Rng(s)
        x_T = Tensor(rng.normal(shape))
        x = denoise(bundle.unet, x_T, bundle.schedule.T, cond, bundle.schedule, rng, req.clip_output)
        images.append(from_tensor(bundle.decode(x)))
    if req.output_path:
        _write(images, req.output_path, "txt2img", seeds)
    return images


def _img2img_one(image: np.ndarray, strength: float, seed: int, cond: Tensor, bundle: Bundle, clip: bool) -> np.ndarray:
    x = bundle.encode(to_tensor(image))
    rng = Rng(seed)
    x_start, t_start = noise_to_step(x, strength, bundle.schedule, rng)
    x = denoise(bundle.unet, x_start, t_start, cond, bundle.schedule, rng, clip)
    return from_tensor(bundle.decode(x))


def img2img(req: GenerationRequest, bundle: Bundle, image: np.ndarray | None = None) -> list[np.ndarray]:
    """Noise the input to ``round(strength * T)`` and denoise from there."""
    if image is None:
        image = load_image(req.input_path, _pixel_mode(bundle))
    cond = bundle.cond(req.prompt)
    seeds = [req.seed + i for i in range(req.count)]
    images = [_img2img_one(image, req.strength, s, cond, bundle, req.clip_output) for s in seeds]
    if req.output_path:
        _write(images, req.output_path, req.mode, seeds)
    return images


def edge2img(req: GenerationRequest, bundle: Bundle, image: np.ndarray | None = None) -> list[np.ndarray]:
    if image is None:
        image = load_image(req.input_path, "RGB")
    edges = edge_map(image, req.edge_low, req.edge_high)
    if _pixel_mode(bundle) == "RGB":
        edges = np.repeat(edges[..., None], 3, axis=2)
    return img2img(req, bundle, image=edges)


def temporal_inconsistency(frames: list[np.ndarray]) -> tuple[float | None, list[float]]:
    """Mean absolute inter-frame difference (pixel values scaled to [0, 1])."""
    if len(frames) < 2:
        return None, []
    diffs = [
        float(np.mean(np.abs(b.astype(np.float64) - a.astype(np.float64))) / 255.0)
        for a, b in zip(frames[:-1], frames[1:])
    ]
    return float(np.mean(diffs)), diffs


def list_frames(frame_dir) -> list[Path]:
    return sorted(p for p in Path(frame_dir).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def video_frames(
    frames: list[np.ndarray] | list[str],
    req: GenerationRequest,
    bundle: Bundle,
    seed_mode: str = "shared",
) -> tuple[list[np.ndarray], TemporalReport]:
    """Run image-to-image on each frame; ``shared`` reuses one seed, ``independent`` uses seed + i."""
    if seed_mode not in ("shared", "independent"):
        raise ConfigError(f"seed_mode must be 'shared' or 'independent', got {seed_mode!r}")
    mode = _pixel_mode(bundle)
    frames = [load_image(f, mode) if isinstance(f, (str, Path)) else f for f in frames]
    cond = bundle.cond(req.prompt)
    outputs = []
    for i, frame in enumerate(frames):
        seed = req.seed if seed_mode == "shared" else req.seed + i
        outputs.append(_img2img_one(frame, req.strength, seed, cond, bundle, req.clip_output))
    if req.output_path:
        for i, img in enumerate(outputs):
            save_png(img, Path(req.output_path) / f"frame_{i:05d}.png")
    ti_in, d_in = temporal_inconsistency(frames)
    ti_out, d_out = temporal_inconsistency(outputs)
    return outputs, TemporalReport(ti_in, ti_out, d_in, d_out)
