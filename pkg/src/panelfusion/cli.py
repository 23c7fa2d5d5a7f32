"""Command-line entry point: ``panelfusion <subcommand> ...``.

Failures exit with status 1 and print one JSON line to stderr:
``{"error": "<ExceptionType>", "message": "..."}``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data, pipelines, text, train
from .core import ConfigError
from .diffusion import default_schedule, make_schedule
from .lora import DEFAULT_TARGETS, attach
from .model import AutoencoderConfig, UNetConfig


log = logging.getLogger("panelfusion")


def _cmd_prepare(a) -> int:
    grid = data.PanelGrid.parse(a.grid) if a.grid else data.PanelGrid()
    report = data.prepare_pages(a.pages, a.out, threshold=a.threshold, grid=grid)
    Path(a.out, "classification.json").write_text(report.to_json() + "\n", encoding="utf-8")
    counts = {k.value: sum(v == k.value for v in report.pages.values()) for k in data.PageKind}
    print(json.dumps({"pages": len(report.pages), **counts, "panels": len(report.panels)}))
    return 0


def _cmd_manifest(a) -> int:
    m = data.build_manifest(a.panels, a.caption)
    m.write(a.out)
    print(json.dumps({"records": len(m), "out": a.out}))
    return 0


def _load_images(manifest_path, channels=1):
    manifest = data.DatasetManifest.read(manifest_path)
    if len(manifest) == 0:
        raise ConfigError(f"manifest {manifest_path} is empty")
    return manifest, train.load_manifest_images(manifest, channels)


def _cmd_train_ae(a) -> int:
    _, images = _load_images(a.manifest)
    cfg = AutoencoderConfig(m=a.m, latent_channels=a.latent_channels, in_channels=images[0].shape[0])
    params, losses, scale = train.train_autoencoder(images, cfg, steps=a.steps, lr=a.lr, seed=a.seed)
    train.save_autoencoder(a.out, cfg, params, scale)
    print(json.dumps({"final_loss": losses[-1], "latent_scale": scale, "out": a.out}))
    return 0


def _logger(path):
    return train.JsonlLogger(path) if path else None


def _cmd_train_base(a) -> int:
    manifest, images = _load_images(a.manifest)
    captions = [c for _, c in manifest.records]
    vocab = text.Vocab.from_captions(captions)
    ae = train.load_autoencoder(a.ae) if a.ae else None
    ucfg = UNetConfig(
        in_channels=images[0].shape[0],
        base_channels=a.base_channels,
        attn_resolutions=tuple(int(s) for s in a.attn.split(",")) if a.attn else (),
    )
    schedule = default_schedule(a.T) if a.beta is None else make_schedule(a.T, *a.beta)
    bundle = train.new_bundle(ucfg, vocab, schedule, seed=a.seed, ae=ae)
    cfg = train.TrainConfig(total_steps=a.steps, lr0=a.lr, lr_period=a.lr_period or a.steps + 1, seed=a.seed)
    logger = _logger(a.log)
    losses = train.train_base(bundle, images, captions, cfg, on_log=logger)
    if logger:
        logger.close()
    bundle.save(a.out, {"step": a.steps})
    print(json.dumps({"final_loss": float(np.mean(losses[-max(1, len(losses) // 10):])), "out": a.out}))
    return 0


def _cmd_train_lora(a) -> int:
    manifest = data.DatasetManifest.read(a.manifest)
    if len(manifest) == 0:
        raise ConfigError(f"manifest {a.manifest} is empty")
    bundle = train.load_bundle(a.base)
    if bundle.adapters is not None:
        raise ConfigError(f"{a.base} already carries adapters; pass a base checkpoint")
    lora = attach(bundle.unet.params, rank=a.rank, targets=a.targets, seed=a.seed)
    bundle.unet.adapters = lora
    cfg = train.TrainConfig(
        total_steps=a.steps, lr0=a.lr, lr_period=a.lr_period, seed=a.seed,
        checkpoint_every=a.checkpoint_every, latent_mode=bundle.latent_mode,
    )
    logger = _logger(a.log)
    run = train.train_lora(
        bundle, lora, manifest, cfg, base_path=a.base,
        checkpoint_dir=Path(a.out).parent if a.checkpoint_every else None, on_log=logger,
    )
    if logger:
        logger.close()
    run.checkpoint.save(a.out)
    k = max(1, len(run.losses) // 10)
    print(json.dumps({
        "trainable": lora.trainable_count(),
        "first_decile_loss": float(np.mean(run.losses[:k])),
        "last_decile_loss": float(np.mean(run.losses[-k:])),
        "out": a.out,
    }))
    return 0


def _cmd_train_clip(a) -> int:
    corpus = Path(a.corpus)
    mpath = corpus / "manifest.jsonl"
    if not mpath.exists():
        raise ConfigError(f"{corpus} has no manifest.jsonl")
    manifest = data.DatasetManifest.read(mpath)
    pairs = []
    for p, c in manifest.records:
        img_path = Path(p) if Path(p).is_absolute() or Path(p).exists() else corpus / p
        pairs.append((data.to_tensor(data.load_image(img_path, "L")), c))
    model = text.train_toy_clip(pairs, epochs=a.epochs, lr=a.lr, seed=a.seed)
    tensors = {"text.table": model.text.table.data, "text.proj": model.text_proj.data}
    tensors.update({f"img.{k}": v.data for k, v in model.image.tensors.items()})
    from .checkpoint import save_checkpoint

    save_checkpoint(tensors, {"kind": "toy_clip", "vocab": model.vocab.tokens}, a.out)
    captions = sorted({c for _, c in pairs})
    acc = text.retrieval_at_1(model, [x for x, _ in pairs], [c for _, c in pairs], captions)
    print(json.dumps({"final_loss": model.losses[-1], "train_retrieval_at_1": acc, "out": a.out}))
    return 0


def _request(a, mode) -> pipelines.GenerationRequest:
    return pipelines.GenerationRequest(
        mode=mode,
        prompt=a.prompt,
        input_path=getattr(a, "input", None) or getattr(a, "frames", None),
        strength=getattr(a, "strength", pipelines.DEFAULT_STRENGTH),
        seed=a.seed,
        output_path=a.out,
        count=getattr(a, "count", 1),
        image_size=a.size,
        edge_low=getattr(a, "edge_low", 50.0),
        edge_high=getattr(a, "edge_high", 100.0),
    )


def _cmd_generate(a) -> int:
    bundle = train.load_bundle(a.ckpt, base_override=a.base)
    mode = a.command if a.command != "sample" else "txt2img"
    req = _request(a, mode)
    log.info("mode=%s strength=%s seed=%d", mode, req.strength, req.seed)
    fn = {"txt2img": pipelines.txt2img, "img2img": pipelines.img2img, "edge2img": pipelines.edge2img}[mode]
    images = fn(req, bundle)
    print(json.dumps({"images": len(images), "out": a.out}))
    return 0


def _cmd_video(a) -> int:
    bundle = train.load_bundle(a.ckpt, base_override=a.base)
    req = _request(a, "video")
    frames = pipelines.list_frames(a.frames)
    if not frames:
        raise ConfigError(f"no frames found in {a.frames}")
    _, report = pipelines.video_frames(frames, req, bundle, a.seed_mode)
    if a.report:
        Path(a.report).write_text(report.to_json() + "\n", encoding="utf-8")
    print(json.dumps({"frames": len(frames), "ti_input": report.ti_input, "ti_output": report.ti_output}))
    return 0


def _cmd_gradcheck(a) -> int:
    from .core.verify import run_gradcheck_suite

    results = run_gradcheck_suite(range(a.seeds))
    failed = [r for r in results if not r.passed]
    worst: dict[str, float] = {}
    for r in results:
        worst[r.name] = max(worst.get(r.name, 0.0), r.max_rel_err)
    for name, err in sorted(worst.items()):
        print(f"{name:20s} max_rel_err={err:.3e}")
    print(json.dumps({"checks": len(results), "failed": len(failed)}))
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="panelfusion", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("prepare", help="classify pages and crop B/W pages into panels")
    s.add_argument("--pages", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--threshold", type=int, default=10)
    s.add_argument("--grid", help="rows,cols[,margins[,gutters]] in pixels")
    s.set_defaults(fn=_cmd_prepare)

    s = sub.add_parser("manifest", help="write a JSON-lines manifest for a panel directory")
    s.add_argument("--panels", required=True)
    s.add_argument("--caption", default="CNH3000")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=_cmd_manifest)

    s = sub.add_parser("train-ae", help="train the reconstruction autoencoder")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--m", type=int, default=2)
    s.add_argument("--latent-channels", type=int, default=4)
    s.add_argument("--steps", type=int, default=2000)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=_cmd_train_ae)

    s = sub.add_parser("train-base", help="full-parameter training of a base U-Net")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int, default=3000)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--lr-period", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--ae", help="autoencoder checkpoint; enables latent mode")
    s.add_argument("--base-channels", type=int, default=32)
    s.add_argument("--attn", default="2", help="comma-separated stage indices with attention")
    s.add_argument("--T", type=int, default=100)
    s.add_argument("--beta", type=float, nargs=2, metavar=("START", "END"))
    s.add_argument("--log")
    s.set_defaults(fn=_cmd_train_base)

    s = sub.add_parser("train-lora", help="LoRA fine-tuning on a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--base", required=True)
    s.add_argument("--rank", type=int, default=4)
    s.add_argument("--steps", type=int, default=5000)
    s.add_argument("--lr", type=float, default=1e-4)
    s.add_argument("--lr-period", type=int, help="defaults to steps/2")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--targets", default=DEFAULT_TARGETS)
    s.add_argument("--checkpoint-every", type=int, default=0)
    s.add_argument("--log", help="JSON-lines training log")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=_cmd_train_lora)

    s = sub.add_parser("train-clip", help="toy contrastive image/text training")
    s.add_argument("--corpus", required=True, help="directory with images and manifest.jsonl")
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int, default=30)
    s.add_argument("--lr", type=float, default=3e-3)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=_cmd_train_clip)

    def gen_common(s, strength=True):
        s.add_argument("--ckpt", required=True)
        s.add_argument("--base", help="override the base checkpoint of an adapter checkpoint")
        s.add_argument("--prompt", default="CNH3000")
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--size", type=int, default=32)
        s.add_argument("--out", required=True)
        if strength:
            s.add_argument("--strength", type=float, default=pipelines.DEFAULT_STRENGTH)

    s = sub.add_parser("sample", help="text-to-image")
    gen_common(s, strength=False)
    s.add_argument("--count", type=int, default=1)
    s.set_defaults(fn=_cmd_generate)

    for name in ("img2img", "edge2img"):
        s = sub.add_parser(name, help=f"{name} from an input image")
        gen_common(s)
        s.add_argument("--input", required=True)
        s.add_argument("--count", type=int, default=1)
        if name == "edge2img":
            s.add_argument("--edge-low", type=float, default=50.0)
            s.add_argument("--edge-high", type=float, default=100.0)
        s.set_defaults(fn=_cmd_generate)

    s = sub.add_parser("video", help="per-frame img2img over a directory of PNG frames")
    gen_common(s)
    s.add_argument("--frames", required=True)
    s.add_argument("--seed-mode", choices=("shared", "independent"), default="shared")
    s.add_argument("--report")
    s.set_defaults(fn=_cmd_video)

    s = sub.add_parser("gradcheck", help="run the gradient verification suite")
    s.add_argument("--seeds", type=int, default=10)
    s.set_defaults(fn=_cmd_gradcheck)
    return p


def run_cli(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one parseable line
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_cli())
