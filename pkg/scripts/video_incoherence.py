"""Per-frame img2img on a static clip: shared seeds stay coherent, independent seeds flicker.

    python scripts/video_incoherence.py --ckpt runs/toy/lora.pnlf --frames 6
"""

from __future__ import annotations

import argparse
import json

from panelfusion.data import generate_synthetic_corpus
from panelfusion.pipelines import GenerationRequest, video_frames
from panelfusion.train import load_bundle


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--ckpt", required=True)
    ap.add_argument("--frames", type=int, default=6)
    ap.add_argument("--strength", type=float, default=0.5)
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args()

    bundle = load_bundle(a.ckpt)
    frame = generate_synthetic_corpus("shape_panels", 1, seed=a.seed)[0]
    clip = [frame.copy() for _ in range(a.frames)]
    req = GenerationRequest(mode="video", input_path="-", strength=a.strength, seed=a.seed)
    report = {}
    for mode in ("shared", "independent"):
        _, rep = video_frames(clip, req, bundle, mode)
        report[mode] = {"ti_input": rep.ti_input, "ti_output": rep.ti_output}
    print(json.dumps(report, indent=2))


if __name__ == "__main__":
    main()
