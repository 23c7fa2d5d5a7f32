"""Run the desk-scale LoRA fine-tune on synthetic shapes and report the outcome.

    python scripts/toy_finetune.py --steps 5000 --out runs/toy
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

from panelfusion.data import save_png
from panelfusion.toy import ToyFinetuneConfig, run_toy_finetune
from panelfusion.train import JsonlLogger


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=ToyFinetuneConfig.steps)
    ap.add_argument("--lr", type=float, default=ToyFinetuneConfig.lr)
    ap.add_argument("--base-steps", type=int, default=ToyFinetuneConfig.base_steps)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/toy")
    a = ap.parse_args()

    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = ToyFinetuneConfig(steps=a.steps, lr=a.lr, base_steps=a.base_steps, seed=a.seed)
    logger = JsonlLogger(out / "train_log.jsonl")
    res = run_toy_finetune(cfg, on_log=logger, base_path=out / "base.pnlf")
    logger.close()

    res.lora.checkpoint.save(out / "lora.pnlf")
    for i, img in enumerate(res.samples):
        save_png(img, out / "samples" / f"sample{i}.png")
    summary = {
        "deciles": res.deciles,
        "decile_ratio": res.decile_ratio,
        "sample_hist_distance": res.sample_distance,
        "noise_hist_distance": res.noise_distance,
        "seconds": res.seconds,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary))


if __name__ == "__main__":
    main()
