"""Train the reference CASA model on the toy task, plus an image-blinded control."""

import argparse
import json
from pathlib import Path

from casa_lab.model import MODES, FusionModel
from casa_lab.toytask import DataConfig, TrainConfig, generate_dataset, reference_model_config, train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--mode", choices=MODES, default="casa-parallel")
    ap.add_argument("--steps", type=int, default=1500)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, default=Path("runs/reference"))
    args = ap.parse_args()

    data = DataConfig()
    cfg = reference_model_config(args.mode, data)
    tr = generate_dataset(data, data.n_train, cfg.d_model, seed=args.seed)
    ev = generate_dataset(data, data.n_eval, cfg.d_model, seed=args.seed + 1)
    summary = {}
    for name, blinded in (("sighted", False), ("blinded", True)):
        res = train(FusionModel(cfg, seed=args.seed), tr, TrainConfig(steps=args.steps, seed=args.seed,
                                                                     blinded=blinded),
                    ev, args.out / name, log=lambda r, n=name: print(n, r, flush=True))
        summary[name] = res.metrics[-1] if res.metrics else {}
        summary[name]["status"] = res.status
    (args.out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
