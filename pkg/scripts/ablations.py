"""Attention-mask ablations and attention-mass statistics on a trained checkpoint."""

import argparse
import json
from pathlib import Path

import numpy as np

from casa_lab.model import FusionModel, load_checkpoint
from casa_lab.probes import RULES, ablate_mask, attention_stats
from casa_lab.toytask import DataConfig, generate_dataset, pack_examples


def accuracy(model, ev, rule=None, seed=0, batch=32):
    hits = {}
    for i in range(0, len(ev), batch):
        seq, pos, ids, qts = pack_examples(ev[i:i + batch])
        logits = model.logits(seq) if rule is None else ablate_mask(model, seq, rule, seed).logits
        for q, ok in zip(qts, logits[pos].argmax(1) == ids):
            hits.setdefault(q, []).append(int(ok))
    out = {q: float(np.mean(v)) for q, v in hits.items()}
    out["overall"] = float(np.mean([x for v in hits.values() for x in v]))
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("checkpoint", type=Path, help="checkpoint path without suffix, e.g. runs/reference/sighted/model")
    ap.add_argument("--samples", type=int, default=512)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = ap.parse_args()

    cfg, weights, extra = load_checkpoint(args.checkpoint)
    model = FusionModel(cfg, weights)
    ev = generate_dataset(DataConfig(), args.samples, cfg.d_model, seed=1, dtype=cfg.np_dtype)
    report = {"baseline": accuracy(model, ev)}
    for rule in RULES:
        runs = [accuracy(model, ev, rule, s) for s in args.seeds]
        report[rule] = {k: float(np.mean([r[k] for r in runs])) for k in runs[0]}
    seq, _, _, _ = pack_examples(ev[:32])
    report["attention"] = attention_stats(model, seq).to_dict()
    print(json.dumps(report, indent=2))


if __name__ == "__main__":
    main()
