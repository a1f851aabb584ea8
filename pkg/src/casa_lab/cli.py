"""``casa-lab`` command line entry point."""

from __future__ import annotations

import argparse
import json
import re
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    from .model import MODES
    from .verify import SUITES

    p = _Parser(prog="casa-lab", description="Toy-scale vision-language fusion laboratory.")
    p.add_argument("--out", type=Path, default=None, help="directory for artifacts")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    v = sub.add_parser("verify", help="run property suites")
    v.add_argument("--suite", choices=SUITES + ("all",), default="all")

    t = sub.add_parser("train", help="train on the toy task")
    t.add_argument("--config", type=Path)
    t.add_argument("--mode", choices=MODES)
    t.add_argument("--steps", type=int)
    t.add_argument("--blinded", action="store_true", help="zero all image embeddings")

    s = sub.add_parser("stream", help="simulate live captioning and emit the memory ledger")
    s.add_argument("--config", type=Path)
    s.add_argument("--frames", type=int, required=True)
    s.add_argument("--mode", choices=MODES)
    s.add_argument("--qformer", type=int, default=None, metavar="Q", help="compress frames to Q tokens")

    c = sub.add_parser("cost", help="attention-cost tables")
    c.add_argument("--layout", required=True,
                   help="JSONL sample file, or synthetic 'WINDOWSxIMG+TEXT' (e.g. 10x1024+50)")
    c.add_argument("--csv", action="store_true", help="emit CSV instead of a text table")

    pr = sub.add_parser("probe", help="ablations, attention statistics, gradient checks")
    pr.add_argument("--checkpoint", type=Path, required=True, help="checkpoint path (without suffix)")
    pr.add_argument("--kind", choices=("ablate", "stats", "grad"), required=True)
    pr.add_argument("--samples", type=int, default=128)

    b = sub.add_parser("bench", help="per-block micro-benchmark across modes")
    b.add_argument("--config", type=Path)
    b.add_argument("--trials", type=int, default=5)
    return p


def _out(args, name: str) -> Path | None:
    if args.out is None:
        return None
    args.out.mkdir(parents=True, exist_ok=True)
    return args.out / name


def cmd_verify(args) -> int:
    from .verify import run_suites, summary_json

    def log(r):
        print(f"{'PASS' if r.ok else 'FAIL'} {r.name} ({r.seconds:.1f}s) {r.message}", flush=True)

    summary = run_suites([args.suite], log)
    text = summary_json(summary)
    dest = _out(args, "verify.json")
    if dest is not None:
        dest.write_text(text)
    print(f"{summary['tests']} checks, {summary['failures']} failures, {summary['time']:.1f}s")
    return EXIT_OK if summary["failures"] == 0 else EXIT_FAIL


def cmd_train(args) -> int:
    from .config import load_config
    from .model import FusionModel
    from .toytask import TrainConfig, Vocab, generate_dataset, train

    cfg = load_config(args.config)
    model_cfg = cfg.model
    if args.mode:
        model_cfg = replace(model_cfg, mode=args.mode)
    vocab = Vocab(cfg.data.grid, cfg.data.n_colors).size
    if model_cfg.vocab_size < vocab:
        raise ConfigError(f"model.vocab_size {model_cfg.vocab_size} < toy vocabulary {vocab}")
    tcfg: TrainConfig = cfg.train
    if args.steps is not None:
        tcfg = replace(tcfg, steps=args.steps)
    if args.blinded:
        tcfg = replace(tcfg, blinded=True)
    dt = model_cfg.np_dtype
    tr = generate_dataset(cfg.data, cfg.data.n_train, model_cfg.d_model, cfg.seed, dt)
    ev = generate_dataset(cfg.data, cfg.data.n_eval, model_cfg.d_model, cfg.seed + 1, dt)
    model = FusionModel(model_cfg, seed=cfg.seed)
    out = args.out or Path("runs") / f"train-{model_cfg.mode}"
    res = train(model, tr, tcfg, ev, out, log=lambda r: print(json.dumps(r), flush=True))
    meta = json.loads(res.checkpoint.with_suffix(".json").read_text())
    meta["extra"]["data"] = asdict(cfg.data)
    meta["extra"]["seed"] = cfg.seed
    res.checkpoint.with_suffix(".json").write_text(json.dumps(meta, indent=1))
    print(f"status={res.status} steps={res.final_step} checkpoint={res.checkpoint}")
    return EXIT_OK if res.status == "ok" else EXIT_FAIL


def cmd_stream(args) -> int:
    from .config import load_config
    from .model import FusionModel, QFormerConfig
    from .streaming import simulate_live_captioning, synthetic_schedule, write_ledger

    cfg = load_config(args.config)
    mcfg = cfg.model
    if args.mode:
        mcfg = replace(mcfg, mode=args.mode)
    if args.qformer:
        mcfg = replace(mcfg, qformer=QFormerConfig(args.qformer, 1))
    if args.frames < 1:
        raise ConfigError("--frames must be >= 1")
    model = FusionModel(mcfg, seed=cfg.seed)
    sched = synthetic_schedule(args.frames, cfg.stream.frame_tokens, cfg.stream.text_per_frame,
                               mcfg.d_model, cfg.seed, mcfg.vocab_size, mcfg.np_dtype)
    res = simulate_live_captioning(sched, model, cache_cap=cfg.stream.cache_cap)
    dest = _out(args, "ledger.csv")
    if dest is None:
        write_ledger(res.rows, sys.stdout)
    else:
        with open(dest, "w", newline="") as fh:
            write_ledger(res.rows, fh)
        print(f"{len(res.rows)} rows -> {dest}")
    if res.stopped:
        print(f"stopped early: {res.stop_reason}", file=sys.stderr)
    return EXIT_OK


_SYNTH = re.compile(r"^(\d+)x(\d+)\+(\d+)$")


def cmd_cost(args) -> int:
    from .cost import cost_rows, render_table, synthetic_layout, write_report
    from .sequence import MultimodalSequence, load_jsonl, segment_windows

    m = _SYNTH.match(args.layout.strip())
    if m:
        W, N, T = map(int, m.groups())
        layout = synthetic_layout(W, N, T)
    else:
        samples = load_jsonl(args.layout)
        if not samples:
            raise ConfigError(f"{args.layout}: no samples")
        events, bounds = [], []
        for s in samples:
            bounds.append(len(events))
            events.extend(s.events)
        layout = segment_windows(MultimodalSequence(tuple(events), tuple(bounds)))
    rows = cost_rows(layout)
    dest = _out(args, "cost.csv")
    if args.csv:
        write_report(rows, sys.stdout)
    else:
        print(render_table(rows, ("mode", "T", "N", "T_W", "W", "symbolic", "symbolic_alt",
                                  "exact_entries", "scratch_scalars")))
    if dest is not None:
        with open(dest, "w", newline="") as fh:
            write_report(rows, fh)
    return EXIT_OK


def cmd_probe(args) -> int:
    from .model import FusionModel, load_checkpoint
    from .probes import RULES, ablate_mask, attention_stats, grad_check
    from .toytask import DataConfig, Vocab, evaluate, generate_dataset, pack_examples

    dtype = "float64" if args.kind == "grad" else None
    mcfg, weights, extra = load_checkpoint(args.checkpoint, dtype=dtype)
    model = FusionModel(mcfg, weights)
    data = DataConfig(**extra.get("data", {}))
    seed = int(extra.get("seed", 0))
    ev = generate_dataset(data, args.samples, mcfg.d_model, seed + 1, mcfg.np_dtype)
    report: dict = {"checkpoint": str(args.checkpoint), "kind": args.kind}
    if args.kind == "ablate":
        base = evaluate(model, ev)
        report["baseline"] = base
        for rule in RULES:
            hits: dict[str, list[int]] = {}
            unsat = 0
            for i in range(0, len(ev), 32):
                seq, pos, ids, qts = pack_examples(ev[i:i + 32])
                r = ablate_mask(model, seq, rule, seed)
                unsat += sum(r.unsatisfiable.values())
                for q, ok in zip(qts, r.logits[pos].argmax(1) == ids):
                    hits.setdefault(q, []).append(int(ok))
            acc = {q: float(np.mean(v)) for q, v in hits.items()}
            report[rule] = {"accuracy": acc, "delta": {q: acc[q] - base[q] for q in acc},
                            "unsatisfiable_rows": unsat}
    elif args.kind == "stats":
        V = Vocab(data.grid, data.n_colors)
        seq, _, _, _ = pack_examples(ev[:32])
        delims = (V.VEND,) if data.delimiter else ()
        report["stats"] = attention_stats(model, seq, delims).to_dict()
    else:
        seq, _, _, _ = pack_examples(ev[:2])
        rep = grad_check(model, seq)
        report["grad"] = json.loads(rep.to_json())
        report["ok"] = rep.ok
    text = json.dumps(report, indent=1, default=float)
    dest = _out(args, f"probe-{args.kind}.json")
    if dest is not None:
        dest.write_text(text)
    print(text)
    return EXIT_OK if report.get("ok", True) else EXIT_FAIL


def cmd_bench(args) -> int:
    import csv

    from .config import load_config
    from .cost import microbench_layer
    from .model import MODES

    cfg = load_config(args.config)
    rows = []
    for mode in MODES:
        r = microbench_layer(mode, cfg.bench, trials=args.trials)
        rows.append({k: v for k, v in r.row().items() if k != "extra"})
        print(f"{mode:14s} attn {r.attn_ms:8.3f} ms  ffn {r.ffn_ms:8.3f} ms  "
              f"scratch {r.attn_scratch_scalars:>10d}  added params {r.params_added}", flush=True)
    dest = _out(args, "bench.csv")
    if dest is not None:
        with open(dest, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    return EXIT_OK


COMMANDS = {"verify": cmd_verify, "train": cmd_train, "stream": cmd_stream, "cost": cmd_cost,
            "probe": cmd_probe, "bench": cmd_bench}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    t0 = time.perf_counter()
    try:
        code = COMMANDS[args.cmd](args)
    except ConfigError as exc:
        print(f"casa-lab: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, json.JSONDecodeError) as exc:
        print(f"casa-lab: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ContractError as exc:
        print(f"casa-lab: {exc}", file=sys.stderr)
        return EXIT_FAIL
    print(f"done in {time.perf_counter() - t0:.1f}s", file=sys.stderr)
    return code


def main():
    sys.exit(run())
