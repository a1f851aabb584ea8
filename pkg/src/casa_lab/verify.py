"""Property suites run by ``casa-lab verify`` and reused by the acceptance tests.

The mask oracle here works directly on the event list (expanding events into
tokens and walking backwards), independently of the window segmentation code.
"""

from __future__ import annotations

import itertools
import json
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensorkit as tk
from .attention import (AttnWeights, MaskSpec, RopeParams, blockwise_attend, build_ca_mask,
                        build_casa_mask, build_insertion_mask, mha)
from .model import MODES, FusionConfig, FusionModel, QFormerConfig
from .probes import grad_check, param_grads, probe_loss, randomize_weights
from .sequence import ImageBlock, MultimodalSequence, Text, segment_windows
from .streaming import Streamer, replay

SUITES = ("masks", "equivalence", "gradients", "streaming")


# --------------------------------------------------------------------- oracle

def oracle_mask(seq: MultimodalSequence, kind: str) -> np.ndarray:
    """Dense (text x stream) or (stream x stream) mask from the attention rule.

    kind: ``casa`` (imageless text gets no keys), ``casa-causal`` (imageless
    text attends causally to earlier text since the sample start), ``ca`` or
    ``insertion``.
    """
    toks = []  # (is_text, sample, event_index)
    bounds = sorted(seq.sample_boundaries)
    for ei, ev in enumerate(seq.events):
        sample = sum(1 for b in bounds if b <= ei) - 1
        n = 1 if isinstance(ev, Text) else ev.n_tokens
        toks += [(isinstance(ev, Text), sample, ei)] * n
    n = len(toks)
    if kind == "insertion":
        m = np.zeros((n, n), dtype=bool)
        for q in range(n):
            for k in range(q + 1):
                m[q, k] = toks[k][1] == toks[q][1]
        return m
    text_rows = [j for j, t in enumerate(toks) if t[0]]
    m = np.zeros((len(text_rows), n), dtype=bool)
    for r, j in enumerate(text_rows):
        s = toks[j][1]
        # walk back to the most recent image run of the same sample
        k = j
        while k >= 0 and toks[k][1] == s and toks[k][0]:
            k -= 1
        if k < 0 or toks[k][1] != s:
            if kind == "casa-causal":
                m[r, k + 1:j + 1] = True
            continue
        end_img = k
        while k >= 0 and toks[k][1] == s and not toks[k][0]:
            k -= 1
        start_img = k + 1
        m[r, start_img:end_img + 1] = True
        if kind in ("casa", "casa-causal"):
            m[r, end_img + 1:j + 1] = True
    return m


def enumerate_patterns(max_events: int = 5, sizes=(1, 2, 3)):
    """Every event pattern up to ``max_events`` events, with no or one sample boundary."""
    alphabet = ["T"] + [f"I{s}" for s in sizes]
    for n in range(1, max_events + 1):
        for combo in itertools.product(alphabet, repeat=n):
            yield combo, (0,)
            for b in range(1, n):
                yield combo, (0, b)


def _events(combo) -> tuple:
    return tuple(Text(1) if c == "T" else ImageBlock(int(c[1:])) for c in combo)


@dataclass
class CheckResult:
    name: str
    ok: bool
    seconds: float
    message: str = ""


def check_masks_exhaustive(max_events: int = 5, tol: float = 1e-10, d: int = 8, heads: int = 2,
                           seed: int = 0) -> CheckResult:
    """Blockwise CASA/CA/insertion attention vs dense attention under the oracle mask."""
    t0 = time.perf_counter()
    rng = tk.make_rng(seed)
    w = AttnWeights(*(tk.Tensor(rng.standard_normal((d, d))) for _ in range(4)))
    rope = RopeParams(d // heads)
    x = rng.standard_normal((16, d))
    worst, n_cases, failures = 0.0, 0, []
    builders = {
        "casa": lambda L: build_casa_mask(L, "zero"),
        "casa-causal": lambda L: build_casa_mask(L, "causal"),
        "ca": build_ca_mask,
        "insertion": build_insertion_mask,
    }
    with tk.no_grad():
        for combo, bounds in enumerate_patterns(max_events):
            seq = MultimodalSequence(_events(combo), bounds)
            L = segment_windows(seq)
            n = L.n_tokens
            xs = tk.Tensor(x[:n])
            xt = tk.Tensor(x[:n][L.is_text])
            pos = np.arange(n)
            for kind, build in builders.items():
                spec = build(L)
                ref = oracle_mask(seq, kind)
                if not np.array_equal(spec.to_dense(), ref):
                    failures.append(f"{' '.join(combo)} bounds={bounds} {kind}: mask differs from rule")
                    continue
                xq = xs if kind == "insertion" else xt
                qpos = pos if kind == "insertion" else pos[L.is_text]
                zero = tuple(np.flatnonzero(~ref.any(axis=1)))
                dense = MaskSpec(ref.shape[0], ref.shape[1], dense=ref, zero_rows=zero)
                if not xq.shape[0]:
                    continue
                a = blockwise_attend(xq, xs, w, heads, spec, rope, qpos, pos).data
                b = mha(xq, xs, w, heads, dense, rope, qpos, pos).data
                err = float(np.abs(a - b).max())
                worst = max(worst, err)
                if err > tol:
                    failures.append(f"{' '.join(combo)} bounds={bounds} {kind}: max diff {err:.3g}")
            n_cases += 1
    msg = f"{n_cases} patterns, max diff {worst:.3g}"
    if failures:
        msg += "; " + "; ".join(failures[:5])
    return CheckResult("masks.exhaustive", not failures, time.perf_counter() - t0, msg)


# --------------------------------------------------------------------- random histories

def random_history(rng, d_model: int, vocab: int, max_windows: int = 6, max_tokens: int = 64,
                   dtype=np.float64) -> MultimodalSequence:
    """Random interleaved multi-sample history within the window/token budget."""
    while True:
        events, bounds = [], [0]
        total = 0
        n_events = int(rng.integers(1, 20))
        for i in range(n_events):
            if i > 0 and rng.random() < 0.1:
                bounds.append(len(events))
            if rng.random() < 0.3:
                k = int(rng.integers(1, 9))
                events.append(ImageBlock.of(rng.standard_normal((k, d_model)).astype(dtype)))
                total += k
            else:
                events.append(Text(int(rng.integers(0, vocab))))
                total += 1
        if not any(isinstance(e, Text) for e in events) or total > max_tokens:
            continue
        seq = MultimodalSequence(tuple(events), tuple(sorted(set(bounds))))
        if sum(1 for w in segment_windows(seq).windows if w.n_image) <= max_windows:
            return seq


def _small_cfg(mode: str, **kw) -> FusionConfig:
    base = dict(d_model=16, n_heads=2, n_layers=3, vocab_size=12, mode=mode, period=2)
    base.update(kw)
    return FusionConfig(**base)


def _nonzero_gates(model: FusionModel, value: float = 0.5):
    for k, t in model.weights.items():
        if k.endswith("x.gate"):
            t.data = np.full_like(t.data, value)


def check_streaming_equivalence(n_histories: int = 100, tol: float = 1e-5, seed: int = 0,
                                modes=MODES) -> CheckResult:
    """Step-by-step decode logits vs full-forward logits on random histories."""
    t0 = time.perf_counter()
    worst, bad = 0.0, []
    for mi, mode in enumerate(modes):
        model = FusionModel(_small_cfg(mode), seed=seed + mi)
        randomize_weights(model, seed + mi, 0.05)
        _nonzero_gates(model)
        rng = tk.make_rng(seed + 1000 + mi)
        for h in range(n_histories):
            seq = random_history(rng, 16, 12)
            full = model.logits(seq)
            step = np.array(replay(model, seq))
            err = float(np.abs(full - step).max())
            worst = max(worst, err)
            if err > tol:
                bad.append(f"{mode} history {h}: {err:.3g}")
    return CheckResult("equivalence.streaming", not bad, time.perf_counter() - t0,
                       f"{len(modes)} modes x {n_histories} histories, max diff {worst:.3g}"
                       + ("; " + "; ".join(bad[:5]) if bad else ""))


def text_backbone(model: FusionModel) -> FusionModel:
    """The same SA/FFN weights as a plain text stack."""
    cfg = model.cfg
    keep = {k: v for k, v in model.weights.items()
            if not (k.startswith("qformer.") or ".x." in k or ".lnx." in k)}
    base = FusionConfig(d_model=cfg.d_model, n_heads=cfg.n_heads, n_layers=cfg.n_layers,
                        vocab_size=cfg.vocab_size, ffn_mult=cfg.ffn_mult, mode="insertion",
                        dtype=cfg.dtype, rope_base=cfg.rope_base, ln_eps=cfg.ln_eps)
    return FusionModel(base, keep)


def check_zero_image(n_seqs: int = 20, seed: int = 0) -> CheckResult:
    """Fusion modes on image-free input give exactly the text backbone's logits."""
    t0 = time.perf_counter()
    rng = tk.make_rng(seed)
    bad = []
    for mode in MODES[1:]:
        for ffnu in (False, True):
            model = FusionModel(_small_cfg(mode, image_ffn_update=ffnu), seed=seed)
            base = text_backbone(model)
            for _ in range(n_seqs):
                n = int(rng.integers(1, 24))
                ids = rng.integers(0, 12, n)
                bounds = (0,) + tuple(sorted(set(int(b) for b in rng.integers(1, n + 1, 2) if b < n)))
                seq = MultimodalSequence(tuple(Text(int(i)) for i in ids), bounds)
                if not np.array_equal(model.logits(seq), base.logits(seq)):
                    bad.append(f"{mode} ffn_update={ffnu}")
                    break
    return CheckResult("equivalence.zero_image", not bad, time.perf_counter() - t0,
                       "; ".join(bad) if bad else f"{len(MODES) - 1} modes exact")


# --------------------------------------------------------------------- gradients

def gradient_grid():
    for mode in MODES:
        for ffnu in (False, True):
            for qf in (False, True):
                yield mode, ffnu, qf


def grad_model(mode: str, ffnu: bool, qf: bool, seed: int = 0) -> FusionModel:
    cfg = FusionConfig(d_model=8, n_heads=2, n_layers=2, vocab_size=8, mode=mode, period=2, offset=0,
                       image_ffn_update=ffnu, qformer=QFormerConfig(2, 1) if qf else None)
    model = FusionModel(cfg, seed=seed)
    randomize_weights(model, seed + 1)
    return model


GRAD_SEQ = "T I3 T T I2 T | T I2 T"


def check_gradients(tolerance: float = 1e-4, n_coords: int = 32, seed: int = 0) -> CheckResult:
    from .sequence import parse_pattern

    t0 = time.perf_counter()
    bad, worst = [], 0.0
    for mode, ffnu, qf in gradient_grid():
        model = grad_model(mode, ffnu, qf, seed)
        seq = parse_pattern(GRAD_SEQ, 8, seed + 3, list(range(1, 7)))
        rep = grad_check(model, seq, tolerance, n_coords, seed)
        worst = max(worst, max(t.max_rel_err for t in rep.tensors))
        for f in rep.failures():
            bad.append(f"{mode}/ffn={ffnu}/qf={qf}: {f.name} rel {f.max_rel_err:.3g}")
    return CheckResult("gradients.finite_difference", not bad, time.perf_counter() - t0,
                       f"24 variants, worst rel err {worst:.3g}" + ("; " + "; ".join(bad[:5]) if bad else ""))


def check_gradient_flow(seed: int = 0) -> CheckResult:
    """Every tensor receives a nonzero gradient on a batch with image windows."""
    from .sequence import parse_pattern

    t0 = time.perf_counter()
    bad = []
    for mode, ffnu, qf in gradient_grid():
        model = grad_model(mode, ffnu, qf, seed)
        seq = parse_pattern(GRAD_SEQ, 8, seed + 3, list(range(1, 7)))
        grads = param_grads(model, probe_loss(model, seq, seed))
        zero = [k for k, g in grads.items() if not np.any(g)]
        if zero:
            bad.append(f"{mode}/ffn={ffnu}/qf={qf}: {zero[:3]}")
    return CheckResult("gradients.flow", not bad, time.perf_counter() - t0, "; ".join(bad))


# --------------------------------------------------------------------- streaming invariants

def image_schedule(rng, n_frames: int, d_model: int, vocab: int, max_frame: int = 6, max_text: int = 3,
                   back_to_back: float = 0.2) -> list[tuple]:
    sched = []
    for f in range(n_frames):
        sched.append(("frame", rng.standard_normal((int(rng.integers(1, max_frame + 1)), d_model))))
        if f == n_frames - 1 or rng.random() >= back_to_back:
            sched.append(("text", rng.integers(0, vocab, int(rng.integers(1, max_text + 1))).tolist()))
    return sched


def largest_window_scalars(model: FusionModel, sched: list[tuple]) -> int:
    """Window-cache scalars of the largest single window in ``sched`` under the mode's rule."""
    cfg = model.cfg
    events = []
    for kind, payload in sched:
        if kind == "frame":
            events.append(ImageBlock(cfg.qformer.n_queries if cfg.qformer else len(payload)))
        else:
            events.extend(Text(int(t)) for t in payload)
    L = segment_windows(MultimodalSequence(tuple(events)))
    per = []
    for w in L.windows:
        if cfg.mode in ("ca", "gated-ca"):
            per.append(w.n_image)
        elif w.n_image or cfg.mode == "casa-replace":
            per.append(w.n_image + w.n_text)
    return 2 * cfg.d_model * len(cfg.fusion_layers()) * max(per, default=0)


def check_cache_invariants(frame_counts=(1, 10, 200), seed: int = 0) -> CheckResult:
    t0 = time.perf_counter()
    bad = []
    for mi, mode in enumerate(MODES[1:]):
        model = FusionModel(_small_cfg(mode, n_layers=2), seed=seed)
        for F in frame_counts:
            rng = tk.make_rng(seed + 17 * F + mi)
            sched = image_schedule(rng, F, 16, 12)
            st = Streamer(model)
            n_text, peak = 0, 0
            for kind, payload in sched:
                if kind == "frame":
                    st.ingest_image(payload)
                else:
                    for t in payload:
                        st.decode_step(int(t))
                        n_text += 1
                lengths = set(st.sa_cache_lengths().values())
                if lengths and lengths != {n_text}:
                    bad.append(f"{mode} F={F}: SA cache lengths {lengths} != {n_text} text tokens")
                    break
                peak = max(peak, st.casa_window_scalars())
            want = largest_window_scalars(model, sched)
            if peak != want:
                bad.append(f"{mode} F={F}: peak window scalars {peak} != largest window {want}")
    return CheckResult("streaming.cache_invariants", not bad, time.perf_counter() - t0, "; ".join(bad[:5]))


def check_ledger_shape(n_frames: int = 200, seed: int = 0) -> CheckResult:
    """Insertion memory strictly grows per frame; CASA window memory is flat after frame 1."""
    from .streaming import per_frame_rows, simulate_live_captioning, synthetic_schedule

    t0 = time.perf_counter()
    bad = []
    sched = synthetic_schedule(n_frames, 16, 2, 16, seed, 12)
    for mode in ("insertion", "casa-parallel"):
        model = FusionModel(_small_cfg(mode, n_layers=2), seed=seed)
        rows = per_frame_rows(simulate_live_captioning(sched, model).rows)
        if mode == "insertion":
            tot = [r.text_kv_scalars for r in rows]
            if not all(b > a for a, b in zip(tot, tot[1:])):
                bad.append("insertion cache not strictly increasing")
        else:
            win = {r.casa_window_scalars for r in rows}
            if len(win) != 1:
                bad.append(f"casa window scalars vary: {sorted(win)[:4]}")
    return CheckResult("streaming.ledger_shape", not bad, time.perf_counter() - t0, "; ".join(bad))


# --------------------------------------------------------------------- driver

SUITE_CHECKS: dict[str, list[Callable[[], CheckResult]]] = {
    "masks": [check_masks_exhaustive],
    "equivalence": [check_streaming_equivalence, check_zero_image],
    "gradients": [check_gradients, check_gradient_flow],
    "streaming": [check_cache_invariants, check_ledger_shape],
}


def run_suites(names, log=None) -> dict:
    """Run suites and return a JUnit-style summary dict."""
    if "all" in names:
        names = SUITES
    suites = []
    for name in names:
        cases = []
        for fn in SUITE_CHECKS[name]:
            try:
                res = fn()
            except Exception as exc:  # a crash is a failed case, reported not raised
                res = CheckResult(fn.__name__, False, 0.0, f"{type(exc).__name__}: {exc}")
            cases.append(res)
            if log is not None:
                log(res)
        suites.append({
            "name": name, "tests": len(cases), "failures": sum(not c.ok for c in cases),
            "time": sum(c.seconds for c in cases),
            "testcases": [{"name": c.name, "time": c.seconds, "status": "passed" if c.ok else "failed",
                           "message": c.message} for c in cases],
        })
    return {"testsuites": suites, "tests": sum(s["tests"] for s in suites),
            "failures": sum(s["failures"] for s in suites), "time": sum(s["time"] for s in suites)}


def summary_json(summary: dict) -> str:
    return json.dumps(summary, indent=1)


