"""Attention-memory formulas, exact mask-entry counts and a per-block micro-benchmark."""

from __future__ import annotations

import contextlib
import csv
import statistics
import time
from dataclasses import asdict, dataclass, field
from typing import IO, Iterable

import numpy as np

from . import tensorkit as tk
from .attention import (MaskSpec, blockwise_attend, build_ca_mask, build_casa_mask,
                        build_insertion_mask, build_text_mask, insertion_positions,
                        text_positions, track_scratch, window_positions)
from .errors import ConfigError
from .model import MODES, FusionConfig, FusionModel, _ffn, count_params
from .sequence import ImageBlock, MultimodalSequence, Text, WindowLayout, segment_windows

REPORT_COLUMNS = ("mode", "T", "N", "T_W", "W", "symbolic", "exact_entries", "scratch_scalars", "wall_us")


@dataclass
class CostParams:
    """Inputs to the symbolic formulas.

    ``N`` is total image tokens when ``n_is_total`` is set, else image tokens per
    window. ``W`` is the window count.
    """

    T: float | None = None
    N: float | None = None
    T_W: float | None = None
    W: float | None = None
    n_is_total: bool = True

    @classmethod
    def from_layout(cls, layout: WindowLayout, n_is_total: bool = True) -> "CostParams":
        img_windows = [w for w in layout.windows if w.n_image]
        W = len(img_windows)
        T = layout.flat_text_len
        N_total = layout.flat_image_len
        T_W = (sum(w.n_text for w in img_windows) / W) if W else 0.0
        N = N_total if n_is_total else (N_total / W if W else 0.0)
        return cls(T=T, N=N, T_W=T_W, W=W, n_is_total=n_is_total)


_REQUIRED = {
    "insertion": ("T", "N"), "ca": ("T", "N"), "gated-ca": ("T", "N"),
    "casa-parallel": ("T", "N", "T_W"), "casa-pre": ("T", "N", "T_W"),
    "casa-replace": ("T", "N", "T_W", "W"),
}


def symbolic_cost(mode: str, p: CostParams) -> dict:
    """Literal evaluation of the per-mode attention-memory formula.

    Returns ``value`` plus the interpretation used; the replace formula also
    reports its alternative reading (W as window size) under ``alt_value``.
    """
    if mode not in _REQUIRED:
        raise ConfigError(f"unknown mode {mode!r}")
    missing = [f for f in _REQUIRED[mode] if getattr(p, f) is None]
    if missing:
        raise ConfigError(f"symbolic_cost({mode}) needs fields {missing}")
    T, N = p.T, p.N
    out = {"mode": mode, "n_reading": "total" if p.n_is_total else "per_window"}
    if mode == "insertion":
        out["value"] = (T + N) ** 2
        out["formula"] = "(T+N)^2"
    elif mode in ("ca", "gated-ca"):
        out["value"] = T * T + T * N
        out["formula"] = "T^2+TN"
    elif mode in ("casa-parallel", "casa-pre"):
        out["value"] = T * T + N * (N + p.T_W)
        out["formula"] = "T^2+N(N+T_W)"
    else:
        out["formula"] = "max(T^2, N W^2)"
        out["value"] = max(T * T, N * p.W ** 2)
        out["w_reading"] = "window_count"
        n_pw = N / p.W if (p.n_is_total and p.W) else N
        w_size = n_pw + p.T_W
        out["alt_value"] = max(T * T, n_pw * w_size ** 2)
        out["alt_w_reading"] = "window_size (N per window)"
    return out


def default_n_is_total(mode: str) -> bool:
    """Insertion and CA formulas read N as all image tokens; CASA ones as per window."""
    return mode in ("insertion", "ca", "gated-ca")


def symbolic_for_layout(mode: str, layout: WindowLayout, n_is_total: bool | None = None) -> dict:
    if n_is_total is None:
        n_is_total = default_n_is_total(mode)
    return symbolic_cost(mode, CostParams.from_layout(layout, n_is_total))


def _fusion_mask(mode: str, layout: WindowLayout) -> MaskSpec:
    if mode in ("ca", "gated-ca"):
        return build_ca_mask(layout)
    if mode == "casa-replace":
        return build_casa_mask(layout, preamble="causal")
    return build_casa_mask(layout, preamble="zero")


def mode_masks(mode: str, layout: WindowLayout) -> list[MaskSpec]:
    """The distinct attention masks a stack of ``mode`` evaluates."""
    if mode == "insertion":
        return [build_insertion_mask(layout)]
    masks = [_fusion_mask(mode, layout)]
    masks.append(build_text_mask(layout))
    return masks


def exact_attention_entries(mode: str, layout: WindowLayout, stack: bool = False) -> int:
    """Unmasked (query, key) pairs of the mode's own attention mask.

    With ``stack`` set, the text self-attention mask that CA/CASA stacks also
    evaluate is added (each distinct mask counted once).
    """
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}")
    masks = mode_masks(mode, layout)
    if not stack:
        masks = masks[:1]
    return sum(m.n_entries() for m in masks)


def scratch_scalars(mask: MaskSpec, n_heads: int, max_group: int | None = None) -> int:
    """Largest score buffer the grouped blockwise kernel allocates for ``mask``."""
    groups: dict[tuple[int, int], int] = {}
    for b in mask.blocks:
        if len(b.q) and len(b.k):
            groups[(len(b.q), len(b.k))] = groups.get((len(b.q), len(b.k)), 0) + 1
    best = 0
    for (nq, nk), count in groups.items():
        chunk = min(count, max_group) if max_group else count
        best = max(best, chunk * n_heads * nq * nk)
    return best


def mode_scratch(mode: str, layout: WindowLayout, n_heads: int, max_group: int | None = None) -> int:
    return max((scratch_scalars(m, n_heads, max_group) for m in mode_masks(mode, layout)), default=0)


def synthetic_layout(n_windows: int, img_per_window: int, text_per_window: int,
                     preamble_text: int = 0) -> WindowLayout:
    events: list = [Text(0)] * preamble_text
    for _ in range(n_windows):
        events.append(ImageBlock(img_per_window))
        events.extend([Text(0)] * text_per_window)
    return segment_windows(MultimodalSequence(tuple(events)))


def cost_rows(layout: WindowLayout, modes: Iterable[str] = MODES, n_heads: int = 4,
              n_is_total: bool | None = None) -> list[dict]:
    """One report row per mode (no timing); N follows each mode's reading unless forced."""
    rows = []
    for mode in modes:
        flag = default_n_is_total(mode) if n_is_total is None else n_is_total
        p = CostParams.from_layout(layout, flag)
        sym = symbolic_cost(mode, p)
        rows.append({"mode": mode, "T": p.T, "N": p.N, "T_W": p.T_W, "W": p.W,
                     "symbolic": sym["value"], "symbolic_alt": sym.get("alt_value", ""),
                     "exact_entries": exact_attention_entries(mode, layout),
                     "scratch_scalars": mode_scratch(mode, layout, n_heads), "wall_us": ""})
    return rows


def write_report(rows: Iterable[dict], fh: IO[str]):
    w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow(r)


def growth_exponent(xs, ys) -> float:
    """Slope of log(y) against log(x) by least squares."""
    lx, ly = np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float))
    return float(np.polyfit(lx, ly, 1)[0])


def render_table(rows: list[dict], columns=REPORT_COLUMNS) -> str:
    cols = [c for c in columns if any(c in r for r in rows)]
    cells = [[str(r.get(c, "")) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.rjust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


# --------------------------------------------------------------------- micro-benchmark

@dataclass
class BenchConfig:
    d_model: int = 64
    n_heads: int = 4
    n_windows: int = 4
    img_per_window: int = 64
    text_per_window: int = 8
    image_ffn_update: bool = False
    dtype: str = "float32"
    seed: int = 0


@dataclass
class BenchReport:
    mode: str
    T: int
    N: int
    attn_ms: float
    ffn_ms: float
    total_ms: float
    attn_scratch_scalars: int
    ffn_rows: int
    params_added: int
    backward_ms: float | None = None
    extra: dict = field(default_factory=dict)

    def row(self) -> dict:
        return asdict(self)


def _median_time(fn, trials: int, warmup: int, clock) -> float:
    for _ in range(warmup):
        fn()
    ts = []
    for _ in range(trials):
        t0 = clock()
        fn()
        ts.append((clock() - t0) * 1e3)
    return statistics.median(ts)


def microbench_layer(mode: str, config: BenchConfig, trials: int = 5, warmup: int = 3,
                     backward: bool = False, clock=time.perf_counter) -> BenchReport:
    """Median wall time of one block's attention and FFN at ``config``."""
    if warmup < 3:
        raise ConfigError("microbench_layer discards at least 3 warmup trials")
    c = config
    cfg = FusionConfig(d_model=c.d_model, n_heads=c.n_heads, n_layers=1, vocab_size=8, mode=mode,
                       period=1, image_ffn_update=c.image_ffn_update, dtype=c.dtype)
    model = FusionModel(cfg, seed=c.seed)
    W, eps, H = model.weights, cfg.ln_eps, cfg.n_heads
    layout = synthetic_layout(c.n_windows, c.img_per_window, c.text_per_window)
    rng = tk.make_rng(c.seed)
    T, N = layout.flat_text_len, layout.flat_image_len
    dt = cfg.np_dtype
    x_text = tk.Tensor(rng.standard_normal((T, c.d_model)).astype(dt), requires_grad=backward)
    x_img = tk.Tensor(rng.standard_normal((N, c.d_model)).astype(dt))
    perm = np.where(layout.is_text, layout.kind_index, T + layout.kind_index)
    stream = tk.take(tk.concat([x_text, x_img]), perm)

    if mode == "insertion":
        mask, pos = build_insertion_mask(layout), insertion_positions(layout)

        def attn():
            return blockwise_attend(stream, stream, model.attn_weights(0, "sa"), H, mask, model.rope, pos, pos)
        ffn_in = stream
    else:
        sa_mask, tpos = build_text_mask(layout), text_positions(layout)
        fmask, wpos = _fusion_mask(mode, layout), window_positions(layout)
        qw = wpos[layout.text_stream_idx]
        kind = "sa" if mode == "casa-replace" else "x"

        def attn():
            out = blockwise_attend(x_text, stream, model.attn_weights(0, kind), H, fmask, model.rope, qw, wpos)
            if mode != "casa-replace":
                out = out + blockwise_attend(x_text, x_text, model.attn_weights(0, "sa"), H, sa_mask,
                                             model.rope, tpos, tpos)
            return out
        ffn_in = tk.concat([x_text, x_img]) if c.image_ffn_update else x_text

    def ffn():
        return _ffn(ffn_in, W, "blocks.0.", eps)

    with track_scratch() as meter:
        attn()
    grad_ctx = tk.no_grad if not backward else contextlib.nullcontext
    with grad_ctx():
        attn_ms = _median_time(attn, trials, warmup, clock)
        ffn_ms = _median_time(ffn, trials, warmup, clock)
    bwd_ms = None
    if backward:
        def fb():
            loss = tk.tsum(attn()) + tk.tsum(ffn())
            tk.backward(loss)
        bwd_ms = _median_time(fb, trials, warmup, clock)
    return BenchReport(mode, T, N, attn_ms, ffn_ms, attn_ms + ffn_ms, meter.peak, ffn_in.shape[0],
                       count_params(cfg)["added"], bwd_ms)

