"""Incremental decoding with split caches.

Self-attention layers keep a growing text KV cache. Fusion layers keep a
window cache (image K/V plus the window's text K/V) that is discarded when a
new image arrives. Insertion mode instead pushes image tokens through every
layer and into the self-attention caches, which is what makes it grow.
"""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass
from typing import IO, Iterable

import numpy as np

from . import tensorkit as tk
from .attention import RopeParams, apply_rope
from .errors import ContractError
from .model import FusionModel
from .tensorkit import Tensor


class KVBuffer:
    """Append-only K/V storage with capacity doubling."""

    def __init__(self, n_heads: int, head_dim: int, dtype):
        self.n_heads, self.head_dim, self.dtype = n_heads, head_dim, dtype
        self._k = np.empty((0, n_heads, head_dim), dtype)
        self._v = np.empty((0, n_heads, head_dim), dtype)
        self.length = 0

    def append(self, k: np.ndarray, v: np.ndarray):
        n = k.shape[0]
        need = self.length + n
        if need > self._k.shape[0]:
            cap = max(need, 2 * self._k.shape[0], 8)
            for name in ("_k", "_v"):
                old = getattr(self, name)
                new = np.empty((cap, self.n_heads, self.head_dim), self.dtype)
                new[:self.length] = old[:self.length]
                setattr(self, name, new)
        self._k[self.length:need] = k
        self._v[self.length:need] = v
        self.length = need

    @property
    def k(self) -> np.ndarray:
        return self._k[:self.length]

    @property
    def v(self) -> np.ndarray:
        return self._v[:self.length]

    def reset(self):
        self.length = 0

    def scalars(self) -> int:
        return 2 * self.length * self.n_heads * self.head_dim


@dataclass
class WindowCache:
    kv: KVBuffer
    n_image: int = 0
    n_text: int = 0

    def reset(self):
        self.kv.reset()
        self.n_image = self.n_text = 0


@dataclass
class LedgerRow:
    step: int
    event_kind: str
    text_kv_scalars: int
    casa_window_scalars: int
    peak_scratch_scalars: int
    wall_ms: float = 0.0


LEDGER_COLUMNS = ("step", "event_kind", "text_kv_scalars", "casa_window_scalars",
                  "peak_scratch_scalars", "wall_ms")


def write_ledger(rows: Iterable[LedgerRow], fh: IO[str]):
    w = csv.writer(fh)
    w.writerow(LEDGER_COLUMNS)
    for r in rows:
        w.writerow([r.step, r.event_kind, r.text_kv_scalars, r.casa_window_scalars,
                    r.peak_scratch_scalars, f"{r.wall_ms:.4f}"])


def _attend(q: np.ndarray, k: np.ndarray, v: np.ndarray, past: int) -> tuple[np.ndarray, int]:
    """q (m,H,hd) over cache (n,H,hd); query a sees keys [0, past + a]."""
    m, H, hd = q.shape
    n = k.shape[0]
    s = (q.transpose(1, 0, 2) @ k.transpose(1, 2, 0)) / np.sqrt(hd)
    if m > 1 or past + 1 < n:
        allowed = np.arange(n)[None, :] <= (past + np.arange(m))[:, None]
        s = np.where(allowed[None], s, -np.inf)
    s = s - s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    out = (p @ v.transpose(1, 0, 2)).transpose(1, 0, 2)
    return out.reshape(m, H * hd), s.size


class Streamer:
    """Single-owner incremental decoder for one :class:`FusionModel`."""

    def __init__(self, model: FusionModel):
        self.model = model
        cfg = self.cfg = model.cfg
        self.dtype = cfg.np_dtype
        self.W = {k: t.data for k, t in model.weights.items()}
        self.rope: RopeParams = model.rope
        self.fusion = set(cfg.fusion_layers())
        self.sa_layers = [l for l in range(cfg.n_layers)
                          if not (cfg.mode == "casa-replace" and l in self.fusion)]
        H, hd = cfg.n_heads, cfg.head_dim
        self.sa_cache = {l: KVBuffer(H, hd, self.dtype) for l in self.sa_layers}
        self.win_cache = {l: WindowCache(KVBuffer(H, hd, self.dtype)) for l in self.fusion}
        self.step = 0
        self.peak_scratch = 0
        self.new_sample()

    # -- state -----------------------------------------------------------
    def new_sample(self):
        """Start a new packed sample: nothing attends across the boundary."""
        for c in self.sa_cache.values():
            c.reset()
        for c in self.win_cache.values():
            c.reset()
        self.text_pos = 0          # SA position (text index within sample)
        self.stream_pos = 0        # insertion position (stream index within sample)
        self.window_pos = 0        # fusion position (window-local)
        self.window_has_image = False
        self.last_was_image = False
        self.n_text_tokens = 0

    # -- small numeric helpers (same formulas as the tape ops) -----------
    def _ln(self, x: np.ndarray, name: str) -> np.ndarray:
        with tk.no_grad():
            return tk.layernorm(Tensor(x), Tensor(self.W[name + ".g"]), Tensor(self.W[name + ".b"]),
                                self.cfg.ln_eps).data

    def _ffn(self, x: np.ndarray, l: int) -> np.ndarray:
        p = f"blocks.{l}."
        h = self._ln(x, p + "ln2")
        with tk.no_grad():
            h = tk.gelu(Tensor(h @ self.W[p + "ffn.w1"] + self.W[p + "ffn.b1"])).data
        return h @ self.W[p + "ffn.w2"] + self.W[p + "ffn.b2"]

    def _heads(self, x: np.ndarray, w: np.ndarray, positions) -> np.ndarray:
        y = (x @ w).reshape(x.shape[0], self.cfg.n_heads, self.cfg.head_dim)
        if positions is None:
            return y
        with tk.no_grad():
            return apply_rope(Tensor(y), np.asarray(positions), self.rope).data

    def _kv(self, xn, prefix, positions):
        return (self._heads(xn, self.W[prefix + "wk"], positions),
                self._heads(xn, self.W[prefix + "wv"], None))

    def _note(self, n: int):
        self.peak_scratch = max(self.peak_scratch, n)

    def _self_attend(self, xn, l, cache: KVBuffer, positions, prefix):
        k, v = self._kv(xn, prefix, positions)
        past = cache.length
        cache.append(k, v)
        q = self._heads(xn, self.W[prefix + "wq"], positions)
        out, scratch = _attend(q, cache.k, cache.v, past)
        self._note(scratch)
        return out @ self.W[prefix + "wo"]

    # -- events ----------------------------------------------------------
    def ingest_image(self, embeddings: np.ndarray):
        """Feed one image block; back-to-back images share a window."""
        if embeddings.ndim != 2 or embeddings.shape[0] == 0:
            raise ContractError("ingest_image needs a non-empty (n, d_model) array")
        cfg = self.cfg
        self.peak_scratch = 0
        img = embeddings.astype(self.dtype)
        if cfg.qformer is not None:
            with tk.no_grad():
                img = self.model.qformer_compress(Tensor(img)).data
        n = img.shape[0]
        if cfg.mode == "insertion":
            self._insertion_rows(img)
            self.last_was_image = True
            return
        if not self.last_was_image:
            for c in self.win_cache.values():
                c.reset()
            self.window_pos = 0
        positions = np.arange(self.window_pos, self.window_pos + n)
        cur = img
        for l in range(cfg.n_layers):
            p = f"blocks.{l}."
            if cfg.image_ffn_update:
                cur = cur + self._ffn(cur, l)
            if l in self.fusion:
                ln, kind = ("ln1", "sa.") if cfg.mode == "casa-replace" else ("lnx", "x.")
                k, v = self._kv(self._ln(cur, p + ln), p + kind, positions)
                wc = self.win_cache[l]
                wc.kv.append(k, v)
                wc.n_image += n
        self.window_pos += n
        self.window_has_image = True
        self.last_was_image = True

    def _insertion_rows(self, x: np.ndarray) -> np.ndarray:
        positions = np.arange(self.stream_pos, self.stream_pos + x.shape[0])
        for l in range(self.cfg.n_layers):
            p = f"blocks.{l}."
            x = x + self._self_attend(self._ln(x, p + "ln1"), l, self.sa_cache[l], positions, p + "sa.")
            x = x + self._ffn(x, l)
        self.stream_pos += x.shape[0]
        return x

    def decode_step(self, token_id: int) -> np.ndarray:
        """Consume one text token and return next-token logits."""
        cfg, W = self.cfg, self.W
        if not 0 <= token_id < cfg.vocab_size:
            raise ContractError(f"token id {token_id} outside [0, {cfg.vocab_size})")
        self.peak_scratch = 0
        x = W["tok_emb"][[token_id]].astype(self.dtype)
        if cfg.mode == "insertion":
            x = self._insertion_rows(x)
        else:
            tpos = np.array([self.text_pos])
            wpos = np.array([self.window_pos])
            for l in range(cfg.n_layers):
                p = f"blocks.{l}."
                fus = None
                if l in self.fusion:
                    fus = self._fusion_step(x, l, wpos)
                if cfg.mode == "casa-replace" and l in self.fusion:
                    if fus is not None:
                        x = x + fus
                else:
                    if fus is not None and cfg.mode != "casa-parallel":
                        x = x + fus
                    sa = self._self_attend(self._ln(x, p + "ln1"), l, self.sa_cache[l], tpos, p + "sa.")
                    x = x + sa
                    if fus is not None and cfg.mode == "casa-parallel":
                        x = x + fus
                x = x + self._ffn(x, l)
            self.text_pos += 1
            self.window_pos += 1
        self.n_text_tokens += 1
        self.last_was_image = False
        h = self._ln(x, "lnf")
        return (h @ W["lm_head"])[0]

    def _fusion_step(self, x: np.ndarray, l: int, wpos) -> np.ndarray | None:
        cfg, p = self.cfg, f"blocks.{l}."
        wc = self.win_cache[l]
        replace = cfg.mode == "casa-replace"
        if not self.window_has_image and not replace:
            return None  # zero-update row
        ln, kind = ("ln1", "sa.") if replace else ("lnx", "x.")
        xn = self._ln(x, p + ln)
        q = self._heads(xn, self.W[p + kind + "wq"], wpos)
        if cfg.mode in ("ca", "gated-ca"):
            k, v = wc.kv.k, wc.kv.v
        else:
            kt, vt = self._kv(xn, p + kind, wpos)
            wc.kv.append(kt, vt)
            wc.n_text += 1
            k, v = wc.kv.k, wc.kv.v
        out, scratch = _attend(q, k, v, k.shape[0] - 1)
        self._note(scratch)
        out = out @ self.W[p + kind + "wo"]
        if cfg.mode == "gated-ca":
            out = out * np.tanh(self.W[p + "x.gate"])
        return out

    # -- accounting ------------------------------------------------------
    def text_kv_scalars(self) -> int:
        return sum(c.scalars() for c in self.sa_cache.values())

    def casa_window_scalars(self) -> int:
        return sum(c.kv.scalars() for c in self.win_cache.values())

    def memory_report(self, event_kind: str = "report", wall_ms: float = 0.0) -> LedgerRow:
        return LedgerRow(self.step, event_kind, self.text_kv_scalars(), self.casa_window_scalars(),
                         self.peak_scratch, wall_ms)

    def sa_cache_lengths(self) -> dict[int, int]:
        return {l: c.length for l, c in self.sa_cache.items()}


def replay(model: FusionModel, seq) -> list[np.ndarray]:
    """Decode ``seq`` event by event; returns the logits after each text token."""
    from .sequence import ImageBlock

    st = Streamer(model)
    out = []
    bounds = set(seq.sample_boundaries)
    for i, ev in enumerate(seq.events):
        if i in bounds and i > 0:
            st.new_sample()
        if isinstance(ev, ImageBlock):
            st.ingest_image(ev.embeddings)
        else:
            out.append(st.decode_step(ev.token_id))
    return out


# --------------------------------------------------------------------- live captioning

@dataclass
class CaptionResult:
    rows: list[LedgerRow]
    stopped: bool
    stop_reason: str
    generated: list[int]

    def to_dicts(self) -> list[dict]:
        return [asdict(r) for r in self.rows]


def simulate_live_captioning(schedule: Iterable[tuple], model: FusionModel, *,
                             cache_cap: int | None = None, clock=time.perf_counter) -> CaptionResult:
    """Run a frame/text schedule and emit one ledger row per event.

    Schedule items: ``("frame", embeddings)``, ``("text", [ids])`` (forced) or
    ``("generate", n)`` (greedy). When ``cache_cap`` scalars are exceeded the run
    stops gracefully and the rows so far are returned.
    """
    st = Streamer(model)
    rows: list[LedgerRow] = []
    generated: list[int] = []
    last_logits = None

    def emit(kind, t0):
        st.step += 1
        rows.append(st.memory_report(kind, (clock() - t0) * 1e3))
        total = rows[-1].text_kv_scalars + rows[-1].casa_window_scalars
        return cache_cap is not None and total > cache_cap

    for item in schedule:
        kind = item[0]
        if kind == "frame":
            t0 = clock()
            st.ingest_image(np.asarray(item[1]))
            if emit("frame", t0):
                return CaptionResult(rows, True, f"cache cap {cache_cap} exceeded", generated)
        elif kind in ("text", "generate"):
            ids = list(item[1]) if kind == "text" else [None] * int(item[1])
            for tok in ids:
                if tok is None:
                    if last_logits is None:
                        raise ContractError("generate needs a preceding text token")
                    tok = int(np.argmax(last_logits))
                    generated.append(tok)
                t0 = clock()
                last_logits = st.decode_step(tok)
                if emit("text", t0):
                    return CaptionResult(rows, True, f"cache cap {cache_cap} exceeded", generated)
        else:
            raise ContractError(f"unknown schedule event {kind!r}")
    return CaptionResult(rows, False, "", generated)


def synthetic_schedule(n_frames: int, frame_tokens: int, text_per_frame: int, d_model: int,
                       seed: int = 0, vocab_size: int = 32, dtype=np.float64) -> list[tuple]:
    """Alternating frames and forced text tokens, all drawn from one seed."""
    rng = tk.make_rng(seed)
    sched: list[tuple] = []
    for _ in range(n_frames):
        sched.append(("frame", rng.standard_normal((frame_tokens, d_model)).astype(dtype)))
        sched.append(("text", rng.integers(0, vocab_size, text_per_frame).tolist()))
    return sched


def per_frame_rows(rows: list[LedgerRow]) -> list[LedgerRow]:
    """The last row of each frame (memory after the frame's text)."""
    out, cur = [], None
    for r in rows:
        if r.event_kind == "frame" and cur is not None:
            out.append(cur)
        cur = r
    if cur is not None:
        out.append(cur)
    return out


def step_times_by_frame(rows: list[LedgerRow]) -> list[list[float]]:
    """Wall times of the text steps that follow each frame."""
    out: list[list[float]] = []
    for r in rows:
        if r.event_kind == "frame":
            out.append([])
        elif out:
            out[-1].append(r.wall_ms)
    return out


def bucket_medians(per_frame: list[list[float]], bucket: int) -> list[float]:
    """Median step time over consecutive groups of ``bucket`` frames."""
    return [float(np.median([t for f in per_frame[i:i + bucket] for t in f]))
            for i in range(0, len(per_frame), bucket)]


def min_step_times(runs: list[list[LedgerRow]]) -> list[list[float]]:
    """Per-step minimum wall time across repeated runs of one schedule."""
    per_run = [step_times_by_frame(r) for r in runs]
    return [[min(ts) for ts in zip(*frames)] for frames in zip(*per_run)]


def timed_runs(schedule: list[tuple], model: FusionModel, repeats: int = 3) -> list[list[LedgerRow]]:
    """Replay ``schedule`` ``repeats`` times with the garbage collector paused."""
    import gc
    out = []
    enabled = gc.isenabled()
    gc.disable()
    try:
        for _ in range(repeats):
            out.append(simulate_live_captioning(schedule, model).rows)
    finally:
        if enabled:
            gc.enable()
    return out
