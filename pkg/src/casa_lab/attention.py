"""Masked multi-head attention, rotary embeddings and mask builders.

Two attention paths share the same projections:

* :func:`mha` materializes the full Q x K mask and is the dense reference.
* :func:`blockwise_attend` only ever touches the (query block, key block)
  pairs listed in a blockwise :class:`MaskSpec`; same-shaped blocks are
  batched together.

Mask axes: CASA/CA masks use text indices as queries and stream indices as
keys; insertion masks use stream indices on both axes; self-attention masks
of fusion models use text indices on both axes.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field, replace
from typing import IO

import numpy as np

from . import tensorkit as tk
from .errors import ConfigError, ContractError, ShapeError
from .sequence import WindowLayout
from .tensorkit import Tensor


@dataclass(frozen=True)
class Block:
    """Queries ``q`` attend keys ``k``.

    With ``causal`` set, the query at local offset a sees the first
    ``prefix + a + 1`` keys; otherwise it sees all of them.
    """

    q: range
    k: range
    prefix: int = 0
    causal: bool = True

    def local_mask(self) -> np.ndarray:
        nq, nk = len(self.q), len(self.k)
        if not self.causal:
            return np.ones((nq, nk), dtype=bool)
        return np.arange(nk)[None, :] <= (self.prefix + np.arange(nq))[:, None]


@dataclass(frozen=True, eq=False)
class MaskSpec:
    q_len: int
    k_len: int
    blocks: tuple[Block, ...] | None = None
    dense: np.ndarray | None = field(default=None, repr=False)
    zero_rows: tuple[int, ...] = ()
    removed: frozenset = frozenset()
    q_labels: tuple[str, ...] | None = field(default=None, repr=False)
    k_labels: tuple[str, ...] | None = field(default=None, repr=False)

    def __post_init__(self):
        if (self.blocks is None) == (self.dense is None):
            raise ContractError("MaskSpec needs exactly one of blocks or dense")
        if self.dense is not None and self.dense.shape != (self.q_len, self.k_len):
            raise ShapeError(f"dense mask shape {self.dense.shape} != ({self.q_len}, {self.k_len})")
        if self.blocks is not None:
            object.__setattr__(self, "zero_rows", tuple(
                r for b in self.blocks if not len(b.k) for r in b.q))

    @property
    def is_blockwise(self) -> bool:
        return self.blocks is not None

    def validate(self):
        if self.blocks is None:
            return
        owner = np.full(self.q_len, -1)
        for i, b in enumerate(self.blocks):
            if b.q.start < 0 or b.q.stop > self.q_len or b.k.start < 0 or b.k.stop > self.k_len:
                raise ContractError(f"block {i} {b} exceeds mask bounds ({self.q_len}, {self.k_len})")
            if b.prefix > len(b.k):
                raise ContractError(f"block {i} prefix {b.prefix} exceeds its {len(b.k)} keys")
            if (owner[b.q.start:b.q.stop] >= 0).any():
                raise ContractError(f"block {i} overlaps another block's query rows")
            owner[b.q.start:b.q.stop] = i
        if (owner < 0).any():
            raise ContractError(f"query rows {np.flatnonzero(owner < 0).tolist()} belong to no block")

    def to_dense(self) -> np.ndarray:
        if self.dense is not None:
            m = self.dense.copy()
        else:
            m = np.zeros((self.q_len, self.k_len), dtype=bool)
            for b in self.blocks:
                if len(b.q) and len(b.k):
                    m[b.q.start:b.q.stop, b.k.start:b.k.stop] = b.local_mask()
        for r, c in self.removed:
            m[r, c] = False
        return m

    def materialize(self) -> "MaskSpec":
        return MaskSpec(self.q_len, self.k_len, dense=self.to_dense(), zero_rows=self.zero_rows,
                        q_labels=self.q_labels, k_labels=self.k_labels)

    def with_removed(self, pairs) -> "MaskSpec":
        return replace(self, removed=self.removed | frozenset((int(r), int(c)) for r, c in pairs))

    def n_entries(self) -> int:
        if self.dense is None and not self.removed:
            total = 0
            for b in self.blocks:
                nq, nk = len(b.q), len(b.k)
                if not nk:
                    continue
                if b.causal:
                    total += int(np.minimum(b.prefix + np.arange(1, nq + 1), nk).sum())
                else:
                    total += nq * nk
            return total
        return int(self.to_dense().sum())

    def dump_csv(self, fh: IO[str]):
        """Write the dense 0/1 matrix with ``t3``/``i7`` style row and column labels."""
        m = self.to_dense()
        ql = self.q_labels or tuple(f"q{i}" for i in range(self.q_len))
        kl = self.k_labels or tuple(f"k{j}" for j in range(self.k_len))
        fh.write("," + ",".join(kl) + "\n")
        for i, row in enumerate(m):
            fh.write(ql[i] + "," + ",".join("1" if x else "0" for x in row) + "\n")


# --------------------------------------------------------------------- masks

def _stream_labels(layout: WindowLayout) -> tuple[str, ...]:
    return tuple(layout.label(j) for j in range(layout.n_tokens))


def _text_labels(layout: WindowLayout) -> tuple[str, ...]:
    return tuple(f"t{j}" for j in range(layout.flat_text_len))


def build_insertion_mask(layout: WindowLayout) -> MaskSpec:
    """Causal attention over the interleaved stream, block-diagonal per sample."""
    blocks = tuple(Block(span, span) for span in layout.sample_spans if len(span))
    labels = _stream_labels(layout)
    return MaskSpec(layout.n_tokens, layout.n_tokens, blocks=blocks, q_labels=labels, k_labels=labels)


def build_text_mask(layout: WindowLayout) -> MaskSpec:
    """Causal text-only self-attention per sample (image tokens never take positions)."""
    blocks = tuple(Block(r, r) for r in layout.sample_text_ranges() if len(r))
    labels = _text_labels(layout)
    return MaskSpec(layout.flat_text_len, layout.flat_text_len, blocks=blocks,
                    q_labels=labels, k_labels=labels)


def build_casa_mask(layout: WindowLayout, preamble: str = "zero") -> MaskSpec:
    """Text queries attend to their window's image tokens and the window's text up to themselves.

    ``preamble`` decides imageless windows: ``"zero"`` makes them zero-update
    rows, ``"causal"`` gives them window-local causal text attention.
    """
    if preamble not in ("zero", "causal"):
        raise ConfigError(f"unknown preamble rule {preamble!r}")
    blocks = []
    for w in layout.windows:
        q = layout.text_range(w.text_span)
        if not len(q):
            continue
        if not w.n_image and preamble == "zero":
            blocks.append(Block(q, range(0, 0)))
        else:
            blocks.append(Block(q, w.span, prefix=w.n_image, causal=True))
    return MaskSpec(layout.flat_text_len, layout.n_tokens, blocks=tuple(blocks),
                    q_labels=_text_labels(layout), k_labels=_stream_labels(layout))


def build_ca_mask(layout: WindowLayout) -> MaskSpec:
    """Text queries attend exactly to their window's image tokens."""
    blocks = []
    for w in layout.windows:
        q = layout.text_range(w.text_span)
        if len(q):
            blocks.append(Block(q, w.image_span, prefix=0, causal=False))
    return MaskSpec(layout.flat_text_len, layout.n_tokens, blocks=tuple(blocks),
                    q_labels=_text_labels(layout), k_labels=_stream_labels(layout))


def insertion_positions(layout: WindowLayout) -> np.ndarray:
    pos = np.zeros(layout.n_tokens, dtype=np.int64)
    for span in layout.sample_spans:
        pos[span.start:span.stop] = np.arange(len(span))
    return pos


def text_positions(layout: WindowLayout) -> np.ndarray:
    pos = np.zeros(layout.flat_text_len, dtype=np.int64)
    for r in layout.sample_text_ranges():
        pos[r.start:r.stop] = np.arange(len(r))
    return pos


def window_positions(layout: WindowLayout) -> np.ndarray:
    """Window-local stream positions: images 0..N_w-1, then the window's text."""
    pos = np.zeros(layout.n_tokens, dtype=np.int64)
    for w in layout.windows:
        s = w.span
        pos[s.start:s.stop] = np.arange(len(s))
    return pos


# --------------------------------------------------------------------- rope

@dataclass(frozen=True)
class RopeParams:
    head_dim: int
    base: float = 10000.0

    def __post_init__(self):
        if self.head_dim % 2:
            raise ConfigError(f"rotary embeddings need an even head_dim, got {self.head_dim}")


def rope_angles(positions, params: RopeParams) -> np.ndarray:
    inv_freq = params.base ** (-np.arange(0, params.head_dim, 2) / params.head_dim)
    return np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]


def apply_rope(x: Tensor, positions, params: RopeParams) -> Tensor:
    """Rotate (even, odd) channel pairs of ``x`` (rows x [heads x] head_dim)."""
    if x.shape[-1] != params.head_dim:
        raise ShapeError(f"apply_rope: last dim {x.shape[-1]} != head_dim {params.head_dim}")
    positions = np.asarray(positions)
    if len(positions) != x.shape[0]:
        raise ShapeError(f"apply_rope: {len(positions)} positions for {x.shape[0]} rows")
    ang = rope_angles(positions, params)
    if x.ndim == 3:
        ang = ang[:, None, :]
    return tk.rotate_pairs(x, np.cos(ang).astype(x.dtype), np.sin(ang).astype(x.dtype))


# --------------------------------------------------------------------- attention

@dataclass
class AttnWeights:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor


class ScratchMeter:
    """Tracks the largest attention-score buffer (in scalars) allocated while active."""

    def __init__(self):
        self.peak = 0

    def note(self, n: int):
        self.peak = max(self.peak, int(n))


_meters: list[ScratchMeter] = []


@contextlib.contextmanager
def track_scratch():
    m = ScratchMeter()
    _meters.append(m)
    try:
        yield m
    finally:
        _meters.remove(m)


def note_scratch(n: int):
    for m in _meters:
        m.note(n)


def _project(xq, xkv, w: AttnWeights, n_heads, rope, q_positions, k_positions):
    d = xq.shape[-1]
    if d % n_heads:
        raise ConfigError(f"model dim {d} not divisible by {n_heads} heads")
    hd = w.wq.shape[1] // n_heads
    with tk.mac_tag("attn_proj"):
        q = (xq @ w.wq).reshape(xq.shape[0], n_heads, hd)
        k = (xkv @ w.wk).reshape(xkv.shape[0], n_heads, hd)
        v = (xkv @ w.wv).reshape(xkv.shape[0], n_heads, hd)
    if rope is not None:
        q = apply_rope(q, q_positions, rope)
        k = apply_rope(k, k_positions, rope)
    return q, k, v, hd


def mha(xq: Tensor, xkv: Tensor, w: AttnWeights, n_heads: int, mask: MaskSpec,
        rope: RopeParams | None = None, q_positions=None, k_positions=None,
        record: list | None = None) -> Tensor:
    """Dense reference attention with the mask fully materialized.

    Rows listed in ``mask.zero_rows`` produce zeros; any other row with no
    visible key is a contract violation.
    """
    tq, tkv = xq.shape[0], xkv.shape[0]
    if (mask.q_len, mask.k_len) != (tq, tkv):
        raise ShapeError(f"mha: mask is {mask.q_len}x{mask.k_len} but inputs give {tq}x{tkv}")
    dense = mask.to_dense()
    has_key = dense.any(axis=1)
    zero = np.zeros(tq, dtype=bool)
    zero[list(mask.zero_rows)] = True
    bad = np.flatnonzero(~has_key & ~zero)
    if len(bad):
        raise ContractError(f"mha: query row {int(bad[0])} has no visible key")
    q, k, v, hd = _project(xq, xkv, w, n_heads, rope, q_positions, k_positions)
    active = np.flatnonzero(has_key)
    d = n_heads * hd
    if not len(active):
        return Tensor(np.zeros((tq, w.wo.shape[1]), dtype=xq.dtype))
    note_scratch(n_heads * len(active) * tkv)
    with tk.mac_tag("attn_core"):
        qa = tk.take(q, active).transpose(1, 0, 2)
        s = (qa @ k.transpose(1, 2, 0)) * (1.0 / np.sqrt(hd))
        s = tk.masked_fill(s, ~dense[active][None], -np.inf)
        p = tk.softmax_lastdim(s)
        o = (p @ v.transpose(1, 0, 2)).transpose(1, 0, 2).reshape(len(active), d)
    if record is not None:
        record.append((active[None], np.arange(tkv)[None], p.data[None]))
    out = tk.scatter_rows(o, active, tq)
    with tk.mac_tag("attn_proj"):
        return out @ w.wo


def blockwise_attend(xq: Tensor, xkv: Tensor, w: AttnWeights, n_heads: int, mask: MaskSpec,
                     rope: RopeParams | None = None, q_positions=None, k_positions=None,
                     record: list | None = None, max_group: int | None = None) -> Tensor:
    """Attention restricted to the blocks of a blockwise mask.

    Blocks of identical shape are stacked and processed together, at most
    ``max_group`` at a time, so the largest score buffer is
    ``max_group * heads * block_q * block_k`` rather than Q x K.
    Zero-update rows (blocks without keys) come out as exact zeros.
    """
    if not mask.is_blockwise:
        raise ContractError("blockwise_attend needs a blockwise mask")
    tq, tkv = xq.shape[0], xkv.shape[0]
    if (mask.q_len, mask.k_len) != (tq, tkv):
        raise ContractError(f"blockwise_attend: mask is {mask.q_len}x{mask.k_len} "
                            f"but inputs give {tq}x{tkv}")
    q, k, v, hd = _project(xq, xkv, w, n_heads, rope, q_positions, k_positions)
    d = n_heads * hd

    groups: dict[tuple[int, int], list[Block]] = {}
    for b in mask.blocks:
        if len(b.q) and len(b.k):
            groups.setdefault((len(b.q), len(b.k)), []).append(b)
    removed_by_row: dict[int, list[int]] = {}
    for r, c in mask.removed:
        removed_by_row.setdefault(r, []).append(c)

    parts, rows = [], []
    scale = 1.0 / np.sqrt(hd)
    for (nq, nk), blocks in sorted(groups.items()):
        step = max_group or len(blocks)
        for c0 in range(0, len(blocks), step):
            chunk = blocks[c0:c0 + step]
            qi = np.stack([np.arange(b.q.start, b.q.stop) for b in chunk])
            ki = np.stack([np.arange(b.k.start, b.k.stop) for b in chunk])
            local = np.stack([b.local_mask() for b in chunk])
            if removed_by_row:
                for bi, b in enumerate(chunk):
                    for r in b.q:
                        for c in removed_by_row.get(r, ()):
                            if b.k.start <= c < b.k.stop:
                                local[bi, r - b.q.start, c - b.k.start] = False
            note_scratch(len(chunk) * n_heads * nq * nk)
            with tk.mac_tag("attn_core"):
                qg = tk.take(q, qi).transpose(0, 2, 1, 3)
                kg = tk.take(k, ki).transpose(0, 2, 3, 1)
                vg = tk.take(v, ki).transpose(0, 2, 1, 3)
                s = (qg @ kg) * scale
                s = tk.masked_fill(s, ~local[:, None], -np.inf)
                p = tk.softmax_lastdim(s)
                o = (p @ vg).transpose(0, 2, 1, 3).reshape(len(chunk) * nq, d)
            if record is not None:
                record.append((qi, ki, p.data))
            parts.append(o)
            rows.append(qi.reshape(-1))
    if not parts:
        return Tensor(np.zeros((tq, w.wo.shape[1]), dtype=xq.dtype))
    o = parts[0] if len(parts) == 1 else tk.concat(parts, axis=0)
    out = tk.scatter_rows(o, np.concatenate(rows), tq)
    with tk.mac_tag("attn_proj"):
        return out @ w.wo


def recorded_probs(record: list, q_len: int, k_len: int, n_heads: int) -> np.ndarray:
    """Scatter recorded attention probabilities into a dense (heads, Q, K) array."""
    out = np.zeros((n_heads, q_len, k_len))
    for qi, ki, p in record:
        for b in range(qi.shape[0]):
            out[:, qi[b][:, None], ki[b][None, :]] = p[b]
    return out
