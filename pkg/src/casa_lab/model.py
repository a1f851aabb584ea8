"""Transformer stacks for every fusion mode, the Q-Former compressor and checkpoints.

Blocks are pre-norm. Modes:

``insertion``       image embeddings sit in the token stream; plain causal SA.
``ca``/``gated-ca`` cross-attention to the window's image, then SA, then FFN;
                    the gated form scales the CA residual by tanh(gate).
``casa-parallel``   SA and CASA residuals are both added to the block input.
``casa-pre``        CASA residual, then SA, then FFN.
``casa-replace``    every ``period``-th block (from ``offset``) swaps SA for CASA
                    using the SA weights; imageless preamble text keeps
                    window-local causal attention in those blocks.

In every mode but insertion, image tokens only ever act as keys/values.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensorkit as tk
from .attention import (AttnWeights, Block, MaskSpec, RopeParams, blockwise_attend,
                        build_ca_mask, build_casa_mask, build_insertion_mask, build_text_mask,
                        insertion_positions, mha, text_positions, window_positions)
from .errors import ConfigError, ContractError
from .sequence import ImageBlock, MultimodalSequence, Text, WindowLayout, segment_windows
from .tensorkit import Tensor

MODES = ("insertion", "ca", "gated-ca", "casa-parallel", "casa-pre", "casa-replace")
CASA_MODES = ("casa-parallel", "casa-pre", "casa-replace")
CHECKPOINT_VERSION = 1


@dataclass
class QFormerConfig:
    n_queries: int
    n_layers: int = 1


@dataclass
class FusionConfig:
    d_model: int = 32
    n_heads: int = 4
    n_layers: int = 2
    vocab_size: int = 32
    ffn_mult: int = 4
    mode: str = "casa-parallel"
    period: int = 4
    offset: int | None = None
    qformer: QFormerConfig | None = None
    image_ffn_update: bool = False
    dtype: str = "float64"
    rope_base: float = 10000.0
    ln_eps: float = 1e-5

    def __post_init__(self):
        if isinstance(self.qformer, dict):
            self.qformer = QFormerConfig(**self.qformer)
        self.validate()

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown fusion mode {self.mode!r}; expected one of {MODES}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if (self.d_model // self.n_heads) % 2:
            raise ConfigError("head_dim must be even for rotary embeddings")
        if self.period < 1:
            raise ConfigError(f"period must be >= 1, got {self.period}")
        if self.qformer is not None and self.qformer.n_queries < 1:
            raise ConfigError("qformer.n_queries must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")
        if self.mode == "casa-replace" and not self.replaced_layers():
            raise ConfigError(f"casa-replace with period {self.period} / offset {self.offset} "
                              f"replaces no layer out of {self.n_layers}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def d_ffn(self) -> int:
        return self.ffn_mult * self.d_model

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def layer_offset(self) -> int:
        if self.offset is not None:
            return self.offset
        return min((self.period - 1) // 2, self.n_layers - 1)

    def replaced_layers(self) -> tuple[int, ...]:
        if self.mode != "casa-replace":
            return ()
        off = self.layer_offset()
        return tuple(l for l in range(self.n_layers) if l >= off and (l - off) % self.period == 0)

    def fusion_layers(self) -> tuple[int, ...]:
        """Blocks that carry a CA/CASA attention."""
        if self.mode == "insertion":
            return ()
        if self.mode == "casa-replace":
            return self.replaced_layers()
        return tuple(range(self.n_layers))

    def has_extra_fusion_weights(self) -> bool:
        return self.mode in ("ca", "gated-ca", "casa-parallel", "casa-pre")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FusionConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# --------------------------------------------------------------------- weights

def param_shapes(cfg: FusionConfig) -> dict[str, tuple[tuple[int, ...], str]]:
    """Name -> (shape, init rule) for every parameter, without allocating."""
    d, f, V, L = cfg.d_model, cfg.d_ffn, cfg.vocab_size, cfg.n_layers
    out = {"tok_emb": ((V, d), "normal"), "lm_head": ((d, V), "fan_in"),
           "lnf.g": ((d,), "ones"), "lnf.b": ((d,), "zeros")}
    for l in range(L):
        p = f"blocks.{l}."
        out.update({
            p + "ln1.g": ((d,), "ones"), p + "ln1.b": ((d,), "zeros"),
            p + "sa.wq": ((d, d), "fan_in"), p + "sa.wk": ((d, d), "fan_in"),
            p + "sa.wv": ((d, d), "fan_in"), p + "sa.wo": ((d, d), "residual"),
            p + "ln2.g": ((d,), "ones"), p + "ln2.b": ((d,), "zeros"),
            p + "ffn.w1": ((d, f), "fan_in"), p + "ffn.b1": ((f,), "zeros"),
            p + "ffn.w2": ((f, d), "residual"), p + "ffn.b2": ((d,), "zeros"),
        })
        if cfg.has_extra_fusion_weights():
            for name in ("wq", "wk", "wv", "wo"):
                out[p + "x." + name] = ((d, d), "copy:" + p + "sa." + name)
            out[p + "lnx.g"] = ((d,), "copy:" + p + "ln1.g")
            out[p + "lnx.b"] = ((d,), "copy:" + p + "ln1.b")
            if cfg.mode == "gated-ca":
                out[p + "x.gate"] = ((1,), "zeros")
    if cfg.qformer is not None:
        out["qformer.queries"] = ((cfg.qformer.n_queries, d), "normal")
        for j in range(cfg.qformer.n_layers):
            p = f"qformer.{j}."
            out.update({
                p + "lnq.g": ((d,), "ones"), p + "lnq.b": ((d,), "zeros"),
                p + "lnkv.g": ((d,), "ones"), p + "lnkv.b": ((d,), "zeros"),
                p + "wq": ((d, d), "fan_in"), p + "wk": ((d, d), "fan_in"),
                p + "wv": ((d, d), "fan_in"), p + "wo": ((d, d), "fan_in"),
                p + "ln2.g": ((d,), "ones"), p + "ln2.b": ((d,), "zeros"),
                p + "w1": ((d, f), "fan_in"), p + "b1": ((f,), "zeros"),
                p + "w2": ((f, d), "fan_in"), p + "b2": ((d,), "zeros"),
            })
    return out


def init_weights(cfg: FusionConfig, seed: int = 0) -> dict[str, Tensor]:
    """Random backbone weights; fusion attention starts as a copy of the block's SA."""
    rng = tk.make_rng(seed)
    res = 1.0 / np.sqrt(2 * cfg.n_layers)
    arrays: dict[str, np.ndarray] = {}
    for name, (shape, rule) in param_shapes(cfg).items():
        if rule == "ones":
            a = np.ones(shape)
        elif rule == "zeros":
            a = np.zeros(shape)
        elif rule == "normal":
            a = rng.standard_normal(shape)
        elif rule == "fan_in":
            a = rng.standard_normal(shape) * shape[0] ** -0.5
        elif rule == "residual":
            a = rng.standard_normal(shape) * shape[0] ** -0.5 * res
        else:
            a = arrays[rule.split(":", 1)[1]].copy()
        arrays[name] = a
    dt = cfg.np_dtype
    return {k: Tensor(v.astype(dt), requires_grad=True, name=k) for k, v in arrays.items()}


def count_params(cfg: FusionConfig) -> dict[str, int]:
    """Parameter totals split into backbone, added fusion weights and Q-Former."""
    out = {"backbone": 0, "added": 0, "qformer": 0}
    for k, (shape, _) in param_shapes(cfg).items():
        n = int(np.prod(shape))
        if k.startswith("qformer."):
            out["qformer"] += n
        elif ".x." in k or ".lnx." in k:
            out["added"] += n
        else:
            out["backbone"] += n
    return out


# --------------------------------------------------------------------- model

def _ffn(x: Tensor, W: dict[str, Tensor], p: str, eps: float) -> Tensor:
    h = tk.layernorm(x, W[p + "ln2.g"], W[p + "ln2.b"], eps)
    with tk.mac_tag("ffn"):
        h = tk.gelu(h @ W[p + "ffn.w1"] + W[p + "ffn.b1"])
        return h @ W[p + "ffn.w2"] + W[p + "ffn.b2"]


@dataclass
class Prepared:
    """A sequence lowered for the stack: layout, ids and image rows."""

    layout: WindowLayout
    token_ids: np.ndarray
    images: Tensor | None
    stream_perm: np.ndarray  # stream index -> row of concat([text, images])


class FusionModel:
    def __init__(self, cfg: FusionConfig, weights: dict[str, Tensor] | None = None, seed: int = 0):
        self.cfg = cfg
        self.weights = weights if weights is not None else init_weights(cfg, seed)
        names = set(param_shapes(cfg))
        missing = names - set(self.weights)
        extra = set(self.weights) - names
        if missing or extra:
            raise ConfigError(f"weights do not match mode {cfg.mode!r}: "
                              f"missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        self.rope = RopeParams(cfg.head_dim, cfg.rope_base)

    # -- helpers ---------------------------------------------------------
    def attn_weights(self, l: int, kind: str) -> AttnWeights:
        W, p = self.weights, f"blocks.{l}.{kind}."
        return AttnWeights(W[p + "wq"], W[p + "wk"], W[p + "wv"], W[p + "wo"])

    def qformer_compress(self, image: Tensor) -> Tensor:
        """Compress ``n`` image rows into ``n_queries`` rows with learnable queries."""
        qc = self.cfg.qformer
        if qc is None:
            raise ConfigError("model has no qformer")
        if image.shape[0] == 0:
            raise ContractError("qformer_compress needs at least one image token")
        W, eps, H = self.weights, self.cfg.ln_eps, self.cfg.n_heads
        q = W["qformer.queries"]
        mask = MaskSpec(qc.n_queries, image.shape[0],
                        blocks=(Block(range(qc.n_queries), range(image.shape[0]), causal=False),))
        with tk.mac_tag("qformer"):
            for j in range(qc.n_layers):
                p = f"qformer.{j}."
                qn = tk.layernorm(q, W[p + "lnq.g"], W[p + "lnq.b"], eps)
                kv = tk.layernorm(image, W[p + "lnkv.g"], W[p + "lnkv.b"], eps)
                aw = AttnWeights(W[p + "wq"], W[p + "wk"], W[p + "wv"], W[p + "wo"])
                q = q + blockwise_attend(qn, kv, aw, H, mask)
                h = tk.layernorm(q, W[p + "ln2.g"], W[p + "ln2.b"], eps)
                h = tk.gelu(h @ W[p + "w1"] + W[p + "b1"])
                q = q + (h @ W[p + "w2"] + W[p + "b2"])
        return q

    def prepare(self, seq: MultimodalSequence) -> Prepared:
        dt = self.cfg.np_dtype
        events, rows = [], []
        for ev in seq.events:
            if isinstance(ev, ImageBlock):
                if ev.embeddings is None:
                    raise ContractError("forward needs image embeddings")
                if ev.embeddings.shape[1] != self.cfg.d_model:
                    raise ContractError(f"image embeddings have width {ev.embeddings.shape[1]}, "
                                        f"model expects {self.cfg.d_model}")
                img = Tensor(ev.embeddings.astype(dt, copy=False))
                if self.cfg.qformer is not None:
                    img = self.qformer_compress(img)
                rows.append(img)
                events.append(ImageBlock(img.shape[0]))
            else:
                events.append(ev)
        layout = segment_windows(MultimodalSequence(tuple(events), seq.sample_boundaries))
        ids = np.array([e.token_id for e in seq.events if isinstance(e, Text)], dtype=np.int64)
        if len(ids) and (ids.min() < 0 or ids.max() >= self.cfg.vocab_size):
            raise ContractError(f"token ids must lie in [0, {self.cfg.vocab_size})")
        images = None
        if rows:
            images = rows[0] if len(rows) == 1 else tk.concat(rows, axis=0)
        perm = np.where(layout.is_text, layout.kind_index, layout.flat_text_len + layout.kind_index)
        return Prepared(layout, ids, images, perm)

    def _stream(self, text: Tensor, images: Tensor | None, perm: np.ndarray) -> Tensor:
        if images is None:
            return text
        return tk.take(tk.concat([text, images], axis=0), perm)

    # -- forward ---------------------------------------------------------
    def forward(self, seq: MultimodalSequence, *, dense: bool = False, mask_editor=None,
                record: dict | None = None) -> Tensor:
        """Logits (text tokens x vocab) for every text position of ``seq``.

        ``dense`` routes all attention through the dense reference; ``mask_editor``
        maps (layer, MaskSpec) to an edited fusion mask; ``record`` collects
        fusion-layer attention probabilities per layer.
        """
        prep = self.prepare(seq)
        return self.forward_prepared(prep, dense=dense, mask_editor=mask_editor, record=record)

    def forward_prepared(self, prep: Prepared, *, dense=False, mask_editor=None, record=None) -> Tensor:
        cfg, W, eps, H = self.cfg, self.weights, self.cfg.ln_eps, self.cfg.n_heads
        L = prep.layout
        attend = mha if dense else blockwise_attend

        def run(xq, xkv, aw, mask, qp, kp, rec=None):
            if dense:
                mask = mask.materialize()
            return attend(xq, xkv, aw, H, mask, self.rope, qp, kp, record=rec)

        x = tk.embedding(W["tok_emb"], prep.token_ids) if len(prep.token_ids) else Tensor(
            np.zeros((0, cfg.d_model), dtype=cfg.np_dtype))

        if cfg.mode == "insertion":
            x = self._stream(x, prep.images, prep.stream_perm)
            mask, pos = build_insertion_mask(L), insertion_positions(L)
            for l in range(cfg.n_layers):
                p = f"blocks.{l}."
                h = tk.layernorm(x, W[p + "ln1.g"], W[p + "ln1.b"], eps)
                x = x + run(h, h, self.attn_weights(l, "sa"), mask, pos, pos)
                x = x + _ffn(x, W, p, eps)
            x = tk.take(x, L.text_stream_idx)
        else:
            sa_mask, tpos = build_text_mask(L), text_positions(L)
            wpos = window_positions(L)
            qwpos = wpos[L.text_stream_idx]
            if cfg.mode in ("ca", "gated-ca"):
                fmask = build_ca_mask(L)
            elif cfg.mode == "casa-replace":
                fmask = build_casa_mask(L, preamble="causal")
            else:
                fmask = build_casa_mask(L, preamble="zero")
            fusion_layers = set(cfg.fusion_layers())
            images = prep.images
            for l in range(cfg.n_layers):
                p = f"blocks.{l}."
                if cfg.image_ffn_update and images is not None:
                    images = images + _ffn(images, W, p, eps)
                fus = None
                if l in fusion_layers:
                    m = mask_editor(l, fmask) if mask_editor is not None else fmask
                    if any(len(b.k) for b in m.blocks):
                        ln = "ln1" if cfg.mode == "casa-replace" else "lnx"
                        kind = "sa" if cfg.mode == "casa-replace" else "x"
                        xn = tk.layernorm(x, W[p + ln + ".g"], W[p + ln + ".b"], eps)
                        imn = (tk.layernorm(images, W[p + ln + ".g"], W[p + ln + ".b"], eps)
                               if images is not None else None)
                        kv = self._stream(xn, imn, prep.stream_perm)
                        rec = record.setdefault(l, []) if record is not None else None
                        with tk.mac_tag("fusion"):
                            fus = run(xn, kv, self.attn_weights(l, kind), m, qwpos, wpos, rec)
                        if cfg.mode == "gated-ca":
                            fus = fus * tk.tanh(W[p + "x.gate"])

                if cfg.mode == "casa-replace" and l in fusion_layers:
                    if fus is not None:
                        x = x + fus
                else:
                    if fus is not None and cfg.mode != "casa-parallel":
                        x = x + fus
                    h = tk.layernorm(x, W[p + "ln1.g"], W[p + "ln1.b"], eps)
                    x = x + run(h, h, self.attn_weights(l, "sa"), sa_mask, tpos, tpos)
                    if fus is not None and cfg.mode == "casa-parallel":
                        x = x + fus
                x = x + _ffn(x, W, p, eps)

        h = tk.layernorm(x, W["lnf.g"], W["lnf.b"], eps)
        with tk.mac_tag("lm_head"):
            return h @ W["lm_head"]

    def logits(self, seq: MultimodalSequence, **kw) -> np.ndarray:
        with tk.no_grad():
            return self.forward(seq, **kw).data

    def parameters(self) -> dict[str, Tensor]:
        return self.weights

    def n_params(self) -> int:
        return sum(t.data.size for t in self.weights.values())


# --------------------------------------------------------------------- checkpoints

def save_checkpoint(path: str | Path, cfg: FusionConfig, weights: dict[str, Tensor], extra: dict | None = None):
    """Write ``<path>.bin`` (raw little-endian f32) and ``<path>.json`` (manifest)."""
    path = Path(path)
    entries, offset = [], 0
    with open(path.with_suffix(".bin"), "wb") as fh:
        for name in sorted(weights):
            arr = np.ascontiguousarray(weights[name].data, dtype="<f4")
            fh.write(arr.tobytes())
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.nbytes
    manifest = {"version": CHECKPOINT_VERSION, "dtype": "float32", "config": cfg.to_dict(),
                "tensors": entries, "extra": extra or {}}
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=1))


def load_checkpoint(path: str | Path, dtype: str | None = None) -> tuple[FusionConfig, dict[str, Tensor], dict]:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    if "version" not in manifest:
        raise ConfigError(f"{path.with_suffix('.json')}: manifest has no version field")
    if manifest["version"] != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {manifest['version']}")
    cfg_d = dict(manifest["config"])
    if dtype is not None:
        cfg_d["dtype"] = dtype
    cfg = FusionConfig.from_dict(cfg_d)
    raw = path.with_suffix(".bin").read_bytes()
    weights = {}
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=e["offset"]).reshape(e["shape"])
        weights[e["name"]] = Tensor(arr.astype(cfg.np_dtype), requires_grad=True, name=e["name"])
    return cfg, weights, manifest.get("extra", {})


# --------------------------------------------------------------------- accounting

@dataclass
class FlopReport:
    per_block: list[dict[str, int]]
    qformer_macs: int
    lm_head_macs: int
    backbone_params: int
    added_params: int
    qformer_params: int
    totals: dict[str, int] = field(default_factory=dict)

    @property
    def total_macs(self) -> int:
        return sum(self.totals.values())

    @property
    def added_ratio(self) -> float:
        return self.added_params / self.backbone_params


def _block_macs(mask: MaskSpec, d: int) -> int:
    """QK^T plus PV multiply-accumulates over every computed (query, key) block."""
    return sum(len(b.q) * len(b.k) * 2 * d for b in mask.blocks if len(b.k))


def count_flops_and_params(cfg: FusionConfig, seq: MultimodalSequence | WindowLayout) -> FlopReport:
    """Multiply-accumulate counts per block, walking the same shapes the forward uses.

    Given a sequence, Q-Former compression is applied to the shapes first; a bare
    layout is taken as already compressed (no Q-Former cost is counted then).
    """
    d, f, V = cfg.d_model, cfg.d_ffn, cfg.vocab_size
    raw_sizes: list[int] = []
    if isinstance(seq, MultimodalSequence):
        events = []
        for ev in seq.events:
            if isinstance(ev, ImageBlock):
                raw_sizes.append(ev.n_tokens)
                n = cfg.qformer.n_queries if cfg.qformer is not None else ev.n_tokens
                events.append(ImageBlock(n))
            else:
                events.append(ev)
        layout = segment_windows(MultimodalSequence(tuple(events), seq.sample_boundaries))
    else:
        layout = seq
    T, N = layout.flat_text_len, layout.flat_image_len
    Ltok = T + N
    per_block = []
    fusion = set(cfg.fusion_layers())
    if cfg.mode == "insertion":
        ins = build_insertion_mask(layout)
    else:
        sa = build_text_mask(layout)
        if cfg.mode in ("ca", "gated-ca"):
            fm = build_ca_mask(layout)
        else:
            fm = build_casa_mask(layout, "causal" if cfg.mode == "casa-replace" else "zero")
        fusion_active = any(len(b.k) for b in fm.blocks)
    for l in range(cfg.n_layers):
        row = dict(sa_proj=0, sa_core=0, fusion_proj=0, fusion_core=0, ffn=0, image_ffn=0)
        if cfg.mode == "insertion":
            row["sa_proj"] = 4 * Ltok * d * d
            row["sa_core"] = _block_macs(ins, d)
            row["ffn"] = 2 * Ltok * d * f
        else:
            replaced = cfg.mode == "casa-replace" and l in fusion
            if not replaced:
                row["sa_proj"] = 4 * T * d * d
                row["sa_core"] = _block_macs(sa, d)
            if l in fusion and fusion_active:
                row["fusion_proj"] = (2 * T + 2 * Ltok) * d * d
                row["fusion_core"] = _block_macs(fm, d)
            row["ffn"] = 2 * T * d * f
            if cfg.image_ffn_update and N:
                row["image_ffn"] = 2 * N * d * f
        per_block.append(row)

    qf_macs = 0
    if cfg.qformer is not None and raw_sizes:
        Q = cfg.qformer.n_queries
        for n in raw_sizes:
            qf_macs += cfg.qformer.n_layers * (2 * Q * d * d + 2 * n * d * d + 2 * Q * n * d + 2 * Q * d * f)

    pc = count_params(cfg)
    totals: dict[str, int] = {}
    for row in per_block:
        for k, v in row.items():
            totals[k] = totals.get(k, 0) + v
    totals["lm_head"] = T * d * V
    totals["qformer"] = qf_macs
    return FlopReport(per_block, qf_macs, T * d * V, pc["backbone"], pc["added"], pc["qformer"], totals)
