"""Analysis instruments: fusion-mask ablations, attention statistics and gradient checks."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensorkit as tk
from .attention import MaskSpec, recorded_probs
from .errors import ContractError, ValidationError
from .model import CASA_MODES, FusionModel
from .sequence import ImageBlock, MultimodalSequence, Text, WindowLayout

RULES = ("MaskSelf", "MaskRandomText", "MaskRandomAny")


# --------------------------------------------------------------------- ablations

class AblationEditor:
    """Removes one key per active query per fusion layer; edits are cached per layer.

    Random draws are independent per query and per layer, from one seeded stream
    consumed in layer order.
    """

    def __init__(self, rule: str, layout: WindowLayout, seed: int = 0):
        if rule not in RULES:
            raise ContractError(f"unknown ablation rule {rule!r}; expected one of {RULES}")
        self.rule, self.layout = rule, layout
        self.rng = tk.make_rng(seed)
        self.edited: dict[int, MaskSpec] = {}
        self.unsatisfiable: dict[int, int] = {}
        self.n_edits: dict[int, int] = {}

    def __call__(self, layer: int, mask: MaskSpec) -> MaskSpec:
        if layer not in self.edited:
            self.edited[layer] = self._edit(layer, mask)
        return self.edited[layer]

    def _edit(self, layer: int, mask: MaskSpec) -> MaskSpec:
        L = self.layout
        text_stream = L.text_stream_idx
        removed, bad = [], 0
        for b in mask.blocks:
            if not len(b.k):
                continue
            for a, r in enumerate(b.q):
                hi = b.k.start + (b.prefix + a + 1 if b.causal else len(b.k))
                visible = np.arange(b.k.start, hi)
                self_key = int(text_stream[r])
                past = visible[visible != self_key]
                if self.rule == "MaskSelf":
                    cands = np.array([self_key]) if self_key in visible and len(visible) > 1 else past[:0]
                elif self.rule == "MaskRandomText":
                    cands = past[L.is_text[past]]
                else:
                    cands = past
                if not len(cands):
                    bad += 1
                    continue
                pick = cands[0] if len(cands) == 1 else cands[self.rng.integers(len(cands))]
                removed.append((r, int(pick)))
        self.unsatisfiable[layer] = bad
        self.n_edits[layer] = len(removed)
        return mask.with_removed(removed)


@dataclass
class AblationResult:
    logits: np.ndarray
    rule: str
    seed: int
    n_edits: dict[int, int]
    unsatisfiable: dict[int, int]
    masks: dict[int, MaskSpec] = field(repr=False, default_factory=dict)


def ablate_mask(model: FusionModel, seq: MultimodalSequence, rule: str, seed: int = 0,
                dense: bool = False) -> AblationResult:
    """Forward with each fusion query's attention to one key removed by ``rule``."""
    if model.cfg.mode not in CASA_MODES:
        raise ContractError(f"ablate_mask needs a CASA-mode model, got {model.cfg.mode!r}")
    prep = model.prepare(seq)
    editor = AblationEditor(rule, prep.layout, seed)
    with tk.no_grad():
        logits = model.forward_prepared(prep, dense=dense, mask_editor=editor).data
    return AblationResult(logits, rule, seed, editor.n_edits, editor.unsatisfiable, editor.edited)


# --------------------------------------------------------------------- attention statistics

@dataclass
class AttentionStats:
    groups: dict[str, float]           # mean mass per group
    group_sizes: dict[str, float]      # mean key count per group
    per_image_token: float             # mean mass on a single image key
    n_queries: int
    max_partition_error: float

    def to_dict(self) -> dict:
        return asdict(self)


def attention_stats(model: FusionModel, seq: MultimodalSequence, delimiter_ids=(),
                    image_group: int = 16) -> AttentionStats:
    """Mean post-softmax mass per key group in fusion layers.

    Groups: ``self``, ``vision_delimiters`` (text keys whose id is in
    ``delimiter_ids``; omitted when none are given), ``image_g<k>`` (image keys
    ``k*image_group`` .. within their window) and ``other_text``. Averages run
    over heads, layers and active queries.
    """
    if model.cfg.mode not in CASA_MODES:
        raise ContractError(f"attention_stats needs a CASA-mode model, got {model.cfg.mode!r}")
    prep = model.prepare(seq)
    L = prep.layout
    record: dict = {}
    with tk.no_grad():
        model.forward_prepared(prep, record=record)
    ids_stream = np.full(L.n_tokens, -1)
    ids_stream[L.text_stream_idx] = prep.token_ids
    delim = np.isin(ids_stream, np.asarray(list(delimiter_ids), dtype=np.int64)) & L.is_text
    # image offset within its window
    img_off = np.zeros(L.n_tokens, dtype=np.int64)
    for w in L.windows:
        for j, s in enumerate(w.image_span):
            img_off[s] = j
    sums: dict[str, float] = {}
    sizes: dict[str, float] = {}
    per_img, n_q, worst = 0.0, 0, 0.0
    H = model.cfg.n_heads
    for layer, rec in sorted(record.items()):
        P = recorded_probs(rec, L.flat_text_len, L.n_tokens, H).mean(axis=0)
        for r in range(L.flat_text_len):
            row = P[r]
            tot = row.sum()
            if tot == 0:
                continue
            worst = max(worst, abs(tot - 1.0))
            keys = np.flatnonzero(row > 0)
            self_k = int(L.text_stream_idx[r])
            label = {}
            for k in keys:
                if k == self_k:
                    g = "self"
                elif not L.is_text[k]:
                    g = f"image_g{img_off[k] // image_group}"
                elif delim[k]:
                    g = "vision_delimiters"
                else:
                    g = "other_text"
                label.setdefault(g, []).append(k)
            for g, ks in label.items():
                sums[g] = sums.get(g, 0.0) + float(row[ks].sum())
                sizes[g] = sizes.get(g, 0.0) + len(ks)
            img_keys = keys[~L.is_text[keys]]
            if len(img_keys):
                per_img += float(row[img_keys].mean())
            n_q += 1
    if n_q == 0:
        return AttentionStats({}, {}, 0.0, 0, 0.0)
    groups = {g: v / n_q for g, v in sorted(sums.items())}
    return AttentionStats(groups, {g: v / n_q for g, v in sorted(sizes.items())}, per_img / n_q, n_q, worst)


# --------------------------------------------------------------------- gradient checks

@dataclass
class TensorCheck:
    name: str
    n_checked: int
    max_rel_err: float
    max_abs_err: float
    ok: bool


@dataclass
class GradReport:
    tolerance: float
    tensors: list[TensorCheck]

    @property
    def ok(self) -> bool:
        return all(t.ok for t in self.tensors)

    def failures(self) -> list[TensorCheck]:
        return [t for t in self.tensors if not t.ok]

    def to_json(self) -> str:
        return json.dumps({"tolerance": self.tolerance, "ok": self.ok,
                           "tensors": [asdict(t) for t in self.tensors]}, indent=1)


REL_FLOOR = 1e-6


def probe_loss(model: FusionModel, seq: MultimodalSequence, seed: int = 0):
    """A fixed random linear functional of the logits (every logit gets a weight)."""
    def fn():
        logits = model.forward(seq)
        r = tk.make_rng(seed + 7919).standard_normal(logits.shape) / np.sqrt(logits.data.size)
        return tk.tsum(logits * tk.Tensor(r))
    return fn


def param_grads(model: FusionModel, loss_fn) -> dict[str, np.ndarray]:
    """Backward once; tensors the loss never reached get exact zeros."""
    for t in model.weights.values():
        t.grad = None
    tk.backward(loss_fn())
    return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in model.weights.items()}


def grad_check(model: FusionModel, seq: MultimodalSequence, tolerance: float = 1e-4, n_coords: int = 32,
               seed: int = 0, loss_fn=None, names=None) -> GradReport:
    """Central finite differences against backward on sampled coordinates of every tensor."""
    if model.cfg.np_dtype != np.float64:
        raise ContractError("grad_check needs a float64 model")
    loss_fn = loss_fn or probe_loss(model, seq, seed)
    grads = param_grads(model, loss_fn)
    rng = tk.make_rng(seed)
    checks = []
    for name in sorted(names or model.weights):
        t = model.weights[name]
        flat = t.data.reshape(-1)
        g = grads[name].reshape(-1)
        if not np.all(np.isfinite(g)):
            raise ValidationError(f"grad_check: backward gradient of {name} is not finite")
        n = flat.size
        idx = np.arange(n) if n <= n_coords else rng.choice(n, n_coords, replace=False)
        worst_rel = worst_abs = 0.0
        with tk.no_grad():
            for i in idx:
                orig = flat[i]
                h = 1e-5 * max(1.0, abs(orig))
                flat[i] = orig + h
                lp = float(loss_fn().data)
                flat[i] = orig - h
                lm = float(loss_fn().data)
                flat[i] = orig
                fd = (lp - lm) / (2 * h)
                if not np.isfinite(fd):
                    raise ValidationError(f"grad_check: finite difference of {name}[{i}] is not finite")
                err = abs(fd - g[i])
                worst_abs = max(worst_abs, err)
                worst_rel = max(worst_rel, err / max(abs(fd), abs(g[i]), REL_FLOOR))
        checks.append(TensorCheck(name, int(len(idx)), float(worst_rel), float(worst_abs),
                                  bool(worst_rel <= tolerance)))
    return GradReport(tolerance, checks)


def randomize_weights(model: FusionModel, seed: int = 0, scale: float = 0.1):
    """Perturb every parameter (norms, biases and gates included) so no gradient is trivially zero."""
    rng = tk.make_rng(seed)
    for name in sorted(model.weights):
        t = model.weights[name]
        t.data = t.data + scale * rng.standard_normal(t.data.shape).astype(t.data.dtype)
