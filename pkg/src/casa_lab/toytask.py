"""Synthetic patch-color retrieval and answer-recall episodes, plus a small trainer.

An image is a g x g grid of colored patches; each patch token is a fixed code for
its (position, color). A ``color_at`` question names a position and the answer
is that patch's color, so it can only be solved by reading the image. A
``recall`` question, placed at the end of a sample, asks again for the answer
given in the first window; by default it follows a fresh, unrelated image, so
the fusion layers must learn to ignore that image.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensorkit as tk
from .errors import ConfigError
from .model import FusionConfig, FusionModel, save_checkpoint
from .sequence import ImageBlock, MultimodalSequence, Text


@dataclass(frozen=True)
class Vocab:
    grid: int = 4
    n_colors: int = 8

    BOS = 0
    Q_COLOR = 1
    Q_RECALL = 2
    VEND = 3

    @property
    def n_pos(self) -> int:
        return self.grid * self.grid

    def pos(self, p: int) -> int:
        return 4 + p

    def color(self, c: int) -> int:
        return 4 + self.n_pos + c

    @property
    def size(self) -> int:
        return 4 + self.n_pos + self.n_colors

    def color_of(self, token: int) -> int:
        return token - 4 - self.n_pos


@dataclass
class DataConfig:
    grid: int = 4
    n_colors: int = 8
    n_windows: int = 2
    recall: bool = True
    recall_window: bool = True  # recall opens a fresh window after an unrelated image
    delimiter: bool = False
    n_train: int = 4096
    n_eval: int = 256
    code_scale: float = 1.0
    code_seed: int = 0  # patch codes are shared by every split


@dataclass
class PatchCodes:
    """Fixed patch embeddings for every (position, color) pair."""

    table: np.ndarray  # (n_pos, n_colors, d)
    factorized: bool

    @classmethod
    def build(cls, grid: int, n_colors: int, d_model: int, seed: int, scale: float = 1.0) -> "PatchCodes":
        n_pos = grid * grid
        rng = tk.make_rng(seed + 104729)
        if n_pos * n_colors <= d_model:
            q = _orthonormal_rows(rng, n_pos * n_colors, d_model)
            table = q.reshape(n_pos, n_colors, d_model)
            factorized = False
        elif n_pos + n_colors <= d_model:
            q = _orthonormal_rows(rng, n_pos + n_colors, d_model)
            table = (q[:n_pos, None, :] + q[None, n_pos:, :]) / np.sqrt(2.0)
            factorized = True
        else:
            raise ConfigError(f"d_model {d_model} too small for {n_pos} positions + {n_colors} colors")
        return cls(table * scale * np.sqrt(d_model), factorized)

    def image(self, colors: np.ndarray) -> np.ndarray:
        return self.table[np.arange(len(colors)), colors]


def _orthonormal_rows(rng, n: int, d: int) -> np.ndarray:
    q, _ = np.linalg.qr(rng.standard_normal((d, n)))
    return q.T


@dataclass
class Example:
    seq: MultimodalSequence
    answer_pos: np.ndarray       # text index whose next token is the answer
    answer_ids: np.ndarray
    qtypes: tuple[str, ...]
    hidden: dict = field(default_factory=dict, repr=False)


def generate_dataset(cfg: DataConfig, n_samples: int, d_model: int, seed: int,
                     dtype=np.float32) -> list[Example]:
    """Deterministic episodes; queried (position, color) pairs cycle through
    shuffled rounds of all pairs, so both marginals are balanced."""
    V = Vocab(cfg.grid, cfg.n_colors)
    codes = PatchCodes.build(cfg.grid, cfg.n_colors, d_model, cfg.code_seed, cfg.code_scale)
    rng = tk.make_rng(seed)
    n_pairs = V.n_pos * cfg.n_colors
    queue: list[int] = []
    out = []
    for _ in range(n_samples):
        events: list = [Text(V.BOS)]
        ans_pos, ans_ids, qtypes = [], [], []
        answers, images = [], []
        n_text = 1
        for _w in range(cfg.n_windows):
            if not queue:
                queue = list(rng.permutation(n_pairs))
            p, c = divmod(int(queue.pop()), cfg.n_colors)
            colors = rng.integers(0, cfg.n_colors, V.n_pos)
            colors[p] = c
            images.append(colors)
            events.append(ImageBlock.of(codes.image(colors).astype(dtype)))
            toks = [V.VEND] if cfg.delimiter else []
            toks += [V.Q_COLOR, V.pos(p), V.color(c)]
            ans_pos.append(n_text + len(toks) - 2)
            ans_ids.append(V.color(c))
            qtypes.append("color")
            answers.append(c)
            events.extend(Text(t) for t in toks)
            n_text += len(toks)
        if cfg.recall and (cfg.n_windows >= 2 or cfg.recall_window):
            if cfg.recall_window:
                colors = rng.integers(0, cfg.n_colors, V.n_pos)
                images.append(colors)
                events.append(ImageBlock.of(codes.image(colors).astype(dtype)))
            events.extend([Text(V.Q_RECALL), Text(V.color(answers[0]))])
            ans_pos.append(n_text)
            ans_ids.append(V.color(answers[0]))
            qtypes.append("recall")
        out.append(Example(MultimodalSequence(tuple(events)), np.array(ans_pos), np.array(ans_ids),
                           tuple(qtypes), {"images": images, "answers": answers}))
    return out


def blind(examples: list[Example]) -> list[Example]:
    """Copy with every image embedding zeroed."""
    out = []
    for ex in examples:
        ev = tuple(ImageBlock.of(np.zeros_like(e.embeddings)) if isinstance(e, ImageBlock) else e
                   for e in ex.seq.events)
        out.append(Example(MultimodalSequence(ev), ex.answer_pos, ex.answer_ids, ex.qtypes, ex.hidden))
    return out


def oracle_predictions(ex: Example, cfg: DataConfig) -> np.ndarray:
    """Answers read from the generator's hidden state."""
    V = Vocab(cfg.grid, cfg.n_colors)
    preds = []
    text = [e.token_id for e in ex.seq.events if isinstance(e, Text)]
    for pos, qt in zip(ex.answer_pos, ex.qtypes):
        if qt == "color":
            w = sum(1 for q, p in zip(ex.qtypes, ex.answer_pos) if q == "color" and p < pos)
            preds.append(V.color(int(ex.hidden["images"][w][text[pos] - 4])))
        else:
            preds.append(V.color(ex.hidden["answers"][0]))
    return np.array(preds)


# --------------------------------------------------------------------- batching

def pack_examples(examples: list[Example]) -> tuple[MultimodalSequence, np.ndarray, np.ndarray, list[str]]:
    """Concatenate examples as packed samples; returns the sequence and answer targets."""
    events, bounds, pos, ids, qts = [], [], [], [], []
    t_off = 0
    for ex in examples:
        bounds.append(len(events))
        events.extend(ex.seq.events)
        pos.extend(ex.answer_pos + t_off)
        ids.extend(ex.answer_ids)
        qts.extend(ex.qtypes)
        t_off += ex.seq.n_text
    return MultimodalSequence(tuple(events), tuple(bounds)), np.array(pos), np.array(ids), qts


def answer_loss(model: FusionModel, examples: list[Example]):
    seq, pos, ids, _ = pack_examples(examples)
    logits = model.forward(seq)
    return tk.cross_entropy(tk.take(logits, pos), ids)


# --------------------------------------------------------------------- training

@dataclass
class TrainConfig:
    steps: int = 3000
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    warmup: int = 100
    batch_samples: int = 16
    eval_every: int = 100
    seed: int = 0
    blinded: bool = False


class Adam:
    def __init__(self, params: dict[str, tk.Tensor], cfg: TrainConfig):
        self.params, self.cfg = params, cfg
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def lr_at(self, step: int) -> float:
        c = self.cfg
        return c.lr * min(1.0, (step + 1) / c.warmup) if c.warmup > 0 else c.lr

    def step(self, grads: dict[str, np.ndarray]):
        c = self.cfg
        self.t += 1
        lr = self.lr_at(self.t - 1)
        b1c = 1 - c.beta1 ** self.t
        b2c = 1 - c.beta2 ** self.t
        for k, p in self.params.items():
            g = grads.get(k)
            if g is None:
                continue
            self.m[k] = c.beta1 * self.m[k] + (1 - c.beta1) * g
            self.v[k] = c.beta2 * self.v[k] + (1 - c.beta2) * g * g
            upd = lr * (self.m[k] / b1c) / (np.sqrt(self.v[k] / b2c) + c.eps)
            p.data = (p.data - upd).astype(p.data.dtype)


@dataclass
class TrainResult:
    metrics: list[dict]
    status: str
    final_step: int
    checkpoint: Path | None


METRIC_COLUMNS = ("step", "loss", "acc_color", "acc_recall")


def evaluate(model: FusionModel, examples: list[Example], batch: int = 32) -> dict[str, float]:
    """Greedy accuracy at answer positions, per question type."""
    hits: dict[str, list[int]] = {}
    for i in range(0, len(examples), batch):
        seq, pos, ids, qts = pack_examples(examples[i:i + batch])
        with tk.no_grad():
            logits = model.forward(seq).data
        pred = logits[pos].argmax(axis=1)
        for q, ok in zip(qts, pred == ids):
            hits.setdefault(q, []).append(int(ok))
    return {q: float(np.mean(v)) for q, v in hits.items()}


def train(model: FusionModel, train_set: list[Example], cfg: TrainConfig, eval_set: list[Example] | None = None,
          out_dir: str | Path | None = None, log=None) -> TrainResult:
    """Adam on answer-token cross-entropy over packed mini-batches."""
    if cfg.steps < 0 or cfg.batch_samples < 1:
        raise ConfigError("steps must be >= 0 and batch_samples >= 1")
    if cfg.blinded:
        train_set = blind(train_set)
        eval_set = blind(eval_set) if eval_set is not None else None
    rng = tk.make_rng(cfg.seed + 1)
    opt = Adam(model.weights, cfg)
    order = rng.permutation(len(train_set))
    cursor = 0
    metrics: list[dict] = []
    last_good = {k: t.data.copy() for k, t in model.weights.items()}
    status = "ok"
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    step = 0
    for step in range(1, cfg.steps + 1):
        if cursor + cfg.batch_samples > len(order):
            order, cursor = rng.permutation(len(train_set)), 0
        batch = [train_set[i] for i in order[cursor:cursor + cfg.batch_samples]]
        cursor += cfg.batch_samples
        for t in model.weights.values():
            t.grad = None
        loss = answer_loss(model, batch)
        lv = float(loss.data)
        if not math.isfinite(lv):
            for k, t in model.weights.items():
                t.data = last_good[k]
            status = "diverged"
            step -= 1
            break
        tk.backward(loss)
        opt.step({k: t.grad for k, t in model.weights.items() if t.grad is not None})
        if step % cfg.eval_every == 0 or step == cfg.steps:
            last_good = {k: t.data.copy() for k, t in model.weights.items()}
            acc = evaluate(model, eval_set) if eval_set else {}
            row = {"step": step, "loss": lv, "acc_color": acc.get("color", float("nan")),
                   "acc_recall": acc.get("recall", float("nan"))}
            metrics.append(row)
            if log is not None:
                log(row)
    ckpt = None
    if out is not None:
        with open(out / "metrics.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
            w.writeheader()
            w.writerows(metrics)
        ckpt = out / "model"
        save_checkpoint(ckpt, model.cfg, model.weights, {"status": status, "step": step,
                                                        "train": asdict(cfg)})
    return TrainResult(metrics, status, step, ckpt)


def reference_model_config(mode: str = "casa-parallel", data: DataConfig | None = None, **kw) -> FusionConfig:
    data = data or DataConfig()
    base = dict(d_model=64, n_heads=4, n_layers=4, vocab_size=Vocab(data.grid, data.n_colors).size,
                mode=mode, dtype="float32")
    base.update(kw)
    return FusionConfig(**base)
