"""Interleaved image/text streams, window segmentation and sample packing.

Token indices used throughout the package:

* stream index: position of a token in the flattened sequence (text and image).
* text index: position among text tokens only.
* image index: position among image tokens only.

Windows are half-open ``range`` objects over stream indices.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import OversizeError, ValidationError
from .tensorkit import make_rng


@dataclass(frozen=True)
class Text:
    token_id: int


@dataclass(frozen=True, eq=False)
class ImageBlock:
    n_tokens: int
    embeddings: np.ndarray | None = None

    def __post_init__(self):
        if self.embeddings is not None and self.embeddings.shape[0] != self.n_tokens:
            raise ValidationError(
                f"image block declares {self.n_tokens} tokens but embeddings have "
                f"{self.embeddings.shape[0]} rows")

    @classmethod
    def of(cls, embeddings: np.ndarray) -> "ImageBlock":
        return cls(int(embeddings.shape[0]), embeddings)

    def __eq__(self, other):
        if not isinstance(other, ImageBlock) or other.n_tokens != self.n_tokens:
            return False
        if self.embeddings is None or other.embeddings is None:
            return self.embeddings is other.embeddings
        return np.array_equal(self.embeddings, other.embeddings)

    def __hash__(self):
        return hash(("img", self.n_tokens))


Event = Text | ImageBlock


@dataclass(frozen=True)
class MultimodalSequence:
    events: tuple[Event, ...]
    sample_boundaries: tuple[int, ...] = (0,)

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(self.events))
        object.__setattr__(self, "sample_boundaries", tuple(int(b) for b in self.sample_boundaries))

    def validate(self):
        b = self.sample_boundaries
        if not self.events:
            if b not in ((), (0,)):
                raise ValidationError("empty sequence cannot carry sample boundaries")
            return
        if not b or b[0] != 0:
            raise ValidationError(f"sample_boundaries must start at 0, got {b}")
        if any(y <= x for x, y in zip(b, b[1:])) or b[-1] >= len(self.events):
            raise ValidationError(f"sample_boundaries must be strictly increasing and < {len(self.events)}: {b}")
        for k, ev in enumerate(self.events):
            if isinstance(ev, ImageBlock) and ev.n_tokens < 1:
                raise ValidationError(f"image block at event {k} has {ev.n_tokens} tokens")

    @property
    def n_text(self) -> int:
        return sum(isinstance(e, Text) for e in self.events)

    @property
    def n_image(self) -> int:
        return sum(e.n_tokens for e in self.events if isinstance(e, ImageBlock))

    def samples(self) -> list["MultimodalSequence"]:
        """Split along sample boundaries (inverse of packing)."""
        cuts = list(self.sample_boundaries) + [len(self.events)]
        return [MultimodalSequence(self.events[a:b]) for a, b in zip(cuts, cuts[1:]) if b > a]


def parse_pattern(pattern: str, d_model: int | None = None, seed: int = 0,
                  token_ids: Iterable[int] | None = None) -> MultimodalSequence:
    """Build a sequence from a compact pattern such as ``"T T I2 T | I1 T"``.

    ``T`` is a text token, ``I<n>`` an image block of n tokens and ``|`` starts a
    new packed sample. With ``d_model`` set, image embeddings and token ids are
    drawn from ``seed``.
    """
    rng = make_rng(seed)
    ids = iter(token_ids) if token_ids is not None else None
    events: list[Event] = []
    bounds = [0]
    for tok in pattern.split():
        if tok == "|":
            bounds.append(len(events))
        elif tok == "T":
            tid = next(ids) if ids is not None else int(rng.integers(0, 16))
            events.append(Text(int(tid)))
        elif tok.startswith("I"):
            n = int(tok[1:])
            emb = rng.standard_normal((n, d_model)) if d_model else None
            events.append(ImageBlock(n, emb))
        else:
            raise ValidationError(f"unknown pattern token {tok!r}")
    return MultimodalSequence(tuple(events), tuple(bounds))


@dataclass(frozen=True)
class Window:
    sample_id: int
    image_span: range
    text_span: range

    @property
    def span(self) -> range:
        start = self.image_span.start if len(self.image_span) else self.text_span.start
        return range(start, self.text_span.stop)

    @property
    def n_image(self) -> int:
        return len(self.image_span)

    @property
    def n_text(self) -> int:
        return len(self.text_span)


@dataclass(frozen=True, eq=False)
class WindowLayout:
    windows: tuple[Window, ...]
    flat_text_len: int
    flat_image_len: int
    # per stream-index arrays
    is_text: np.ndarray = field(repr=False)
    kind_index: np.ndarray = field(repr=False)   # text index or image index
    sample_of: np.ndarray = field(repr=False)
    window_of: np.ndarray = field(repr=False)
    sample_spans: tuple[range, ...] = ()

    def __eq__(self, other):
        return (isinstance(other, WindowLayout) and self.windows == other.windows
                and self.flat_text_len == other.flat_text_len
                and self.flat_image_len == other.flat_image_len
                and self.sample_spans == other.sample_spans)

    @property
    def n_tokens(self) -> int:
        return self.flat_text_len + self.flat_image_len

    @property
    def text_stream_idx(self) -> np.ndarray:
        return np.flatnonzero(self.is_text)

    @property
    def image_stream_idx(self) -> np.ndarray:
        return np.flatnonzero(~self.is_text)

    def text_range(self, span: range) -> range:
        """Text-index range of a stream range that contains only text tokens."""
        if not len(span):
            return range(0, 0)
        start = int(self.kind_index[span.start])
        return range(start, start + len(span))

    def label(self, stream_idx: int) -> str:
        return ("t" if self.is_text[stream_idx] else "i") + str(int(self.kind_index[stream_idx]))

    def sample_text_ranges(self) -> list[range]:
        out = []
        for span in self.sample_spans:
            texts = np.flatnonzero(self.is_text[span.start:span.stop])
            if len(texts):
                first = int(self.kind_index[span.start + texts[0]])
                out.append(range(first, first + len(texts)))
            else:
                out.append(range(0, 0))
        return out


def segment_windows(seq: MultimodalSequence) -> WindowLayout:
    """Cut a sequence into image-delimited windows.

    A window starts at an image (consecutive image blocks merge) and runs until
    the next image that follows text, or the sample end. Text that opens a
    sample before any image forms an imageless preamble window.
    """
    seq.validate()
    bounds = set(seq.sample_boundaries)
    windows: list[Window] = []
    is_text: list[bool] = []
    kind_index: list[int] = []
    sample_of: list[int] = []
    window_of: list[int] = []
    sample_spans: list[range] = []

    pos = n_txt = n_img = 0
    sample = -1
    img_start = img_stop = txt_start = None

    def close():
        if img_start is None and txt_start is None:
            return
        text_span = range(txt_start, pos) if txt_start is not None else range(pos, pos)
        image_span = (range(img_start, img_stop) if img_start is not None
                      else range(text_span.start, text_span.start))
        windows.append(Window(sample, image_span, text_span))

    sample_start = 0
    for k, ev in enumerate(seq.events):
        if k in bounds:
            close()
            if sample >= 0:
                sample_spans.append(range(sample_start, pos))
            sample += 1
            sample_start = pos
            img_start = img_stop = txt_start = None
        if isinstance(ev, ImageBlock):
            if img_start is None or txt_start is not None:
                close()
                img_start, txt_start = pos, None
            img_stop = pos + ev.n_tokens
            for j in range(ev.n_tokens):
                is_text.append(False)
                kind_index.append(n_img + j)
            n_img += ev.n_tokens
            count = ev.n_tokens
        else:
            if txt_start is None:
                txt_start = pos
            is_text.append(True)
            kind_index.append(n_txt)
            n_txt += 1
            count = 1
        sample_of.extend([sample] * count)
        # the open window is always the next one appended
        window_of.extend([len(windows)] * count)
        pos += count
    close()
    if sample >= 0:
        sample_spans.append(range(sample_start, pos))

    return WindowLayout(
        windows=tuple(windows),
        flat_text_len=n_txt,
        flat_image_len=n_img,
        is_text=np.asarray(is_text, dtype=bool),
        kind_index=np.asarray(kind_index, dtype=np.int64),
        sample_of=np.asarray(sample_of, dtype=np.int64),
        window_of=np.asarray(window_of, dtype=np.int64),
        sample_spans=tuple(sample_spans),
    )


def layout_to_sequence(layout: WindowLayout, token_ids: Sequence[int] | None = None) -> MultimodalSequence:
    """Re-serialize a layout: one merged image block per window, then its text."""
    events: list[Event] = []
    bounds: list[int] = []
    last_sample = -1
    t = 0
    for w in layout.windows:
        if w.sample_id != last_sample:
            bounds.append(len(events))
            last_sample = w.sample_id
        if w.n_image:
            events.append(ImageBlock(w.n_image))
        for _ in w.text_span:
            events.append(Text(token_ids[t] if token_ids is not None else 0))
            t += 1
    return MultimodalSequence(tuple(events), tuple(bounds) or (0,))


def flatten_text(seq: MultimodalSequence, layout: WindowLayout | None = None
                 ) -> tuple[list[int], list[int], list[int]]:
    """Text token ids with the window id and sample id of each text token."""
    layout = layout if layout is not None else segment_windows(seq)
    ids = [e.token_id for e in seq.events if isinstance(e, Text)]
    txt = layout.text_stream_idx
    return ids, layout.window_of[txt].tolist(), layout.sample_of[txt].tolist()


def pack_samples(samples: Sequence[MultimodalSequence], max_text: int, max_image: int
                 ) -> tuple[MultimodalSequence, list[MultimodalSequence]]:
    """Greedy first-fit packing of whole samples under text/image token budgets.

    Samples are visited in order; each one that still fits is appended, the
    rest are returned (in order) for the next pack.
    """
    events: list[Event] = []
    bounds: list[int] = []
    used_t = used_i = 0
    leftover: list[MultimodalSequence] = []
    for k, s in enumerate(samples):
        nt, ni = s.n_text, s.n_image
        if nt > max_text or ni > max_image:
            raise OversizeError(
                f"sample {k} needs {nt} text / {ni} image tokens, budget is {max_text} / {max_image}")
        if not s.events:
            continue
        if used_t + nt <= max_text and used_i + ni <= max_image:
            bounds.append(len(events))
            events.extend(s.events)
            used_t += nt
            used_i += ni
        else:
            leftover.append(s)
    return MultimodalSequence(tuple(events), tuple(bounds) or (0,)), leftover


def pack_all(samples: Sequence[MultimodalSequence], max_text: int, max_image: int
             ) -> list[MultimodalSequence]:
    packs = []
    rest = list(samples)
    while rest:
        packed, rest = pack_samples(rest, max_text, max_image)
        packs.append(packed)
    return packs


def image_embeddings_from_seed(seed: int, sizes: Sequence[int], d_model: int, dtype=np.float64) -> list[np.ndarray]:
    rng = make_rng(seed)
    return [rng.standard_normal((n, d_model)).astype(dtype) for n in sizes]


def sample_to_json(seq: MultimodalSequence, seed: int) -> str:
    events = [{"t": e.token_id} if isinstance(e, Text) else {"img": e.n_tokens} for e in seq.events]
    return json.dumps({"events": events, "seed": int(seed)})


def sample_from_json(line: str, d_model: int | None = None, dtype=np.float64) -> MultimodalSequence:
    obj = json.loads(line)
    raw = obj["events"]
    sizes = [e["img"] for e in raw if "img" in e]
    embs = iter(image_embeddings_from_seed(obj.get("seed", 0), sizes, d_model, dtype)) if d_model else None
    events: list[Event] = []
    for e in raw:
        if "t" in e:
            events.append(Text(int(e["t"])))
        elif "img" in e:
            events.append(ImageBlock(int(e["img"]), next(embs) if embs else None))
        else:
            raise ValidationError(f"unknown event {e}")
    return MultimodalSequence(tuple(events))


def dump_jsonl(samples: Sequence[MultimodalSequence], path: str | Path, seeds: Sequence[int] | None = None):
    seeds = seeds if seeds is not None else range(len(samples))
    with open(path, "w") as fh:
        for s, seed in zip(samples, seeds):
            fh.write(sample_to_json(s, seed) + "\n")


def load_jsonl(path: str | Path, d_model: int | None = None, dtype=np.float64) -> list[MultimodalSequence]:
    with open(path) as fh:
        return [sample_from_json(line, d_model, dtype) for line in fh if line.strip()]
