"""Deterministic synthetic corpora: text pretraining, language-heavy scenes, glyph copying.

Every generator is a pure function of ``(seed, n, split, params)``. Train and
eval splits partition the content space by hash, so the same sample can
never appear in both.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from math import comb
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .autodiff import IGNORE_INDEX
from .font import CELL, GLYPH_CHARS, SHAPE_NAMES, SIZE, bitmap

# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"
SPECIALS = (PAD, BOS, EOS, "Q:", "A:", "?", ".", ",")
WORDS = ("how", "many", "shapes", "word", "after", "before", "opposite", "kind", "where",
         "is", "read", "color", "shape", "yes", "no", "more", "than", "the", "and", "of",
         "less", "same", "first", "last", "count", "next", "letter", "number", "image",
         "what", "there", "it")
RELATIONS = ("left-of", "right-of", "above", "below")
INVERSE = {"left-of": "right-of", "right-of": "left-of", "above": "below", "below": "above"}
COLORS = ("red", "green", "blue")
COLOR_INTENSITY = {"red": 1.0, "green": 0.7, "blue": 0.4}
SHAPES = SHAPE_NAMES
NUMBER_WORDS = ("zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine")
GLYPH_TOKENS = tuple(f"#{c}" for c in GLYPH_CHARS)
DIGITS = tuple(f"#{d}" for d in "0123456789")

LANGUAGE_HEAVY = "language_heavy"
OCR_HEAVY = "ocr_heavy"
CATEGORIES = (LANGUAGE_HEAVY, OCR_HEAVY)


class Vocabulary:
    """Bijective symbol <-> id map."""

    def __init__(self, symbols: Sequence[str]):
        if len(set(symbols)) != len(symbols):
            raise ValueError("duplicate symbols in vocabulary")
        self.symbols = tuple(symbols)
        self.ids = {s: i for i, s in enumerate(self.symbols)}

    def __len__(self) -> int:
        return len(self.symbols)

    def encode(self, symbols: Iterable[str]) -> list[int]:
        return [self.ids[s] for s in symbols]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.symbols[int(i)] for i in ids]

    @property
    def pad(self) -> int:
        return self.ids[PAD]

    @property
    def bos(self) -> int:
        return self.ids[BOS]

    @property
    def eos(self) -> int:
        return self.ids[EOS]


VOCAB = Vocabulary(SPECIALS + WORDS + RELATIONS + COLORS + SHAPES + NUMBER_WORDS + GLYPH_TOKENS)

# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------

IMAGE_SIZE = 24
GRID = IMAGE_SIZE // CELL


@dataclass(frozen=True)
class SceneObject:
    kind: str  # "shape" or "glyph"
    name: str
    row: int  # top-left pixel
    col: int
    intensity: float = 1.0


def cell_origin(cell: int) -> tuple[int, int]:
    r, c = divmod(cell, GRID)
    return r * CELL, c * CELL


def render_image(scene: Sequence[SceneObject], size: int = IMAGE_SIZE) -> np.ndarray:
    """Rasterize ``scene``; later objects overwrite earlier ones where they draw."""
    img = np.zeros((size, size), dtype=np.float64)
    for obj in scene:
        if obj.row < 0 or obj.col < 0 or obj.row + SIZE > size or obj.col + SIZE > size:
            raise ValueError(f"object {obj.name!r} at ({obj.row}, {obj.col}) is out of bounds")
        bm = bitmap(obj.kind, obj.name)
        region = img[obj.row:obj.row + SIZE, obj.col:obj.col + SIZE]
        np.copyto(region, bm * obj.intensity, where=bm > 0)
    return img


# ---------------------------------------------------------------------------
# samples
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SourceTag:
    name: str
    category: str

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}")


TEXT = SourceTag("text", LANGUAGE_HEAVY)
LANG_MM = SourceTag("lang_mm", LANGUAGE_HEAVY)
OCR = SourceTag("ocr", OCR_HEAVY)
SOURCES = {t.name: t for t in (TEXT, LANG_MM, OCR)}
_SOURCE_IDS = {"text": 1, "lang_mm": 2, "ocr": 3}


@dataclass
class Sample:
    tokens: np.ndarray
    labels: np.ndarray
    source: SourceTag
    image: np.ndarray | None = None
    answer_start: int = 0
    attention: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.attention is None:
            self.attention = np.ones(len(self.tokens), dtype=np.int64)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def answer(self) -> np.ndarray:
        """Reference answer ids, EOS excluded."""
        return self.tokens[self.answer_start:-1]

    @property
    def target(self) -> tuple[int, ...]:
        """The supervised continuation: answer ids followed by EOS."""
        return tuple(int(t) for t in self.tokens[self.answer_start:])

    def content_key(self) -> bytes:
        h = hashlib.sha1(self.tokens.astype("<i4").tobytes())
        if self.image is not None:
            h.update(np.round(self.image * 255).astype(np.uint8).tobytes())
        return h.digest()


def make_sample(prompt: Sequence[str], answer: Sequence[str], source: SourceTag,
                image: np.ndarray | None = None) -> Sample:
    """``<bos> prompt A: answer <eos>``, supervising only the answer span (EOS included)."""
    symbols = [BOS, *prompt, "A:", *answer, EOS]
    tokens = np.asarray(VOCAB.encode(symbols), dtype=np.int64)
    start = len(symbols) - len(answer) - 1
    labels = np.full(len(tokens), IGNORE_INDEX, dtype=np.int64)
    labels[start - 1:-1] = tokens[start:]
    return Sample(tokens, labels, source, image, start)


def _is_eval_bucket(sample: Sample) -> bool:
    return sample.content_key()[0] % 10 == 0


def _split_rng(seed: int, source: str, split: str) -> np.random.Generator:
    if split not in ("train", "eval"):
        raise ValueError(f"unknown split {split!r}")
    return np.random.default_rng(np.random.SeedSequence([seed, _SOURCE_IDS[source], split == "eval"]))


def _generate(draw, n: int, seed: int, source: str, split: str) -> list[Sample]:
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = _split_rng(seed, source, split)
    want_eval = split == "eval"
    out = []
    while len(out) < n:
        s = draw(rng)
        if _is_eval_bucket(s) == want_eval:
            out.append(s)
    return out


# ---------------------------------------------------------------------------
# text corpus
# ---------------------------------------------------------------------------

TEXT_TASKS = {
    "word": 0.15,
    "after": 0.125,
    "before": 0.125,
    "opposite": 0.1,
    "kind": 0.1,
    "where": 0.1,
    "count": 0.2,
    "compare": 0.1,
}
COUNT_SHAPES_P = 0.25  # count questions about all shapes rather than one color
FILLER_LENGTHS = (0, 1, 2)


def _object_list(rng, n: int) -> list[tuple[str, str]]:
    return [(COLORS[rng.integers(3)], SHAPES[rng.integers(4)]) for _ in range(n)]


def _list_symbols(objs) -> list[str]:
    out: list[str] = []
    for i, (c, s) in enumerate(objs):
        if i:
            out.append(",")
        out += [c, s]
    return out + ["."] if objs else []


def _draw_text(rng) -> Sample:
    names = list(TEXT_TASKS)
    task = names[rng.choice(len(names), p=list(TEXT_TASKS.values()))]
    if task == "count":
        objs = _object_list(rng, int(rng.integers(1, 5)))
        if rng.random() < COUNT_SHAPES_P:
            q, ans = ["how", "many", "shapes", "?"], len(objs)
        else:
            color = COLORS[rng.integers(3)]
            q, ans = ["how", "many", color, "?"], sum(c == color for c, _ in objs)
        return make_sample(_list_symbols(objs) + ["Q:", *q], [NUMBER_WORDS[ans]], TEXT)
    context = _list_symbols(_object_list(rng, int(rng.choice(FILLER_LENGTHS))))
    if task == "word":
        d = int(rng.integers(10))
        q, a = ["word", DIGITS[d]], NUMBER_WORDS[d]
    elif task == "after":
        d = int(rng.integers(9))
        q, a = ["after", NUMBER_WORDS[d]], NUMBER_WORDS[d + 1]
    elif task == "before":
        d = int(rng.integers(1, 10))
        q, a = ["before", NUMBER_WORDS[d]], NUMBER_WORDS[d - 1]
    elif task == "opposite":
        r = RELATIONS[rng.integers(4)]
        q, a = ["opposite", r], INVERSE[r]
    elif task == "kind":
        pool = COLORS + SHAPES
        w = pool[rng.integers(len(pool))]
        q, a = ["kind", w], ("color" if w in COLORS else "shape")
    elif task == "where":
        s1, s2 = (SHAPES[i] for i in rng.choice(4, size=2, replace=False))
        r = RELATIONS[rng.integers(4)]
        context = [s1, r, s2, "."]
        q, a = ["where", s2], INVERSE[r]
    else:  # compare
        x, y = (int(v) for v in rng.choice(10, size=2, replace=False))
        q, a = ["is", NUMBER_WORDS[x], "more", "than", NUMBER_WORDS[y]], ("yes" if x > y else "no")
    return make_sample(context + ["Q:", *q, "?"], [a], TEXT)


def gen_text_corpus(seed: int, n: int, split: str = "train") -> list[Sample]:
    """Templated text QA (facts, relations, counting, comparison); no images."""
    return _generate(_draw_text, n, seed, "text", split)


def text_answer_marginal() -> dict[str, float]:
    """Exact answer distribution of the text grammar, from its probability tables."""
    dist: dict[str, float] = {}

    def put(word, p):
        dist[word] = dist.get(word, 0.0) + p

    w = TEXT_TASKS
    for d in range(10):
        put(NUMBER_WORDS[d], w["word"] / 10)
    for d in range(9):
        put(NUMBER_WORDS[d + 1], w["after"] / 9)
        put(NUMBER_WORDS[d], w["before"] / 9)
    for r in RELATIONS:
        put(INVERSE[r], (w["opposite"] + w["where"]) / 4)
    put("color", w["kind"] * len(COLORS) / 7)
    put("shape", w["kind"] * len(SHAPES) / 7)
    put("yes", w["compare"] / 2)
    put("no", w["compare"] / 2)
    for n in range(1, 5):
        pn = w["count"] / 4
        put(NUMBER_WORDS[n], pn * COUNT_SHAPES_P)
        for k in range(n + 1):
            binom = comb(n, k) * (1 / 3) ** k * (2 / 3) ** (n - k)
            put(NUMBER_WORDS[k], pn * (1 - COUNT_SHAPES_P) * binom)
    return dist


# ---------------------------------------------------------------------------
# multimodal: language-heavy scenes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ShapeItem:
    shape: str
    color: str
    cell: int


def scene_objects(items: Sequence[ShapeItem]) -> list[SceneObject]:
    return [SceneObject("shape", it.shape, *cell_origin(it.cell), COLOR_INTENSITY[it.color]) for it in items]


def relation_of(a: ShapeItem, b: ShapeItem) -> str:
    """Where ``a`` sits relative to ``b``: columns decide first, then rows."""
    ra, ca = divmod(a.cell, GRID)
    rb, cb = divmod(b.cell, GRID)
    if ca != cb:
        return "left-of" if ca < cb else "right-of"
    return "above" if ra < rb else "below"


LANG_MM_QUESTIONS = {"count_color": 0.4, "count_shapes": 0.2, "relation": 0.4}


def lang_mm_from_scene(items: Sequence[ShapeItem], question: Sequence[str]) -> Sample:
    """Build the sample for a given scene and question, computing the answer."""
    q = list(question)
    if q[:2] == ["how", "many"]:
        target = q[2]
        n = len(items) if target == "shapes" else sum(it.color == target for it in items)
        answer = NUMBER_WORDS[n]
    elif q[1] == "where":
        a = next(it for it in items if it.shape == q[0])
        b = next(it for it in items if it.shape == q[2])
        answer = relation_of(a, b)
    else:
        raise ValueError(f"unsupported question {q}")
    image = render_image(scene_objects(items))
    return make_sample(["Q:", *q, "?"], [answer], LANG_MM, image)


def _draw_lang_mm(rng) -> Sample:
    kinds = list(LANG_MM_QUESTIONS)
    kind = kinds[rng.choice(3, p=list(LANG_MM_QUESTIONS.values()))]
    n = int(rng.integers(2 if kind == "relation" else 1, 5))
    cells = rng.choice(GRID * GRID, size=n, replace=False)
    if kind == "relation":
        shapes = [SHAPES[i] for i in rng.choice(4, size=n, replace=False)]
    else:
        shapes = [SHAPES[rng.integers(4)] for _ in range(n)]
    items = [ShapeItem(s, COLORS[rng.integers(3)], int(c)) for s, c in zip(shapes, cells)]
    if kind == "count_color":
        question = ["how", "many", COLORS[rng.integers(3)]]
    elif kind == "count_shapes":
        question = ["how", "many", "shapes"]
    else:
        i, j = rng.choice(n, size=2, replace=False)
        question = [items[i].shape, "where", items[j].shape]
    return lang_mm_from_scene(items, question)


def gen_lang_mm_samples(seed: int, n: int, split: str = "train") -> list[Sample]:
    """Scenes of 1-4 shapes with counting / relation questions answered in words."""
    return _generate(_draw_lang_mm, n, seed, "lang_mm", split)


# ---------------------------------------------------------------------------
# multimodal: glyph copying
# ---------------------------------------------------------------------------

OCR_LENGTHS = (3, 4, 5, 6)


def glyph_scene(text: str) -> list[SceneObject]:
    if not 1 <= len(text) <= GRID * GRID:
        raise ValueError(f"cannot lay out {len(text)} glyphs")
    return [SceneObject("glyph", ch, *cell_origin(i)) for i, ch in enumerate(text)]


def ocr_sample(text: str) -> Sample:
    image = render_image(glyph_scene(text))
    return make_sample(["Q:", "read", "?"], [f"#{c}" for c in text], OCR, image)


def _draw_ocr(rng) -> Sample:
    n = int(rng.choice(OCR_LENGTHS))
    return ocr_sample("".join(GLYPH_CHARS[i] for i in rng.integers(len(GLYPH_CHARS), size=n)))


def gen_ocr_mm_samples(seed: int, n: int, split: str = "train") -> list[Sample]:
    """Uniformly random 3-6 glyph strings; the answer is the exact string."""
    return _generate(_draw_ocr, n, seed, "ocr", split)


def word_list() -> set[str]:
    """Vocabulary words spelled in glyph capitals (the strings a language prior would favor)."""
    return {w.upper() for w in NUMBER_WORDS + COLORS + SHAPES}


def ocr_word_rate() -> float:
    """Exact probability that a generated glyph string spells a word from ``word_list``."""
    words = word_list()
    total = 0.0
    for L in OCR_LENGTHS:
        hits = sum(len(w) == L and all(c in GLYPH_CHARS for c in w) for w in words)
        total += hits / len(GLYPH_CHARS) ** L / len(OCR_LENGTHS)
    return total


GENERATORS = {"text": gen_text_corpus, "lang_mm": gen_lang_mm_samples, "ocr": gen_ocr_mm_samples}

# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    tokens: np.ndarray  # [B, S]
    attention: np.ndarray  # [B, S], 1 = real token
    labels: np.ndarray  # [B, S]
    images: np.ndarray | None  # [B, H, W]
    has_image: np.ndarray  # [B]
    sources: list[SourceTag]

    def __len__(self) -> int:
        return self.tokens.shape[0]

    @property
    def categories(self) -> list[str]:
        return [s.category for s in self.sources]

    @property
    def counted(self) -> int:
        return int(((self.attention == 1) & (self.labels != IGNORE_INDEX)).sum())


class OversizeSampleError(ValueError):
    pass


def collate_batch(samples: Sequence[Sample], max_seq: int, image_tokens: int = 0) -> Batch:
    """Right-pad to the longest sample; padding has attention 0 and label -100.

    ``image_tokens`` is the prefix length an image adds, used only for the
    ``max_seq`` check.
    """
    if not samples:
        raise ValueError("empty batch")
    for i, s in enumerate(samples):
        total = len(s) + (image_tokens if s.image is not None else 0)
        if total > max_seq:
            raise OversizeSampleError(f"sample {i} ({s.source.name}) has length {total} > max_seq {max_seq}")
    S = max(len(s) for s in samples)
    B = len(samples)
    tokens = np.full((B, S), VOCAB.pad, dtype=np.int64)
    attention = np.zeros((B, S), dtype=np.int64)
    labels = np.full((B, S), IGNORE_INDEX, dtype=np.int64)
    has_image = np.array([s.image is not None for s in samples])
    images = None
    if has_image.any():
        shape = next(s.image.shape for s in samples if s.image is not None)
        images = np.zeros((B, *shape), dtype=np.float64)
    for b, s in enumerate(samples):
        L = len(s)
        tokens[b, :L] = s.tokens
        attention[b, :L] = s.attention
        labels[b, :L] = s.labels
        if s.image is not None:
            images[b] = s.image
    return Batch(tokens, attention, labels, images, has_image, [s.source for s in samples])


# ---------------------------------------------------------------------------
# manifest and binary record files
# ---------------------------------------------------------------------------

@dataclass
class ManifestEntry:
    name: str
    category: str
    count: int
    seed: int
    split: str = "train"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}")


def write_manifest(path, entries: Sequence[ManifestEntry]) -> None:
    """One ``key=value`` record per line; params are ``params.<key>=<value>``."""
    lines = ["# kvdistill manifest v1"]
    for e in entries:
        parts = [f"name={e.name}", f"category={e.category}", f"count={e.count}",
                 f"seed={e.seed}", f"split={e.split}"]
        parts += [f"params.{k}={v}" for k, v in sorted(e.params.items())]
        lines.append(" ".join(parts))
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> list[ManifestEntry]:
    entries = []
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        kv = dict(tok.split("=", 1) for tok in line.split())
        params = {k[7:]: v for k, v in kv.items() if k.startswith("params.")}
        entries.append(ManifestEntry(kv["name"], kv["category"], int(kv["count"]), int(kv["seed"]),
                                     kv.get("split", "train"), params))
    return entries


def materialize(entry: ManifestEntry) -> list[Sample]:
    return GENERATORS[entry.name](entry.seed, entry.count, entry.split)


_MAGIC = b"KVDS"
_VERSION = 1


def save_samples(path, samples: Sequence[Sample]) -> None:
    """Flat little-endian record file: header, then one record per sample."""
    with open(path, "wb") as f:
        f.write(_MAGIC + struct.pack("<II", _VERSION, len(samples)))
        for s in samples:
            name = s.source.name.encode()
            img = s.image
            h, w = (0, 0) if img is None else img.shape
            f.write(struct.pack("<HIIHH", len(name), len(s.tokens), s.answer_start, h, w))
            f.write(name)
            f.write(s.tokens.astype("<i4").tobytes())
            f.write(s.labels.astype("<i4").tobytes())
            f.write(s.attention.astype("<i1").tobytes())
            if img is not None:
                f.write(img.astype("<f8").tobytes())


def load_samples(path) -> list[Sample]:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise ValueError(f"{path}: not a sample file")
    version, count = struct.unpack_from("<II", data, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    off = 12
    out = []
    for _ in range(count):
        nlen, L, start, h, w = struct.unpack_from("<HIIHH", data, off)
        off += struct.calcsize("<HIIHH")
        name = data[off:off + nlen].decode()
        off += nlen
        tokens = np.frombuffer(data, "<i4", L, off).astype(np.int64)
        off += 4 * L
        labels = np.frombuffer(data, "<i4", L, off).astype(np.int64)
        off += 4 * L
        attention = np.frombuffer(data, "<i1", L, off).astype(np.int64)
        off += L
        image = None
        if h:
            image = np.frombuffer(data, "<f8", h * w, off).reshape(h, w).copy()
            off += 8 * h * w
        out.append(Sample(tokens, labels, SOURCES[name], image, start, attention))
    return out

