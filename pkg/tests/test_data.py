import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kvdistill.autodiff import IGNORE_INDEX
from kvdistill.data import (
    CATEGORIES,
    COLOR_INTENSITY,
    GRID,
    INVERSE,
    NUMBER_WORDS,
    OCR_LENGTHS,
    VOCAB,
    ManifestEntry,
    OversizeSampleError,
    SceneObject,
    ShapeItem,
    collate_batch,
    gen_lang_mm_samples,
    gen_ocr_mm_samples,
    gen_text_corpus,
    lang_mm_from_scene,
    load_samples,
    materialize,
    ocr_sample,
    ocr_word_rate,
    read_manifest,
    render_image,
    save_samples,
    text_answer_marginal,
    word_list,
    write_manifest,
)
from kvdistill.font import CELL, GLYPH_BITMAPS, SHAPE_BITMAPS, SIZE

GENS = {"text": gen_text_corpus, "lang_mm": gen_lang_mm_samples, "ocr": gen_ocr_mm_samples}


def words(sample):
    return VOCAB.decode(sample.tokens)


def answer_words(sample):
    return VOCAB.decode(sample.answer)


# -- independent interpreters ---------------------------------------------------

def read_cells(image):
    """Pixel oracle: per grid cell, the (kind, name, intensity) drawn there, or None."""
    out = {}
    for cell in range(GRID * GRID):
        r, c = divmod(cell, GRID)
        patch = image[r * CELL:r * CELL + SIZE, c * CELL:c * CELL + SIZE]
        if not patch.any():
            continue
        on = patch > 0
        level = float(patch[on][0])
        hits = [("glyph", k) for k, b in GLYPH_BITMAPS.items() if np.array_equal(b > 0, on)]
        hits += [("shape", k) for k, b in SHAPE_BITMAPS.items() if np.array_equal(b > 0, on)]
        assert len(hits) == 1, f"cell {cell} matches {hits}"
        out[cell] = (*hits[0], level)
    return out


def interpret_lang_mm(sample):
    cells = read_cells(sample.image)
    color_of = {v: k for k, v in COLOR_INTENSITY.items()}
    items = [(cell, name, color_of[level]) for cell, (kind, name, level) in cells.items()]
    q = words(sample)
    q = q[q.index("Q:") + 1:q.index("?")]
    if q[:2] == ["how", "many"]:
        n = len(items) if q[2] == "shapes" else sum(col == q[2] for _, _, col in items)
        return [NUMBER_WORDS[n]]
    a = next(cell for cell, name, _ in items if name == q[0])
    b = next(cell for cell, name, _ in items if name == q[2])
    (ra, ca), (rb, cb) = divmod(a, GRID), divmod(b, GRID)
    if ca < cb:
        return ["left-of"]
    if ca > cb:
        return ["right-of"]
    return ["above"] if ra < rb else ["below"]


def interpret_text(sample):
    w = words(sample)[1:]
    q = w[w.index("Q:") + 1:w.index("A:")]
    ctx = w[:w.index("Q:")]
    objs = [(ctx[i], ctx[i + 1]) for i in range(0, len(ctx), 3) if ctx[i] in COLOR_INTENSITY]
    head = q[0]
    if head == "how":
        n = len(objs) if q[2] == "shapes" else sum(c == q[2] for c, _ in objs)
        return [NUMBER_WORDS[n]]
    if head == "word":
        return [NUMBER_WORDS[int(q[1][1])]]
    if head == "after":
        return [NUMBER_WORDS[NUMBER_WORDS.index(q[1]) + 1]]
    if head == "before":
        return [NUMBER_WORDS[NUMBER_WORDS.index(q[1]) - 1]]
    if head == "opposite":
        return [INVERSE[q[1]]]
    if head == "kind":
        return ["color" if q[1] in COLOR_INTENSITY else "shape"]
    if head == "where":
        return [INVERSE[ctx[1]]]
    if head == "is":
        return ["yes" if NUMBER_WORDS.index(q[1]) > NUMBER_WORDS.index(q[4]) else "no"]
    raise AssertionError(f"unknown question {q}")


# -- vocabulary --------------------------------------------------------------

def test_vocabulary_is_bijective():
    assert len(set(VOCAB.symbols)) == len(VOCAB)
    assert VOCAB.decode(VOCAB.encode(VOCAB.symbols)) == list(VOCAB.symbols)
    assert 90 <= len(VOCAB) <= 100


# -- generators ------------------------------------------------------------------

@pytest.mark.parametrize("name", sorted(GENS))
def test_generators_are_deterministic(name):
    a, b = GENS[name](3, 50), GENS[name](3, 50)
    for x, y in zip(a, b):
        assert np.array_equal(x.tokens, y.tokens) and np.array_equal(x.labels, y.labels)
        assert (x.image is None and y.image is None) or np.array_equal(x.image, y.image)
    c = GENS[name](4, 50)
    assert any(not np.array_equal(x.tokens, z.tokens) for x, z in zip(a, c))


@pytest.mark.parametrize("name", sorted(GENS))
def test_sample_structure(name):
    for s in GENS[name](0, 200):
        assert s.tokens[0] == VOCAB.bos and s.tokens[-1] == VOCAB.eos
        assert np.all((s.tokens >= 0) & (s.tokens < len(VOCAB)))
        assert len(s.labels) == len(s.tokens)
        counted = s.labels != IGNORE_INDEX
        assert np.all(s.labels[counted] < len(VOCAB))
        assert not np.any(s.labels == VOCAB.pad)
        # labels are next-token targets over the answer span (EOS included), nothing else
        idx = np.flatnonzero(counted)
        assert np.array_equal(idx, np.arange(s.answer_start - 1, len(s.tokens) - 1))
        assert np.array_equal(s.labels[idx], s.tokens[idx + 1])
        assert s.source.category in CATEGORIES
        if name == "text":
            assert s.image is None
        else:
            assert s.image.shape == (24, 24) and s.image.min() >= 0 and s.image.max() <= 1


@pytest.mark.parametrize("name", sorted(GENS))
def test_train_eval_disjoint_by_hash(name):
    train = {s.content_key() for s in GENS[name](0, 1000, "train")}
    held = {s.content_key() for s in GENS[name](0, 300, "eval")}
    assert not train & held


def test_split_name_checked():
    with pytest.raises(ValueError):
        gen_text_corpus(0, 5, "test")
    with pytest.raises(ValueError):
        gen_text_corpus(0, 0)


def test_text_answers_match_parser_oracle():
    for s in gen_text_corpus(1, 1000):
        assert answer_words(s) == interpret_text(s), words(s)


def test_text_answer_marginal_exact_tables():
    m = text_answer_marginal()
    assert sum(m.values()) == pytest.approx(1.0, abs=1e-12)
    # a few hand-derived entries
    assert m["yes"] == pytest.approx(0.05)
    assert m["color"] == pytest.approx(0.1 * 3 / 7)
    assert m["left-of"] == pytest.approx((0.1 + 0.1) / 4)


def test_number_word_distribution_matches_marginal():
    n = 10_000
    m = text_answer_marginal()
    counts = {}
    for s in gen_text_corpus(2, n):
        w = answer_words(s)[0]
        counts[w] = counts.get(w, 0) + 1
    mass = sum(m[w] for w in NUMBER_WORDS)
    emp_mass = sum(counts.get(w, 0) for w in NUMBER_WORDS) / n
    assert abs(emp_mass - mass) <= 0.05 * mass
    for w in NUMBER_WORDS:
        p = m[w]
        se = np.sqrt(p * (1 - p) / n)
        assert abs(counts.get(w, 0) / n - p) <= max(0.05 * p, 4 * se), w


def test_lang_mm_answers_match_pixel_oracle():
    for s in gen_lang_mm_samples(0, 1000):
        assert answer_words(s) == interpret_lang_mm(s), words(s)
        assert s.source.category == "language_heavy"


def test_lang_mm_forced_cases():
    zero_red = lang_mm_from_scene([ShapeItem("circle", "blue", 0), ShapeItem("cross", "green", 5)],
                                  ["how", "many", "red"])
    assert answer_words(zero_red) == ["zero"]
    one = lang_mm_from_scene([ShapeItem("square", "red", 9)], ["how", "many", "shapes"])
    assert answer_words(one) == ["one"]
    rel = lang_mm_from_scene([ShapeItem("circle", "red", 1), ShapeItem("square", "red", 9)],
                             ["circle", "where", "square"])
    assert answer_words(rel) == ["above"]


def test_ocr_probe_string():
    s = ocr_sample("PEAEC")
    assert answer_words(s) == ["#P", "#E", "#A", "#E", "#C"]
    counted = s.labels[s.labels != IGNORE_INDEX]
    assert VOCAB.decode(counted) == ["#P", "#E", "#A", "#E", "#C", "<eos>"]


def test_ocr_answers_recoverable_from_pixels():
    for s in gen_ocr_mm_samples(0, 1000):
        cells = read_cells(s.image)
        text = "".join(name for _, (kind, name, _) in sorted(cells.items()))
        assert all(kind == "glyph" for kind, _, _ in cells.values())
        assert ["#" + c for c in text] == answer_words(s)
        assert len(text) in OCR_LENGTHS
        assert s.source.category == "ocr_heavy"


def test_ocr_strings_are_mostly_non_words():
    rate = ocr_word_rate()
    assert rate < 1e-3  # exact: only a handful of 3-6 letter words among 36^L strings
    wl = word_list()
    texts = ["".join(w[1] for w in answer_words(s)) for s in gen_ocr_mm_samples(5, 1000)]
    assert sum(t not in wl for t in texts) / len(texts) >= 0.6


# -- rendering -----------------------------------------------------------------

def test_render_empty_scene():
    assert np.array_equal(render_image([]), np.zeros((24, 24)))


def test_render_one_glyph_at_origin():
    img = render_image([SceneObject("glyph", "Q", 0, 0)])
    assert np.array_equal(img[:5, :5], GLYPH_BITMAPS["Q"])
    assert img[5:].sum() == 0 and img[:, 5:].sum() == 0


def test_render_disjoint_objects_compose_as_max():
    a = SceneObject("shape", "circle", 0, 0, 0.7)
    b = SceneObject("glyph", "Z", 12, 6, 1.0)
    assert np.array_equal(render_image([a, b]), np.maximum(render_image([a]), render_image([b])))


def test_render_later_object_draws_over_earlier():
    a = SceneObject("shape", "square", 0, 0, 0.4)
    b = SceneObject("shape", "cross", 0, 0, 1.0)
    img = render_image([a, b])
    assert img[2, 2] == 1.0 and img[0, 0] == 0.4


def test_render_out_of_bounds():
    with pytest.raises(ValueError, match="out of bounds"):
        render_image([SceneObject("glyph", "A", 20, 0)])


# -- batching -------------------------------------------------------------------

def test_collate_uniform_lengths_no_padding():
    samples = [ocr_sample("ABC"), ocr_sample("XYZ")]
    b = collate_batch(samples, 64)
    assert b.attention.all()


def test_collate_pads_short_sample():
    short, long = ocr_sample("ABC"), ocr_sample("ABCDE")
    assert len(long) - len(short) == 2
    b = collate_batch([short, long], 64)
    L = len(long)
    assert b.tokens.shape == (2, L)
    assert np.array_equal(b.attention[0], [1] * (L - 2) + [0, 0])
    assert np.all(b.labels[0, L - 2:] == IGNORE_INDEX)
    assert np.all(b.tokens[0, L - 2:] == VOCAB.pad)
    assert b.sources == [short.source, long.source]


def test_collate_oversize():
    s = gen_text_corpus(0, 1)[0]
    with pytest.raises(OversizeSampleError, match="sample 0"):
        collate_batch([s], len(s) - 1)
    img = ocr_sample("ABCDEF")
    collate_batch([img], len(img))
    with pytest.raises(OversizeSampleError):
        collate_batch([img], len(img), image_tokens=4)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 12))
def test_collate_counted_equals_answer_lengths(seed, n):
    samples = (gen_text_corpus(seed, n) + gen_ocr_mm_samples(seed, n))[: n + 1]
    b = collate_batch(samples, 64)
    total = 0
    for s in samples:
        total += len(s.tokens) - s.answer_start  # answer tokens plus EOS
    assert b.counted == total


# -- manifest and record files ----------------------------------------------------

def test_manifest_round_trip(tmp_path):
    entries = [ManifestEntry("text", "language_heavy", 10, 3, "train", {"note": "x"}),
               ManifestEntry("ocr", "ocr_heavy", 4, 3, "eval")]
    write_manifest(tmp_path / "m.txt", entries)
    assert read_manifest(tmp_path / "m.txt") == entries
    with pytest.raises(ValueError):
        ManifestEntry("x", "other", 1, 0)


def test_sample_file_round_trip(tmp_path):
    samples = materialize(ManifestEntry("lang_mm", "language_heavy", 20, 1)) + gen_text_corpus(1, 5)
    save_samples(tmp_path / "s.kvds", samples)
    back = load_samples(tmp_path / "s.kvds")
    assert len(back) == len(samples)
    for a, b in zip(samples, back):
        assert np.array_equal(a.tokens, b.tokens) and np.array_equal(a.labels, b.labels)
        assert a.source == b.source and a.answer_start == b.answer_start
        assert (a.image is None and b.image is None) or np.array_equal(a.image, b.image)
    digest = hashlib.sha256((tmp_path / "s.kvds").read_bytes()).hexdigest()
    save_samples(tmp_path / "t.kvds", back)
    assert hashlib.sha256((tmp_path / "t.kvds").read_bytes()).hexdigest() == digest


def test_sample_file_rejects_bad_header(tmp_path):
    (tmp_path / "bad").write_bytes(b"NOPE" + bytes(8))
    with pytest.raises(ValueError, match="not a sample file"):
        load_samples(tmp_path / "bad")
