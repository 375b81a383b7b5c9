import json
import math
import string

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from cycle_t2i.dataset import (COLORS, PAD, DatasetError, build_vocabulary, crop_to_bbox_ratio, detokenize,
                               generate_synthetic_dataset, load_cub_layout, make_pyramid, split_class_disjoint,
                               tokenize, write_dataset_layout, CaptionRecord)


@pytest.fixture(scope="module")
def small_synth():
    return generate_synthetic_dataset(n_classes=8, n_per_class=32, seed=3)


# -- vocabulary / tokenisation ------------------------------------------------

def test_vocab_simple():
    vocab = build_vocabulary(["a red bird", "a red bird"], min_freq=1)
    assert len(vocab) == 7
    assert vocab.itos[:4] == ("<pad>", "<bos>", "<eos>", "<unk>")
    assert set(vocab.itos[4:]) == {"a", "red", "bird"}
    assert vocab.pad_id == 0


def test_vocab_min_freq_maps_rare_to_unk():
    vocab = build_vocabulary(["x y", "x z"], min_freq=2)
    assert vocab.itos[4:] == ("x",)
    ids, _ = tokenize("x y z", vocab, 10)
    assert ids.tolist() == [4, vocab.unk_id, vocab.unk_id]


def test_vocab_ordering_frequency_then_lexicographic():
    vocab = build_vocabulary(["b a c c", "a c"])
    assert vocab.itos[4:] == ("c", "a", "b")


def test_vocab_empty_corpus():
    with pytest.raises(DatasetError):
        build_vocabulary([])


def _independent_word_count(texts):
    words = set()
    for t in texts:
        cleaned = "".join(ch if ch.isalnum() or ch.isspace() or ch == "_" else " " for ch in t.lower())
        words.update(cleaned.split())
    return len(words)


def test_vocab_size_matches_independent_counter(small_synth):
    texts = [r.raw_text for r in small_synth.records]
    assert len(texts) == 512
    assert len(small_synth.vocab) == _independent_word_count(texts) + 4


def test_tokenize_basic():
    vocab = build_vocabulary(["a red bird"])
    ids, mask = tokenize("A red bird.", vocab, 10)
    assert [vocab.word(i) for i in ids] == ["a", "red", "bird"]
    assert mask.tolist() == [True, True, True]


def test_tokenize_truncates_and_pads():
    vocab = build_vocabulary(["w " * 20])
    ids, mask = tokenize("w " * 17, vocab, 12)
    assert len(ids) == 12 and mask.all()
    ids, mask = tokenize("w w", vocab, 5, pad=True)
    assert ids.tolist() == [4, 4, PAD, PAD, PAD]
    assert mask.tolist() == [True, True, False, False, False]


def test_tokenize_empty_after_cleaning():
    vocab = build_vocabulary(["a"])
    with pytest.raises(DatasetError):
        tokenize(" ... !! ", vocab, 5)


def test_round_trip_full_corpus(small_synth):
    vocab = small_synth.vocab
    for rec in small_synth.records:
        cleaned = " ".join(rec.raw_text.lower().translate(str.maketrans(string.punctuation, " " * 32)).split())
        assert detokenize(tokenize(rec.raw_text, vocab, 50)[0], vocab) == cleaned


@given(st.lists(st.sampled_from(["a", "red", "small", "circle", "the", "upper", "left"]), min_size=1, max_size=15))
def test_tokenize_idempotent_on_detokenized(words):
    vocab = build_vocabulary(["a red small circle the upper left"])
    once = detokenize(tokenize(" ".join(words), vocab, 20)[0], vocab)
    twice = detokenize(tokenize(once, vocab, 20)[0], vocab)
    assert once == twice == " ".join(words)


# -- crop -----------------------------------------------------------------------

def test_crop_full_bbox_unchanged():
    img = np.arange(50 * 40 * 3, dtype=np.uint8).reshape(50, 40, 3)
    res = crop_to_bbox_ratio(img, (0, 0, 40, 50))
    assert res.image is img and not res.clamped


def test_crop_default_ratio_is_075():
    assert crop_to_bbox_ratio.__defaults__[0] == 0.75


def test_crop_centered_square_brute_force():
    img = np.zeros((100, 100, 3), dtype=np.uint8)
    bbox = (35, 35, 30, 30)
    res = crop_to_bbox_ratio(img, bbox, 0.75)
    x0, y0, cw, ch = res.box
    # exhaustive search over square windows containing the box inside the image
    best = max(e for e in range(30, 101)
               for _ in [0] if 900 / e ** 2 >= 0.75)
    assert cw == ch == best == 34
    assert cw <= math.ceil(30 / math.sqrt(0.75))
    assert x0 <= 35 and x0 + cw >= 65 and y0 <= 35 and y0 + ch >= 65
    assert not res.clamped


def test_crop_degenerate_bbox():
    with pytest.raises(DatasetError):
        crop_to_bbox_ratio(np.zeros((10, 10)), (2, 2, 0, 3))


def test_crop_near_border_is_clamped():
    img = np.zeros((100, 100), dtype=np.uint8)
    res = crop_to_bbox_ratio(img, (0, 0, 20, 20), 0.75)
    assert res.clamped
    assert res.box[0] == 0 and res.box[1] == 0


@settings(max_examples=300, deadline=None)
@given(st.integers(8, 120), st.integers(8, 120), st.data(), st.floats(0.05, 1.0))
def test_crop_ratio_property(H, W, data, ratio):
    w = data.draw(st.integers(1, W))
    h = data.draw(st.integers(1, H))
    x = data.draw(st.integers(0, W - w))
    y = data.draw(st.integers(0, H - h))
    res = crop_to_bbox_ratio(np.zeros((H, W), dtype=np.uint8), (x, y, w, h), ratio)
    cx, cy, cw, ch = res.box
    assert res.image.shape == (ch, cw)
    assert cx <= x and cy <= y and cx + cw >= x + w and cy + ch >= y + h
    assert 0 <= cx and 0 <= cy and cx + cw <= W and cy + ch <= H
    assert w * h / (cw * ch) >= ratio - 1e-12 or (res.clamped and (cw, ch) == (W, H))


# -- pyramid --------------------------------------------------------------------

def test_pyramid_constant():
    img = np.full((64, 64, 3), 200, dtype=np.uint8)
    for level in make_pyramid(img, 16, 3):
        assert np.allclose(level, 200 / 127.5 - 1, atol=1e-6)


def test_pyramid_full_scale_resolutions():
    img = np.zeros((256, 256, 3), dtype=np.uint8)
    assert [lvl.shape for lvl in make_pyramid(img, 64, 3)] == [(3, 64, 64), (3, 128, 128), (3, 256, 256)]


def test_pyramid_checkerboard_cell_means():
    cells = np.array([[0.8, -0.4], [0.2, -1.0]])
    img = np.kron(cells, np.ones((2, 2)))
    img[0, 0] -= 0.2
    img[0, 1] += 0.2  # leaves the top-left cell mean at 0.8
    img[3, 2] = -0.6  # bottom-right cell becomes (-1 - 1 - 1 - 0.6) / 4 = -0.9
    small, full = make_pyramid(np.stack([img] * 3), 2, 2)
    assert np.allclose(small[0], [[0.8, -0.4], [0.2, -0.9]], atol=1e-7)
    assert np.allclose(full[0], img, atol=1e-7)


def test_pyramid_too_small():
    with pytest.raises(DatasetError):
        make_pyramid(np.zeros((30, 30, 3), dtype=np.uint8), 16, 2)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(64, 90))
def test_pyramid_conserves_mean(seed, edge):
    img = np.random.default_rng(seed).integers(0, 256, size=(edge, edge, 3), dtype=np.uint8)
    levels = make_pyramid(img, 16, 3)
    means = [lvl.astype(np.float64).mean() for lvl in levels]
    assert np.allclose(means, means[0], atol=1e-6)


# -- split ------------------------------------------------------------------------

def _records(n_classes):
    return [CaptionRecord(f"{k}_{i}", k, [4], "x") for k in range(n_classes) for i in range(3)]


def test_split_two_classes():
    m = split_class_disjoint(_records(2), 0.5, 0)
    assert len(m.train_classes) == len(m.test_classes) == 1


def test_split_deterministic():
    assert split_class_disjoint(_records(10), 0.7, 5) == split_class_disjoint(_records(10), 0.7, 5)


def test_split_200_classes():
    m = split_class_disjoint(_records(200), 0.8, 1)
    assert len(m.train_classes) == 160 and len(m.test_classes) == 40
    assert set(m.train_classes) & set(m.test_classes) == set()
    default = split_class_disjoint(_records(200), seed=1)
    assert (len(default.train_classes), len(default.test_classes)) == (150, 50)


def test_split_single_class():
    with pytest.raises(DatasetError):
        split_class_disjoint(_records(1), 0.5, 0)


def test_split_disjoint_over_1000_seeds():
    recs = _records(12)
    for seed in range(1000):
        m = split_class_disjoint(recs, 0.75, seed)
        assert not (m.train_classes & m.test_classes)
        assert m.train_classes | m.test_classes == frozenset(range(12))


# -- synthetic data ------------------------------------------------------------

def test_synthetic_caption_mentions_class(small_synth):
    for rec in small_synth.records:
        color, shape = small_synth.class_names[rec.class_id].split()
        assert color in rec.raw_text and shape in rec.raw_text
    assert small_synth.class_names[0] == "red circle"


def test_synthetic_deterministic():
    a = generate_synthetic_dataset(3, 4, seed=11)
    b = generate_synthetic_dataset(3, 4, seed=11)
    for i in a.images:
        for la, lb in zip(a.images[i].pyramid, b.images[i].pyramid):
            assert np.array_equal(la, lb)
    assert [r.raw_text for r in a.records] == [r.raw_text for r in b.records]


def test_synthetic_pyramid_contract(small_synth):
    ex = next(iter(small_synth.images.values()))
    assert ex.resolutions == [16, 32, 64]
    for lvl in ex.pyramid:
        assert lvl.min() >= -1 and lvl.max() <= 1


def test_synthetic_declared_color_dominates(small_synth):
    """Count foreground pixels nearest to each palette colour."""
    palette = np.array(list(COLORS.values()), dtype=np.float64)
    names = list(COLORS)
    for image_id in small_synth.image_ids()[::7]:
        px = (small_synth.images[image_id].pyramid[-1].transpose(1, 2, 0).reshape(-1, 3) + 1) * 127.5
        fg = px[px.max(1) > 100]
        nearest = np.argmin(((fg[:, None, :] - palette[None]) ** 2).sum(-1), axis=1)
        counts = np.bincount(nearest, minlength=len(names))
        assert names[counts.argmax()] == small_synth.attributes[image_id]["color"]
        assert counts.max() / counts.sum() > 0.75  # anti-aliased edges blend toward dimmer hues


# -- on-disk layout ---------------------------------------------------------------

def test_layout_round_trip(tmp_path):
    ds = generate_synthetic_dataset(3, 4, seed=2)
    write_dataset_layout(tmp_path, ds)
    assert (tmp_path / "attributes.json").exists()
    back = load_cub_layout(tmp_path, t_max=ds.t_max)
    assert back.class_names == ds.class_names
    assert sorted((r.image_id, r.raw_text) for r in back.records) == sorted((r.image_id, r.raw_text) for r in ds.records)
    for i in ds.images:
        for la, lb in zip(ds.images[i].pyramid, back.images[i].pyramid):
            assert np.array_equal(la, lb)
    assert back.attributes == json.loads(json.dumps(ds.attributes))


def _write_cub(root, bbox_line=None, with_caption=True):
    cdir = "001.Test_bird"
    (root / "images" / cdir).mkdir(parents=True)
    (root / "text" / cdir).mkdir(parents=True)
    img = np.zeros((120, 100, 3), dtype=np.uint8)
    img[40:80, 30:70] = 255
    Image.fromarray(img).save(root / "images" / cdir / "img1.jpg")
    if with_caption:
        (root / "text" / cdir / "img1.txt").write_text("a white bird\nthis bird is white.\n")
    (root / "bounding_boxes.txt").write_text((bbox_line or "img1 30 40 40 40") + "\n")


def test_load_cub_crops_and_splits_captions(tmp_path):
    _write_cub(tmp_path)
    ds = load_cub_layout(tmp_path, resolutions=(16, 32), crop_ratio=0.75)
    assert len(ds.records) == 2
    assert ds.class_names == ["Test bird"]
    top = ds.images["img1"].pyramid[-1]
    # 40x40 box in a 46x46 crop: the object dominates the frame
    assert (top > 0).mean() > 0.7


def test_load_cub_missing_caption(tmp_path):
    _write_cub(tmp_path, with_caption=False)
    with pytest.raises(DatasetError, match="img1.txt"):
        load_cub_layout(tmp_path, resolutions=(16, 32))


def test_load_cub_malformed_bbox(tmp_path):
    _write_cub(tmp_path, bbox_line="img1 30 forty 40 40")
    with pytest.raises(DatasetError, match="bounding_boxes.txt"):
        load_cub_layout(tmp_path, resolutions=(16, 32))
