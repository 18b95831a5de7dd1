"""Synthetic corpus: geometry, captions, determinism, golden sample."""

import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from mimgen import datagen
from mimgen.text import Vocabulary, tokenize

GOLDEN = Path(__file__).parent / "data" / "corpus_n16_seed0.json"


def test_lattice_size():
    specs = datagen.all_specs()
    assert len(specs) == 3 * 8 * 7 * 5 * 2 == 1680
    assert len(set(specs)) == 1680


class TestRender:
    def test_center_circle_pixels(self):
        spec = datagen.SceneSpec("circle", "red", "blue", "center", "large")
        img = datagen.render(spec, 32)
        np.testing.assert_array_equal(img[:, 16, 16], np.array([255, 0, 0]) / 255.0)
        np.testing.assert_array_equal(img[:, 0, 0], np.array([0, 0, 255]) / 255.0)

    def test_bit_identical_renders(self):
        spec = datagen.SceneSpec("triangle", "cyan", "magenta", "top-right", "small")
        a, b = datagen.render(spec, 32), datagen.render(spec, 32)
        np.testing.assert_array_equal(a, b)

    def test_large_vs_small_area_ratio(self):
        big = datagen.shape_mask(
            datagen.SceneSpec("circle", "red", "blue", "center", "large"), 32
        ).sum()
        small = datagen.shape_mask(
            datagen.SceneSpec("circle", "red", "blue", "center", "small"), 32
        ).sum()
        expected = (7 / 3) ** 2  # radii are 7 and 3 pixels at image size 32
        assert big / small == pytest.approx(expected, rel=0.25)

    def test_minimum_size_enforced(self):
        with pytest.raises(ValueError):
            datagen.render(datagen.SceneSpec("circle", "red", "blue", "center", "large"), 8)

    def test_fill_equals_background_rejected(self):
        with pytest.raises(ValueError):
            datagen.SceneSpec("circle", "red", "red", "center", "large")


class TestCaption:
    def test_template(self):
        spec = datagen.SceneSpec("circle", "red", "blue", "center", "large")
        assert datagen.caption(spec) == (
            "a large red circle at the center on a blue background"
        )

    def test_injective_over_lattice(self):
        captions = [datagen.caption(s) for s in datagen.all_specs()]
        assert len(set(captions)) == len(captions)

    def test_all_words_in_vocabulary(self):
        vocab = Vocabulary(datagen.caption_words())
        for spec in datagen.all_specs()[::97]:
            ids = tokenize(datagen.caption(spec), vocab)
            assert vocab.unk_id not in ids


class TestMakeCorpus:
    def test_full_lattice(self):
        corpus = datagen.make_corpus(1680, seed=0)
        assert len({c.spec for c in corpus}) == 1680

    def test_too_many_rejected(self):
        with pytest.raises(ValueError):
            datagen.make_corpus(1681, seed=0)

    def test_seed_determinism(self):
        a = datagen.make_corpus(8, seed=3)
        b = datagen.make_corpus(8, seed=3)
        assert [x.caption for x in a] == [x.caption for x in b]
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.image, y.image)

    def test_golden_sample(self):
        corpus = datagen.make_corpus(16, seed=0)
        got = {
            "captions": [c.caption for c in corpus],
            "image_sha256": [
                hashlib.sha256(c.image.tobytes()).hexdigest() for c in corpus
            ],
        }
        golden = json.loads(GOLDEN.read_text())
        assert got == golden
