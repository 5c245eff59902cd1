import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capforge.data import (
    BOS,
    DEFAULT_PALETTE,
    EOS,
    PAD,
    SHAPES,
    UNK,
    FeatureIndex,
    Vocabulary,
    attribute_words,
    build_vocabulary,
    decode_caption,
    encode_caption,
    generate_synthetic_corpus,
    grammar,
    load_dataset,
    nearest_images,
    save_dataset,
    tokenize,
)
from capforge.errors import ContractError, DataError


# ---------------------------------------------------------------- vocabulary

def test_min_count_filters():
    v = build_vocabulary(["a a b"], min_count=2)
    assert v.words == ["a"]


def test_reserved_ids():
    v = build_vocabulary(["anything at all"])
    assert v.tokens[:4] == ["<pad>", "<bos>", "<eos>", "<unk>"]
    assert (PAD, BOS, EOS, UNK) == (0, 1, 2, 3)


def test_ties_are_lexicographic():
    assert build_vocabulary(["x y", "y x"]).words == ["x", "y"]
    assert build_vocabulary(["b c c a"]).words == ["c", "a", "b"]


def test_max_size_caps_words():
    v = build_vocabulary(["a a a b b c"], max_size=2)
    assert v.words == ["a", "b"] and len(v) == 6


def test_tokenize_strips_listed_punctuation_only():
    assert tokenize("A Red, square! Left-of it.") == ["a", "red", "square", "left-of", "it"]


def test_vocabulary_rejects_bad_inputs():
    with pytest.raises(ContractError):
        build_vocabulary([])
    with pytest.raises(ContractError):
        build_vocabulary(["a"], min_count=0)
    with pytest.raises(DataError):
        Vocabulary(["a", "b"])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.text(alphabet="abcd ", min_size=1, max_size=12), min_size=1, max_size=8))
def test_vocabulary_is_deterministic(captions):
    assert build_vocabulary(captions) == build_vocabulary(list(captions))


def test_encode_decode_round_trip():
    v = build_vocabulary(["a red square above a blue circle"])
    text = "a blue square above a red circle"
    ids = encode_caption(v, text, max_len=20)
    assert ids[0] == BOS and ids[-1] == EOS
    assert decode_caption(v, ids) == text


def test_unseen_word_is_unk():
    v = build_vocabulary(["a red square"])
    assert encode_caption(v, "a green square", 10) == [BOS, v.id("a"), UNK, v.id("square"), EOS]


def test_truncation_keeps_eos():
    v = build_vocabulary(["w0 w1 w2 w3 w4 w5 w6 w7 w8 w9"])
    ids = encode_caption(v, " ".join(f"w{i}" for i in range(10)), max_len=5)
    assert len(ids) == 5 and ids[-1] == EOS
    assert decode_caption(v, ids) == "w0 w1 w2"


# ---------------------------------------------------------------- synthetic corpus

def test_same_seed_same_corpus():
    assert generate_synthetic_corpus(3, 12) == generate_synthetic_corpus(3, 12)
    assert generate_synthetic_corpus(3, 12) != generate_synthetic_corpus(4, 12)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 20), st.integers(1, 20))
def test_prefix_stability(seed, n1, n2):
    a, b = generate_synthetic_corpus(seed, n1), generate_synthetic_corpus(seed, n2)
    k = min(n1, n2)
    assert a[:k] == b[:k]


def _parse_objects(caption):
    """Independent parse: pull (color, shape) pairs out of a caption with the grammar regex."""
    m = grammar().match(caption)
    assert m is not None, caption
    groups = [g for g in m.groups()]
    pairs = []
    i = 0
    while i < len(groups):
        if groups[i] in DEFAULT_PALETTE:
            pairs.append((groups[i], groups[i + 1]))
            i += 2
        else:
            i += 1
    return pairs


def test_captions_parse_back_to_scene():
    for s in generate_synthetic_corpus(11, 80):
        truth = sorted((o.color, o.shape) for o in s.objects)
        for c in s.captions:
            assert sorted(_parse_objects(c)) == truth


def test_relations_match_layout():
    for s in generate_synthetic_corpus(5, 60):
        if len(s.objects) < 2:
            continue
        a, b = s.objects[0], s.objects[1]
        rel = "left of" if a.row == b.row else "above"
        assert f"{a.color} {a.shape} {rel} a {b.color} {b.shape}" in s.captions[0]
        assert a.row < b.row or (a.row == b.row and a.col < b.col)


def test_attribute_labels_follow_captions():
    words = attribute_words()
    assert len(words) == len(DEFAULT_PALETTE) + len(SHAPES) == 8
    for s in generate_synthetic_corpus(2, 40):
        present = set(" ".join(s.captions).split())
        assert s.attribute_labels.tolist() == [int(w in present) for w in words]


def test_custom_palette_and_vocab_size():
    corpus = generate_synthetic_corpus(0, 200, palette=("red", "green"), shapes=("circle",))
    assert len(corpus[0].attribute_labels) == 3
    v = build_vocabulary([c for s in generate_synthetic_corpus(0, 200) for c in s.captions])
    assert 15 <= len(v) <= 30


def test_images_have_requested_grid():
    s = generate_synthetic_corpus(0, 1, grid=12)[0]
    assert s.image.shape == (12, 12, 3)
    assert s.image.min() >= 0.0 and s.image.max() <= 1.0


@pytest.mark.parametrize("kwargs", [dict(n=0), dict(grid=4), dict(palette=()), dict(palette=("mauve",)),
                                    dict(shapes=("hexagon",))])
def test_generator_rejects_bad_arguments(kwargs):
    args = dict(seed=0, n=3) | kwargs
    with pytest.raises(ContractError):
        generate_synthetic_corpus(**args)


# ---------------------------------------------------------------- dataset files

def test_save_load_round_trip(tmp_path):
    samples = generate_synthetic_corpus(9, 10)
    path = tmp_path / "d.jsonl"
    save_dataset(samples, path)
    assert load_dataset(path) == samples
    assert len(path.read_text().splitlines()) == 10


def test_truncated_file_reports_line(tmp_path):
    path = tmp_path / "d.jsonl"
    save_dataset(generate_synthetic_corpus(9, 3), path)
    text = path.read_text()
    path.write_text(text[: len(text) - 40])
    with pytest.raises(DataError, match=r"d\.jsonl:3: malformed record"):
        load_dataset(path)


def test_missing_field_reports_line(tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text(json.dumps({"id": "a", "image": [[[0, 0, 0]]], "captions": ["x"]}) + "\n")
    with pytest.raises(DataError, match=":1:.*attributes"):
        load_dataset(path)


def test_empty_file_is_empty_dataset(tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text("")
    assert load_dataset(path) == []


# ---------------------------------------------------------------- nearest images

def test_k_zero():
    index = FeatureIndex(["a", "b"], np.eye(2))
    assert nearest_images(index, np.array([1.0, 0.0]), 0) == []


def test_orthonormal_pair_excludes_self():
    index = FeatureIndex(["e1", "e2"], np.eye(2))
    assert nearest_images(index, np.array([1.0, 0.0]), 1) == ["e2"]
    assert nearest_images(index, np.array([1.0, 0.0]), 5) == ["e2"]


def _brute_force(vectors, ids, q, k, skip):
    sims = []
    for i, v in zip(ids, vectors):
        if i == skip:
            continue
        sims.append((-(v @ q) / (np.linalg.norm(v) * np.linalg.norm(q)), i))
    return [i for _, i in sorted(sims)[:k]]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 60), st.integers(0, 8))
def test_matches_exhaustive_search(seed, n, k):
    rng = np.random.default_rng(seed)
    vectors = rng.normal(size=(n, 6))
    ids = [f"s{i:03d}" for i in range(n)]
    index = FeatureIndex(ids, vectors)
    q_pos = int(rng.integers(n))
    got = nearest_images(index, vectors[q_pos], k, query_id=ids[q_pos])
    assert got == _brute_force(vectors, ids, vectors[q_pos], k, ids[q_pos])
    assert len(got) == min(k, n - 1)


def test_twenty_random_vectors_k5():
    rng = np.random.default_rng(20)
    vectors = rng.normal(size=(20, 4))
    ids = [str(i) for i in range(20)]
    q = rng.normal(size=4)
    assert nearest_images(FeatureIndex(ids, vectors), q, 5) == _brute_force(vectors, ids, q, 5, None)


def test_ties_break_by_id():
    index = FeatureIndex(["c", "a", "b", "q"], np.array([[1.0, 0], [2.0, 0], [3.0, 0], [0, 1.0]]))
    assert nearest_images(index, np.array([0.0, 1.0]), 3, query_id="q") == ["a", "b", "c"]


def test_index_errors():
    index = FeatureIndex(["a"], np.ones((1, 3)))
    with pytest.raises(ContractError):
        nearest_images(index, np.zeros(3), 1)
    with pytest.raises(ContractError):
        nearest_images(index, np.ones(2), 1)
    with pytest.raises(ContractError):
        FeatureIndex(["a", "a"], np.ones((2, 3)))
