"""Vocabulary, synthetic corpus, dataset files and the feature index."""

from capforge.data.dataset_io import load_dataset, save_dataset
from capforge.data.index import FeatureIndex, nearest_images
from capforge.data.synthetic import (
    DEFAULT_PALETTE,
    SHAPES,
    SceneObject,
    SceneSample,
    attribute_words,
    generate_synthetic_corpus,
    grammar,
)
from capforge.data.vocab import (
    BOS,
    EOS,
    PAD,
    UNK,
    Vocabulary,
    build_vocabulary,
    decode_caption,
    encode_caption,
    tokenize,
)

__all__ = [
    "BOS",
    "DEFAULT_PALETTE",
    "EOS",
    "FeatureIndex",
    "PAD",
    "SHAPES",
    "SceneObject",
    "SceneSample",
    "UNK",
    "Vocabulary",
    "attribute_words",
    "build_vocabulary",
    "decode_caption",
    "encode_caption",
    "generate_synthetic_corpus",
    "grammar",
    "load_dataset",
    "nearest_images",
    "save_dataset",
    "tokenize",
]
