"""JSON-lines dataset files: one scene per line."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from capforge.data.synthetic import SceneSample
from capforge.errors import DataError

_FIELDS = ("id", "image", "captions", "attributes")


def sample_to_record(s: SceneSample) -> dict:
    return {
        "id": s.id,
        "image": s.image.tolist(),
        "captions": list(s.captions),
        "attributes": [int(a) for a in s.attribute_labels],
    }


def record_to_sample(rec: dict) -> SceneSample:
    missing = [k for k in _FIELDS if k not in rec]
    if missing:
        raise DataError(f"missing fields {missing}")
    image = np.asarray(rec["image"], dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DataError(f"image must be H x W x 3, got shape {image.shape}")
    captions = rec["captions"]
    if not isinstance(captions, list) or not captions or not all(isinstance(c, str) for c in captions):
        raise DataError("captions must be a non-empty list of strings")
    return SceneSample(str(rec["id"]), image, captions, np.asarray(rec["attributes"], dtype=np.int64))


def save_dataset(samples, path) -> None:
    # json writes floats with repr(), which round-trips float64 exactly
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(sample_to_record(s), separators=(",", ":")))
            fh.write("\n")


def load_dataset(path) -> list[SceneSample]:
    samples = []
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            samples.append(record_to_sample(json.loads(line)))
        except (json.JSONDecodeError, DataError, ValueError, TypeError) as exc:
            raise DataError(f"{path}:{lineno}: malformed record: {exc}") from exc
    return samples
