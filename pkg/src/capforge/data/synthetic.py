"""Deterministic synthetic scenes with templated captions.

Each scene places 1-3 colored shapes in distinct cells of a 3x3 layout.  The
first caption names the shapes in reading order::

    a <color> <shape> [<relation> a <color> <shape> [and a <color> <shape>]]

with ``<relation>`` in {left of, above}; a second caption, when requested,
swaps the first two shapes and uses the inverse relation (right of, below).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from capforge.errors import ContractError

COLORS = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
    "white": (1.0, 1.0, 1.0),
    "orange": (1.0, 0.5, 0.0),
}
SHAPES = ("square", "circle", "triangle", "cross")
DEFAULT_PALETTE = ("red", "green", "blue", "yellow")
RELATIONS = {"left of": "right of", "above": "below"}
LAYOUT = 3


@dataclass(frozen=True)
class SceneObject:
    color: str
    shape: str
    row: int
    col: int


@dataclass
class SceneSample:
    id: str
    image: np.ndarray
    captions: list[str]
    attribute_labels: np.ndarray
    objects: tuple[SceneObject, ...] = field(default=(), repr=False)

    def __post_init__(self):
        if not self.captions:
            raise ContractError(f"sample {self.id}: at least one caption is required")

    def __eq__(self, other) -> bool:
        # objects is generator metadata and is not persisted
        return (
            isinstance(other, SceneSample)
            and self.id == other.id
            and self.captions == other.captions
            and np.array_equal(self.image, other.image)
            and np.array_equal(self.attribute_labels, other.attribute_labels)
        )


def attribute_words(palette=DEFAULT_PALETTE, shapes=SHAPES) -> list[str]:
    return [*palette, *shapes]


def shape_mask(shape: str, size: int) -> np.ndarray:
    y, x = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2.0
    if shape == "square":
        return np.ones((size, size), dtype=bool)
    if shape == "circle":
        r = size / 2.0 - 0.3
        return (x - c) ** 2 + (y - c) ** 2 <= r * r
    if shape == "triangle":
        return np.abs(x - c) <= y / 2.0 + 0.25
    if shape == "cross":
        return (np.abs(x - c) < 0.75) | (np.abs(y - c) < 0.75)
    raise ContractError(f"unknown shape {shape!r}")


def render(objects, grid: int, noise: np.ndarray | None = None) -> np.ndarray:
    cell = grid // LAYOUT
    img = np.zeros((grid, grid, 3)) if noise is None else noise.copy()
    for obj in objects:
        mask = shape_mask(obj.shape, cell)
        r0, c0 = obj.row * cell, obj.col * cell
        patch = img[r0:r0 + cell, c0:c0 + cell]
        patch[mask] = COLORS[obj.color]
    return img


def phrase(obj: SceneObject) -> str:
    return f"a {obj.color} {obj.shape}"


def describe(objects, n_captions: int) -> list[str]:
    """Template captions for objects sorted in reading order."""
    if len(objects) == 1:
        return [phrase(objects[0])]
    first, second = objects[0], objects[1]
    rel = "left of" if first.row == second.row else "above"
    tail = f" and {phrase(objects[2])}" if len(objects) > 2 else ""
    captions = [f"{phrase(first)} {rel} {phrase(second)}{tail}"]
    if n_captions > 1:
        captions.append(f"{phrase(second)} {RELATIONS[rel]} {phrase(first)}{tail}")
    return captions


def labels_for(captions, palette, shapes) -> np.ndarray:
    words = set(" ".join(captions).split())
    return np.array([int(w in words) for w in attribute_words(palette, shapes)], dtype=np.int64)


def generate_sample(seed: int, i: int, grid: int, palette, shapes, n_captions: int, noise: float) -> SceneSample:
    rng = np.random.default_rng([seed, i])
    count = int(rng.integers(1, 4))
    cells = sorted(rng.choice(LAYOUT * LAYOUT, size=count, replace=False).tolist())
    objects = tuple(
        SceneObject(palette[int(rng.integers(len(palette)))], shapes[int(rng.integers(len(shapes)))],
                    c // LAYOUT, c % LAYOUT)
        for c in cells
    )
    background = rng.uniform(0.0, noise, size=(grid, grid, 3)) if noise > 0 else None
    captions = describe(objects, n_captions)
    return SceneSample(
        id=f"{seed}-{i:06d}",
        image=render(objects, grid, background),
        captions=captions,
        attribute_labels=labels_for(captions, palette, shapes),
        objects=objects,
    )


def generate_synthetic_corpus(
    seed: int,
    n: int,
    grid: int = 16,
    palette=DEFAULT_PALETTE,
    shapes=SHAPES,
    n_captions: int = 2,
    noise: float = 0.1,
) -> list[SceneSample]:
    """``n`` scenes; sample ``i`` depends only on ``(seed, i)``, so corpora are prefix-stable."""
    if n < 1:
        raise ContractError("n must be >= 1")
    if grid < 8:
        raise ContractError("grid must be >= 8")
    if not palette or not shapes:
        raise ContractError("palette and shapes must be non-empty")
    unknown = [c for c in palette if c not in COLORS] + [s for s in shapes if s not in SHAPES]
    if unknown:
        raise ContractError(f"unknown colors/shapes: {unknown}")
    return [generate_sample(seed, i, grid, list(palette), list(shapes), n_captions, noise) for i in range(n)]


def grammar(palette=DEFAULT_PALETTE, shapes=SHAPES) -> re.Pattern:
    np_ = rf"a ({'|'.join(palette)}) ({'|'.join(shapes)})"
    rel = "|".join([*RELATIONS, *RELATIONS.values()])
    return re.compile(rf"^{np_}(?: ({rel}) {np_}(?: and {np_})?)?$")
