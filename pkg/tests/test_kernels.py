import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capforge import _kernels
from capforge.data import build_vocabulary, generate_synthetic_corpus
from capforge.model import CaptionModel
from capforge.numerics import Tape, backward
from capforge.trainer import compute_objective, make_batch, tiny_config

numba_only = pytest.mark.skipif(not _kernels._HAVE_NUMBA, reason="numba not importable")


@pytest.fixture
def both():
    """Run ``fn`` under each backend and restore the original afterwards."""
    original = _kernels.backend()

    def call(fn, *args):
        out = {}
        for name in ("numpy", "numba"):
            _kernels.use_backend(name)
            out[name] = fn(*args)
        return out["numpy"], out["numba"]

    yield call
    _kernels.use_backend(original)


@numba_only
def test_col2im_backends_identical(both):
    dpatch = np.random.default_rng(0).normal(size=(2, 5, 6, 3, 3, 4))
    a, b = both(_kernels.col2im, dpatch)
    assert a.shape == (2, 7, 8, 4) and np.array_equal(a, b)


def test_col2im_single_patch():
    dpatch = np.zeros((1, 1, 1, 3, 3, 1))
    dpatch[0, 0, 0, :, :, 0] = np.arange(9).reshape(3, 3)
    assert np.array_equal(_kernels.col2im(dpatch)[0, :, :, 0], np.arange(9).reshape(3, 3))


@numba_only
def test_maxpool_backends_identical(both):
    # small integers force ties, which both paths resolve to the first window slot
    x = np.random.default_rng(1).integers(0, 3, size=(2, 6, 4, 3)).astype(float)
    (va, ia), (vb, ib) = both(_kernels.maxpool2x2, x)
    assert np.array_equal(va, vb) and np.array_equal(ia, ib)
    g = np.random.default_rng(2).normal(size=va.shape)
    ga, gb = both(_kernels.maxpool2x2_backward, g, ia)
    assert np.array_equal(ga, gb)


def test_maxpool_tie_goes_to_first_slot():
    vals, arg = _kernels.maxpool2x2(np.ones((1, 2, 2, 1)))
    assert vals.item() == 1.0 and arg.item() == 0


@numba_only
@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 4), max_size=30), st.lists(st.integers(0, 4), max_size=30))
def test_lcs_backends_identical(a, b):
    original = _kernels.backend()
    try:
        results = []
        for name in ("numpy", "numba"):
            _kernels.use_backend(name)
            results.append(_kernels.lcs_length(np.array(a, dtype=np.int64), np.array(b, dtype=np.int64)))
    finally:
        _kernels.use_backend(original)
    assert results[0] == results[1]


@numba_only
def test_training_objective_and_gradients_identical(both):
    corpus = generate_synthetic_corpus(0, 4, grid=8)
    vocab = build_vocabulary([c for s in corpus for c in s.captions])

    def step():
        m = CaptionModel.init(tiny_config(k_similar=0), vocab)
        with Tape() as tape:
            obj = compute_objective(m, make_batch(m, [(s, s.captions[0]) for s in corpus]), m.config)
        backward(tape, obj.total)
        return obj.total.item(), [t.grad.copy() for t in m.encoder.tensors()]

    (oa, ga), (ob, gb) = both(step)
    assert oa == ob
    assert all(np.array_equal(x, y) for x, y in zip(ga, gb))


def test_use_backend_errors():
    with pytest.raises(ValueError, match="unknown kernel backend"):
        _kernels.use_backend("cuda")


def test_env_flag_selects_numpy():
    env = dict(os.environ, CAPFORGE_NUMBA="0")
    proc = subprocess.run([sys.executable, "-c", "from capforge import _kernels; print(_kernels.backend())"],
                          capture_output=True, text=True, env=env, check=True)
    assert proc.stdout.strip() == "numpy"
