"""Compare the numba and numpy kernel backends.

    python benchmarks/bench_kernels.py [--repeats 50] [--out kernels.json]

Times col2im, 2x2 max-pooling (forward + backward), token LCS and one full
training step (forward, backward, Adam) under each backend, checks that both
backends give identical outputs, and prints a JSON report.
"""

from __future__ import annotations

import argparse
import json
import time

import numpy as np

from capforge import _kernels
from capforge.data import build_vocabulary, generate_synthetic_corpus
from capforge.model import CaptionModel
from capforge.numerics import Adam, Tape, backward
from capforge.trainer import TrainConfig, build_index, compute_objective, make_batch, neighbor_cache


def _median_time(fn, repeats: int) -> float:
    fn()  # warm-up, includes jit compilation
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def _train_step_case(seed: int = 0):
    cfg = TrainConfig(seed=seed, batch_size=16, k_similar=2)
    corpus = generate_synthetic_corpus(seed, 32)
    vocab = build_vocabulary([c for s in corpus for c in s.captions])
    m = CaptionModel.init(cfg, vocab)
    cache = neighbor_cache(m, corpus, build_index(m, corpus), cfg.k_similar)
    batch = make_batch(m, [(s, s.captions[0]) for s in corpus[:16]], cache)
    snap = m.snapshot()

    def step():
        m.restore(snap)
        opt = Adam(m.parameters(), lr=cfg.learning_rate)
        with Tape() as tape:
            obj = compute_objective(m, batch, cfg)
            loss = obj.total * -1.0
        backward(tape, loss)
        opt.step()
        return np.concatenate([p.data.ravel() for p in m.parameters()])

    return step


def run(repeats: int = 50, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    dpatch = rng.normal(size=(16, 16, 16, 3, 3, 8))
    pool_in = rng.normal(size=(16, 16, 16, 8))
    a = rng.integers(0, 20, size=400)
    b = rng.integers(0, 20, size=400)
    step = _train_step_case(seed)

    def pool_round_trip():
        out, arg = _kernels.maxpool2x2(pool_in)
        return out, _kernels.maxpool2x2_backward(np.ones_like(out), arg)

    cases = {
        "col2im": lambda: _kernels.col2im(dpatch),
        "maxpool2x2_fwd_bwd": pool_round_trip,
        "lcs_400x400": lambda: _kernels.lcs_length(a, b),
        "train_step_b16": step,
    }
    backends = ["numpy"] + (["numba"] if _kernels._HAVE_NUMBA else [])
    before = _kernels.backend()
    report: dict = {"repeats": repeats, "backends": backends, "kernels": {}}
    try:
        outputs = {}
        for name in backends:
            _kernels.use_backend(name)
            for case, fn in cases.items():
                report["kernels"].setdefault(case, {})[f"{name}_median_s"] = _median_time(fn, repeats)
                outputs[(name, case)] = fn()
        for case in cases:
            entry = report["kernels"][case]
            if len(backends) == 2:
                entry["speedup"] = entry["numpy_median_s"] / entry["numba_median_s"]
                x, y = outputs[("numpy", case)], outputs[("numba", case)]
                x = x if isinstance(x, tuple) else (x,)
                y = y if isinstance(y, tuple) else (y,)
                entry["identical"] = all(np.array_equal(u, v) for u, v in zip(x, y))
    finally:
        _kernels.use_backend(before)
    return report


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out")
    args = ap.parse_args(argv)
    report = run(args.repeats, args.seed)
    text = json.dumps(report, indent=2)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    print(text)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
