"""GRU vs LSTM single-step timing and parameter counts."""

from __future__ import annotations

import time
import warnings

import numpy as np

from capforge.decoder import DecoderParams, StepState, gru_step, lstm_step, recurrent_parameter_count
from capforge.numerics import Tensor, no_tape


def _step_times(step, p, x, s, iters: int, warmup: int) -> np.ndarray:
    times = np.empty(iters)
    with no_tape():
        for _ in range(warmup):
            step(p, x, s)
        for i in range(iters):
            t0 = time.perf_counter()
            step(p, x, s)
            times[i] = time.perf_counter() - t0
    return times


def bench_cells(d_e: int = 256, d_h: int = 256, iters: int = 10_000, warmup: int = 500, seed: int = 0) -> dict:
    if iters < 100:
        warnings.warn(f"only {iters} timing iterations; medians will be noisy", stacklevel=2)
    rng = np.random.default_rng(seed)
    gru = DecoderParams.init(rng, vocab_size=8, d_e=d_e, d_h=d_h, cell="gru")
    lstm = DecoderParams.init(rng, vocab_size=8, d_e=d_e, d_h=d_h, cell="lstm")
    x = Tensor(rng.normal(size=d_e))
    h = Tensor(rng.normal(size=d_h) * 0.1)
    c = Tensor(rng.normal(size=d_h) * 0.1)
    # interleave so drift in machine load hits both cells alike
    gru_t, lstm_t = [], []
    rounds = 5
    per = max(iters // rounds, 1)
    for _ in range(rounds):
        gru_t.append(_step_times(gru_step, gru, x, StepState(h), per, warmup // rounds))
        lstm_t.append(_step_times(lstm_step, lstm, x, StepState(h, c), per, warmup // rounds))
    g, l_ = float(np.median(np.concatenate(gru_t))), float(np.median(np.concatenate(lstm_t)))
    gp, lp = recurrent_parameter_count(gru), recurrent_parameter_count(lstm)
    return {
        "d_e": d_e,
        "d_h": d_h,
        "iters": per * rounds,
        "gru_median_s": g,
        "lstm_median_s": l_,
        "speed_margin": 1.0 - g / l_,
        "gru_faster": g < l_,
        "gru_recurrent_params": gp,
        "lstm_recurrent_params": lp,
        "param_ratio": gp / lp,
    }
