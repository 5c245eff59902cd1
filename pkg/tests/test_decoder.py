import math

import numpy as np
import pytest

from capforge.data.vocab import BOS, EOS
from capforge.decoder import (
    DecoderParams,
    StepState,
    decode_teacher_forced,
    gru_step,
    initial_state,
    lstm_step,
    recurrent_parameter_count,
    step_logits,
    step_log_probs,
    teacher_forced_batch,
)
from capforge.encoder import EncodedImage
from capforge.errors import ContractError
from capforge.numerics import Tensor, grad_check, ops


def dec(cell="gru", vocab=7, d_a=3, d_v=4, d_e=4, d_h=5, seed=0, scale=1.0):
    p = DecoderParams.init(np.random.default_rng(seed), vocab, d_a, d_v, d_e, d_h, cell)
    for t in p.tensors():
        t.data *= scale
    return p


def enc(seed=1, d_a=3, d_v=4):
    rng = np.random.default_rng(seed)
    return EncodedImage(rng.normal(size=d_v), rng.uniform(size=d_a))


def sig(v):
    return 1.0 / (1.0 + math.exp(-v))


def gru_oracle(p, x, h):
    """Element-by-element GRU update from the gate equations."""
    d, e = p.d_h, p.d_e
    wx, b, wh, whn = p.w_x.data, p.b.data, p.w_h.data, p.w_hn.data
    z = [sig(sum(x[i] * wx[i, k] for i in range(e)) + sum(h[j] * wh[j, k] for j in range(d)) + b[k])
         for k in range(d)]
    r = [sig(sum(x[i] * wx[i, d + k] for i in range(e)) + sum(h[j] * wh[j, d + k] for j in range(d)) + b[d + k])
         for k in range(d)]
    n = [math.tanh(sum(x[i] * wx[i, 2 * d + k] for i in range(e)) + b[2 * d + k]
                   + sum(r[j] * h[j] * whn[j, k] for j in range(d))) for k in range(d)]
    return np.array([(1 - z[k]) * h[k] + z[k] * n[k] for k in range(d)])


def lstm_oracle(p, x, h, c):
    d, e = p.d_h, p.d_e
    wx, b, wh = p.w_x.data, p.b.data, p.w_h.data

    def pre(k):
        return sum(x[i] * wx[i, k] for i in range(e)) + sum(h[j] * wh[j, k] for j in range(d)) + b[k]

    c2, h2 = np.zeros(d), np.zeros(d)
    for k in range(d):
        i_, f_, o_ = sig(pre(k)), sig(pre(d + k)), sig(pre(2 * d + k))
        g_ = math.tanh(pre(3 * d + k))
        c2[k] = f_ * c[k] + i_ * g_
        h2[k] = o_ * math.tanh(c2[k])
    return h2, c2


# ---------------------------------------------------------------- cells

def test_gru_zero_weights_halves_state():
    p = dec(scale=0.0)
    h = np.random.default_rng(0).normal(size=5)
    out = gru_step(p, np.ones(4), StepState(Tensor(h)))
    np.testing.assert_array_equal(out.h.data, 0.5 * h)


def test_gru_all_zero_stays_zero():
    p = dec(scale=0.0)
    assert not gru_step(p, np.zeros(4), StepState.zeros(5)).h.data.any()


def test_gru_matches_scalar_oracle():
    p = dec(seed=3)
    rng = np.random.default_rng(4)
    x, h = rng.normal(size=4), rng.normal(size=5)
    got = gru_step(p, x, StepState(Tensor(h))).h.data
    np.testing.assert_allclose(got, gru_oracle(p, x, h), rtol=0, atol=1e-12)


def test_lstm_zero_weights_closed_form():
    p = dec("lstm", scale=0.0)
    c = np.random.default_rng(0).normal(size=5)
    out = lstm_step(p, np.ones(4), StepState(Tensor(np.zeros(5)), Tensor(c)))
    np.testing.assert_array_equal(out.c.data, 0.5 * c)
    np.testing.assert_allclose(out.h.data, 0.5 * np.tanh(0.5 * c), rtol=0, atol=1e-15)


def test_lstm_all_zero_stays_zero():
    out = lstm_step(dec("lstm", scale=0.0), np.zeros(4), StepState.zeros(5, cell="lstm"))
    assert not out.h.data.any() and not out.c.data.any()


def test_lstm_matches_scalar_oracle():
    p = dec("lstm", seed=5)
    rng = np.random.default_rng(6)
    x, h, c = rng.normal(size=4), rng.normal(size=5), rng.normal(size=5)
    out = lstm_step(p, x, StepState(Tensor(h), Tensor(c)))
    h2, c2 = lstm_oracle(p, x, h, c)
    np.testing.assert_allclose(out.h.data, h2, rtol=0, atol=1e-12)
    np.testing.assert_allclose(out.c.data, c2, rtol=0, atol=1e-12)


def test_step_contract_errors():
    with pytest.raises(ContractError):
        gru_step(dec(), np.ones(3), StepState.zeros(5))
    with pytest.raises(ContractError):
        lstm_step(dec(), np.ones(4), StepState.zeros(5, cell="lstm"))
    with pytest.raises(ContractError):
        lstm_step(dec("lstm"), np.ones(4), StepState.zeros(5))


@pytest.mark.parametrize("d_e,d_h", [(1, 1), (4, 5), (32, 64), (256, 256), (300, 1024)])
def test_gru_lstm_recurrent_parameter_ratio(d_e, d_h):
    g = recurrent_parameter_count(DecoderParams.init(np.random.default_rng(0), 5, 2, 2, d_e, d_h, "gru"))
    lstm = recurrent_parameter_count(DecoderParams.init(np.random.default_rng(0), 5, 2, 2, d_e, d_h, "lstm"))
    assert g == 3 * (d_e + d_h + 1) * d_h
    assert lstm == 4 * (d_e + d_h + 1) * d_h
    assert 4 * g == 3 * lstm


# ---------------------------------------------------------------- output layer

def test_zero_hidden_gives_uniform():
    p = dec()
    p.out_b.data[...] = 0.0
    logits = step_logits(p, np.zeros(5)).data
    assert np.all(logits == logits[0])


def test_logits_associativity():
    p = dec(seed=8)
    h = np.random.default_rng(2).normal(size=5)
    a = (h @ p.out_v.data + p.out_b.data) @ p.embed.data.T
    b = p.embed.data @ (p.out_v.data.T @ h) + p.embed.data @ p.out_b.data
    np.testing.assert_allclose(step_logits(p, h).data, a, rtol=0, atol=1e-12)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_logit_length_is_vocab():
    assert step_logits(dec(vocab=5), np.ones(5)).shape == (5,)


# ---------------------------------------------------------------- teacher forcing

def test_zero_model_likelihood_is_uniform():
    p = dec(vocab=9, scale=0.0)
    seq = [BOS, 4, 5, 6, EOS]
    ll, trace = decode_teacher_forced(p, enc(), seq)
    assert ll == pytest.approx(4 * math.log(1 / 9), abs=1e-12)
    assert len(trace) == 4


def _per_step_oracle(p, e, seq):
    """Replay the injection schedule and every word step with single-step calls."""
    s = StepState.zeros(p.d_h, cell=p.cell)
    step = gru_step if p.cell == "gru" else lstm_step
    s = step(p, e.a @ p.attr_in_w.data + p.attr_in_b.data, s)
    s = step(p, e.f @ p.feat_in_w.data + p.feat_in_b.data, s)
    total, picks, states = 0.0, [], []
    for prev, nxt in zip(seq[:-1], seq[1:]):
        s = step(p, p.embed.data[prev], s)
        logp = ops.log_softmax(step_logits(p, s.h).data)
        total += logp[nxt]
        picks.append(math.exp(logp[nxt]))
        states.append(s.h.data)
    return total, picks, np.array(states)


@pytest.mark.parametrize("cell", ["gru", "lstm"])
def test_teacher_forcing_matches_per_step_recomputation(cell):
    p = dec(cell, seed=11)
    e = enc(12)
    seq = [BOS, 5, 3, 6, 4, EOS]
    ll, trace = decode_teacher_forced(p, e, seq)
    want, picks, states = _per_step_oracle(p, e, seq)
    assert ll == pytest.approx(want, abs=1e-12)
    np.testing.assert_allclose(trace.states, states, rtol=0, atol=1e-12)
    assert math.exp(ll) == pytest.approx(math.prod(picks), abs=1e-10)


def test_initial_state_matches_first_two_steps():
    p, e = dec(seed=2), enc(3)
    s = initial_state(p, e.a, e.f)
    _, _, states = _per_step_oracle(p, e, [BOS, 4])
    first_word = gru_step(p, p.embed.data[BOS], s).h.data
    np.testing.assert_allclose(first_word, states[0], rtol=0, atol=1e-13)


def test_padded_batch_equals_individual_sequences():
    p = dec(seed=4)
    rng = np.random.default_rng(5)
    a, f = rng.uniform(size=(3, 3)), rng.normal(size=(3, 4))
    seqs = [[BOS, 4, EOS], [BOS, 5, 6, 4, 5, EOS], [BOS, 6, 6, EOS]]
    out = teacher_forced_batch(p, Tensor(a), Tensor(f), seqs)
    assert out.lengths.tolist() == [2, 5, 3]
    for i, seq in enumerate(seqs):
        ll, trace = decode_teacher_forced(p, EncodedImage(f[i], a[i]), seq)
        assert out.log_likelihood.data[i] == pytest.approx(ll, abs=1e-12)
        np.testing.assert_allclose(out.hidden.data[: len(seq) - 1, i], trace.states, rtol=0, atol=1e-12)


def test_sequences_must_start_with_bos():
    with pytest.raises(ContractError):
        decode_teacher_forced(dec(), enc(), [4, 5, EOS])
    with pytest.raises(ContractError):
        decode_teacher_forced(dec(), enc(), [BOS])


def test_step_log_probs_normalized():
    lp = step_log_probs(dec(), np.random.default_rng(0).normal(size=(2, 5)))
    np.testing.assert_allclose(np.exp(lp).sum(axis=1), 1.0, rtol=0, atol=1e-12)


@pytest.mark.parametrize("cell", ["gru", "lstm"])
def test_decoder_gradients(cell):
    p = dec(cell, seed=9)
    rng = np.random.default_rng(10)
    a, f = Tensor(rng.uniform(size=(2, 3))), Tensor(rng.normal(size=(2, 4)))
    seqs = [[BOS, 4, 5, EOS], [BOS, 6, EOS]]
    report = grad_check(lambda: ops.sum(teacher_forced_batch(p, a, f, seqs).log_likelihood), p.tensors(), tol=1e-4)
    assert report.passed, report.failures
