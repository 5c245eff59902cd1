"""Word-level caption decoder.

The recurrent cell is a GRU (an LSTM is kept as the timing baseline).  Each
sequence starts from a zero state, consumes the projected attribute vector,
then the projected image feature, and then the caption words; only the word
steps are scored.  Output logits are tied to the embedding matrix:
``logits = E (v h_t + b)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from capforge.data.vocab import BOS, PAD
from capforge.errors import ContractError
from capforge.numerics import Tensor, no_tape, ops
from capforge.numerics.ops import log_softmax

CELLS = ("gru", "lstm")


@dataclass
class DecoderParams:
    embed: Tensor
    attr_in_w: Tensor
    attr_in_b: Tensor
    feat_in_w: Tensor
    feat_in_b: Tensor
    w_x: Tensor
    b: Tensor
    w_h: Tensor
    # GRU only: hidden-to-candidate block, multiplied after the reset gate
    w_hn: Tensor | None
    out_v: Tensor
    out_b: Tensor
    cell: str = "gru"

    @classmethod
    def init(cls, rng: np.random.Generator, vocab_size: int, d_a: int = 8, d_v: int = 64,
             d_e: int = 32, d_h: int = 64, cell: str = "gru") -> "DecoderParams":
        if cell not in CELLS:
            raise ContractError(f"cell must be one of {CELLS}")

        def u(*shape, fan_in):
            bound = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=shape)

        gates = 3 if cell == "gru" else 4
        w_h_cols = 2 * d_h if cell == "gru" else 4 * d_h
        return cls(
            embed=Tensor(rng.normal(0.0, 1.0, size=(vocab_size, d_e)), True, "dec.embed"),
            attr_in_w=Tensor(u(d_a, d_e, fan_in=d_a), True, "dec.attr_in_w"),
            attr_in_b=Tensor(np.zeros(d_e), True, "dec.attr_in_b"),
            feat_in_w=Tensor(u(d_v, d_e, fan_in=d_v), True, "dec.feat_in_w"),
            feat_in_b=Tensor(np.zeros(d_e), True, "dec.feat_in_b"),
            w_x=Tensor(u(d_e, gates * d_h, fan_in=d_h), True, "dec.w_x"),
            b=Tensor(np.zeros(gates * d_h), True, "dec.b"),
            w_h=Tensor(u(d_h, w_h_cols, fan_in=d_h), True, "dec.w_h"),
            w_hn=Tensor(u(d_h, d_h, fan_in=d_h), True, "dec.w_hn") if cell == "gru" else None,
            out_v=Tensor(u(d_h, d_e, fan_in=d_h), True, "dec.out_v"),
            out_b=Tensor(np.zeros(d_e), True, "dec.out_b"),
            cell=cell,
        )

    @property
    def d_h(self) -> int:
        return self.w_h.shape[0]

    @property
    def d_e(self) -> int:
        return self.embed.shape[1]

    @property
    def vocab_size(self) -> int:
        return self.embed.shape[0]

    def tensors(self) -> list[Tensor]:
        ts = [self.embed, self.attr_in_w, self.attr_in_b, self.feat_in_w, self.feat_in_b,
              self.w_x, self.b, self.w_h]
        if self.w_hn is not None:
            ts.append(self.w_hn)
        return ts + [self.out_v, self.out_b]

    def recurrent_tensors(self) -> list[Tensor]:
        return [t for t in (self.w_x, self.w_h, self.w_hn, self.b) if t is not None]


def recurrent_parameter_count(p: DecoderParams) -> int:
    return sum(t.size for t in p.recurrent_tensors())


@dataclass
class StepState:
    h: Tensor
    c: Tensor | None = None

    @classmethod
    def zeros(cls, d_h: int, batch: int | None = None, cell: str = "gru") -> "StepState":
        shape = (d_h,) if batch is None else (batch, d_h)
        return cls(Tensor(np.zeros(shape)), Tensor(np.zeros(shape)) if cell == "lstm" else None)


@dataclass
class HiddenTrace:
    states: np.ndarray

    def __len__(self) -> int:
        return len(self.states)


def _split(x: Tensor, start: int, stop: int) -> Tensor:
    return ops.getitem(x, (Ellipsis, slice(start, stop)))


def _gru_projected(p: DecoderParams, xp: Tensor, s: StepState) -> StepState:
    d = p.d_h
    h = s.h
    zr = ops.sigmoid(_split(xp, 0, 2 * d) + ops.matmul(h, p.w_h))
    z = _split(zr, 0, d)
    r = _split(zr, d, 2 * d)
    cand = ops.tanh(_split(xp, 2 * d, 3 * d) + ops.matmul(r * h, p.w_hn))
    return StepState((1.0 - z) * h + z * cand)


def _lstm_projected(p: DecoderParams, xp: Tensor, s: StepState) -> StepState:
    d = p.d_h
    pre = xp + ops.matmul(s.h, p.w_h)
    ifo = ops.sigmoid(_split(pre, 0, 3 * d))
    g = ops.tanh(_split(pre, 3 * d, 4 * d))
    c = _split(ifo, d, 2 * d) * s.c + _split(ifo, 0, d) * g
    h = _split(ifo, 2 * d, 3 * d) * ops.tanh(c)
    return StepState(h, c)


def _check_step(p: DecoderParams, x: Tensor, s: StepState, cell: str) -> None:
    if p.cell != cell:
        raise ContractError(f"parameters are for a {p.cell} cell, not {cell}")
    if x.shape[-1] != p.d_e or s.h.shape[-1] != p.d_h:
        raise ContractError(f"step shapes: input {x.shape} (d_e={p.d_e}), hidden {s.h.shape} (d_h={p.d_h})")
    if cell == "lstm" and (s.c is None or s.c.shape != s.h.shape):
        raise ContractError("lstm state needs a cell vector shaped like h")


def gru_step(p: DecoderParams, x, s: StepState) -> StepState:
    """z=σ(W_z[x,h]+b_z), r=σ(W_r[x,h]+b_r), h̃=tanh(W_h[x, r⊙h]+b_h), h'=(1-z)⊙h+z⊙h̃."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    _check_step(p, x, s, "gru")
    return _gru_projected(p, ops.matmul(x, p.w_x) + p.b, s)


def lstm_step(p: DecoderParams, x, s: StepState) -> StepState:
    """Standard LSTM update with gate blocks ordered (input, forget, output, candidate)."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    _check_step(p, x, s, "lstm")
    return _lstm_projected(p, ops.matmul(x, p.w_x) + p.b, s)


def cell_projected(p: DecoderParams, xp: Tensor, s: StepState) -> StepState:
    return _gru_projected(p, xp, s) if p.cell == "gru" else _lstm_projected(p, xp, s)


def step_logits(p: DecoderParams, h) -> Tensor:
    h = h if isinstance(h, Tensor) else Tensor(h)
    if h.shape[-1] != p.d_h:
        raise ContractError(f"hidden length {h.shape[-1]} != d_h {p.d_h}")
    return ops.matmul(ops.matmul(h, p.out_v) + p.out_b, ops.transpose(p.embed))


def injection_inputs(p: DecoderParams, a: Tensor, f: Tensor) -> tuple[Tensor, Tensor]:
    return (ops.matmul(a, p.attr_in_w) + p.attr_in_b,
            ops.matmul(f, p.feat_in_w) + p.feat_in_b)


def initial_state(p: DecoderParams, a, f) -> StepState:
    """State after the attribute and feature injection steps (batched or single)."""
    a = a if isinstance(a, Tensor) else Tensor(a)
    f = f if isinstance(f, Tensor) else Tensor(f)
    batch = a.shape[0] if a.data.ndim == 2 else None
    s = StepState.zeros(p.d_h, batch, p.cell)
    for x in injection_inputs(p, a, f):
        s = cell_projected(p, ops.matmul(x, p.w_x) + p.b, s)
    return s


@dataclass
class TeacherForced:
    log_likelihood: Tensor  # (B,)
    hidden: Tensor          # (T, B, d_h)
    mask: np.ndarray        # (T, B) bool; True on scored word steps
    lengths: np.ndarray     # (B,) number of scored word steps


def pad_sequences(seqs) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in seqs])
    ids = np.full((len(seqs), lengths.max()), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
    return ids, lengths


def teacher_forced_batch(p: DecoderParams, a: Tensor, f: Tensor, seqs) -> TeacherForced:
    """Per-sequence log P(S | F, A) = Σ_t log P(w_t | F, A, w_<t) and the word-step hidden states."""
    for s in seqs:
        if len(s) < 2 or s[0] != BOS:
            raise ContractError("sequences must start with BOS and hold at least one more token")
    ids, lengths = pad_sequences(seqs)
    batch, width = ids.shape
    steps = width - 1
    a_in, f_in = injection_inputs(p, a, f)
    emb = ops.take_rows(p.embed, ids[:, :steps].T.reshape(-1))
    inputs = ops.concat([a_in, f_in, emb], axis=0)  # ((steps + 2) * B, d_e)
    proj = ops.reshape(ops.matmul(inputs, p.w_x) + p.b, (steps + 2, batch, -1))

    s = StepState.zeros(p.d_h, batch, p.cell)
    hs = []
    for t in range(steps + 2):
        s = cell_projected(p, ops.getitem(proj, t), s)
        if t >= 2:
            hs.append(s.h)
    hidden = ops.stack(hs, axis=0)
    logits = step_logits(p, ops.reshape(hidden, (steps * batch, p.d_h)))
    targets = ids[:, 1:].T.reshape(-1)
    nll = ops.reshape(ops.softmax_cross_entropy(logits, targets, reduction="none"), (steps, batch))
    mask = np.arange(steps)[:, None] < (lengths - 1)[None, :]
    ll = -ops.sum(nll * mask.astype(np.float64), axis=0)
    return TeacherForced(ll, hidden, mask, lengths - 1)


def decode_teacher_forced(p: DecoderParams, enc, seq) -> tuple[float, HiddenTrace]:
    """Log-likelihood of one token sequence given an encoded image, plus its hidden trace."""
    with no_tape():
        out = teacher_forced_batch(p, Tensor(np.asarray(enc.a)[None]), Tensor(np.asarray(enc.f)[None]), [list(seq)])
    n = int(out.lengths[0])
    return float(out.log_likelihood.data[0]), HiddenTrace(out.hidden.data[:n, 0, :].copy())


def step_log_probs(p: DecoderParams, h: np.ndarray) -> np.ndarray:
    with no_tape():
        return log_softmax(step_logits(p, h).data)
