"""Beam search, reconstruction rescoring and end-to-end captioning."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from capforge.data.vocab import BOS, EOS, decode_caption
from capforge.decoder import StepState, cell_projected, initial_state, step_logits
from capforge.encoder import EncodedImage, encode
from capforge.errors import ContractError
from capforge.numerics import Tensor, no_tape, ops
from capforge.reconstructor import reconstruct


@dataclass
class BeamHypothesis:
    tokens: list[int]
    log_likelihood: float
    h: np.ndarray
    c: np.ndarray | None
    trace: list[np.ndarray] = field(default_factory=list, repr=False)
    finished: bool = False

    @property
    def hidden_trace(self) -> np.ndarray:
        return np.stack(self.trace)


@dataclass
class RankedCaption:
    tokens: list[int]
    log_likelihood: float
    reconstruction: float
    combined: float
    rank: int


def _key(ll: float, tokens: list[int]):
    return (-ll, tokens)


def beam_search(m, enc: EncodedImage, beam_width: int, max_len: int) -> list[BeamHypothesis]:
    """Length-synchronous beam search without length normalization.

    ``max_len`` bounds the number of generated tokens (EOS included).
    Finished hypotheses stay in the beam and compete with live expansions;
    hypotheses reaching ``max_len`` without EOS are closed as they are.
    Ties in log-likelihood are broken by lexicographically smaller token ids.
    """
    if beam_width < 1:
        raise ContractError("beam_width must be >= 1")
    if max_len < 2:
        raise ContractError("max_len must be >= 2")
    dec = m.decoder
    with no_tape():
        s0 = initial_state(dec, enc.a, enc.f)
        live = [BeamHypothesis([BOS], 0.0, s0.h.data, None if s0.c is None else s0.c.data)]
        done: list[BeamHypothesis] = []
        for step in range(1, max_len + 1):
            h = np.stack([hyp.h for hyp in live])
            c = None if live[0].c is None else np.stack([hyp.c for hyp in live])
            x = dec.embed.data[[hyp.tokens[-1] for hyp in live]]
            s = cell_projected(dec, ops.matmul(x, dec.w_x) + dec.b,
                               StepState(Tensor._wrap(h, False, None), None if c is None else Tensor._wrap(c, False, None)))
            logp = ops.log_softmax(step_logits(dec, s.h).data)
            # only the best beam_width tokens of each row can survive
            top = np.argsort(-logp, axis=1, kind="stable")[:, :beam_width]
            pool = [(hyp.log_likelihood, hyp.tokens, None, hyp) for hyp in done]
            for i, hyp in enumerate(live):
                for v in top[i]:
                    pool.append((hyp.log_likelihood + float(logp[i, v]), hyp.tokens + [int(v)], i, hyp))
            pool.sort(key=lambda e: _key(e[0], e[1]))
            live, done = [], []
            for ll, tokens, i, parent in pool[:beam_width]:
                if i is None:
                    done.append(parent)
                    continue
                hyp = BeamHypothesis(tokens, ll, s.h.data[i], None if s.c is None else s.c.data[i],
                                     parent.trace + [s.h.data[i]])
                hyp.finished = tokens[-1] == EOS or step == max_len
                (done if hyp.finished else live).append(hyp)
            if not live:
                break
    done.sort(key=lambda hyp: _key(hyp.log_likelihood, hyp.tokens))
    return done


def rescore_candidates(m, enc: EncodedImage, hyps, lambda_test: float = 1.0, targets=None) -> list[RankedCaption]:
    """Rank hypotheses by log-likelihood + lambda_test * reconstruction score.

    Ties go to the higher log-likelihood, then to the smaller token ids.
    ``targets`` defaults to the image's own feature.
    """
    if not hyps:
        raise ContractError("no hypotheses to rescore")
    targets = [enc.f] if targets is None else targets
    scored = []
    for hyp in hyps:
        r = reconstruct(m.reconstructor, hyp.hidden_trace, targets).score
        scored.append((hyp.log_likelihood + lambda_test * r, hyp.log_likelihood, r, list(hyp.tokens)))
    scored.sort(key=lambda e: (-e[0], -e[1], e[3]))
    return [RankedCaption(tokens, ll, r, comb, rank) for rank, (comb, ll, r, tokens) in enumerate(scored)]


def caption_image(m, sample, beam_width: int = 3, lambda_test: float = 1.0, max_len: int | None = None,
                  targets=None) -> tuple[str, list[RankedCaption]]:
    """Encode, beam-search, rescore and return the best caption text with the full ranking."""
    image = getattr(sample, "image", sample)
    enc = encode(m.encoder, image)
    hyps = beam_search(m, enc, beam_width, max_len or m.config.max_len - 1)
    ranked = rescore_candidates(m, enc, hyps, lambda_test, targets)
    return decode_caption(m.vocab, ranked[0].tokens), ranked


def worker_count() -> int:
    env = os.environ.get("CAPFORGE_THREADS")
    return max(1, int(env)) if env else (os.cpu_count() or 1)


def caption_records(m, samples, beam_width: int = 3, lambda_test: float = 1.0, index=None,
                    k_similar: int = 0, threads: int | None = None) -> list[dict]:
    """Caption every sample; records come back in input order.

    With an ``index`` and ``k_similar > 0`` the reconstruction targets also
    include the features of the nearest indexed images.
    """
    from capforge.data.index import nearest_images

    def one(sample) -> dict:
        targets = None
        if index is not None and k_similar > 0:
            f = encode(m.encoder, sample.image).f
            ids = nearest_images(index, f, k_similar, query_id=sample.id)
            targets = [f] + [index.vector(i) for i in ids]
        text, ranked = caption_image(m, sample, beam_width, lambda_test, targets=targets)
        best = ranked[0]
        return {
            "id": sample.id,
            "caption": text,
            "P": best.log_likelihood,
            "R": best.reconstruction,
            "combined": best.combined,
            "all_candidates": [
                {"caption": decode_caption(m.vocab, rc.tokens), "tokens": rc.tokens, "P": rc.log_likelihood,
                 "R": rc.reconstruction, "combined": rc.combined, "rank": rc.rank}
                for rc in ranked
            ],
        }

    n = threads or worker_count()
    if n == 1:
        return [one(s) for s in samples]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(one, samples))
