"""Caption metrics: corpus BLEU@1-4, ROUGE-L, CIDEr-D and METEOR-lite.

All metrics take :class:`EvalPair` lists tokenized with
:func:`capforge.data.vocab.tokenize`, the same tokenization used for training.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from capforge import _kernels
from capforge.data.vocab import tokenize
from capforge.errors import ContractError, DataError

ROUGE_BETA = 1.2
CIDER_SIGMA = 6.0
METEOR_ALPHA, METEOR_BETA, METEOR_GAMMA = 0.9, 3.0, 0.5


@dataclass
class EvalPair:
    candidate: list[str]
    references: list[list[str]]

    def __post_init__(self):
        if not self.references:
            raise ContractError("every candidate needs at least one reference")

    @classmethod
    def from_text(cls, candidate: str, references) -> "EvalPair":
        return cls(tokenize(candidate), [tokenize(r) for r in references])


def ngrams(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


# ------------------------------------------------------------------ BLEU

def _closest_ref_len(c: int, refs) -> int:
    return min((len(r) for r in refs), key=lambda r: (abs(r - c), r))


def bleu(pairs, max_order: int = 4) -> float:
    """Corpus BLEU with clipped counts, uniform weights, brevity penalty and no smoothing."""
    if not 1 <= max_order <= 4:
        raise ContractError("max_order must lie in [1, 4]")
    matched = [0] * max_order
    total = [0] * max_order
    c_len = r_len = 0
    for p in pairs:
        c_len += len(p.candidate)
        r_len += _closest_ref_len(len(p.candidate), p.references)
        for n in range(1, max_order + 1):
            cand = ngrams(p.candidate, n)
            ceiling: Counter = Counter()
            for ref in p.references:
                ceiling |= ngrams(ref, n)
            matched[n - 1] += sum(min(cnt, ceiling[g]) for g, cnt in cand.items())
            total[n - 1] += max(len(p.candidate) - n + 1, 0)
    if c_len == 0 or any(m == 0 for m in matched):
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matched, total)) / max_order
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)
    return bp * math.exp(log_p)


# ------------------------------------------------------------------ ROUGE-L

def _codes(*seqs):
    table: dict[str, int] = {}
    return [np.array([table.setdefault(t, len(table)) for t in s], dtype=np.int64) for s in seqs]


def lcs(a, b) -> int:
    ca, cb = _codes(a, b)
    return _kernels.lcs_length(ca, cb)


def rouge_l_pair(candidate, references, beta: float = ROUGE_BETA) -> float:
    best = 0.0
    for ref in references:
        n = lcs(candidate, ref)
        if n == 0:
            continue
        p, r = n / len(candidate), n / len(ref)
        best = max(best, (1 + beta ** 2) * p * r / (r + beta ** 2 * p))
    return best


def rouge_l(pairs) -> float:
    pairs = list(pairs)
    return float(np.mean([rouge_l_pair(p.candidate, p.references) for p in pairs])) if pairs else 0.0


# ------------------------------------------------------------------ CIDEr-D

def cider_d_scores(pairs, sigma: float = CIDER_SIGMA, max_n: int = 4) -> list[float]:
    """Per-pair CIDEr-D; document frequencies come from the references of this corpus."""
    pairs = list(pairs)
    n_docs = len(pairs)
    df: Counter = Counter()
    for p in pairs:
        seen = set()
        for ref in p.references:
            for n in range(1, max_n + 1):
                seen.update(ngrams(ref, n))
        df.update(seen)
    log_n = math.log(float(n_docs)) if n_docs else 0.0

    def vec(tokens, n):
        return {g: c * (log_n - math.log(max(1.0, df[g]))) for g, c in ngrams(tokens, n).items()}

    def norm(v):
        return math.sqrt(sum(x * x for x in v.values()))

    scores = []
    for p in pairs:
        per_order = []
        for n in range(1, max_n + 1):
            vc = vec(p.candidate, n)
            nc = norm(vc)
            acc = 0.0
            for ref in p.references:
                vr = vec(ref, n)
                nr = norm(vr)
                if nc == 0 or nr == 0:
                    continue
                # clip the candidate's tf-idf weights at the reference's
                dot = sum(min(w, vr[g]) * vr[g] for g, w in vc.items() if g in vr)
                delta = len(p.candidate) - len(ref)
                acc += dot / (nc * nr) * math.exp(-(delta ** 2) / (2 * sigma ** 2))
            per_order.append(acc / len(p.references))
        scores.append(10.0 * float(np.mean(per_order)))
    return scores


def cider_d(pairs) -> float:
    scores = cider_d_scores(pairs)
    return float(np.mean(scores)) if scores else 0.0


# ------------------------------------------------------------------ METEOR-lite

_SUFFIXES = ("ing", "ed", "es", "s")


def stems(word: str) -> frozenset[str]:
    """The word plus every form left by stripping one known suffix (at least two letters kept)."""
    return frozenset([word] + [word[: -len(suf)] for suf in _SUFFIXES
                               if word.endswith(suf) and len(word) - len(suf) >= 2])


def stem_match(a: str, b: str) -> bool:
    return bool(stems(a) & stems(b))


def _max_alignments(cand, ref, free_c, free_r, match, limit: int = 2000):
    """All maximum-cardinality alignments between free positions under ``match``.

    Falls back to the first ``limit`` alignments found when the search space
    is large (long sentences with many repeated words).
    """
    options = [[j for j in free_r if match(cand[i], ref[j])] for i in free_c]
    best: list[list[tuple[int, int]]] = []
    best_size = 0
    # upper bound on remaining matches from position k onward
    remaining = [0] * (len(options) + 1)
    for k in range(len(options) - 1, -1, -1):
        remaining[k] = remaining[k + 1] + (1 if options[k] else 0)

    def search(k, used, current):
        nonlocal best_size
        if len(best) >= limit:
            return
        if len(current) + remaining[k] < best_size:
            return
        if k == len(options):
            if len(current) > best_size:
                best_size = len(current)
                best.clear()
            if len(current) == best_size:
                best.append(list(current))
            return
        for j in options[k]:
            if j not in used:
                used.add(j)
                current.append((free_c[k], j))
                search(k + 1, used, current)
                current.pop()
                used.discard(j)
        search(k + 1, used, current)

    search(0, set(), [])
    return best or [[]]


def count_chunks(alignment) -> int:
    chunks = 0
    prev = None
    for i, j in sorted(alignment):
        if prev is None or i != prev[0] + 1 or j != prev[1] + 1:
            chunks += 1
        prev = (i, j)
    return chunks


def meteor_align(cand, ref) -> tuple[int, int]:
    """(matches, chunks): exact matches first, then stem matches, fewest chunks among maximal alignments."""
    exact_sets = _max_alignments(cand, ref, list(range(len(cand))), list(range(len(ref))),
                                 lambda a, b: a == b)
    best = (0, 0)
    best_key = None
    for exact in exact_sets:
        used_c = {i for i, _ in exact}
        used_r = {j for _, j in exact}
        free_c = [i for i in range(len(cand)) if i not in used_c]
        free_r = [j for j in range(len(ref)) if j not in used_r]
        for extra in _max_alignments(cand, ref, free_c, free_r, stem_match):
            align = exact + extra
            key = (-len(align), count_chunks(align))
            if best_key is None or key < best_key:
                best_key, best = key, (len(align), count_chunks(align))
    return best


def meteor_pair(candidate, references) -> float:
    best = 0.0
    for ref in references:
        m, chunks = meteor_align(candidate, ref)
        if m == 0:
            continue
        p, r = m / len(candidate), m / len(ref)
        f_mean = p * r / (METEOR_ALPHA * p + (1 - METEOR_ALPHA) * r)
        penalty = METEOR_GAMMA * (chunks / m) ** METEOR_BETA
        best = max(best, f_mean * (1 - penalty))
    return best


def meteor_lite(pairs) -> float:
    pairs = list(pairs)
    return float(np.mean([meteor_pair(p.candidate, p.references) for p in pairs])) if pairs else 0.0


# ------------------------------------------------------------------ report

@dataclass
class MetricReport:
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    meteor_lite: float
    rouge_l: float
    cider_d: float
    corpus_size: int
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def score_pairs(pairs, config: dict | None = None) -> MetricReport:
    pairs = list(pairs)
    return MetricReport(
        bleu1=bleu(pairs, 1), bleu2=bleu(pairs, 2), bleu3=bleu(pairs, 3), bleu4=bleu(pairs, 4),
        meteor_lite=meteor_lite(pairs), rouge_l=rouge_l(pairs), cider_d=cider_d(pairs),
        corpus_size=len(pairs), config=dict(config or {}),
    )


def evaluate_corpus(candidates: dict[str, str], references: dict[str, list[str]], config: dict | None = None) -> MetricReport:
    """Score ``{id: caption}`` against ``{id: [reference, ...]}``; ids must line up."""
    missing = sorted(set(candidates) - set(references))
    if missing:
        raise DataError(f"no references for candidate ids: {missing}")
    pairs = [EvalPair.from_text(candidates[k], references[k]) for k in sorted(candidates)]
    return score_pairs(pairs, config)
