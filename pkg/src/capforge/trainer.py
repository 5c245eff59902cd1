"""Joint objective, training loop and whole-model gradient checks.

The maximized per-pair objective is::

    log P(S | I) + lambda * R(targets | S) - attribute_weight * BCE(A, labels)

averaged over the batch; training minimizes its negation with Adam.
Reconstruction targets are the image's own (live, differentiable) feature
plus the cached features of its ``k_similar`` nearest training images.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from capforge.config import TrainConfig
from capforge.data.index import FeatureIndex, nearest_images
from capforge.data.synthetic import SceneSample, generate_synthetic_corpus
from capforge.data.vocab import build_vocabulary, encode_caption
from capforge.decoder import teacher_forced_batch
from capforge.encoder import attribute_loss, encode_image, predict_attributes
from capforge.errors import ContractError, NumericFault
from capforge.model import CaptionModel
from capforge.numerics import Adam, GradCheckReport, Tape, Tensor, backward, grad_check, no_tape, ops
from capforge.reconstructor import pool_batch, reconstruct_feature, score_batch

log = logging.getLogger(__name__)


class TrainingDiverged(NumericFault):
    pass


@dataclass
class Batch:
    images: np.ndarray
    labels: np.ndarray
    seqs: list[list[int]]
    ids: list[str]
    neighbors: np.ndarray | None = None  # (B, k, D_v)


@dataclass
class Objective:
    total: Tensor
    log_likelihood: float
    reconstruction: float | None
    attribute: float
    nll_sum: float
    n_tokens: int
    batch_size: int


def make_batch(m: CaptionModel, pairs, neighbor_cache: dict[str, np.ndarray] | None = None) -> Batch:
    """Encode ``(sample, caption)`` pairs into arrays."""
    pairs = list(pairs)
    if not pairs:
        raise ContractError("batch must be non-empty")
    samples = [s for s, _ in pairs]
    seqs = [encode_caption(m.vocab, c, m.config.max_len) for _, c in pairs]
    nb = None
    if neighbor_cache is not None:
        nb = np.stack([neighbor_cache[s.id] for s in samples])
    return Batch(np.stack([s.image for s in samples]),
                 np.stack([s.attribute_labels for s in samples]).astype(np.float64),
                 seqs, [s.id for s in samples], nb)


def compute_objective(m: CaptionModel, batch, cfg: TrainConfig | None = None,
                      neighbor_cache: dict[str, np.ndarray] | None = None) -> Objective:
    """Mean over the batch of log-likelihood + lambda * R - attribute loss (to be maximized)."""
    cfg = cfg or m.config
    if not isinstance(batch, Batch):
        batch = make_batch(m, batch, neighbor_cache)
    use_recon = cfg.lambda_recon > 0
    if use_recon and cfg.k_similar > 0 and batch.neighbors is None:
        raise ContractError("k_similar > 0 needs a populated neighbor cache")
    f = encode_image(m.encoder, batch.images)
    a = predict_attributes(m.encoder, f)
    tf = teacher_forced_batch(m.decoder, a, f, batch.seqs)
    b = len(batch.seqs)
    ll_mean = tf.log_likelihood * (1.0 / b)
    attr = attribute_loss(a, batch.labels)
    total = ops.sum(ll_mean) - ops.sum(attr) * (cfg.attribute_weight / b)
    recon = None
    if use_recon:
        h_c = pool_batch(m.reconstructor.pooling, tf.hidden, tf.mask, tf.lengths)
        i_r = reconstruct_feature(m.reconstructor, h_c)
        targets = [f]
        if cfg.k_similar > 0 and batch.neighbors is not None:
            targets += [Tensor(batch.neighbors[:, j, :]) for j in range(batch.neighbors.shape[1])]
        r = score_batch(i_r, targets)
        total = total + ops.sum(r) * (cfg.lambda_recon / b)
        recon = float(r.data.mean())
    return Objective(
        total=total,
        log_likelihood=float(tf.log_likelihood.data.mean()),
        reconstruction=recon,
        attribute=float(attr.data.mean()),
        nll_sum=float(-tf.log_likelihood.data.sum()),
        n_tokens=int(tf.lengths.sum()),
        batch_size=b,
    )


# ---------------------------------------------------------------- neighbors

def image_features(m: CaptionModel, samples, chunk: int = 128) -> np.ndarray:
    out = []
    with no_tape():
        for i in range(0, len(samples), chunk):
            imgs = np.stack([s.image for s in samples[i:i + chunk]])
            out.append(encode_image(m.encoder, imgs).data)
    return np.concatenate(out) if out else np.zeros((0, m.encoder.d_v))


def build_index(m: CaptionModel, samples) -> FeatureIndex:
    return FeatureIndex([s.id for s in samples], image_features(m, samples))


def neighbor_cache(m: CaptionModel, queries, index: FeatureIndex, k: int) -> dict[str, np.ndarray]:
    """Features of the ``k`` nearest indexed images for each query sample (itself excluded)."""
    feats = image_features(m, queries)
    k_eff = min(k, max(len(index) - 1, 0))
    cache = {}
    for s, f in zip(queries, feats):
        ids = nearest_images(index, f, k_eff, query_id=s.id)
        cache[s.id] = np.stack([index.vector(i) for i in ids]) if ids else np.zeros((0, index.dim))
    return cache


# ---------------------------------------------------------------- training

@dataclass
class EpochRecord:
    epoch: int
    steps: int
    train_objective: float
    train_log_likelihood: float
    train_reconstruction: float | None
    train_attribute: float
    train_nll_per_token: float
    val_objective: float
    val_nll_per_token: float
    wall_clock: float


@dataclass
class TrainLog:
    epochs: list[EpochRecord] = field(default_factory=list)
    step_objectives: list[float] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    def to_dict(self, timing: bool = True) -> dict:
        d = asdict(self)
        if not timing:
            for e in d["epochs"]:
                e.pop("wall_clock")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def training_pairs(samples) -> list[tuple[SceneSample, str]]:
    return [(s, c) for s in samples for c in s.captions]


def evaluate_objective(m: CaptionModel, pairs, cfg: TrainConfig, cache=None, chunk: int = 64) -> dict:
    """Pair-weighted mean objective and per-token NLL over ``pairs``, without recording a tape."""
    tot = ll = nll = 0.0
    tokens = n = 0
    with no_tape():
        for i in range(0, len(pairs), chunk):
            obj = compute_objective(m, make_batch(m, pairs[i:i + chunk], cache), cfg)
            tot += obj.total.item() * obj.batch_size
            ll += obj.log_likelihood * obj.batch_size
            nll += obj.nll_sum
            tokens += obj.n_tokens
            n += obj.batch_size
    return {"objective": tot / n, "log_likelihood": ll / n, "nll_per_token": nll / tokens}


def train(m: CaptionModel, train_set, val_set, cfg: TrainConfig | None = None) -> tuple[CaptionModel, TrainLog]:
    """Adam training with per-epoch neighbor refresh and early stopping on the validation objective.

    Training stops once the validation objective has failed to improve for
    ``patience`` consecutive epochs (at the first failure when ``patience`` is
    0), or after ``max_epochs`` / ``max_steps``.  The best-validation weights
    are restored before returning.
    """
    cfg = cfg or m.config
    if not train_set or not val_set:
        raise ContractError("train and validation sets must be non-empty")
    if cfg.d_a != len(train_set[0].attribute_labels):
        raise ContractError(f"config d_a={cfg.d_a} but samples carry {len(train_set[0].attribute_labels)} attributes")
    # without the reconstruction term the reconstructor takes no part in the objective
    opt = Adam(m.parameters() if cfg.lambda_recon > 0 else m.theta_ed, lr=cfg.learning_rate)
    pairs = training_pairs(train_set)
    val_pairs = training_pairs(val_set)
    need_cache = cfg.lambda_recon > 0 and cfg.k_similar > 0
    tlog = TrainLog()
    best, best_snap, bad, steps = -np.inf, m.snapshot(), 0, 0

    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        cache = val_cache = None
        if need_cache:
            index = build_index(m, train_set)
            cache = neighbor_cache(m, train_set, index, cfg.k_similar)
            val_cache = neighbor_cache(m, val_set, index, cfg.k_similar)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(pairs))
        sums = dict(obj=0.0, ll=0.0, rec=0.0, attr=0.0, nll=0.0, tok=0, n=0)
        for start in range(0, len(order), cfg.batch_size):
            batch = make_batch(m, [pairs[i] for i in order[start:start + cfg.batch_size]], cache)
            try:
                with Tape() as tape:
                    obj = compute_objective(m, batch, cfg)
                    loss = obj.total * -1.0
                backward(tape, loss)
                opt.step()
            except NumericFault as exc:
                raise TrainingDiverged(f"epoch {epoch} step {steps + 1}: {exc}") from exc
            steps += 1
            value = obj.total.item()
            tlog.step_objectives.append(value)
            b = obj.batch_size
            sums["obj"] += value * b
            sums["ll"] += obj.log_likelihood * b
            sums["rec"] += (obj.reconstruction or 0.0) * b
            sums["attr"] += obj.attribute * b
            sums["nll"] += obj.nll_sum
            sums["tok"] += obj.n_tokens
            sums["n"] += b
            if cfg.max_steps and steps >= cfg.max_steps:
                break

        val = evaluate_objective(m, val_pairs, cfg, val_cache)
        n = sums["n"]
        rec = EpochRecord(
            epoch=epoch,
            steps=steps,
            train_objective=sums["obj"] / n,
            train_log_likelihood=sums["ll"] / n,
            train_reconstruction=sums["rec"] / n if cfg.lambda_recon > 0 else None,
            train_attribute=sums["attr"] / n,
            train_nll_per_token=sums["nll"] / sums["tok"],
            val_objective=val["objective"],
            val_nll_per_token=val["nll_per_token"],
            wall_clock=time.perf_counter() - t0,
        )
        tlog.epochs.append(rec)
        log.info("epoch %d: train %.4f val %.4f nll/tok %.4f", epoch, rec.train_objective,
                 rec.val_objective, rec.train_nll_per_token)
        if rec.val_objective > best:
            best, best_snap, bad = rec.val_objective, m.snapshot(), 0
            tlog.best_epoch = epoch
        else:
            bad += 1
            if bad >= max(cfg.patience, 1):
                tlog.stopped_early = True
                break
        if cfg.max_steps and steps >= cfg.max_steps:
            break

    m.restore(best_snap)
    return m, tlog


# ---------------------------------------------------------------- gradient check

TINY = dict(grid=8, c1=2, c2=3, d_v=6, d_e=4, d_h=5, k_similar=2, max_len=8)


def full_model_grad_check(seed: int = 0, poolings=("mean", "max", "last"), batch_size: int = 4,
                          step: float = 1e-5, tol: float = 1e-4, **dims) -> dict[str, GradCheckReport]:
    """Check every CaptionModel tensor against central differences, once per pooling tag."""
    corpus = generate_synthetic_corpus(seed, batch_size + 2, grid=dims.get("grid", TINY["grid"]))
    vocab = build_vocabulary([c for s in corpus for c in s.captions])
    reports = {}
    for tag in poolings:
        cfg = TrainConfig(seed=seed, pooling=tag, **{**TINY, **dims})
        m = CaptionModel.init(cfg, vocab)
        cache = neighbor_cache(m, corpus, build_index(m, corpus), cfg.k_similar)
        batch = make_batch(m, [(s, s.captions[0]) for s in corpus[:batch_size]], cache)
        reports[tag] = grad_check(lambda: compute_objective(m, batch, cfg).total,
                                  m.parameters(), step=step, tol=tol, seed=seed)
    return reports


def tiny_config(**overrides) -> TrainConfig:
    return replace(TrainConfig(**TINY), **overrides)
