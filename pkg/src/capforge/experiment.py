"""Desk-scale comparison of training with and without the reconstruction term."""

from __future__ import annotations

import time
from dataclasses import replace

import numpy as np

from capforge.config import TrainConfig
from capforge.data import build_vocabulary, generate_synthetic_corpus
from capforge.inference import caption_records
from capforge.metrics import evaluate_corpus
from capforge.model import CaptionModel
from capforge.trainer import train

# tuned for a few minutes per run on one core
BENEFIT_CONFIG = TrainConfig(
    learning_rate=3e-3, batch_size=32, max_epochs=12, patience=3, k_similar=3,
    d_v=32, d_e=24, d_h=48, c1=8, c2=12,
)


def split_corpus(corpus_seed: int = 2024, n_train: int = 512, n_val: int = 64, n_test: int = 128):
    corpus = generate_synthetic_corpus(corpus_seed, n_train + n_val + n_test)
    return corpus[:n_train], corpus[n_train:n_train + n_val], corpus[n_train + n_val:]


def run_one(lambda_recon: float, seed: int, splits, base: TrainConfig = BENEFIT_CONFIG,
            beam_width: int = 3, lambda_test: float | None = None) -> dict:
    """Train one model and score held-out captions.

    Rescoring uses ``lambda_test = lambda_recon`` unless given, so the
    λ=0 model is a pure likelihood beam search.
    """
    train_set, val_set, test_set = splits
    cfg = replace(base, seed=seed, lambda_recon=lambda_recon)
    vocab = build_vocabulary([c for s in train_set for c in s.captions], min_count=cfg.min_count)
    t0 = time.perf_counter()
    m, tlog = train(CaptionModel.init(cfg, vocab), train_set, val_set, cfg)
    lt = lambda_recon if lambda_test is None else lambda_test
    recs = caption_records(m, test_set, beam_width, lt)
    report = evaluate_corpus({r["id"]: r["caption"] for r in recs}, {s.id: s.captions for s in test_set})
    return {"lambda_recon": lambda_recon, "seed": seed, "cider_d": report.cider_d, "bleu4": report.bleu4,
            "epochs": len(tlog.epochs), "best_epoch": tlog.best_epoch,
            "seconds": time.perf_counter() - t0}


def reconstruction_benefit(seeds=(0, 1, 2), lambdas=(1.0, 0.0), base: TrainConfig = BENEFIT_CONFIG,
                           corpus_seed: int = 2024) -> dict:
    splits = split_corpus(corpus_seed)
    runs = [run_one(lam, s, splits, base) for lam in lambdas for s in seeds]
    means = {lam: float(np.mean([r["cider_d"] for r in runs if r["lambda_recon"] == lam])) for lam in lambdas}
    out = {"runs": runs, "mean_cider_d": {str(k): v for k, v in means.items()}}
    if set(lambdas) >= {0.0, 1.0}:
        out["difference"] = means[1.0] - means[0.0]
        out["improves"] = out["difference"] > 0
    return out
