"""Command line entry point: ``capforge <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from capforge.config import RunConfig, config_from_dict, load_config
from capforge.data import build_vocabulary, generate_synthetic_corpus, load_dataset, save_dataset
from capforge.data.synthetic import DEFAULT_PALETTE, SHAPES
from capforge.errors import ContractError, DataError, NumericFault
from capforge.inference import caption_records
from capforge.metrics import evaluate_corpus
from capforge.model import CaptionModel, load_checkpoint, save_checkpoint

log = logging.getLogger("capforge")


def _emit_json(obj, out: str | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
    print(text)


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def split_dataset(samples, fraction: float):
    """Last ``ceil(fraction * n)`` samples validate; with no split the training set doubles as validation."""
    n_val = int(np.ceil(fraction * len(samples))) if fraction > 0 else 0
    if n_val == 0 or n_val >= len(samples):
        return samples, samples
    return samples[:-n_val], samples[-n_val:]


# ---------------------------------------------------------------- subcommands

def cmd_gen_data(args) -> int:
    if args.n < 1:
        raise ContractError("n must be ≥ 1")
    samples = generate_synthetic_corpus(args.seed, args.n, grid=args.grid, n_captions=args.captions,
                                        noise=args.noise)
    save_dataset(samples, args.out)
    vocab = build_vocabulary([c for s in samples for c in s.captions])
    _emit_json({"path": args.out, "n": len(samples), "vocab_size": len(vocab),
                "d_a": len(DEFAULT_PALETTE) + len(SHAPES), "grid": args.grid}, None)
    return 0


def cmd_train(args) -> int:
    from capforge.trainer import build_index, evaluate_objective, neighbor_cache, train, training_pairs

    cfg = load_config(args.config, RunConfig)
    overrides = {k: getattr(args, k) for k in ("seed", "pooling", "k_similar") if getattr(args, k) is not None}
    if overrides:
        cfg = config_from_dict({**cfg.to_dict(), **overrides}, RunConfig)
    samples = load_dataset(cfg.dataset)
    if not samples:
        raise DataError(f"{cfg.dataset}: dataset is empty")
    train_set, val_set = split_dataset(samples, cfg.split)
    vocab = build_vocabulary([c for s in train_set for c in s.captions], min_count=cfg.min_count)
    tcfg = cfg.train_config()
    m = CaptionModel.init(tcfg, vocab)
    m, tlog = train(m, train_set, val_set, tcfg)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = Path(cfg.checkpoint)
    if not ckpt.is_absolute():
        ckpt = out / ckpt
    save_checkpoint(m, ckpt)
    cache = None
    if tcfg.lambda_recon > 0 and tcfg.k_similar > 0:
        cache = neighbor_cache(m, train_set, build_index(m, train_set), tcfg.k_similar)
    final = evaluate_objective(m, training_pairs(train_set), tcfg, cache)
    record = {**tlog.to_dict(), "final_train_nll_per_token": final["nll_per_token"],
              "final_train_objective": final["objective"], "checkpoint": str(ckpt)}
    (out / "train_log.json").write_text(json.dumps(record, indent=2) + "\n", encoding="utf-8")
    print(json.dumps({"checkpoint": str(ckpt), "epochs": len(tlog.epochs), "best_epoch": tlog.best_epoch,
                      "final_train_nll_per_token": final["nll_per_token"]}, indent=2))
    return 0


def _load_model_for(checkpoint: str, samples) -> CaptionModel:
    m = load_checkpoint(checkpoint)
    if samples and samples[0].image.shape != (m.config.grid, m.config.grid, 3):
        raise DataError(f"dataset images are {samples[0].image.shape}, checkpoint expects "
                        f"({m.config.grid}, {m.config.grid}, 3)")
    return m


def _index_for(m, args, samples):
    if not args.index_dataset or m.config.k_similar == 0:
        return None
    from capforge.trainer import build_index
    return build_index(m, load_dataset(args.index_dataset))


def cmd_caption(args) -> int:
    samples = load_dataset(args.dataset)
    m = _load_model_for(args.checkpoint, samples)
    index = _index_for(m, args, samples)
    records = caption_records(m, samples, args.beam, args.lambda_test, index=index,
                              k_similar=m.config.k_similar if index is not None else 0, threads=args.threads)
    header = {"header": {"checkpoint": args.checkpoint, "dataset": args.dataset, "beam_width": args.beam,
                         "lambda_test": args.lambda_test, "n": len(records)}}
    with open(args.out, "w", encoding="utf-8") as fh:
        for rec in [header, *records]:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    print(json.dumps(header["header"], sort_keys=True))
    return 0


def read_candidates(path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
        if "header" in rec:
            continue
        if "id" not in rec or "caption" not in rec:
            raise DataError(f"{path}:{lineno}: candidate records need 'id' and 'caption'")
        out[str(rec["id"])] = rec["caption"]
    return out


def cmd_eval(args) -> int:
    candidates = read_candidates(args.candidates)
    refs = {s.id: s.captions for s in load_dataset(args.dataset)}
    report = evaluate_corpus(candidates, refs, {"candidates": args.candidates, "dataset": args.dataset})
    _emit_json(report.to_dict(), args.out)
    return 0


def sweep_rows(m, samples, beams, lambdas, base_beam: int = 3, base_lambda: float = 1.0) -> list[dict]:
    """Caption + evaluate at every grid point: beam widths at ``base_lambda``, then lambdas at ``base_beam``."""
    refs = {s.id: s.captions for s in samples}
    grid = [("beam_width", b, b, base_lambda) for b in beams] + [("lambda_test", l_, base_beam, l_) for l_ in lambdas]
    rows = []
    for param, value, beam, lam in grid:
        recs = caption_records(m, samples, beam, lam)
        report = evaluate_corpus({r["id"]: r["caption"] for r in recs}, refs)
        rows.append({"param": param, "value": value, "beam_width": beam, "lambda_test": lam,
                     "mean_candidates": float(np.mean([len(r["all_candidates"]) for r in recs])),
                     **{k: v for k, v in report.to_dict().items() if k not in ("config",)}})
    return rows


def cmd_sweep(args) -> int:
    samples = load_dataset(args.dataset)
    m = _load_model_for(args.checkpoint, samples)
    rows = sweep_rows(m, samples, _ints(args.beams), _floats(args.lambdas))
    if args.out and args.out.endswith(".csv"):
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
        print(json.dumps(rows, indent=2))
    else:
        _emit_json(rows, args.out)
    return 0


def cmd_bench_cells(args) -> int:
    from capforge.bench import bench_cells

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        result = bench_cells(args.dims, args.dims, args.iters, seed=args.seed)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    result["warnings"] = [str(w.message) for w in caught]
    _emit_json(result, args.out)
    return 0


def cmd_grad_check(args) -> int:
    from contextlib import nullcontext

    from capforge.numerics import corrupt_gradient
    from capforge.trainer import full_model_grad_check

    dims = {k: getattr(args, k) for k in ("d_e", "d_h", "d_v") if getattr(args, k) is not None}
    hook = corrupt_gradient(args.corrupt_op, 1.01) if args.corrupt_op else nullcontext()
    with hook:
        reports = full_model_grad_check(seed=args.seed, tol=args.tol, **dims)
    result = {
        "seed": args.seed,
        "tol": args.tol,
        "corrupted_op": args.corrupt_op,
        "passed": all(r.passed for r in reports.values()),
        "pooling": {tag: {"passed": r.passed, "max_rel_error": r.max_rel_error, "failures": r.failures}
                    for tag, r in reports.items()},
    }
    _emit_json(result, args.out)
    if not result["passed"]:
        for tag, r in reports.items():
            for name, err in r.failures.items():
                print(f"FAIL [{tag}] {name}: max rel. error {err:.3e}", file=sys.stderr)
        if args.corrupt_op:
            print(f"gradient rule of op '{args.corrupt_op}' was corrupted", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="capforge", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic scene-caption corpus as JSONL")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--grid", type=int, default=16)
    p.add_argument("--captions", type=int, default=2, help="references per scene (1 or 2)")
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--out", default="data.jsonl")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, help="overrides the config file")
    p.add_argument("--pooling", choices=("mean", "max", "last"))
    p.add_argument("--k-similar", dest="k_similar", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("caption", help="beam-search + rescore captions for a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--beam", type=int, default=3)
    p.add_argument("--lambda-test", type=float, default=1.0)
    p.add_argument("--index-dataset", help="training set whose nearest images join the reconstruction targets")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--out", default="captions.jsonl")
    p.set_defaults(func=cmd_caption)

    p = sub.add_parser("eval", help="score a captions file against dataset references")
    p.add_argument("--candidates", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="metrics across beam widths and rescoring weights")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--beams", default="1,2,3,5")
    p.add_argument("--lambdas", default="0,0.5,1,2")
    p.add_argument("--out", help=".csv or .json")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bench-cells", help="time GRU vs LSTM steps")
    p.add_argument("--dims", type=int, default=256)
    p.add_argument("--iters", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench_cells)

    p = sub.add_parser("grad-check", help="finite-difference check of every model tensor")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--d-e", dest="d_e", type=int)
    p.add_argument("--d-h", dest="d_h", type=int)
    p.add_argument("--d-v", dest="d_v", type=int)
    p.add_argument("--corrupt-op", help=argparse.SUPPRESS)
    p.add_argument("--out")
    p.set_defaults(func=cmd_grad_check)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ContractError, DataError, NumericFault, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
