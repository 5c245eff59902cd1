import csv
import json
import subprocess
import sys

import pytest

from capforge.cli import main, read_candidates, split_dataset, sweep_rows
from capforge.data import load_dataset
from capforge.data.vocab import decode_caption
from capforge.encoder import encode
from capforge.inference import beam_search, rescore_candidates
from capforge.metrics import evaluate_corpus
from capforge.model import load_checkpoint
from capforge.trainer import TINY

TRAIN = dict(TINY, learning_rate=3e-3, batch_size=8, max_epochs=2, split=0.25)


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data.jsonl"
    assert main(["gen-data", "--seed", "5", "--n", "16", "--grid", "8", "--out", str(data)]) == 0
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps({**TRAIN, "dataset": str(data), "output_dir": str(root / "run")}))
    assert main(["train", "--config", str(cfg)]) == 0
    return root, data, root / "run" / "model.cgru"


# ---------------------------------------------------------------- gen-data

def test_gen_data_is_deterministic(tmp_path, capsys):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    run(capsys, "gen-data", "--seed", 3, "--n", 6, "--grid", 8, "--out", a)
    code, out, _ = run(capsys, "gen-data", "--seed", 3, "--n", 6, "--grid", 8, "--out", b)
    assert code == 0 and a.read_bytes() == b.read_bytes()
    assert json.loads(out)["n"] == 6


def test_gen_data_prefix_is_stable(tmp_path, capsys):
    short, long = tmp_path / "s.jsonl", tmp_path / "l.jsonl"
    run(capsys, "gen-data", "--seed", 3, "--n", 4, "--grid", 8, "--out", short)
    run(capsys, "gen-data", "--seed", 3, "--n", 9, "--grid", 8, "--out", long)
    assert long.read_text().splitlines()[:4] == short.read_text().splitlines()


def test_gen_data_rejects_empty_corpus(tmp_path, capsys):
    code, _, err = run(capsys, "gen-data", "--n", 0, "--out", tmp_path / "x.jsonl")
    assert code == 2 and "n must be ≥ 1" in err
    assert not (tmp_path / "x.jsonl").exists()


# ---------------------------------------------------------------- train

def test_train_writes_checkpoint_and_log(trained):
    root, _, ckpt = trained
    assert ckpt.read_bytes()[:4] == b"CGRU"
    log = json.loads((root / "run" / "train_log.json").read_text())
    assert len(log["epochs"]) == 2 and log["final_train_nll_per_token"] > 0
    assert log["epochs"][0]["train_reconstruction"] is not None


def test_negative_lambda_fails_before_training(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"dataset": str(tmp_path / "missing.jsonl"), "lambda_recon": -1.0,
                               "output_dir": str(tmp_path / "run")}))
    code, _, err = run(capsys, "train", "--config", cfg)
    assert code == 2 and "lambda_recon" in err
    assert not (tmp_path / "run").exists()


def test_lambda_zero_log_has_no_reconstruction(tmp_path, capsys, trained):
    _, data, _ = trained
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({**TRAIN, "max_epochs": 1, "lambda_recon": 0.0, "dataset": str(data),
                               "output_dir": str(tmp_path)}))
    code, out, _ = run(capsys, "train", "--config", cfg, "--pooling", "max")
    assert code == 0
    log = json.loads((tmp_path / "train_log.json").read_text())
    assert all(e["train_reconstruction"] is None for e in log["epochs"])
    assert load_checkpoint(tmp_path / "model.cgru").config.pooling == "max"


def test_split_dataset():
    items = list(range(10))
    assert split_dataset(items, 0.25) == (items[:7], items[7:])
    assert split_dataset(items, 0.0) == (items, items)


# ---------------------------------------------------------------- caption / eval

def test_caption_defaults_and_rerun_identity(trained, tmp_path, capsys):
    _, data, ckpt = trained
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    run(capsys, "caption", "--checkpoint", ckpt, "--dataset", data, "--out", a)
    run(capsys, "caption", "--checkpoint", ckpt, "--dataset", data, "--out", b, "--threads", 3)
    assert a.read_bytes() == b.read_bytes()
    lines = [json.loads(x) for x in a.read_text().splitlines()]
    assert lines[0]["header"]["beam_width"] == 3 and lines[0]["header"]["lambda_test"] == 1.0
    assert len(lines) == 17 and all(len(r["all_candidates"]) <= 3 for r in lines[1:])


def test_beam_one_is_greedy(trained, tmp_path, capsys):
    _, data, ckpt = trained
    out = tmp_path / "g.jsonl"
    run(capsys, "caption", "--checkpoint", ckpt, "--dataset", data, "--beam", 1, "--out", out)
    m = load_checkpoint(ckpt)
    for rec, s in zip(read_candidates(out).items(), load_dataset(data)):
        hyp = beam_search(m, encode(m.encoder, s.image), 1, m.config.max_len - 1)[0]
        assert rec == (s.id, decode_caption(m.vocab, hyp.tokens))


def test_caption_with_index_dataset(trained, tmp_path, capsys):
    _, data, ckpt = trained
    out = tmp_path / "n.jsonl"
    code, _, _ = run(capsys, "caption", "--checkpoint", ckpt, "--dataset", data, "--index-dataset", data,
                     "--out", out)
    assert code == 0 and len(read_candidates(out)) == 16


def test_caption_grid_mismatch(trained, tmp_path, capsys):
    _, _, ckpt = trained
    other = tmp_path / "big.jsonl"
    run(capsys, "gen-data", "--n", 2, "--grid", 16, "--out", other)
    code, _, err = run(capsys, "caption", "--checkpoint", ckpt, "--dataset", other, "--out", tmp_path / "c.jsonl")
    assert code == 2 and "checkpoint expects" in err


def test_eval_of_references_is_perfect(trained, tmp_path, capsys):
    _, data, _ = trained
    cands = tmp_path / "refs.jsonl"
    cands.write_text("".join(json.dumps({"id": s.id, "caption": s.captions[0]}) + "\n" for s in load_dataset(data)))
    code, out, _ = run(capsys, "eval", "--candidates", cands, "--dataset", data)
    rep = json.loads(out)
    assert code == 0
    assert (rep["bleu1"], rep["bleu2"], rep["bleu3"], rep["bleu4"], rep["rouge_l"]) == (1.0, 1.0, 1.0, 1.0, 1.0)


def test_eval_lists_missing_ids(trained, tmp_path, capsys):
    _, data, _ = trained
    cands = tmp_path / "c.jsonl"
    cands.write_text(json.dumps({"id": "nope", "caption": "a"}) + "\n")
    code, _, err = run(capsys, "eval", "--candidates", cands, "--dataset", data)
    assert code == 2 and "nope" in err


def test_bad_candidates_file(tmp_path):
    bad = tmp_path / "c.jsonl"
    bad.write_text('{"id": 1}\n')
    with pytest.raises(Exception, match="need 'id' and 'caption'"):
        read_candidates(bad)


# ---------------------------------------------------------------- sweep

def test_sweep_rows(trained, tmp_path, capsys):
    _, data, ckpt = trained
    out = tmp_path / "sweep.csv"
    code, _, _ = run(capsys, "sweep", "--checkpoint", ckpt, "--dataset", data, "--out", out)
    rows = list(csv.DictReader(out.open()))
    assert code == 0 and len(rows) == 8
    beam_rows = [r for r in rows if r["param"] == "beam_width"]
    assert [int(r["value"]) for r in beam_rows] == [1, 2, 3, 5]
    sizes = [float(r["mean_candidates"]) for r in beam_rows]
    assert sizes == sorted(sizes)


def test_sweep_lambda_rows_match_direct_rescoring(trained):
    _, data, ckpt = trained
    m, samples = load_checkpoint(ckpt), load_dataset(data)
    rows = sweep_rows(m, samples, [3], [0.0, 0.5, 1.0, 2.0])
    refs = {s.id: s.captions for s in samples}
    for row in rows[1:]:
        caps = {}
        for s in samples:
            enc = encode(m.encoder, s.image)
            hyps = beam_search(m, enc, 3, m.config.max_len - 1)
            caps[s.id] = decode_caption(m.vocab, rescore_candidates(m, enc, hyps, row["lambda_test"])[0].tokens)
        want = evaluate_corpus(caps, refs).to_dict()
        assert all(row[k] == want[k] for k in ("bleu1", "bleu4", "rouge_l", "cider_d", "meteor_lite"))


# ---------------------------------------------------------------- bench / grad-check

def test_bench_cells_ratio_and_warning(tmp_path, capsys):
    code, out, err = run(capsys, "bench-cells", "--dims", 16, "--iters", 50)
    res = json.loads(out)
    assert code == 0 and res["param_ratio"] == 0.75
    assert "noisy" in err and res["warnings"]


def test_grad_check_passes(capsys):
    code, out, _ = run(capsys, "grad-check", "--seed", 1)
    assert code == 0 and json.loads(out)["passed"]


def test_grad_check_catches_corrupted_rule(capsys):
    code, out, err = run(capsys, "grad-check", "--seed", 1, "--corrupt-op", "tanh")
    assert code == 1 and not json.loads(out)["passed"]
    assert "FAIL [" in err and "gradient rule of op 'tanh' was corrupted" in err


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "capforge", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "grad-check" in proc.stdout
