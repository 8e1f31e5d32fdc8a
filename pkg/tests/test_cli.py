import json

import pytest
import yaml

from mtplm import cli, data, model
from mtplm.evalharness import tasks


def write_corpus(path, n=40, seed=7):
    import numpy as np
    from conftest import random_sequence
    rng = np.random.default_rng(seed)
    with open(path, "wb") as fh:
        data.write_fasta([data.SequenceRecord(f"r{i}", random_sequence(rng, int(rng.integers(5, 80))))
                          for i in range(n)], fh)
    return path


@pytest.fixture
def fasta(tmp_path):
    return write_corpus(tmp_path / "tiny.fasta")


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_corrupt_byte_identical(tmp_path, fasta, capsys):
    assert run("corrupt", fasta, "--out", tmp_path / "a.jsonl", "--seed", 7) == 0
    assert run("corrupt", fasta, "--out", tmp_path / "b.jsonl", "--seed", 7) == 0
    a = (tmp_path / "a.jsonl").read_bytes()
    assert a == (tmp_path / "b.jsonl").read_bytes()
    rows = [json.loads(line) for line in a.decode().splitlines()]
    assert len(rows) == 40 and {r["task"] for r in rows} <= {"mlm", "completion"}
    assert all(r["p"] is None for r in rows if r["task"] == "completion")
    stats = json.loads((tmp_path / "a.jsonl.stats.json").read_text())
    assert stats["examples"] == 40 and sum(stats["masked_fraction_histogram"]["counts"]) == stats["tasks"]["mlm"]


def test_corrupt_workers_do_not_change_output(tmp_path):
    big = write_corpus(tmp_path / "big.fasta", n=600, seed=2)
    assert run("corrupt", big, "--out", tmp_path / "one.jsonl", "--seed", 3) == 0
    assert run("--workers", 3, "corrupt", big, "--out", tmp_path / "three.jsonl", "--seed", 3) == 0
    assert (tmp_path / "one.jsonl").read_bytes() == (tmp_path / "three.jsonl").read_bytes()


def test_corrupt_stats_near_one_third(tmp_path, capsys):
    big = write_corpus(tmp_path / "big.fasta", n=3000, seed=5)
    assert run("corrupt", big, "--out", tmp_path / "o.jsonl", "--task", "mlm", "--seed", 1) == 0
    freq = json.loads((tmp_path / "o.jsonl.stats.json").read_text())["masking_probability_frequency"]
    # exact 99.9% binomial interval for n=3000, p=1/3 is roughly ±0.029
    assert set(freq) == {"0.15", "0.2", "0.3"}
    assert all(abs(f - 1 / 3) < 0.029 for f in freq.values())


def test_corrupt_missing_file(tmp_path, capsys):
    missing = tmp_path / "nope.fasta"
    assert run("corrupt", missing, "--out", tmp_path / "o.jsonl") == 2
    assert str(missing) in capsys.readouterr().err


def test_corrupt_malformed_fasta(tmp_path, capsys):
    bad = tmp_path / "bad.fasta"
    bad.write_text("MKT\n>x\nAC\n")
    assert run("corrupt", bad, "--out", tmp_path / "o.jsonl") == 2


def test_usage_error_exit_1(capsys):
    assert run("corrupt") == 1
    assert run("no-such-command") == 1


def test_dry_run_large(capsys):
    assert run("pretrain", "--preset", "ankh3-large", "--dry-run") == 0
    out = json.loads(capsys.readouterr().out)
    assert (out["encoder_parameters"], out["decoder_parameters"], out["total_parameters"]) == (
        1_151_879_680, 727_169_536, 1_879_049_216)


def test_dry_run_xl_from_config(tmp_path, capsys):
    cfg = tmp_path / "xl.yaml"
    cfg.write_text(yaml.safe_dump({"preset": "ankh3-xl", "optimizer": "adafactor", "num_sentinel_tokens": 225}))
    assert run("pretrain", "--config", cfg, "--dry-run") == 0
    assert json.loads(capsys.readouterr().out)["total_parameters"] == 5_730_907_136


def test_invalid_config_lists_every_key(tmp_path, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text(yaml.safe_dump({"embedding_dim": -3, "optimizer": "adam", "bogus": 1, "learning_rate": 0}))
    assert run("pretrain", "--config", cfg, "--dry-run") == 1
    err = capsys.readouterr().err
    for key in ("embedding_dim", "optimizer", "bogus", "learning_rate"):
        assert key in err


OVERFIT = {"embedding_dim": 16, "encoder_layers": 1, "decoder_layers": 1, "feedforward_dim": 32,
           "num_heads": 2, "kv_dim": 8, "batch_size": 4, "sequence_length": 48, "warmup_steps": 20,
           "learning_rate": 3e-3, "seed": 4}


def test_pretrain_resume_and_manifest(tmp_path, fasta, capsys):
    cfg = tmp_path / "run.yaml"
    cfg.write_text(yaml.safe_dump(OVERFIT))
    full, part = tmp_path / "full", tmp_path / "part"
    assert run("pretrain", "--config", cfg, "--corpus", fasta, "--out-dir", full, "--num-steps", 6) == 0
    assert run("pretrain", "--config", cfg, "--corpus", fasta, "--out-dir", part, "--num-steps", 3) == 0
    assert run("pretrain", "--config", cfg, "--corpus", fasta, "--out-dir", part, "--num-steps", 6,
               "--resume", part / "final.bin") == 0
    assert (full / "loss_log.jsonl").read_bytes() == (part / "loss_log.jsonl").read_bytes()
    manifest = json.loads((full / "final.bin.manifest.json").read_text())
    assert manifest["subcommand"] == "pretrain" and manifest["seeds"] == [4]
    assert manifest["outputs"][str(full / "final.bin")] == cli.sha256_file(full / "final.bin")


def test_rerun_reproduces_bitwise(tmp_path, fasta):
    out = tmp_path / "a.jsonl"
    assert run("corrupt", fasta, "--out", out, "--seed", 11) == 0
    first = out.read_bytes()
    out.unlink()
    assert run("rerun", f"{out}.manifest.json") == 0
    assert out.read_bytes() == first


@pytest.fixture(scope="module")
def eval_setup(tmp_path_factory):
    root = tmp_path_factory.mktemp("eval")
    corpus = write_corpus(root / "c.fasta", n=8)
    assert run("pretrain", "--corpus", corpus, "--out-dir", root / "ckpt", "--num-steps", 0) == 0
    assert run("synth-ssp3", "--n", 160, "--seed", 0, "--out", root / "ssp3.jsonl") == 0
    return root


def test_evaluate_synthetic_ssp3(eval_setup, capsys):
    out = eval_setup / "res.json"
    assert run("evaluate", "--checkpoint", eval_setup / "ckpt" / "final.bin", "--task-file",
               eval_setup / "ssp3.jsonl", "--task", "ssp3", "--prefix", "NLU", "--out", out) == 0
    (block,) = json.loads(out.read_text())["results"]
    assert block["seeds"] == [7, 0, 42]
    assert block["metrics"]["accuracy"]["mean"] >= 0.95
    assert (eval_setup / "res.json.manifest.json").exists()


def test_evaluate_both_prefixes(eval_setup, tmp_path):
    small = tmp_path / "small.jsonl"
    small.write_text("\n".join((eval_setup / "ssp3.jsonl").read_text().splitlines()[:6]) + "\n")
    out = tmp_path / "res.json"
    assert run("evaluate", "--checkpoint", eval_setup / "ckpt" / "final.bin", "--task-file", small,
               "--task", "ssp3", "--seeds", "1", "--epochs", "1", "--out", out) == 0
    blocks = json.loads(out.read_text())["results"]
    assert [b["prefix"] for b in blocks] == ["NLU", "S2S"]


def test_evaluate_unknown_task(eval_setup, tmp_path, capsys):
    assert run("evaluate", "--checkpoint", eval_setup / "ckpt" / "final.bin", "--task-file",
               eval_setup / "ssp3.jsonl", "--task", "ss9", "--out", tmp_path / "r.json") == 1
    err = capsys.readouterr().err
    assert all(kind in err for kind in ("ssp3", "ssp8", "fluorescence", "gb1", "contact"))


def test_evaluate_malformed_task_file(eval_setup, tmp_path, capsys):
    bad = tmp_path / "bad.jsonl"
    bad.write_text(json.dumps({"sequence": "MK", "labels": "HE"}) + "\n" + "not json\n")
    assert run("evaluate", "--checkpoint", eval_setup / "ckpt" / "final.bin", "--task-file", bad,
               "--task", "ssp3", "--out", tmp_path / "r.json") == 2
    assert "2" in capsys.readouterr().err


def test_vocab_dump(tmp_path):
    out = tmp_path / "vocab.tsv"
    assert run("vocab", "--out", out) == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 256 and lines[3] == "3\t[NLU]" and lines[30] == "30\t<extra_id_0>"


def test_synthetic_task_is_residue_determined():
    rows = tasks.synthetic_ssp3(20, 3)
    assert rows == tasks.synthetic_ssp3(20, 3)
    assert all(len(r["sequence"]) == len(r["labels"]) for r in rows)
