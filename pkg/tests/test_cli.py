import json

import numpy as np
import pytest

from sacnmt.cli import EXIT_INVALID, EXIT_OK, EXIT_USAGE, LOCK_FILE, git_hash, main
from sacnmt.model import ModelConfig, Seq2Seq

TINY_TRAIN = dict(emb_dim=8, hidden_dim=8, batch_size=16, actor_max_epochs=2, critic_epochs=1, sac_max_epochs=1,
                  buffer_size=100, lr_actor_pretrain=1e-2)


def _gen(out, seed=1, kind="ambiguous-lexicon"):
    return main(["gen-synth", "--out", str(out), "--kind", kind, "--n-pairs", "80", "--valid-size", "20",
                 "--max-len", "5", "--seed", str(seed)])


def _config(tmp_path, **train):
    data = tmp_path / "data"
    if not data.exists():
        assert _gen(data) == EXIT_OK
    cfg = tmp_path / "cfg.yaml"
    body = {"train": {**TINY_TRAIN, **train},
            "data": {k: f"data/{k.replace('_', '.')}" for k in ("train_src", "train_tgt", "valid_src", "valid_tgt")}}
    cfg.write_text(json.dumps(body))     # JSON is valid YAML
    return cfg


def test_gen_synth_is_reproducible(tmp_path):
    assert _gen(tmp_path / "a") == EXIT_OK
    assert _gen(tmp_path / "b") == EXIT_OK
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert {"train.src", "train.tgt", "train.mlt.tsv", "valid.mlt.tsv", "manifest.json"} <= set(names)
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["files"]["train.src"] == git_hash(tmp_path / "a" / "train.src")
    assert _gen(tmp_path / "c", seed=2) == EXIT_OK
    assert (tmp_path / "c" / "train.src").read_bytes() != (tmp_path / "a" / "train.src").read_bytes()


def test_git_hash_matches_git(tmp_path):
    (tmp_path / "f").write_bytes(b"hello\n")
    # `git hash-object` of "hello\n"
    assert git_hash(tmp_path / "f") == "ce013625030ba8dba906f756967f9e9ca394464a"


def test_gen_synth_rejects_bad_spec(tmp_path, capsys):
    rc = main(["gen-synth", "--out", str(tmp_path), "--kind", "copy", "--min-len", "5", "--max-len", "2"])
    assert rc == EXIT_INVALID
    assert "error" in capsys.readouterr().err


def test_usage_errors_exit_2(tmp_path):
    assert main([]) == EXIT_USAGE
    assert main(["gen-synth"]) == EXIT_USAGE
    assert main(["train", "--config", "x", "--mode", "rl", "--out", str(tmp_path)]) == EXIT_USAGE


def test_config_problems_reported_together(tmp_path, capsys):
    cfg = _config(tmp_path, alpha=-1, lr_joint=0)
    rc = main(["train", "--config", str(cfg), "--mode", "mle", "--out", str(tmp_path / "run"),
               "--set", "batch_size=0"])
    assert rc == EXIT_INVALID
    err = capsys.readouterr().err
    assert "alpha" in err and "lr_joint" in err and "batch_size" in err


def test_flags_override_file(tmp_path):
    cfg = _config(tmp_path, seed=5, actor_max_epochs=3)
    run = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--mode", "mle", "--out", str(run), "--seed", "9",
                 "--set", "actor_max_epochs=1"]) == EXIT_OK
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["seed"] == 9 and manifest["config"]["actor_max_epochs"] == 1
    assert manifest["config"]["emb_dim"] == 8


def test_missing_data_file(tmp_path):
    cfg = _config(tmp_path)
    (tmp_path / "data" / "valid.tgt").unlink()
    assert main(["train", "--config", str(cfg), "--mode", "mle", "--out", str(tmp_path / "run")]) == EXIT_INVALID


@pytest.mark.parametrize("mode", ["mle", "sac-bleu", "sac-unsup"])
def test_train_outputs_per_mode(tmp_path, mode):
    run = tmp_path / "run"
    assert main(["train", "--config", str(_config(tmp_path)), "--mode", mode, "--out", str(run)]) == EXIT_OK
    files = {p.name for p in run.iterdir()}
    assert {"policy.npz", "report.csv", "manifest.json", "src.vocab", "tgt.vocab"} <= files
    assert ("critic_main1.npz" in files) == (mode == "sac-bleu")
    assert ("discriminator.npz" in files) == (mode == "sac-unsup")
    assert LOCK_FILE not in files
    manifest = json.loads((run / "manifest.json").read_text())
    for name, entry in manifest["artifacts"].items():
        assert entry["hash"] == git_hash(run / entry["path"]), name
    assert set(manifest["timestamps"]) == {"started", "finished"}


def test_same_seed_same_reports(tmp_path):
    cfg = _config(tmp_path)
    for name in ("a", "b"):
        assert main(["train", "--config", str(cfg), "--mode", "sac-bleu", "--out", str(tmp_path / name)]) == EXIT_OK
    for f in ("report.csv", "pretrain_actor.csv", "pretrain_critic.csv", "policy.npz"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_lock_rejects_concurrent_run(tmp_path):
    run = tmp_path / "run"
    run.mkdir()
    (run / LOCK_FILE).write_text("123\n")
    assert main(["train", "--config", str(_config(tmp_path)), "--mode", "mle", "--out", str(run)]) == EXIT_INVALID
    assert (run / LOCK_FILE).exists()


def test_resume(tmp_path):
    cfg = _config(tmp_path)
    run, full = tmp_path / "run", tmp_path / "full"
    assert main(["train", "--config", str(cfg), "--mode", "sac-bleu", "--out", str(full)]) == EXIT_OK
    assert main(["train", "--config", str(cfg), "--mode", "sac-bleu", "--out", str(run), "--max-epochs", "1"]) == 0
    assert not (run / "policy.npz").exists()
    assert main(["train", "--config", str(cfg), "--mode", "mle", "--out", str(run), "--resume"]) == EXIT_INVALID
    assert main(["train", "--config", str(cfg), "--mode", "sac-bleu", "--out", str(run), "--resume"]) == EXIT_OK
    assert (run / "report.csv").read_bytes() == (full / "report.csv").read_bytes()
    assert main(["train", "--config", str(cfg), "--mode", "mle", "--out", str(tmp_path / "new"),
                 "--resume"]) == EXIT_INVALID


def _trained(tmp_path):
    run = tmp_path / "run"
    assert main(["train", "--config", str(_config(tmp_path)), "--mode", "mle", "--out", str(run)]) == EXIT_OK
    return run


def test_translate_and_unk_sidecar(tmp_path):
    run = _trained(tmp_path)
    src = tmp_path / "in.txt"
    src.write_text("w1 amb0 ctx0.0.0\nnever-seen w2\n")
    out = tmp_path / "out.txt"
    assert main(["translate", "--checkpoint", str(run / "policy.npz"), "--input", str(src),
                 "--output", str(out)]) == EXIT_OK
    assert len(out.read_text().splitlines()) == 2
    side = json.loads((tmp_path / "out.txt.unk.json").read_text())
    assert side["lines"] == 2
    lines = out.read_text().splitlines()
    assert side["unk_line_numbers"] == [i + 1 for i, l in enumerate(lines) if "<unk>" in l.split()]


def test_translate_rejects_vocab_mismatch(tmp_path):
    run = _trained(tmp_path)
    (tmp_path / "small.vocab").write_text("a\nb\n")
    rc = main(["translate", "--checkpoint", str(run / "policy.npz"), "--input", str(tmp_path / "data" / "valid.src"),
               "--output", str(tmp_path / "o"), "--tgt-vocab", str(tmp_path / "small.vocab")])
    assert rc == EXIT_INVALID


def test_translate_rejects_non_policy_checkpoint(tmp_path):
    m = Seq2Seq(ModelConfig(8, 8, 4, 4), np.random.default_rng(0))
    m.save(tmp_path / "c.npz", {"role": "main"})
    (tmp_path / "in").write_text("a\n")
    assert main(["translate", "--checkpoint", str(tmp_path / "c.npz"), "--input", str(tmp_path / "in"),
                 "--output", str(tmp_path / "o")]) == EXIT_INVALID


def test_evaluate_report(tmp_path):
    d = tmp_path / "data"
    _gen(d)
    out = tmp_path / "ev.csv"
    rc = main(["evaluate", "--hyp", str(d / "valid.tgt"), "--ref", str(d / "valid.tgt"), "--mlt",
               str(d / "valid.mlt.tsv"), "--baseline", str(d / "valid.tgt"), "--freq-report", str(d / "train.tgt"),
               "--out", str(out)])
    assert rc == EXIT_OK
    lines = out.read_text().splitlines()
    assert lines[0] == "metric,value,baseline,p_value,significant"
    rows = {l.split(",")[0]: l.split(",") for l in lines[1:]}
    assert float(rows["bleu"][1]) == 100.0 and float(rows["ter"][1]) == 0.0
    # identical systems are never significant
    assert rows["bleu"][4] == "0" and rows["ter"][4] == "0"
    assert float(rows["lta"][1]) == 1.0 and float(rows["ali"][1]) == 1.0
    freq = (tmp_path / "ev.freq.csv").read_text().splitlines()
    assert freq[0] == "percentile,system,reference,baseline"


def test_evaluate_minimal_and_misaligned(tmp_path):
    d = tmp_path / "data"
    _gen(d)
    assert main(["evaluate", "--hyp", str(d / "valid.tgt"), "--ref", str(d / "valid.tgt")]) == EXIT_OK
    assert main(["evaluate", "--hyp", str(d / "train.tgt"), "--ref", str(d / "valid.tgt")]) == EXIT_INVALID
    assert main(["evaluate", "--hyp", str(d / "nope"), "--ref", str(d / "valid.tgt")]) == EXIT_INVALID
