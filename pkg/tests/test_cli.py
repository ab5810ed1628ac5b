import csv

import pytest

from modflow.cli import main, read_config_file, UsageError

TRAIN = ["CCO", "C=O", "CC#N", "OCC(F)C", "C1CC1", "NC=O", "CCCC", "CC(C)O"]


@pytest.fixture
def corpus(tmp_path):
    p = tmp_path / "train.smi"
    p.write_text("\n".join(TRAIN) + "\n")
    return p


@pytest.fixture
def trained(tmp_path, corpus):
    out = tmp_path / "run"
    assert main(["train", "--data", str(corpus), "--epochs", "1", "--batch-size", "4", "--out", str(out)]) == 0
    return out


def _rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_missing_data_is_usage_error(tmp_path, capsys):
    missing = tmp_path / "nope.smi"
    assert main(["train", "--data", str(missing), "--out", str(tmp_path / "o")]) == 2
    assert str(missing) in capsys.readouterr().err


def test_bad_flags_and_config(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["fly"])
    assert exc.value.code == 2
    cfg = tmp_path / "c.cfg"
    cfg.write_text("# comment\nepochs = 3\nbogus = 1\n")
    with pytest.raises(UsageError):
        read_config_file(cfg)
    assert main(["train", "--config", str(cfg)]) == 2
    assert main(["train", "--mode", "forest", "--data", str(cfg)]) == 2


def test_config_file_and_flag_precedence(tmp_path, corpus):
    cfg = tmp_path / "c.cfg"
    out = tmp_path / "o"
    cfg.write_text(f"data = {corpus}\nepochs = 1\nbatch_size = 8\nlr = 0.5\nout = {out}\n")
    assert main(["train", "--config", str(cfg), "--lr", "0.002"]) == 0
    echo = (out / "config.echo").read_text()
    assert "lr=0.002" in echo and "batch_size=8" in echo


def test_train_outputs_and_determinism(tmp_path, corpus, trained):
    rows = _rows(trained / "loss.csv")
    assert rows[0] == ["epoch", "mean_loss", "nfe_mean"] and len(rows) == 2
    assert (trained / "checkpoints" / "epoch_1.mdfl").exists()
    again = tmp_path / "again"
    main(["train", "--data", str(corpus), "--epochs", "1", "--batch-size", "4", "--out", str(again)])
    assert (again / "loss.csv").read_bytes() == (trained / "loss.csv").read_bytes()
    assert corpus.read_text() == "\n".join(TRAIN) + "\n"


def test_resume_extends_loss_log(tmp_path, corpus, trained):
    ck = trained / "checkpoints" / "epoch_1.mdfl"
    assert main(["train", "--data", str(corpus), "--epochs", "2", "--batch-size", "4", "--out", str(trained),
                 "--resume", str(ck)]) == 0
    full = tmp_path / "full"
    main(["train", "--data", str(corpus), "--epochs", "2", "--batch-size", "4", "--out", str(full)])
    assert (trained / "loss.csv").read_bytes() == (full / "loss.csv").read_bytes()
    assert (trained / "checkpoints" / "epoch_2.mdfl").read_bytes() != b""


def test_tree_mode_writes_vocab(tmp_path, corpus):
    out = tmp_path / "tree"
    assert main(["train", "--data", str(corpus), "--mode", "tree", "--epochs", "1", "--out", str(out)]) == 0
    assert (out / "vocab.json").exists()


def test_generate_count_zero_and_determinism(tmp_path, corpus, trained):
    ck = str(trained / "checkpoints" / "epoch_1.mdfl")
    g0 = tmp_path / "g0"
    assert main(["generate", "--checkpoint", ck, "--data", str(corpus), "--count", "0", "--out", str(g0)]) == 0
    assert (g0 / "generated.smi").read_text() == ""
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert main(["generate", "--checkpoint", ck, "--data", str(corpus), "--count", "12", "--seed", "3",
                     "--out", str(d)]) == 0
    assert (a / "generated.smi").read_bytes() == (b / "generated.smi").read_bytes()
    names = [r[1] for r in _rows(a / "metrics.csv")[1:]]
    assert {"validity", "uniqueness", "novelty", "seconds_per_molecule"} <= set(names)


def test_eval_on_training_set_has_zero_novelty(tmp_path, corpus, trained):
    ck = str(trained / "checkpoints" / "epoch_1.mdfl")
    out = tmp_path / "ev"
    assert main(["eval", "--checkpoint", ck, "--data", str(corpus), "--generated", str(corpus),
                 "--heldout", str(corpus), "--out", str(out)]) == 0
    vals = {r[1]: float(r[2]) for r in _rows(out / "metrics.csv")[1:]}
    assert vals["novelty"] == 0.0 and vals["validity"] == 100.0 and vals["reconstruction"] == 100.0
    assert _rows(out / "hist.csv")[0][:5] == ["property", "bin_lo", "bin_hi", "count_ref", "count_gen"]


def test_encode_writes_latents(tmp_path, corpus, trained):
    out = tmp_path / "enc"
    ck = str(trained / "checkpoints" / "epoch_1.mdfl")
    assert main(["encode", "--checkpoint", ck, "--data", str(corpus), "--out", str(out)]) == 0
    rows = _rows(out / "latents.csv")
    assert rows[0][:3] == ["molecule", "node", "logdet"]
    assert len(rows) - 1 == sum(len([c for c in s if c.isalpha()]) for s in TRAIN)


def test_optimize_zero_step_keeps_seed(tmp_path, corpus, trained):
    out = tmp_path / "opt"
    ck = str(trained / "checkpoints" / "epoch_1.mdfl")
    assert main(["optimize", "--checkpoint", ck, "--data", str(corpus), "--smiles", "OCC(F)C", "--step", "0",
                 "--steps", "3", "--out", str(out)]) == 0
    rows = _rows(out / "optimize.csv")
    assert len(rows) == 5
    assert len({r[4] for r in rows[1:]}) == 1
    assert main(["optimize", "--checkpoint", ck, "--data", str(corpus), "--out", str(out)]) == 2


def test_toy_command(tmp_path):
    out = tmp_path / "toy"
    assert main(["toy", "--pattern", "chessboard", "--n", "2", "--epochs", "2", "--samples", "3",
                 "--out", str(out)]) == 0
    assert (out / "toy" / "target.pgm").read_text().startswith("P2\n2 2\n255\n")
    assert _rows(out / "toy" / "accuracy.csv")[0] == ["pattern", "n", "size", "accuracy"]
    assert main(["toy", "--pattern", "spiral", "--out", str(out)]) == 2
