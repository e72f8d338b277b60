import json
import os

import pytest

from divkd import autodiff as ad
from divkd import cli, model
from _pipeline import run_pipeline


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    return run_pipeline(tmp_path_factory.mktemp("run"))


def test_pipeline_artifacts(pipeline):
    meta = json.load(open(os.path.join(pipeline, "data", "corpus.json")))
    assert sum(meta["sizes"].values()) == 80
    reps = [json.loads(x) for x in open(os.path.join(pipeline, "eval", "report.jsonl"))]
    assert [r["name"] for r in reps] == ["teacher.ckpt", "student.ckpt"]
    assert all(0.0 <= r["answer_accuracy"] <= 1.0 for r in reps)
    cfg = open(os.path.join(pipeline, "student", "config.txt")).read()
    assert "hidden_dim = 8" in cfg and "lam = 0.8" in cfg
    echo = json.load(open(os.path.join(pipeline, "student", "command.json")))
    assert echo["cfg_epochs"] == "2"
    store, mcfg = cli.load_model(os.path.join(pipeline, "student", "student.ckpt"))
    assert "cvae.proj.W" in store and mcfg.hidden_dim == 8


def test_dumps_are_consistent(pipeline):
    beams = model.read_beam_dump(os.path.join(pipeline, "beams", "beams.jsonl"))
    assert beams and all(1 <= len(b) <= 3 for b in beams.values())
    for line in open(os.path.join(pipeline, "labels", "distilled.jsonl")):
        assert json.loads(line)["correct"] is True


def test_inspect(pipeline, capsys):
    dump = os.path.join(pipeline, "beams", "beams.jsonl")
    code = cli.main(["inspect", "--beams", dump, "--beams", dump, "--corpus", os.path.join(pipeline, "data"),
                     "--limit", "2"])
    out = capsys.readouterr().out
    assert code == 0 and out.count("== ") == 2 and "gold:" in out


def test_student_refuses_mismatched_teacher(pipeline, tmp_path):
    code = cli.main(["train-student", "--corpus", os.path.join(pipeline, "data"), "--hidden-dim", "12",
                     "--epochs", "1", "--batch-size", "10",
                     "--teacher-checkpoint", os.path.join(pipeline, "teacher", "teacher.ckpt"),
                     "--out-dir", str(tmp_path / "s")])
    assert code == cli.EXIT_DATA


def test_exit_codes(tmp_path):
    assert cli.main(["train-teacher", "--corpus", str(tmp_path / "missing"), "--out-dir", str(tmp_path)]) == \
        cli.EXIT_DATA
    assert cli.main(["gen-corpus", "--n", "10", "--ratios", "0.5,0.6,0.1", "--out-dir", str(tmp_path / "c")]) == \
        cli.EXIT_USAGE
    cli.main(["gen-corpus", "--n", "30", "--out-dir", str(tmp_path / "c")])
    assert cli.main(["train-teacher", "--corpus", str(tmp_path / "c"), "--epochs", "-1",
                     "--out-dir", str(tmp_path / "t")]) == cli.EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        cli.main(["no-such-command"])
    assert exc.value.code == cli.EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        cli.main(["train-student", "--corpus", str(tmp_path / "c"), "--out-dir", str(tmp_path / "s")])
    assert exc.value.code == cli.EXIT_USAGE


def test_config_file_and_flag_precedence(tmp_path):
    cli.main(["gen-corpus", "--n", "30", "--out-dir", str(tmp_path / "c")])
    conf = tmp_path / "conf.txt"
    conf.write_text("epochs = 1\nhidden_dim = 6  # small\nembed_dim = 4\nbatch_size = 10\nlatent_dim = 2\n")
    code = cli.main(["train-teacher", "--corpus", str(tmp_path / "c"), "--config", str(conf), "--hidden-dim", "4",
                     "--out-dir", str(tmp_path / "t"), "--max-len", "7"])
    assert code == 0
    store = ad.load_checkpoint(tmp_path / "t" / "teacher.ckpt")
    assert store.meta["model"]["hidden_dim"] == 4 and store.meta["train"]["epochs"] == 1
