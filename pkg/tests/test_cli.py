import json

import pytest

from egoforecast import pipeline as pl
from egoforecast.cli import dispatch

TINY = ["data.train=8", "data.val=4", "data.test=4", "train.hidden=6", "train.embed=4", "train.batch_size=4"]


def run(out, *argv):
    return dispatch([argv[0], "--out", str(out), *argv[1:], *TINY])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    common = ["--variants", "const-vel,rnn,box-const-vel,rnn-p", "--epochs", "1", "--k", "3", "--n-dropout", "2"]
    assert run(out, "gen-data") == 0
    assert run(out, "train-ego", *common) == 0
    assert run(out, "train-joint", *common) == 0
    return out, common


class TestPipeline:
    def test_eval_reports_requested_rows(self, trained, capsys):
        out, common = trained
        assert run(out, "eval", "--variants", "const-vel,rnn", "--k", "3") == 0
        text = capsys.readouterr().out
        assert "Const-Vel" in text and "RNN " in text
        rows = [r for r in (out / "reports" / "report.tsv").read_text().splitlines() if r and not r.startswith("#")]
        assert [r.split("\t")[1] for r in rows[1:]] == ["const-vel", "rnn"]

    def test_missing_checkpoint_is_reported(self, trained, capsys):
        out, _ = trained
        assert run(out, "eval", "--variants", "rnn-ae") == 1
        err = capsys.readouterr().err.strip()
        assert err.startswith("error: MissingCheckpoint") and "rnn-ae" in err
        assert len(err.splitlines()) == 1

    def test_effective_config_and_manifest(self, trained):
        out, _ = trained
        cfg = json.loads((out / "config.train-ego.json").read_text())
        assert cfg["train"]["ego_epochs"] == 1 and cfg["train"]["hidden"] == 6
        manifest = (out / pl.MANIFEST).read_text()
        assert "data/test.jsonl" in manifest and "checkpoints/ego-rnn.ckpt" in manifest

    def test_sample_and_plot_are_deterministic(self, trained):
        out, common = trained
        assert run(out, "sample", "--scene", "test-0001", "--variant", "rnn-p", *common) == 0
        assert run(out, "plot", "--scene", "test-0001", "--variant", "rnn-p") == 0
        first = (pl.plot_path(out, "test-0001", "rnn-p")).read_bytes()
        dump = (pl.sample_path(out, "test-0001", "rnn-p")).read_bytes()
        assert run(out, "sample", "--scene", "test-0001", "--variant", "rnn-p", *common) == 0
        assert run(out, "plot", "--scene", "test-0001", "--variant", "rnn-p") == 0
        assert pl.plot_path(out, "test-0001", "rnn-p").read_bytes() == first
        assert pl.sample_path(out, "test-0001", "rnn-p").read_bytes() == dump
        assert first.startswith(b"<?xml")

    def test_plot_without_dump(self, trained, capsys):
        out, _ = trained
        assert run(out, "plot", "--scene", "test-0002", "--variant", "rnn") == 1
        assert "sample" in capsys.readouterr().err

    def test_unknown_scene(self, trained, capsys):
        out, common = trained
        assert run(out, "sample", "--scene", "test-9999", "--variant", "rnn", *common) == 1
        assert "test-9999" in capsys.readouterr().err


class TestConfig:
    def test_gen_data_byte_identical(self, tmp_path):
        assert run(tmp_path / "a", "gen-data", "--seed", "4") == 0
        assert run(tmp_path / "b", "gen-data", "--seed", "4") == 0
        for split in ("train", "val", "test"):
            assert pl.data_path(tmp_path / "a", split).read_bytes() == pl.data_path(tmp_path / "b", split).read_bytes()
        assert (tmp_path / "a" / pl.MANIFEST).read_bytes() == (tmp_path / "b" / pl.MANIFEST).read_bytes()

    def test_unknown_override_key(self, tmp_path, capsys):
        assert dispatch(["gen-data", "--out", str(tmp_path), "train.bogus=1"]) == 1
        assert "train.bogus" in capsys.readouterr().err

    def test_override_without_equals(self, tmp_path, capsys):
        assert dispatch(["gen-data", "--out", str(tmp_path), "seed"]) == 1
        assert "key=value" in capsys.readouterr().err

    def test_precedence(self, tmp_path):
        cfg_file = tmp_path / "c.json"
        cfg_file.write_text(json.dumps({"seed": 1, "eval": {"k": 4}, "train": {"hidden": 16}}))
        cfg = pl.resolve_config(cfg_file, ["eval.k=6", "seed=2"], {"k": 8})
        assert cfg["eval"]["k"] == 8
        assert cfg["seed"] == 2 and cfg["train"]["seed"] == 2 and cfg["eval"]["seed"] == 2
        assert cfg["train"]["hidden"] == 16

    def test_unknown_variant(self, tmp_path, capsys):
        assert dispatch(["eval", "--out", str(tmp_path), "--variants", "rnn-xyz"]) == 1
        assert "rnn-xyz" in capsys.readouterr().err

    def test_output_root_from_environment(self, tmp_path, monkeypatch):
        monkeypatch.setenv(pl.OUT_ENV, str(tmp_path / "env"))
        assert pl.default_output_root() == tmp_path / "env"

    def test_argparse_errors_exit_2(self):
        with pytest.raises(SystemExit) as exc:
            dispatch(["no-such-command"])
        assert exc.value.code == 2
