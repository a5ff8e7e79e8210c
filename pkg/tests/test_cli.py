import numpy as np
import pytest

from rpe.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from rpe.model import ModelParams
from rpe.synthetic import compositional_kb, write_dataset

SMALL = ["--dim-entity", "8", "--dim-relation", "8", "--epochs", "3", "--lr", "0.01", "--batch-size", "40"]


@pytest.fixture
def data(tmp_path, monkeypatch):
    monkeypatch.setenv("RPE_CACHE_DIR", str(tmp_path / "cache"))
    monkeypatch.chdir(tmp_path)
    write_dataset(compositional_kb(num_entities=45, seed=3), tmp_path / "data")
    assert main(["preprocess", "data"]) == EXIT_OK
    return tmp_path


def train(out, *extra):
    return main(["train", "--data", "data", "--out", out, *SMALL, *extra])


class TestPreprocess:
    def test_summary_and_up_to_date(self, data, capsys):
        capsys.readouterr()
        assert main(["preprocess", "data"]) == EXIT_OK
        assert "up to date" in capsys.readouterr().out

    def test_summary_counts(self, tmp_path, monkeypatch, capsys):
        monkeypatch.chdir(tmp_path)
        write_dataset(compositional_kb(num_entities=45, seed=3), tmp_path / "d")
        assert main(["--cache-dir", "c", "preprocess", "d"]) == EXIT_OK
        out = dict(line.split("\t") for line in capsys.readouterr().out.splitlines())
        assert out["relations"] == "3"
        assert int(out["train"]) == len((tmp_path / "d" / "train.txt").read_text().splitlines())
        assert (tmp_path / "c").is_dir()

    def test_edited_input_invalidates(self, data, capsys):
        with open(data / "data" / "train.txt", "a") as fh:
            fh.write("e0\tr1\te99\n")
        assert train("run") == EXIT_DATA
        assert "rpe preprocess" in capsys.readouterr().err
        capsys.readouterr()
        assert main(["preprocess", "data"]) == EXIT_OK
        assert "rebuilding" in capsys.readouterr().out
        assert train("run") == EXIT_OK

    @pytest.mark.parametrize("eta", ["1.5", "0", "-0.1"])
    def test_bad_eta(self, data, eta):
        assert main(["preprocess", "data", "--eta", eta]) == EXIT_USAGE

    def test_missing_dataset(self, tmp_path):
        assert main(["--cache-dir", str(tmp_path), "preprocess", str(tmp_path / "nope")]) == EXIT_DATA

    def test_malformed_line(self, tmp_path):
        (tmp_path / "train.txt").write_text("a\tb\n")
        assert main(["--cache-dir", str(tmp_path / "c"), "preprocess", str(tmp_path)]) == EXIT_DATA


class TestTrain:
    def test_artifacts(self, data):
        assert train("run", "--mode", "acom") == EXIT_OK
        run = data / "run"
        for name in ("model.ckpt", "model.ckpt.json", "config.txt", "training_log.tsv", "manifest.json"):
            assert (run / name).exists()
        assert "mode = acom" in (run / "config.txt").read_text()
        assert len((run / "training_log.tsv").read_text().splitlines()) == 4

    def test_config_file_and_override(self, data):
        (data / "grid.cfg").write_text("n = 6\nm = 6\nmode = pc+mcom\nepochs = 2\nlr = 0.01\n")
        assert main(["train", "--data", "data", "--config", "grid.cfg", "--out", "run", "--epochs", "1"]) == EXIT_OK
        text = (data / "run" / "config.txt").read_text()
        assert "epochs = 1" in text and "mode = pc+mcom" in text and "sampling = type_constrained" in text
        assert ModelParams.load(data / "run" / "model.ckpt").n == 6

    def test_best_config_flags_accepted(self, data):
        # validation only: the full setting is too slow for a unit test, so stop at one tiny epoch
        argv = ["train", "--data", "data", "--out", "run", "--mode", "acom", "--dim-entity", "100",
                "--dim-relation", "100", "--margin-rel", "2", "--margin-path", "5", "--lr", "0.0001",
                "--batch-size", "4800", "--lam", "1", "--eta", "0.05", "--epochs", "1"]
        assert main(argv) == EXIT_OK

    @pytest.mark.parametrize("extra", [["--epochs", "0"], ["--mode", "mcom", "--dim-entity", "50",
                                                            "--dim-relation", "100"],
                                       ["--mode", "nope"], ["--eta", "1.5"], ["--sampling", "x"]])
    def test_rejected(self, data, extra):
        assert main(["train", "--data", "data", "--out", "run", *extra]) == EXIT_USAGE

    def test_evidence_mismatch_names_preprocess(self, data, capsys):
        assert train("run", "--eta", "0.02") == EXIT_DATA
        assert "rpe preprocess data --max-path-len 2 --eta 0.02" in capsys.readouterr().err

    def test_lambda_zero_needs_no_evidence(self, data):
        (data / "cache").joinpath(next(p.name for p in (data / "cache").iterdir()), "paths.bin").unlink()
        assert train("run", "--lam", "0") == EXIT_OK
        assert train("run2") == EXIT_DATA

    def test_not_preprocessed(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        write_dataset(compositional_kb(num_entities=30), tmp_path / "data")
        assert main(["--cache-dir", "empty", "train", "--data", "data", "--out", "run"]) == EXIT_DATA

    def test_warm_start_lineage(self, data):
        import json
        assert train("init", "--mode", "initial") == EXIT_OK
        assert train("acom", "--mode", "acom", "--init", "rpe_initial_warmstart",
                     "--warm-start", "init/model.ckpt") == EXIT_OK
        lineage = json.loads((data / "acom" / "manifest.json").read_text())["lineage"]
        assert [x["init"] for x in lineage] == ["final", "rpe_initial_warmstart", "final"]

    def test_seeded_runs_identical(self, data):
        assert train("a", "--seed", "4") == EXIT_OK
        assert train("b", "--seed", "4") == EXIT_OK
        assert (data / "a" / "model.ckpt").read_bytes() == (data / "b" / "model.ckpt").read_bytes()


class TestEvaluate:
    def test_link_prediction_report(self, data, capsys):
        assert train("run") == EXIT_OK
        capsys.readouterr()
        assert main(["eval-lp", "--data", "data", "--checkpoint", "run/model.ckpt", "--by-category",
                     "--out", "lp.tsv"]) == EXIT_OK
        assert "Hits@10" in capsys.readouterr().out
        rows = dict(line.split("\t") for line in (data / "lp.tsv").read_text().splitlines()[1:])
        assert 0 <= float(rows["hits10_filter"]) <= 100

    def test_classification_report(self, data):
        assert train("run") == EXIT_OK
        assert main(["eval-tc", "--data", "data", "--checkpoint", "run/model.ckpt", "--out", "tc.tsv"]) == EXIT_OK
        rows = dict(line.split("\t") for line in (data / "tc.tsv").read_text().splitlines()[1:])
        assert 0 <= float(rows["accuracy"]) <= 100

    def test_checkpoint_from_other_data(self, data, tmp_path):
        assert train("run") == EXIT_OK
        write_dataset(compositional_kb(num_entities=45, seed=9), tmp_path / "other")
        assert main(["preprocess", "other"]) == EXIT_OK
        assert main(["eval-lp", "--data", "other", "--checkpoint", "run/model.ckpt"]) == EXIT_DATA


class TestInspectExport:
    def test_top_path(self, data, capsys):
        capsys.readouterr()
        assert main(["inspect", "--data", "data", "--relation", "r3", "-k", "1"]) == EXIT_OK
        assert capsys.readouterr().out.splitlines()[1] == "r1 -> r2\t1.0000"

    def test_no_paths(self, tmp_path, monkeypatch, capsys):
        monkeypatch.chdir(tmp_path)
        (tmp_path / "d").mkdir()
        (tmp_path / "d" / "train.txt").write_text("a\tr\tb\nc\ts\td\n")
        assert main(["--cache-dir", "c", "preprocess", "d"]) == EXIT_OK
        capsys.readouterr()
        assert main(["--cache-dir", "c", "inspect", "--data", "d", "--relation", "r"]) == EXIT_OK
        assert "no reliable paths" in capsys.readouterr().out

    def test_unknown_relation_suggests(self, data, capsys):
        assert main(["inspect", "--data", "data", "--relation", "r33"]) == EXIT_USAGE
        assert "r3" in capsys.readouterr().err

    def test_k_zero(self, data):
        assert main(["inspect", "--data", "data", "--relation", "r3", "-k", "0"]) == EXIT_USAGE

    def test_export(self, data):
        assert train("run") == EXIT_OK
        assert main(["export", "--data", "data", "--checkpoint", "run/model.ckpt", "--out", "exp"]) == EXIT_OK
        lines = (data / "exp" / "entity_embeddings.tsv").read_text().splitlines()
        params = ModelParams.load(data / "run" / "model.ckpt")
        assert len(lines) == params.num_entities and len(lines[0].split("\t")) == params.n + 1
        assert np.load(data / "exp" / "projections.npy").shape == params.proj.shape


def test_no_command():
    assert main([]) == EXIT_USAGE
