import pytest

from conftest import TINY_PIPELINE, run_cli_pipeline
from sigmarec.cli import build_parser, main
from sigmarec.generator import parse_result
from sigmarec.index import load_index
from sigmarec.tensorio import read_tensor


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli")
    run_cli_pipeline(out)
    return out


def test_artifacts(pipeline):
    for name in ("world", "text_emb.sgma", "pairs.tsv", "rqvae", "sids.tsv", "sft.tsv", "model", "index",
                 "metrics.csv", "u2i.tsv"):
        assert (pipeline / name).exists(), name
    emb = read_tensor(pipeline / "text_emb.sgma")
    assert emb.shape[0] == 300
    assert load_index(pipeline / "index").ell == 1


def test_generate_prints_ranked_list(pipeline, capsys):
    argv = ["--config", str(pipeline / "tiny.cfg"), "--seed", "7", "--out-dir", str(pipeline)]
    assert main(argv + ["generate", "--user", "0", "--task", "Season", "--constraint", "season:1"]) == 0
    rows = parse_result(capsys.readouterr().out)
    assert 0 < len(rows) <= 20
    probs = [r[2] for r in rows]
    assert probs == sorted(probs, reverse=True)
    assert main(argv + ["generate", "--user", "0", "--no-apf", "--ann-mode", "approx"]) == 0
    assert parse_result(capsys.readouterr().out)


def test_metrics_csv(pipeline):
    lines = (pipeline / "metrics.csv").read_text().splitlines()
    assert lines[0] == "config_id,task,hr1,hr5,hr10,hr20,wall_seconds"
    assert any(line.startswith("SIGMA,mean,") for line in lines)
    assert any(line.startswith("Popularity,mean,") for line in lines)


def test_run_experiment(tmp_path, capsys):
    (tmp_path / "tiny.cfg").write_text(TINY_PIPELINE)
    argv = ["--config", str(tmp_path / "tiny.cfg"), "--out-dir", str(tmp_path), "run-experiment",
            "--ablation", "no_apf", "--baseline", "Popularity"]
    assert main(argv) == 0
    out = capsys.readouterr().out
    assert "SIGMA(SID1ID)" in out and "-no_apf" in out and "Popularity" in out
    assert (tmp_path / "metrics.csv").exists()


def test_missing_world(tmp_path):
    with pytest.raises(SystemExit, match="gen-data"):
        main(["--out-dir", str(tmp_path), "sft-train"])


def test_bad_config_key(tmp_path):
    (tmp_path / "bad.cfg").write_text("no_such_key = 1\n")
    with pytest.raises(ValueError):
        main(["--config", str(tmp_path / "bad.cfg"), "--out-dir", str(tmp_path), "gen-data"])


def test_every_subcommand_is_registered():
    names = set(build_parser()._subparsers._group_actions[0].choices)
    assert names == {"gen-data", "train-grounding", "fit-quantizer", "build-index", "sft-train", "generate",
                     "evaluate", "serve-sim", "run-experiment"}
