import json
from pathlib import Path

import pytest

from lmcsds.cli import main
from pipeline import CLI_ARTIFACTS as PIPELINE, CLI_TINY as TINY, run_cli_twice


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, (Path(out.strip().splitlines()[-1]) if code == 0 else None), err


@pytest.fixture(scope="module")
def config(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "tiny.json"
    p.write_text(json.dumps(TINY))
    return p


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory, config):
    work = tmp_path_factory.mktemp("runs")
    return work, run_cli_twice(work, config)


@pytest.mark.parametrize("cmd,artifacts", PIPELINE, ids=[c for c, _ in PIPELINE])
def test_rerun_is_byte_identical(pipeline, cmd, artifacts):
    a, b = pipeline[1][cmd]
    assert a != b
    for name in artifacts:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_run_dir_records_config(pipeline):
    d = pipeline[1]["train-diffusion"][0]
    cfg = json.loads((d / "config.json").read_text())
    assert cfg["diffusion"]["steps"] == 20 and cfg["seed"] == 3
    summary = json.loads((d / "summary.json").read_text())
    assert d.name.startswith(summary["config_digest"][:12])
    assert "init" in json.loads((d / "heldout_loss.json").read_text())


def test_gradcheck_on_fresh_workdir(tmp_path, capsys):
    code, d, _ = run(capsys, "gradcheck", "--workdir", tmp_path)
    assert code == 0
    assert json.loads((d / "report.json").read_text())["passed"]


def test_unknown_key(tmp_path, capsys):
    code, _, err = run(capsys, "gen-data", "--workdir", tmp_path, "--set", "data.nope=1")
    assert code == 1 and "data.nope" in err


def test_unknown_key_in_file(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"optimize": {"edit": {"lr_flor": 1}}}))
    code, _, err = run(capsys, "edit", "--workdir", tmp_path, "--config", p)
    assert code == 1 and "optimize.edit.lr_flor" in err


def test_missing_dependency_names_producer(tmp_path, capsys):
    code, _, err = run(capsys, "train-diffusion", "--workdir", tmp_path)
    assert code == 1 and "gen-data" in err
    code, _, err = run(capsys, "translate", "--workdir", tmp_path, "--translator", tmp_path / "x")
    assert code == 1 and "train-translator" in err


def test_usage_errors(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["no-such-command"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main(["gen-data", "--help"])
    assert exc.value.code == 0


def test_bad_parameterization(pipeline, capsys):
    work = pipeline[0]
    code, _, err = run(capsys, "synthesize", "--workdir", work, "--set",
                       "optimize.parameterization=\"voxels\"")
    assert code == 1 and "parameterization" in err


def test_seed_flag_changes_digest(tmp_path, capsys, config):
    _, a, _ = run(capsys, "gen-data", "--workdir", tmp_path, "--config", config)
    _, b, _ = run(capsys, "gen-data", "--workdir", tmp_path, "--config", config, "--seed", 4)
    assert a.name[:12] != b.name[:12]
    assert (a / "train.ckpt").read_bytes() != (b / "train.ckpt").read_bytes()
