import os

import pytest

import main
from modules import utils
from modules.modelio import ingest_model


def test_generate_writes_model(tmp_path, capsys):
    out = tmp_path / "m.txt"
    assert main.main(["generate", "--n", "5", "--M", "3", "--seed", "4", "--out", str(out)]) == 0
    bundle = ingest_model(str(out))
    assert bundle.model.n == 5
    assert bundle.M == 3
    assert "合成实例" in capsys.readouterr().out


def test_campaign_command(tmp_path):
    code = main.main(["campaign", "--objective", "MEM", "--n", "4", "--M", "2", "--T", "4",
                      "--replications", "1", "--methods", "CLL,WFL", "--seed", "3", "--out-dir", str(tmp_path)])
    assert code == 0
    assert any(name.endswith(".csv") for name in os.listdir(tmp_path))


def test_bad_config_returns_error(tmp_path):
    assert main.main(["campaign", "--config", str(tmp_path / "missing.env")]) == 1


def test_unknown_command():
    with pytest.raises(SystemExit):
        main.main(["plot"])


def test_validate_rate_report_carries_hash(tmp_path):
    code = main.main(["validate-rate", "--n", "3", "--T", "4", "--replications", "2", "--probes", "5",
                      "--seed", "1", "--out-dir", str(tmp_path)])
    assert code == 0
    data = utils.read_json(str(tmp_path / "rate_piecewise_s1.json"))
    assert data["config_hash"] == utils.config_hash(data["config"])
    assert data["config"]["runs"] == [2]


def test_predict_pairs_report_carries_hash(tmp_path):
    code = main.main(["predict-pairs", "--n", "3", "--M", "2", "--T", "10", "--pairs", "2",
                      "--objective", "MEM", "--seed", "6", "--out-dir", str(tmp_path)])
    assert code == 0
    data = utils.read_json(str(tmp_path / "pairs_MEM_s6.json"))
    assert data["config_hash"] == utils.config_hash(data["config"])
    assert len(data["decisions"]) == 4


@pytest.mark.parametrize("command", ["generate", "predict-pairs", "certify"])
def test_config_flag_only_where_read(command, tmp_path):
    with pytest.raises(SystemExit):
        main.main([command, "--config", str(tmp_path / "exp.env")])
