import json

import pytest

from hfodistill import cli

TINY = ["--preset", "desk", "--data.image_size", "16", "--vae.image_size", "16", "--vae.channels", "4,8",
        "--vae.feature_channels", "2,2", "--vae.latent_dim", "4", "--pretrain.epochs", "1",
        "--classifier.epochs", "1", "--folds.k", "2", "--folds.split_ratio", "2,1,1",
        "--labels.n_restarts", "2"]


def test_help_documents_keys(capsys):
    with pytest.raises(SystemExit):
        cli.main(["pretrain", "--help"])
    out = capsys.readouterr().out
    assert "--pretrain.batch_size" in out and "default 512" in out and "--distill.aug" in out


def test_missing_upstream_exits_one(tmp_path, capsys):
    (tmp_path / "w").mkdir()
    assert cli.main(["evaluate", "--work", str(tmp_path / "w")]) == 1
    assert "run the 'ingest' stage" in capsys.readouterr().err


def test_bad_value_exits_one(tmp_path, capsys):
    assert cli.main(["pretrain", "--work", str(tmp_path), "--classifier.threshold", "2"]) == 1
    assert "threshold" in capsys.readouterr().err


@pytest.fixture(scope="module")
def smoke(tmp_path_factory):
    root = tmp_path_factory.mktemp("smoke")
    data, work = root / "data", root / "w"
    assert cli.main(["synth", "--out", str(data), "--subjects", "6", "--events", "24", "--channels", "4",
                     "--institutions", "2"]) == 0
    common = ["--work", str(work), *TINY]
    assert cli.main(["ingest", "--manifest", str(data / "manifest.toml"), *common]) == 0
    for stage in ("pretrain", "discover"):
        assert cli.main([stage, *common]) == 0
    return work, common


def test_evaluate_without_train_names_classifier(smoke, capsys):
    work, common = smoke
    assert cli.main(["evaluate", *common, "--variant", "untrained"]) == 1
    assert "classifier.ckpt" in capsys.readouterr().err


def test_smoke_path(smoke, capsys):
    work, common = smoke
    assert cli.main(["train", *common]) == 0
    assert cli.main(["evaluate", *common]) == 0
    report = json.loads((work / "report.json").read_text())
    assert len(report["folds"]) == 2 and report["std_convention"] == "population"
    assert (work / "fold_0" / "predictions.csv").exists()
    assert (work / "fold_1" / "weak_labels.csv").exists()
    meta = json.loads((work / "run_meta.json").read_text())
    assert set(meta["stages"]) >= {"ingest", "pretrain", "discover", "train", "evaluate"}
    capsys.readouterr()
    assert cli.main(["report", "--work", str(work)]) == 0
    assert "| ACC |" in capsys.readouterr().out


def test_sd_ablation_variant(smoke):
    work, common = smoke
    assert cli.main(["train", *common, "--distill.sd", "false", "--variant", "nosd"]) == 0
    assert cli.main(["evaluate", *common, "--distill.sd", "false", "--variant", "nosd"]) == 0
    assert (work / "variants" / "nosd" / "report.json").exists()
