import argparse
import json

import pytest

from xray_ensemble.cli import RunConfig, StageError, build_parser, main, resolve_config
from xray_ensemble.data import PartitionPlan, load_manifest


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    assert main(["synthgen", "--out", str(root), "--n", "40", "--seed", "2", "--image-size", "48"]) == 0
    return root / "manifest.csv"


def test_synthgen_manifest(dataset):
    m = load_manifest(dataset)
    assert len(m) == 40 and m.class_counts() == (20, 20)


def test_split_round_trip_and_bytes(dataset, tmp_path, capsys):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert main(["split", "--manifest", str(dataset), "--seed", "4", "--out", str(a)]) == 0
    assert main(["split", "--manifest", str(dataset), "--seed", "4", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    plan = PartitionPlan.load(a)
    assert PartitionPlan.from_json(plan.to_json()) == plan
    assert len(plan.divisions) == 5


def test_split_invalid_label(tmp_path, capsys):
    bad = tmp_path / "m.csv"
    bad.write_text("path,label\na.png,0\nb.png,1\nc.png,7\n")
    code = main(["split", "--manifest", str(bad)])
    assert code != 0
    err = capsys.readouterr().err
    assert "m.csv:4" in err and "error" in err


def test_missing_manifest_is_an_error(tmp_path, capsys):
    assert main(["split", "--manifest", str(tmp_path / "none.csv")]) != 0
    assert "none.csv" in capsys.readouterr().err


def _ns(**kw):
    base = dict(config=None, manifest=None, plan=None, arch=None, seed=None, jobs=None, out=None,
                epochs=None, patience=None, image_size=None, no_augment=False, no_flip=False)
    base.update(kw)
    return argparse.Namespace(**base)


def test_config_precedence(tmp_path):
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text(json.dumps({"arch": "Arch3", "epochs": 9, "seed": 5}))
    cfg = resolve_config(_ns(config=str(cfg_file), epochs=4))
    assert (cfg.arch, cfg.epochs, cfg.seed, cfg.patience) == ("Arch3", 4, 5, RunConfig().patience)
    cfg = resolve_config(_ns(no_flip=True))
    assert cfg.augment and cfg.augmentation["horizontal_flip"] is False
    assert resolve_config(_ns(no_augment=True)).augmentation_config() is None


def test_config_rejects_unknown_keys(tmp_path):
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text(json.dumps({"learning_rate": 1.0}))
    with pytest.raises(StageError):
        resolve_config(_ns(config=str(cfg_file)))
    with pytest.raises(StageError):
        resolve_config(_ns(arch="Arch9"))


def test_parser_lists_flags():
    help_text = build_parser().format_help()
    for cmd in ("synthgen", "split", "train", "experiment", "evaluate", "explain"):
        assert cmd in help_text


def test_train_single_member(dataset, tmp_path, capsys):
    out = tmp_path / "one"
    code = main(["train", "--manifest", str(dataset), "--arch", "Arch4", "--epochs", "1",
                 "--image-size", "16", "--division", "1", "--split", "3", "--out", str(out)])
    assert code == 0
    assert (out / "division_1" / "split_3" / "model.ckpt").exists()
    assert "test AUC" in capsys.readouterr().out


def test_experiment_evaluate_explain(dataset, tmp_path, capsys):
    run = tmp_path / "run"
    args = ["experiment", "--manifest", str(dataset), "--arch", "Arch4", "--epochs", "1", "--patience", "1",
            "--image-size", "16", "--no-flip", "--seed", "3", "--out", str(run)]
    assert main(args) == 0
    table = capsys.readouterr().out
    assert "Architecture Arch4" in table and "Average" in table
    for name in ("report.csv", "summary.csv", "report.txt", "plan.json", "config.json"):
        assert (run / name).exists()
    assert main(["evaluate", "--run", str(run)]) == 0
    assert "reproduced exactly" in capsys.readouterr().out
    assert (run / "evaluation" / "roc_division_0.csv").exists()

    image = load_manifest(dataset).paths[0]
    assert main(["explain", "--run", str(run), "--division", "2", "--image", image,
                 "--out", str(tmp_path / "ex")]) == 0
    assert len(list((tmp_path / "ex").glob("*.png"))) == 5
    assert (tmp_path / "ex" / "probabilities.json").exists()


def test_evaluate_on_non_run_dir(tmp_path, capsys):
    assert main(["evaluate", "--run", str(tmp_path)]) != 0
    assert "evaluate" in capsys.readouterr().err


def test_explain_missing_checkpoints(tmp_path, capsys):
    assert main(["explain", "--run", str(tmp_path), "--image", str(tmp_path / "x.png")]) != 0
    assert "explain" in capsys.readouterr().err
