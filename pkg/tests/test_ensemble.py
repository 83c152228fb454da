import csv
import statistics

import numpy as np
import pytest

from oracles import toy_network
from xray_ensemble import ensemble as E
from xray_ensemble.data import Division, PartitionPlan, Split, build_partition_plan, load_manifest
from xray_ensemble.ensemble import (
    Ensemble,
    EnsembleError,
    ExperimentReport,
    DivisionResult,
    ensemble_predict,
    member_seed,
    run_division,
    run_experiment,
)
from xray_ensemble.imaging import AugmentationConfig
from xray_ensemble.synth import make_blob_dataset
from xray_ensemble.training import ARCHITECTURES, TrainingConfig


def fixed_output_member(p1, seed=0):
    """Toy network whose class-1 probability is ``p1`` for every input."""
    net = toy_network(size=8, seed=seed)
    head = len(net.specs) - 2
    net.params[f"{head}.kernel"][...] = 0.0
    net.params[f"{head}.bias"][...] = [0.0, np.log(p1 / (1 - p1))]
    return net


def test_mean_of_member_probabilities():
    members = [fixed_output_member(p) for p in (0.9, 0.8, 0.7, 0.6, 0.5)]
    p = ensemble_predict(members, np.ones((3, 8, 8, 1)))
    np.testing.assert_allclose(p[:, 1], 0.7, atol=1e-6)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)


def test_identical_members_and_bounds(rng):
    x = rng.normal(1, 0.3, size=(6, 8, 8, 1))
    same = [toy_network(size=8, seed=2) for _ in range(5)]
    np.testing.assert_allclose(ensemble_predict(same, x), same[0].predict_proba(x), atol=1e-12)
    members = [toy_network(size=8, seed=s) for s in range(5)]
    each = np.stack([m.predict_proba(x) for m in members])
    ens = ensemble_predict(members, x)
    assert np.all(ens >= each.min(axis=0) - 1e-12) and np.all(ens <= each.max(axis=0) + 1e-12)


def test_ensemble_size_and_architecture_checked():
    with pytest.raises(EnsembleError):
        Ensemble([toy_network(size=8) for _ in range(4)])
    with pytest.raises(EnsembleError):
        Ensemble([toy_network(size=8) for _ in range(4)] + [toy_network(size=12)])


def test_member_seeds_distinct_and_stable():
    seeds = {member_seed(0, d, s) for d in range(5) for s in range(5)}
    assert len(seeds) == 25
    assert member_seed(3, 1, 2) == member_seed(3, 1, 2)


# reports -------------------------------------------------------------------


def fake_division(d, member_aucs, ens_auc):
    r = DivisionResult(d, np.arange(4), np.array([0, 0, 1, 1]), np.zeros((5, 4, 2)), np.zeros((4, 2)),
                       [(a, a / 2) for a in member_aucs], (ens_auc, ens_auc / 2))
    return r


def test_report_rows_and_average(tmp_path):
    divs = [fake_division(d, [0.7 + 0.01 * d + 0.002 * k for k in range(5)], 0.8 + 0.02 * d) for d in range(5)]
    report = ExperimentReport("Arch1", divs)
    assert sum(1 for r in report.rows() if r[1].startswith("member")) == 25
    avg = report.summary()[-1]
    ens = [0.8 + 0.02 * d for d in range(5)]
    assert avg["division"] == "average"
    assert avg["ensemble_auc"] == pytest.approx(statistics.fmean(ens), abs=1e-15)
    assert avg["ensemble_auc_std"] == pytest.approx(statistics.stdev(ens), abs=1e-15)
    member_means = [statistics.fmean(0.7 + 0.01 * d + 0.002 * k for k in range(5)) for d in range(5)]
    assert avg["member_auc_mean"] == pytest.approx(statistics.fmean(member_means))
    report.write(tmp_path)
    rows = list(csv.reader(open(tmp_path / "report.csv")))
    assert rows[0] == ["division", "model", "auc", "tpr"] and len(rows) == 31
    assert "Average" in (tmp_path / "report.txt").read_text()
    summary = list(csv.DictReader(open(tmp_path / "summary.csv")))
    assert len(summary) == 6


def test_single_division_std_absent(tmp_path):
    report = ExperimentReport("Arch2", [fake_division(0, [0.6, 0.7, 0.8, 0.7, 0.6], 0.75)])
    avg = report.summary()[-1]
    assert avg["ensemble_auc_std"] is None and avg["member_auc_std"] is None
    report.write_summary_csv(tmp_path / "s.csv")
    last = list(csv.DictReader(open(tmp_path / "s.csv")))[-1]
    assert last["ensemble_auc_std"] == ""
    assert "±" not in report.to_table().splitlines()[-1]


# orchestration on a tiny synthetic task -------------------------------------

SMALL = TrainingConfig(max_epochs=2, patience=2, seed=0, image_size=16)


@pytest.fixture(scope="module")
def blobs(tmp_path_factory):
    root = tmp_path_factory.mktemp("blobs")
    return load_manifest(make_blob_dataset(root, n_images=40, seed=3, size=48))


def one_division_plan(plan):
    return PartitionPlan(plan.seed, plan.n_items, plan.divisions[:1])


def test_run_division_structure(blobs, tmp_path):
    plan = build_partition_plan(blobs, 0)
    res = run_division(blobs, plan, 0, ARCHITECTURES["Arch4"], SMALL, None, out_dir=tmp_path)
    assert len(res.member_metrics) == 5 and len(res.ensemble_metrics) == 2
    np.testing.assert_allclose(res.ensemble_probs, res.member_probs.mean(axis=0))
    for s in range(5):
        assert (tmp_path / "division_0" / f"split_{s}" / "model.ckpt").exists()
    preds = list(csv.reader(open(tmp_path / "division_0" / "test_predictions.csv")))
    assert len(preds) == 1 + len(plan.divisions[0].test)
    loaded = Ensemble.load(tmp_path, 0)
    x = np.ones((1, 16, 16, 1), dtype=np.float32)
    np.testing.assert_allclose(ensemble_predict(loaded, x), ensemble_predict(res.members, x), atol=1e-7)


def test_degenerate_ensemble_equals_members(blobs, monkeypatch):
    plan = build_partition_plan(blobs, 0)
    d = plan.divisions[0]
    same = Division(d.construction, d.test, tuple([d.splits[0]] * 5))
    monkeypatch.setattr(E, "member_seed", lambda *a: 7)
    res = run_division(blobs, PartitionPlan(0, plan.n_items, (same,)), 0, ARCHITECTURES["Arch4"], SMALL,
                       AugmentationConfig(horizontal_flip=False))
    for m in res.member_metrics:
        assert m == res.ensemble_metrics


def test_experiment_outputs_and_jobs_independence(blobs, tmp_path):
    plan = PartitionPlan(0, len(blobs), build_partition_plan(blobs, 1).divisions[:2])
    aug = AugmentationConfig(horizontal_flip=False)
    r1 = run_experiment(blobs, ARCHITECTURES["Arch4"], SMALL, plan, aug, tmp_path / "a", jobs=1)
    run_experiment(blobs, ARCHITECTURES["Arch4"], SMALL, plan, aug, tmp_path / "b", jobs=2)
    for name in ("report.csv", "summary.csv", "plan.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert not (tmp_path / "a" / "INCOMPLETE").exists()
    assert len(r1.rows()) == 12
    again = E.evaluate_run(tmp_path / "a", blobs, plan, "Arch4")
    again.write_csv(tmp_path / "re.csv")
    assert (tmp_path / "re.csv").read_bytes() == (tmp_path / "a" / "report.csv").read_bytes()


def test_failure_leaves_marker_and_partial_report(blobs, tmp_path, monkeypatch):
    plan = PartitionPlan(0, len(blobs), build_partition_plan(blobs, 1).divisions[:2])
    real = E.train_member

    def flaky(job):
        if job.division == 1 and job.split == 2:
            raise FloatingPointError("boom")
        return real(job)

    monkeypatch.setattr(E, "train_member", flaky)
    with pytest.raises(EnsembleError, match="division 1, split 2"):
        run_experiment(blobs, ARCHITECTURES["Arch4"], SMALL, plan, None, tmp_path)
    assert "boom" in (tmp_path / "INCOMPLETE").read_text()
    partial = list(csv.reader(open(tmp_path / "report.partial.csv")))
    assert len(partial) == 1 + 6
    assert (tmp_path / "division_1" / "split_1" / "model.ckpt").exists()
    assert not (tmp_path / "report.csv").exists()


def test_plan_manifest_mismatch(blobs):
    plan = build_partition_plan(blobs, 0)
    bad = PartitionPlan(0, len(blobs) + 1, plan.divisions)
    with pytest.raises(ValueError):
        run_experiment(blobs, ARCHITECTURES["Arch4"], SMALL, bad)
