"""Five-member ensembles and the divisions x splits experiment protocol."""
from __future__ import annotations

import csv
import json
import logging
import os
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .data import BatchIterator, DatasetManifest, ImageStore, PartitionPlan
from .imaging import AugmentationConfig
from .metrics import roc_auc, roc_curve, tpr_at_threshold
from .nn import Network, load_checkpoint, save_checkpoint
from .training import ArchitectureSpec, TrainingConfig, TrainingHistory, build_model, predict, train

log = logging.getLogger(__name__)

ENSEMBLE_SIZE = 5
INCOMPLETE_MARKER = "INCOMPLETE"


class EnsembleError(RuntimeError):
    pass


@dataclass
class Ensemble:
    members: list[Network]
    division: int = 0
    member_seeds: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        if len(self.members) != ENSEMBLE_SIZE:
            raise EnsembleError(f"an ensemble has {ENSEMBLE_SIZE} members, got {len(self.members)}")
        first = self.members[0]
        for m in self.members[1:]:
            if m.specs != first.specs or m.input_shape != first.input_shape:
                raise EnsembleError("ensemble members must share one architecture")

    @classmethod
    def load(cls, run_dir: str | os.PathLike, division: int) -> "Ensemble":
        """Load the member checkpoints of one division from an experiment directory."""
        members, seeds = [], []
        for split in range(ENSEMBLE_SIZE):
            model, meta = load_checkpoint(member_dir(run_dir, division, split) / "model.ckpt")
            members.append(model)
            seeds.append(int(meta.get("seed", model.seed)))
        return cls(members, division, seeds)


def ensemble_predict(ensemble: Ensemble | Sequence[Network], images: np.ndarray) -> np.ndarray:
    """Mean of the members' class-probability vectors."""
    members = ensemble.members if isinstance(ensemble, Ensemble) else list(ensemble)
    if len(members) != ENSEMBLE_SIZE:
        raise EnsembleError(f"an ensemble has {ENSEMBLE_SIZE} members, got {len(members)}")
    probs = np.stack([predict(m, images).astype(np.float64) for m in members])
    return probs.mean(axis=0)


def member_seed(experiment_seed: int, division: int, split: int) -> int:
    """Deterministic per-member seed so a single member can be replayed alone."""
    return int(np.random.SeedSequence([experiment_seed, division, split]).generate_state(1)[0])


def member_dir(run_dir: str | os.PathLike, division: int, split: int) -> Path:
    return Path(run_dir) / f"division_{division}" / f"split_{split}"


# member training -----------------------------------------------------------

_STORES: dict[tuple[DatasetManifest, int], ImageStore] = {}


def _store_for(manifest: DatasetManifest, size: int) -> ImageStore:
    key = (manifest, size)
    store = _STORES.get(key)
    if store is None:
        _STORES.clear()
        store = _STORES[key] = ImageStore(manifest, size)
    return store


@dataclass
class MemberJob:
    manifest: DatasetManifest
    division: int
    split: int
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray
    arch: ArchitectureSpec
    cfg: TrainingConfig
    aug: AugmentationConfig | None
    out_dir: str | None = None


@dataclass
class MemberResult:
    division: int
    split: int
    seed: int
    params: dict[str, np.ndarray]
    history: TrainingHistory
    test_probs: np.ndarray
    input_shape: tuple[int, int, int]


def train_member(job: MemberJob) -> MemberResult:
    """Train one member from scratch and score it on the division's test set.

    BLAS is pinned to one thread so results do not depend on how many
    members run side by side.
    """
    with threadpool_limits(limits=1):
        store = _store_for(job.manifest, job.cfg.image_size)
        seed = job.cfg.seed
        model = build_model(job.arch, seed=seed, image_size=job.cfg.image_size)
        batches = BatchIterator(job.train_idx, job.manifest, job.aug, job.cfg.batch_size, seed, store)
        val = store.tensors(job.val_idx)
        best, history = train(model, batches, val, job.cfg)
        test_x, _ = store.tensors(job.test_idx)
        test_probs = predict(best, test_x)
    if job.out_dir is not None:
        d = member_dir(job.out_dir, job.division, job.split)
        d.mkdir(parents=True, exist_ok=True)
        save_checkpoint(best, d / "model.ckpt", {
            "architecture": job.arch.name,
            "division": job.division,
            "split": job.split,
            "seed": seed,
            "best_epoch": history.best_epoch,
            "epochs_run": len(history),
        })
        history.to_csv(d / "history.csv")
    return MemberResult(job.division, job.split, seed, best.params, history, test_probs, best.input_shape)


def _run_jobs(jobs: list[MemberJob], n_workers: int, on_result=None) -> list[MemberResult]:
    """Train members, in submission order when serial; ``on_result`` sees
    each result in job order either way."""
    results: list[MemberResult] = []

    def collect(job: MemberJob, get) -> None:
        try:
            res = get()
        except Exception as exc:
            raise EnsembleError(
                f"training failed for division {job.division}, split {job.split}: {exc}"
            ) from exc
        results.append(res)
        if on_result is not None:
            on_result(res)

    if n_workers <= 1:
        for job in jobs:
            collect(job, lambda: train_member(job))
        return results
    with ProcessPoolExecutor(max_workers=n_workers) as pool:
        futures = [pool.submit(train_member, job) for job in jobs]
        try:
            for job, fut in zip(jobs, futures):
                collect(job, fut.result)
        except BaseException:
            for fut in futures:
                fut.cancel()
            raise
    return results


# metrics and reports -------------------------------------------------------


@dataclass
class DivisionResult:
    division: int
    test_indices: np.ndarray
    test_labels: np.ndarray
    member_probs: np.ndarray  # (members, n_test, 2)
    ensemble_probs: np.ndarray
    member_metrics: list[tuple[float, float]]
    ensemble_metrics: tuple[float, float]
    members: list[Network] = field(default_factory=list)
    histories: list[TrainingHistory] = field(default_factory=list)

    @classmethod
    def from_probs(cls, division: int, test_idx, labels, member_probs, **kw) -> "DivisionResult":
        member_probs = np.asarray(member_probs, dtype=np.float64)
        ens = member_probs.mean(axis=0)
        metrics = [score(p[:, 1], labels) for p in member_probs]
        return cls(division, np.asarray(test_idx), np.asarray(labels), member_probs, ens,
                   metrics, score(ens[:, 1], labels), **kw)

    def write_predictions(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            n = len(self.member_probs)
            w.writerow(["index", "label", *(f"member_{k}" for k in range(n)), "ensemble"])
            for j, (idx, y) in enumerate(zip(self.test_indices, self.test_labels)):
                w.writerow([int(idx), int(y), *(repr(float(p[j, 1])) for p in self.member_probs),
                            repr(float(self.ensemble_probs[j, 1]))])


def score(scores: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """(AUC, TPR at 0.5) for consolidation scores."""
    return roc_auc(scores, labels), tpr_at_threshold(scores, labels)


def _mean_std(values: Sequence[float]) -> tuple[float, float | None]:
    vals = [float(v) for v in values]
    return statistics.fmean(vals), (statistics.stdev(vals) if len(vals) > 1 else None)


def _fmt(x: float | None) -> str:
    return "" if x is None else repr(float(x))


@dataclass
class ExperimentReport:
    architecture: str
    divisions: list[DivisionResult]

    def rows(self) -> list[tuple[int, str, float, float]]:
        out = []
        for d in self.divisions:
            for k, (a, t) in enumerate(d.member_metrics):
                out.append((d.division, f"member_{k}", a, t))
            out.append((d.division, "ensemble", *d.ensemble_metrics))
        return out

    def summary(self) -> list[dict[str, object]]:
        """Per-division member mean/std and ensemble values, then an
        ``average`` row with mean and sample std across divisions."""
        out = []
        for d in self.divisions:
            am, asd = _mean_std([m[0] for m in d.member_metrics])
            tm, tsd = _mean_std([m[1] for m in d.member_metrics])
            out.append({
                "division": str(d.division),
                "member_auc_mean": am, "member_auc_std": asd,
                "member_tpr_mean": tm, "member_tpr_std": tsd,
                "ensemble_auc": d.ensemble_metrics[0], "ensemble_auc_std": None,
                "ensemble_tpr": d.ensemble_metrics[1], "ensemble_tpr_std": None,
            })
        avg: dict[str, object] = {"division": "average"}
        for key in ("member_auc_mean", "member_tpr_mean", "ensemble_auc", "ensemble_tpr"):
            mean, std = _mean_std([row[key] for row in out])
            avg[key] = mean
            avg[key.replace("_mean", "") + "_std"] = std
        out.append(avg)
        return out

    SUMMARY_FIELDS = ("division", "member_auc_mean", "member_auc_std", "member_tpr_mean", "member_tpr_std",
                      "ensemble_auc", "ensemble_auc_std", "ensemble_tpr", "ensemble_tpr_std")

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["division", "model", "auc", "tpr"])
            for div, model, a, t in self.rows():
                w.writerow([div, model, repr(float(a)), repr(float(t))])

    def write_summary_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.SUMMARY_FIELDS)
            for row in self.summary():
                w.writerow([row["division"], *(_fmt(row[k]) for k in self.SUMMARY_FIELDS[1:])])

    def to_table(self) -> str:
        def pm(mean, std):
            return f"{mean:.2f}" if std is None else f"{mean:.2f} ± {std:.2f}"

        summary = self.summary()
        lines = [f"Architecture {self.architecture}: individual members", "",
                 f"{'Partition':<10} {'AUC':<14} {'TPR':<14}"]
        for row in summary:
            label = "Average" if row["division"] == "average" else str(int(row["division"]) + 1)
            if row["division"] == "average":
                lines.append("-" * 38)
            a, t = pm(row["member_auc_mean"], row["member_auc_std"]), pm(row["member_tpr_mean"], row["member_tpr_std"])
            lines.append(f"{label:<10} {a:<14} {t:<14}")
        lines += ["", f"Architecture {self.architecture}: ensembles", "",
                  f"{'Partition':<10} {'AUC':<14} {'TPR':<14}"]
        for row in summary:
            if row["division"] == "average":
                lines.append("-" * 38)
                lines.append(f"{'Average':<10} {pm(row['ensemble_auc'], row['ensemble_auc_std']):<14} "
                             f"{pm(row['ensemble_tpr'], row['ensemble_tpr_std']):<14}")
            else:
                lines.append(f"{int(row['division']) + 1:<10} {row['ensemble_auc']:<14.2f} {row['ensemble_tpr']:<14.2f}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir: str | os.PathLike) -> None:
        out = Path(out_dir)
        self.write_csv(out / "report.csv")
        self.write_summary_csv(out / "summary.csv")
        (out / "report.txt").write_text(self.to_table(), encoding="utf-8")


# orchestration -------------------------------------------------------------


def _member_jobs(manifest, plan, division, arch, cfg, aug, out_dir) -> list[MemberJob]:
    div = plan.divisions[division]
    jobs = []
    for split, s in enumerate(div.splits):
        member_cfg = replace(cfg, seed=member_seed(cfg.seed, division, split))
        jobs.append(MemberJob(manifest, division, split, s.train, s.validation, div.test,
                              arch, member_cfg, aug, None if out_dir is None else str(out_dir)))
    return jobs


def _assemble(division: int, plan: PartitionPlan, manifest: DatasetManifest,
              results: list[MemberResult], arch: ArchitectureSpec) -> DivisionResult:
    results = sorted(results, key=lambda r: r.split)
    test_idx = plan.divisions[division].test
    labels = manifest.label_array[test_idx]
    members = [Network(arch.layers(), r.input_shape, r.params, seed=r.seed) for r in results]
    return DivisionResult.from_probs(
        division, test_idx, labels, [r.test_probs for r in results],
        members=members, histories=[r.history for r in results],
    )


def run_division(
    manifest: DatasetManifest,
    plan: PartitionPlan,
    division: int,
    arch: ArchitectureSpec,
    cfg: TrainingConfig,
    aug: AugmentationConfig | None = None,
    out_dir: str | os.PathLike | None = None,
    jobs: int = 1,
) -> DivisionResult:
    """Train the division's five members and score them and their ensemble
    on the shared test set."""
    member_jobs = _member_jobs(manifest, plan, division, arch, cfg, aug, out_dir)
    results = _run_jobs(member_jobs, jobs)
    result = _assemble(division, plan, manifest, results, arch)
    if out_dir is not None:
        _write_division(out_dir, result)
    return result


def _write_division(out_dir, result: DivisionResult) -> None:
    d = Path(out_dir) / f"division_{result.division}"
    d.mkdir(parents=True, exist_ok=True)
    result.write_predictions(d / "test_predictions.csv")
    roc_curve(result.ensemble_probs[:, 1], result.test_labels).to_csv(d / "roc_ensemble.csv")
    for k, p in enumerate(result.member_probs):
        roc_curve(p[:, 1], result.test_labels).to_csv(d / f"roc_member_{k}.csv")


def run_experiment(
    manifest: DatasetManifest,
    arch: ArchitectureSpec,
    cfg: TrainingConfig,
    plan: PartitionPlan,
    aug: AugmentationConfig | None = None,
    out_dir: str | os.PathLike | None = None,
    jobs: int = 1,
) -> ExperimentReport:
    """Every division of ``plan``: train all members, score, and aggregate.

    With ``out_dir`` set, an ``INCOMPLETE`` marker exists until the report
    is written; finished members and divisions stay on disk if a later one
    fails.
    """
    if plan.n_items != len(manifest):
        raise ValueError(f"plan covers {plan.n_items} items but manifest has {len(manifest)}")
    marker = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        marker = out / INCOMPLETE_MARKER
        marker.write_text("experiment in progress or failed\n")
        plan.save(out / "plan.json")
    all_jobs = [job for d in range(len(plan.divisions))
                for job in _member_jobs(manifest, plan, d, arch, cfg, aug, out_dir)]
    pending: dict[int, list[MemberResult]] = {}
    done: dict[int, DivisionResult] = {}

    def on_result(res: MemberResult) -> None:
        group = pending.setdefault(res.division, [])
        group.append(res)
        if len(group) == len(plan.divisions[res.division].splits):
            done[res.division] = _assemble(res.division, plan, manifest, group, arch)
            if out_dir is not None:
                _write_division(out_dir, done[res.division])

    try:
        _run_jobs(all_jobs, jobs, on_result)
    except Exception as exc:
        if out_dir is not None:
            marker.write_text(f"failed: {exc}\n")
            if done:
                partial = ExperimentReport(arch.name, [done[d] for d in sorted(done)])
                partial.write_csv(Path(out_dir) / "report.partial.csv")
        raise
    divisions = [done[d] for d in sorted(done)]
    report = ExperimentReport(arch.name, divisions)
    if out_dir is not None:
        report.write(out_dir)
        marker.unlink()
    return report


def evaluate_run(run_dir: str | os.PathLike, manifest: DatasetManifest, plan: PartitionPlan,
                 architecture: str) -> ExperimentReport:
    """Rebuild the report of a finished experiment from its checkpoints."""
    divisions = []
    with threadpool_limits(limits=1):
        for d, div in enumerate(plan.divisions):
            ens = Ensemble.load(run_dir, d)
            store = _store_for(manifest, ens.members[0].input_shape[0])
            test_x, _ = store.tensors(div.test)
            probs = [predict(m, test_x) for m in ens.members]
            divisions.append(DivisionResult.from_probs(d, div.test, manifest.label_array[div.test], probs,
                                                       members=ens.members))
    return ExperimentReport(architecture, divisions)
