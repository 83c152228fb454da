"""Command-line entry point.

Subcommands: ``synthgen``, ``split``, ``train``, ``experiment``,
``evaluate`` and ``explain``. Settings come from built-in defaults, then an
optional JSON ``--config`` file, then explicit flags (highest priority).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

from .data import ManifestError, PartitionPlan, build_partition_plan, load_manifest
from .ensemble import (
    Ensemble,
    MemberJob,
    evaluate_run,
    member_dir,
    member_seed,
    run_experiment,
    score,
    train_member,
)
from .imaging import IMAGE_SIZE, AugmentationConfig
from .metrics import roc_curve
from .synth import make_blob_dataset
from .training import TrainingConfig, get_architecture
from .xai import explain


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass
class RunConfig:
    manifest: str | None = None
    plan: str | None = None
    arch: str = "Arch1"
    seed: int = 0
    jobs: int = 1
    out: str | None = None
    epochs: int = 150
    patience: int = 15
    image_size: int = IMAGE_SIZE
    augment: bool = True
    augmentation: dict[str, Any] = field(default_factory=lambda: asdict(AugmentationConfig()))

    def __post_init__(self) -> None:
        get_architecture(self.arch)

    def training_config(self) -> TrainingConfig:
        return TrainingConfig(max_epochs=self.epochs, patience=self.patience, seed=self.seed,
                              image_size=self.image_size)

    def augmentation_config(self) -> AugmentationConfig | None:
        return AugmentationConfig(**self.augmentation) if self.augment else None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


_FLAG_TO_FIELD = {
    "manifest": "manifest", "plan": "plan", "arch": "arch", "seed": "seed", "jobs": "jobs",
    "out": "out", "epochs": "epochs", "patience": "patience", "image_size": "image_size",
}


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values: dict[str, Any] = {}
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as fh:
            file_values = json.load(fh)
        unknown = set(file_values) - set(RunConfig.__dataclass_fields__)
        if unknown:
            raise StageError("config", f"unknown keys in {args.config}: {sorted(unknown)}")
        values.update(file_values)
    for flag, name in _FLAG_TO_FIELD.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[name] = v
    if getattr(args, "no_augment", False):
        values["augment"] = False
    if getattr(args, "no_flip", False):
        values["augmentation"] = {**values.get("augmentation", asdict(AugmentationConfig())),
                                  "horizontal_flip": False}
    try:
        return RunConfig(**values)
    except (TypeError, ValueError) as exc:
        raise StageError("config", str(exc)) from exc


def _load_manifest(cfg: RunConfig):
    if not cfg.manifest:
        raise StageError("manifest", "--manifest is required")
    try:
        return load_manifest(cfg.manifest)
    except (OSError, ManifestError) as exc:
        raise StageError("manifest", str(exc)) from exc


def _load_plan(cfg: RunConfig, manifest):
    if cfg.plan:
        try:
            plan = PartitionPlan.load(cfg.plan)
        except (OSError, ValueError, KeyError) as exc:
            raise StageError("plan", f"cannot read {cfg.plan}: {exc}") from exc
        if plan.n_items != len(manifest):
            raise StageError("plan", f"{cfg.plan} covers {plan.n_items} items, manifest has {len(manifest)}")
        return plan
    return build_partition_plan(manifest, cfg.seed)


# commands ------------------------------------------------------------------


def cmd_synthgen(args) -> int:
    path = make_blob_dataset(args.out, n_images=args.n, seed=args.seed or 0, size=args.image_size or IMAGE_SIZE)
    print(path)
    return 0


def cmd_split(args) -> int:
    cfg = resolve_config(args)
    manifest = _load_manifest(cfg)
    plan = build_partition_plan(manifest, cfg.seed)
    if not cfg.out:
        sys.stdout.write(plan.to_json())
    else:
        Path(cfg.out).parent.mkdir(parents=True, exist_ok=True)
        plan.save(cfg.out)
        print(cfg.out)
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    manifest = _load_manifest(cfg)
    plan = _load_plan(cfg, manifest)
    d, s = args.division, args.split
    try:
        div = plan.divisions[d]
        sp = div.splits[s]
    except IndexError:
        raise StageError("train", f"plan has no division {d} / split {s}") from None
    out = Path(cfg.out or "runs/train")
    tcfg = replace(cfg.training_config(), seed=member_seed(cfg.seed, d, s))
    job = MemberJob(manifest, d, s, sp.train, sp.validation, div.test, get_architecture(cfg.arch),
                    tcfg, cfg.augmentation_config(), str(out))
    try:
        result = train_member(job)
    except Exception as exc:
        raise StageError("train", f"division {d}, split {s}: {exc}") from exc
    auc, tpr = score(result.test_probs[:, 1], manifest.label_array[div.test])
    (out / "config.json").write_text(cfg.to_json())
    print(f"division {d} split {s}: best epoch {result.history.best_epoch}, "
          f"test AUC {auc:.4f}, TPR {tpr:.4f} -> {member_dir(out, d, s)}")
    return 0


def cmd_experiment(args) -> int:
    cfg = resolve_config(args)
    manifest = _load_manifest(cfg)
    plan = _load_plan(cfg, manifest)
    out = Path(cfg.out or "runs/experiment")
    out.mkdir(parents=True, exist_ok=True)
    # absolute manifest path so `evaluate` works from any directory
    (out / "config.json").write_text(replace(cfg, manifest=str(Path(cfg.manifest).resolve())).to_json())
    try:
        report = run_experiment(manifest, get_architecture(cfg.arch), cfg.training_config(), plan,
                                cfg.augmentation_config(), out, jobs=cfg.jobs)
    except Exception as exc:
        raise StageError("experiment", str(exc)) from exc
    sys.stdout.write(report.to_table())
    return 0


def _run_files(run: Path) -> tuple[RunConfig, PartitionPlan]:
    try:
        cfg = RunConfig(**json.loads((run / "config.json").read_text()))
        plan = PartitionPlan.load(run / "plan.json")
    except (OSError, ValueError, TypeError) as exc:
        raise StageError("evaluate", f"{run} is not a finished experiment directory: {exc}") from exc
    return cfg, plan


def cmd_evaluate(args) -> int:
    run = Path(args.run)
    cfg, plan = _run_files(run)
    if args.manifest:
        cfg.manifest = args.manifest
    manifest = _load_manifest(cfg)
    out = Path(args.out or run / "evaluation")
    out.mkdir(parents=True, exist_ok=True)
    try:
        report = evaluate_run(run, manifest, plan, cfg.arch)
    except Exception as exc:
        raise StageError("evaluate", str(exc)) from exc
    report.write(out)
    for d in report.divisions:
        roc_curve(d.ensemble_probs[:, 1], d.test_labels).to_csv(out / f"roc_division_{d.division}.csv")
    sys.stdout.write(report.to_table())
    stored = run / "report.csv"
    if stored.exists():
        same = stored.read_bytes() == (out / "report.csv").read_bytes()
        print(f"stored report {'reproduced exactly' if same else 'DIFFERS'}: {stored}")
        if not same:
            return 1
    return 0


def cmd_explain(args) -> int:
    run = Path(args.run)
    try:
        ens = Ensemble.load(run, args.division)
    except Exception as exc:
        raise StageError("explain", f"cannot load division {args.division} from {run}: {exc}") from exc
    out = Path(args.out or run / "explanations" / Path(args.image).stem)
    try:
        written = explain(ens, args.image, out, upscale=args.upscale)
    except Exception as exc:
        raise StageError("explain", f"{args.image}: {exc}") from exc
    for path in written.values():
        print(path)
    return 0


# parser --------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, training: bool = True) -> None:
    p.add_argument("--config", help="JSON file with RunConfig fields (flags override it)")
    p.add_argument("--manifest", help="CSV with header path,label")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    if training:
        p.add_argument("--plan", help="partition plan JSON from `split`")
        p.add_argument("--arch", help="Arch1 .. Arch6")
        p.add_argument("--jobs", type=int, help="parallel member trainings")
        p.add_argument("--epochs", type=int, help="maximum epochs per member")
        p.add_argument("--patience", type=int, help="early-stopping patience in epochs")
        p.add_argument("--image-size", type=int, dest="image_size")
        p.add_argument("--no-augment", action="store_true", dest="no_augment")
        p.add_argument("--no-flip", action="store_true", dest="no_flip",
                       help="keep augmentation but disable horizontal flips")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xray-ensemble", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synthgen", help="write the synthetic blob dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=400)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, dest="image_size")
    p.set_defaults(func=cmd_synthgen)

    p = sub.add_parser("split", help="write a 5x5 partition plan")
    _common(p, training=False)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train one member (division, split)")
    _common(p)
    p.add_argument("--division", type=int, default=0)
    p.add_argument("--split", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("experiment", help="train all divisions and write the report")
    _common(p)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("evaluate", help="recompute metrics of a finished experiment")
    p.add_argument("--run", required=True)
    p.add_argument("--manifest")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("explain", help="heatmap overlays for one image")
    p.add_argument("--run", required=True)
    p.add_argument("--division", type=int, default=0)
    p.add_argument("--image", required=True)
    p.add_argument("--out")
    p.add_argument("--upscale", type=int, default=1)
    p.set_defaults(func=cmd_explain)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: [{args.command}] {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
