"""Command line entry point: pretrain, measure, rank, synthetic, replay.

Exit codes: 0 success, 1 internal failure, 2 user or input error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from . import synthetic
from .data import Registry, load_registry, write_csv
from .errors import TransmeterError
from .model import (
    DEEP_ENCODER_WIDTHS,
    DEEP_PREDICTOR_WIDTHS,
    DEFAULT_ENCODER_WIDTHS,
    DEFAULT_PREDICTOR_WIDTHS,
    load_source_model,
    save_source_model,
)
from .train import ALPHA_GRID, BETA_GRID, SEED_GRID, TrainConfig, make_grid
from .transfer import (
    ABLATIONS,
    Protocol,
    ablation_config,
    format_ranking,
    measure_pair,
    prepare_target,
    pretrain_dataset,
    rank_sources,
    read_reports,
    train_baseline,
    write_reports,
    write_summary,
    write_timings,
)

REGISTRY_ENV = "TRANSMETER_REGISTRY"
MANIFEST_FORMAT = "transmeter-manifest/1"

FAST_ALPHA = 1.0
FAST_BETA = 0.5
FAST_SEEDS = (1, 2)
# --pretrain-missing matches the pretrain command's default split, not the target's
PRETRAIN_SPLIT = 0.7

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2


class UsageError(Exception):
    """Bad arguments or inputs; reported with exit code 2."""


# argument helpers -----------------------------------------------------------


def _floats(text: str) -> List[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def _ints(text: str) -> List[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def _fmt_list(values: Sequence) -> str:
    return ",".join(repr(v) if isinstance(v, float) else str(v) for v in values)


def _add_training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch", type=int, default=32, help="rows per domain per mini-batch")
    p.add_argument("--max-epochs", type=int, default=500)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--deep", action="store_true", help="use the deeper encoder/predictor widths")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="transmeter", description=__doc__.splitlines()[0])
    parser.add_argument(
        "--registry",
        default=None,
        help=f"dataset registry (INI); defaults to ${REGISTRY_ENV}",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train and checkpoint a source classifier")
    p.add_argument("name")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--split", type=float, default=PRETRAIN_SPLIT)
    p.add_argument("--out", default=None, help="checkpoint path (default: the registry's)")
    _add_training_flags(p)

    p = sub.add_parser("measure", help="score the transferability of sources to a target")
    p.add_argument("target")
    p.add_argument("sources", nargs="*")
    p.add_argument("--all", action="store_true", help="every registry entry except the target")
    p.add_argument("--alpha-grid", type=_floats, default=None)
    p.add_argument("--beta-grid", type=_floats, default=None)
    p.add_argument("--seeds", type=_ints, default=None)
    p.add_argument("--folds", type=int, default=3)
    p.add_argument("--split", type=float, default=0.7)
    p.add_argument("--seed", type=int, default=0, help="seed for the target split and folds")
    p.add_argument("--fast", action="store_true", help=f"alpha={FAST_ALPHA}, beta={FAST_BETA}, seeds 1,2")
    p.add_argument("--ablation", choices=ABLATIONS, default="full")
    p.add_argument("--pretrain-missing", action="store_true")
    p.add_argument("--pretrain-seed", type=int, default=1)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", default=None, help="output directory (default: runs/<target>)")
    _add_training_flags(p)

    p = sub.add_parser("rank", help="rank sources from report files")
    p.add_argument("reports", nargs="+")
    p.add_argument("-k", type=int, default=2)
    p.add_argument("--out", default=None, help="ranking file (default: ranking.txt beside the first report)")

    p = sub.add_parser("synthetic", help="write a synthetic suite with a known ordering")
    p.add_argument("suite", choices=synthetic.SUITES)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("replay", help="rerun the command recorded in a manifest")
    p.add_argument("manifest")
    p.add_argument("--out", default=None, help="write outputs here instead of the recorded location")
    return parser


# manifests ------------------------------------------------------------------


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def write_manifest(
    path: Path,
    command: str,
    argv: List[str],
    config: Dict,
    seeds: Sequence[int],
    started: str,
    outputs: Sequence[Path],
    inputs: Sequence[Path] = (),
    registry: Optional[Registry] = None,
) -> None:
    doc = {
        "format": MANIFEST_FORMAT,
        "command": command,
        "argv": argv,
        "config": config,
        "seeds": list(seeds),
        "registry": str(registry.path.resolve()) if registry else None,
        "registry_sha256": _sha256(registry.path) if registry else None,
        "inputs": {str(Path(p).resolve()): _sha256(p) for p in inputs},
        "outputs": [str(Path(p).resolve()) for p in outputs],
        "started": started,
        "finished": _now(),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _registry(args) -> Registry:
    path = args.registry or os.environ.get(REGISTRY_ENV)
    if not path:
        raise UsageError(f"no registry given; pass --registry or set {REGISTRY_ENV}")
    return load_registry(path)


def _base_config(args, seed: int) -> TrainConfig:
    return TrainConfig(
        seed=seed,
        lr=args.lr,
        per_domain_batch=args.batch,
        max_epochs=args.max_epochs,
        patience=args.patience,
        encoder_widths=DEEP_ENCODER_WIDTHS if args.deep else DEFAULT_ENCODER_WIDTHS,
        predictor_widths=DEEP_PREDICTOR_WIDTHS if args.deep else DEFAULT_PREDICTOR_WIDTHS,
    )


def _training_argv(args) -> List[str]:
    out = ["--lr", repr(args.lr), "--batch", str(args.batch), "--max-epochs", str(args.max_epochs),
           "--patience", str(args.patience)]
    if args.deep:
        out.append("--deep")
    return out


# commands -------------------------------------------------------------------


def cmd_pretrain(args) -> int:
    started = _now()
    registry = _registry(args)
    entry = registry[args.name]
    ds = entry.load()
    cfg = _base_config(args, args.seed)
    model, acc = pretrain_dataset(ds, cfg, args.split)
    out = Path(args.out).resolve() if args.out else registry.checkpoint_path(args.name)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_source_model(model, out)
    print(f"{args.name}: test accuracy {acc:.4f}  checkpoint {out}")

    argv = ["--registry", str(registry.path.resolve()), "pretrain", args.name, "--seed", str(args.seed),
            "--split", repr(args.split), "--out", str(out)] + _training_argv(args)
    write_manifest(
        out.with_name(out.name + ".manifest.json"), "pretrain", argv,
        {"dataset": args.name, "split": args.split, "train": cfg.to_dict(), "test_accuracy": acc},
        [args.seed], started, [out], inputs=[entry.csv_path], registry=registry,
    )
    return EXIT_OK


def _measure_job(job):
    source, source_model, target, grid, protocol, acc_0 = job
    return measure_pair(source, source_model, target, grid, protocol, acc_0=acc_0)


def cmd_measure(args) -> int:
    started = _now()
    registry = _registry(args)
    target_entry = registry[args.target]
    if args.all:
        names = sorted(n for n in registry.names() if n != args.target)
    else:
        names = list(args.sources)
    if not names:
        raise UsageError("no sources given; list source names or pass --all")
    if args.target in names:
        raise UsageError(f"target {args.target!r} cannot also be a source")
    for name in names:
        registry[name]

    alphas = args.alpha_grid or ([FAST_ALPHA] if args.fast else list(ALPHA_GRID))
    betas = args.beta_grid or ([FAST_BETA] if args.fast else list(BETA_GRID))
    seeds = args.seeds or (list(FAST_SEEDS) if args.fast else list(SEED_GRID))
    base = ablation_config(_base_config(args, seeds[0]), args.ablation)
    grid = make_grid(alphas=alphas, betas=betas, seeds=seeds, base=base)
    protocol = Protocol(train_fraction=args.split, folds=args.folds, seed=args.seed)

    out_dir = Path(args.out).resolve() if args.out else Path("runs", args.target).resolve()
    out_dir.mkdir(parents=True, exist_ok=True)

    outputs: List[Path] = []
    inputs = [target_entry.csv_path]
    models = {}
    missing = [n for n in names if not registry.checkpoint_path(n).is_file()]
    if missing and not args.pretrain_missing:
        raise UsageError(
            f"no checkpoint for {', '.join(missing)}; run `transmeter pretrain NAME` first "
            "or pass --pretrain-missing"
        )
    datasets = {}
    for name in names:
        ds = registry[name].load()
        datasets[name] = ds
        inputs.append(registry[name].csv_path)
        ckpt = registry.checkpoint_path(name)
        if name in missing:
            model, acc = pretrain_dataset(ds, _base_config(args, args.pretrain_seed), PRETRAIN_SPLIT)
            ckpt.parent.mkdir(parents=True, exist_ok=True)
            save_source_model(model, ckpt)
            outputs.append(ckpt)
            print(f"pretrained {name}: test accuracy {acc:.4f}")
        else:
            inputs.append(ckpt)
        models[name] = load_source_model(ckpt)

    target = target_entry.load()
    target_train, target_test = prepare_target(target, protocol)
    acc_0 = train_baseline(target_train, target_test, grid[0], seeds=seeds)

    jobs = [(datasets[n], models[n], target, grid, protocol, acc_0) for n in names]
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(args.jobs, len(jobs))) as pool:
            reports = list(pool.map(_measure_job, jobs))
    else:
        reports = [_measure_job(j) for j in jobs]

    report_path = out_dir / "reports.jsonl"
    summary_path = out_dir / "summary.csv"
    timings_path = out_dir / "timings.csv"
    write_reports(reports, report_path)
    write_summary(reports, summary_path)
    write_timings(reports, timings_path)
    outputs += [report_path, summary_path, timings_path]
    for r in reports:
        flip = " (flipped labels)" if r.flip_used else ""
        print(f"{r.source_name} -> {r.target_name}: acc_0 {r.acc_0:.4f} acc_T {r.acc_T:.4f} "
              f"transferability {r.transferability:+.2f}%{flip}")

    argv = ["--registry", str(registry.path.resolve()), "measure", args.target, *names,
            "--alpha-grid", _fmt_list(alphas), "--beta-grid", _fmt_list(betas), "--seeds", _fmt_list(seeds),
            "--folds", str(args.folds), "--split", repr(args.split), "--seed", str(args.seed),
            "--ablation", args.ablation, "--pretrain-seed", str(args.pretrain_seed),
            "--jobs", str(args.jobs), "--out", str(out_dir)] + _training_argv(args)
    if args.pretrain_missing:
        argv.append("--pretrain-missing")
    config = {
        "target": args.target,
        "sources": names,
        "grid": {"alphas": alphas, "betas": betas, "seeds": seeds, "flips": [False, True]},
        "protocol": {"train_fraction": args.split, "folds": args.folds, "seed": args.seed},
        "ablation": args.ablation,
        "base": base.to_dict(),
    }
    write_manifest(out_dir / "manifest.json", "measure", argv, config, seeds, started, outputs,
                   inputs=inputs, registry=registry)
    return EXIT_OK


def cmd_rank(args) -> int:
    started = _now()
    reports = []
    for path in args.reports:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"report file not found: {p}")
        reports.extend(read_reports(p))
    if not reports:
        raise UsageError("no reports found in the given files")
    if args.k < 1:
        raise UsageError("-k must be at least 1")
    ranking = rank_sources(reports, args.k)
    table = format_ranking(ranking)
    print(table)
    out = Path(args.out).resolve() if args.out else Path(args.reports[0]).resolve().parent / "ranking.txt"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(table + "\n", encoding="utf-8")
    report_paths = [str(Path(p).resolve()) for p in args.reports]
    argv = ["rank", *report_paths, "-k", str(args.k), "--out", str(out)]
    write_manifest(out.with_name(out.name + ".manifest.json"), "rank", argv,
                   {"k": args.k, "selected": ranking.selected}, [], started, [out], inputs=report_paths)
    return EXIT_OK


REGISTRY_TEMPLATE = "[{name}]\ncsv = {name}.csv\nlabel_column = label\npositive_label = 1\n"


def cmd_synthetic(args) -> int:
    started = _now()
    out = Path(args.out).resolve()
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("", encoding="utf-8")
        probe.unlink()
    except OSError as exc:
        raise UsageError(f"cannot write to {out}: {exc.strerror or exc}") from None
    datasets, notes = synthetic.generate(args.suite, args.seed)
    outputs = []
    for name, ds in datasets.items():
        path = out / f"{name}.csv"
        write_csv(ds, path)
        outputs.append(path)
    registry = out / "registry.ini"
    registry.write_text("\n".join(REGISTRY_TEMPLATE.format(name=n) for n in datasets), encoding="utf-8")
    notes_path = out / "NOTES.md"
    notes_path.write_text(notes, encoding="utf-8")
    outputs += [registry, notes_path]
    print(f"wrote {len(datasets)} datasets to {out}")
    argv = ["synthetic", args.suite, "--seed", str(args.seed), "--out", str(out)]
    write_manifest(out / "manifest.json", "synthetic", argv, {"suite": args.suite}, [args.seed], started, outputs)
    return EXIT_OK


def cmd_replay(args) -> int:
    path = Path(args.manifest)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read manifest {path}: {exc}") from None
    if doc.get("format") != MANIFEST_FORMAT:
        raise UsageError(f"{path} is not a transmeter manifest")
    if doc.get("registry_sha256") and Path(doc["registry"]).is_file():
        if _sha256(Path(doc["registry"])) != doc["registry_sha256"]:
            print(f"warning: registry {doc['registry']} changed since the recorded run", file=sys.stderr)
    argv = list(doc["argv"])
    if args.out is not None:
        i = argv.index("--out")
        argv[i + 1] = str(Path(args.out).resolve())
    return main(argv)


COMMANDS = {
    "pretrain": cmd_pretrain,
    "measure": cmd_measure,
    "rank": cmd_rank,
    "synthetic": cmd_synthetic,
    "replay": cmd_replay,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except (UsageError, TransmeterError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception:
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
