"""Command-line interface: ``hfodistill <stage> [options]``.

Exit codes: 0 success, 1 validation error or missing upstream artifact,
2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import pipeline as P
from . import tensor as T
from .config import KEYS, RunConfig, build_config, default_value
from .data import DataError
from .synth import SynthConfig, generate_dataset

log = logging.getLogger("hfodistill")

STAGES = ("synth", "ingest", "pretrain", "discover", "train", "evaluate", "sweep", "knockout", "report")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("configuration keys (flags > --config file > --preset > defaults)")
    for key, note in KEYS.items():
        g.add_argument(f"--{key}", dest=f"cfg:{key}", default=None, metavar="V",
                       help=f"{note}; default {default_value(key)}")


def _common(p: argparse.ArgumentParser, work: bool = True) -> None:
    if work:
        p.add_argument("--work", required=True, help="work directory holding stage artifacts")
    p.add_argument("--config", default=None, help="TOML config file with [section] tables")
    p.add_argument("--preset", default=None, choices=("paper", "desk"),
                   help="base preset: published constants or desk-scale settings (default paper)")
    p.add_argument("--seed", type=int, default=None, help="seed applied to every stochastic stage")
    p.add_argument("--reference-mode", action="store_true",
                   help="single-threaded float64 deterministic execution")
    p.add_argument("--threads", type=int, default=1, help="intra-op threads (ignored in reference mode)")
    p.add_argument("--folds", default=None, help="comma-separated fold ids (default all)")
    p.add_argument("--variant", default=None, help="write classifier/evaluation outputs under variants/<name>")
    p.add_argument("-v", "--verbose", action="store_true")
    _add_config_flags(p)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hfodistill", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="stage", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset with planted event classes")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--subjects", type=int, default=SynthConfig.n_subjects)
    p.add_argument("--events", type=int, default=SynthConfig.events_per_subject, help="events per subject")
    p.add_argument("--channels", type=int, default=SynthConfig.channels_per_subject)
    p.add_argument("--snr-db", type=float, default=SynthConfig.snr_db)
    p.add_argument("--institutions", type=int, default=SynthConfig.n_institutions)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("ingest", help="extract windows and scalogram images; assign folds")
    p.add_argument("--manifest", required=True)
    p.add_argument("--dump-tf", type=int, default=0, metavar="N",
                   help="also write the first N scalograms as PGM with axis CSVs")
    _common(p)

    for name, text in (("pretrain", "train the VAE per fold"),
                       ("discover", "two-stage k-means weak labels per fold"),
                       ("train", "train the classification head per fold"),
                       ("evaluate", "predict, fit outcome models and write report.json")):
        _common(sub.add_parser(name, help=text))
    for name, text in (("sweep", "decode per-dimension latent sweeps"),
                       ("knockout", "latent knockout PCA and mixing scores")):
        p = sub.add_parser(name, help=text)
        _common(p)
        p.add_argument("--fold", type=int, default=0)

    p = sub.add_parser("report", help="print report.md (regenerated from report.json)")
    p.add_argument("--work", required=True)
    p.add_argument("--variant", default=None)
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args) -> RunConfig:
    overrides = {k.split(":", 1)[1]: v for k, v in vars(args).items() if k.startswith("cfg:") and v is not None}
    if args.seed is not None:
        for key in ("pretrain.seed", "labels.seed", "classifier.seed", "folds.seed", "vae.init_seed"):
            overrides.setdefault(key, args.seed)
    return build_config(args.preset, args.config, overrides)


def write_run_meta(work: Path, stage: str, cfg: RunConfig, args) -> None:
    import torch

    path = work / "run_meta.json"
    meta = json.loads(path.read_text(encoding="utf-8")) if path.exists() else {"stages": {}}
    meta["stages"][stage] = {
        "config_hash": cfg.config_hash(), "config": cfg.to_dict(), "seed": args.seed,
        "reference_mode": bool(args.reference_mode), "threads": 1 if args.reference_mode else args.threads,
        "variant": getattr(args, "variant", None),
    }
    meta["versions"] = {"hfodistill": __version__, "python": platform.python_version(),
                        "numpy": np.__version__, "torch": torch.__version__}
    P.write_text_atomic(path, json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _fold_ids(text):
    return None if text is None else [int(x) for x in text.split(",") if x.strip()]


def run(args) -> int:
    if args.stage == "synth":
        cfg = SynthConfig(n_subjects=args.subjects, events_per_subject=args.events,
                          channels_per_subject=args.channels, snr_db=args.snr_db,
                          n_institutions=args.institutions, seed=args.seed)
        ds = generate_dataset(cfg, args.out)
        print(f"wrote {len(ds.events)} events for {len(ds.subjects)} subjects to {args.out}")
        return 0
    if args.stage == "report":
        report = P.read_report(args.work, args.variant)
        from .evaluation import FoldMetrics, MetricsReport

        folds = [FoldMetrics(**f) for f in report["folds"]]
        print(MetricsReport.from_folds(folds, report["subjects"]).to_markdown(), end="")
        return 0

    cfg = resolve_config(args)
    T.set_mode(reference=args.reference_mode, threads=args.threads)
    work = Path(args.work)
    work.mkdir(parents=True, exist_ok=True)
    folds = _fold_ids(args.folds)
    if args.stage == "ingest":
        table = P.ingest(args.manifest, work, cfg, args.dump_tf)
        print(f"ingested {len(table.events)} events")
    elif args.stage == "pretrain":
        for fid, res in P.run_pretrain(work, cfg, folds).items():
            h = res.history[-1]
            print(f"fold {fid}: perceptual {h['mean_perceptual']:.4f} kl {h['mean_kl']:.4f} beta {h['beta']:.5f}")
    elif args.stage == "discover":
        for fid, disc in P.run_discover(work, cfg, folds).items():
            print(f"fold {fid}: {int(disc.labels.sum())} pathological of {len(disc.labels)}")
    elif args.stage == "train":
        P.run_train(work, cfg, folds, args.variant)
        print("classifier trained")
    elif args.stage == "evaluate":
        rep = P.run_evaluate(work, cfg, folds, args.variant)
        print(rep.to_markdown(), end="")
    elif args.stage == "sweep":
        print(f"wrote {len(P.run_sweep(work, cfg, args.fold, args.variant))} sweep images")
    elif args.stage == "knockout":
        print(f"wrote {len(P.run_knockout(work, cfg, args.fold, args.variant))} knockout files")
    write_run_meta(work, args.stage, cfg, args)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except (P.MissingArtifact, DataError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
