"""Command-line entry point: ``python3 -m tinc3d <command> ...``.

Commands: synth, pretrain, eval, equivariance, glcm. Every command accepts
``--config`` (JSON run config), ``--set dotted.key=value`` overrides,
``--seed`` and ``--out``. When ``--out`` is absent, outputs go below
``$TINC_OUT_DIR`` (or ``./runs``).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, load_run_config
from .synthgen import MANIFEST_NAME

log = logging.getLogger("tinc3d")


def _manifest(data: str) -> Path:
    path = Path(data)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.is_file():
        raise FileNotFoundError(f"no cohort manifest at {path}")
    return path


def _out(args, cfg: RunConfig, default: str) -> Path:
    out = Path(args.out) if args.out else cfg.output_root() / default
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth(args, cfg: RunConfig) -> None:
    from .synthgen import generate_cohort

    out = _out(args, cfg, "data")
    cohort = generate_cohort(cfg.synth_config(), out)
    s = cohort.summary()
    print(f"manifest: {cohort.manifest_path}")
    print(f"patients: {s['patients']}  eyes: {s['eyes']}  scans: {s['scans']}  "
          f"converters: {s['converters']}")


def cmd_pretrain(args, cfg: RunConfig) -> None:
    from .pretrain import pretrain, with_method
    from .voldata import load_manifest

    cohort = load_manifest(_manifest(args.data))
    out = _out(args, cfg, f"pretrain_{args.method}")
    result = pretrain(cohort, with_method(cfg.pretrain_config(), args.method), out,
                      resume_from=args.resume)
    print(f"checkpoint: {result.checkpoint}")
    print(f"final loss: {result.history[-1]['total']:.6f}" if result.history else "no steps run")


def cmd_eval(args, cfg: RunConfig) -> None:
    import dataclasses

    from .evaluate import fine_tune, linear_eval
    from .pretrain import load_model
    from .voldata import load_manifest

    model = load_model(args.checkpoint)
    cohort = load_manifest(_manifest(args.data))
    ecfg = dataclasses.replace(cfg.eval_config(), mode=args.mode)
    report = (linear_eval if args.mode == "linear" else fine_tune)(model, cohort, ecfg)
    out = _out(args, cfg, "eval")
    path = out / f"metrics_{args.mode}.json"
    report.write(path)
    print(f"report: {path}")
    print(f"rocauc {report.rocauc:.4f}  prauc {report.prauc:.4f} "
          f"(baseline {report.prauc_baseline:.4f})  bacc {report.bacc:.4f}")


def cmd_equivariance(args, cfg: RunConfig) -> None:
    from .evaluate import equivariance_report
    from .voldata import load_manifest

    cohort = load_manifest(_manifest(args.data))
    if not Path(args.checkpoint).is_file():
        raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
    report = equivariance_report(args.checkpoint, cohort, args.patients, seed=cfg.seed)
    out = _out(args, cfg, "equivariance")
    report.write(out / "equivariance.json")
    report.write_table(out / "trajectories.csv")
    print(f"report: {out / 'equivariance.json'}")
    print(f"mean CI over {len(report.trajectories)} patients: {report.mean_ci:.4f}")


def cmd_glcm(args, cfg: RunConfig) -> None:
    from .voldata import cohort_contrast, load_manifest

    cohort = load_manifest(_manifest(args.data))
    print(f"mean GLCM contrast: {cohort_contrast(cohort, args.levels):.6f}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key by dotted path (repeatable)")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="tinc3d", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic cohort")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", parents=[common], help="self-supervised pretraining")
    p.add_argument("--data", required=True, help="cohort directory or manifest")
    p.add_argument("--method", choices=("tinc", "vicreg", "barlow"), default="tinc")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("eval", parents=[common], help="conversion-prediction evaluation")
    p.add_argument("checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=("linear", "finetune"), default="linear")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("equivariance", parents=[common], help="distance-to-baseline analysis")
    p.add_argument("checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--patients", type=int, default=200)
    p.set_defaults(func=cmd_equivariance)

    p = sub.add_parser("glcm", parents=[common], help="mean GLCM contrast of a cohort")
    p.add_argument("--data", required=True)
    p.add_argument("--levels", type=int, default=256)
    p.set_defaults(func=cmd_glcm)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = list(args.set)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        cfg = load_run_config(args.config, overrides)
        args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0
