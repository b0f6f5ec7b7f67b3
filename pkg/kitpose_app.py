"""
KITPose - command-line launcher

    python kitpose_app.py train --config configs/desk.toml
    python kitpose_app.py eval --ckpt runs/desk/best.ckpt [--data ann.json] [--flip]
    python kitpose_app.py gradcheck
    python kitpose_app.py cluster --ckpt runs/desk/best.ckpt --instance syn-0-00500 [--sweep]
    python kitpose_app.py ablate --config configs/ablation.toml --seeds 0 1 2

Exit codes: 0 ok, 1 config/data/checkpoint error, 2 numerical failure.
"""

import argparse
import logging
import sys
from pathlib import Path

from kitpose import __version__
from kitpose.errors import KitPoseError, NumericalError

logger = logging.getLogger("kitpose")

CONFIG_DIR = Path(__file__).resolve().parent / "configs"
EXIT_OK, EXIT_ERROR, EXIT_NUMERICAL = 0, 1, 2


def setup_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    logging.getLogger("matplotlib").setLevel(logging.WARNING)
    logging.getLogger("PIL").setLevel(logging.WARNING)


def _load(args, default: str = "desk.toml"):
    from kitpose.config import load_config

    path = args.config or CONFIG_DIR / default
    return load_config(path, overrides=args.set or ())


def cmd_train(args) -> int:
    from kitpose.trainer import train

    cfg = _load(args)
    result = train(cfg, run_dir=args.run_dir)
    logger.info(f"💾 best: {result.best_path}, last: {result.last_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from kitpose.checkpoint import load_checkpoint
    from kitpose.trainer import evaluate, load_eval_instances

    ckpt = load_checkpoint(args.ckpt)
    instances, layout = load_eval_instances(ckpt, args.data, args.image_root)
    flip = args.flip
    if flip is None:
        flip = bool(ckpt.manifest["config"].get("eval", {}).get("flip_test", True))
    out_dir = args.out or Path(args.ckpt).parent / "eval"
    evaluate(ckpt, instances, layout, flip_test=flip, out_dir=out_dir)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from kitpose.inspection import gradcheck

    cfg = _load(args, default="micro.toml")
    report = gradcheck(cfg, probes=args.probes, tolerance=args.tolerance, out_dir=args.out)
    if not report.passed:
        logger.error(f"❌ Gradient check failed: max rel error {report.max_error:.3e} > {args.tolerance:.0e}")
        return EXIT_NUMERICAL
    logger.info(f"✅ Gradient check passed ({len(report.rows)} tensors)")
    return EXIT_OK


def cmd_cluster(args) -> int:
    from kitpose.checkpoint import load_checkpoint
    from kitpose.config import from_dict
    from kitpose.errors import DatasetError
    from kitpose.inspection import cluster_inspect, sweep_prompts
    from kitpose.trainer import load_eval_instances

    ckpt = load_checkpoint(args.ckpt)
    out_dir = Path(args.out or Path(args.ckpt).parent / "clusters")
    if args.sweep:
        sweep_prompts(from_dict(ckpt.manifest["config"]), out_dir / "sweep")
        return EXIT_OK
    if not args.instance:
        raise DatasetError("--instance is required unless --sweep is given")
    instances, layout = load_eval_instances(ckpt, args.data, args.image_root)
    matches = [inst for inst in instances if inst.instance_id == args.instance]
    if not matches:
        raise DatasetError(f"instance '{args.instance}' not found among {len(instances)} instance(s)")
    cluster_inspect(ckpt, matches[0], layout, out_dir=out_dir / args.instance)
    return EXIT_OK


def cmd_ablate(args) -> int:
    from kitpose.inspection import ablate

    cfg = _load(args, default="ablation.toml")
    out_dir = args.out or Path(cfg.run_dir)
    ablate(cfg, out_dir, seeds=args.seeds, table=args.table)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kitpose", description="KITPose training and analysis")
    parser.add_argument("--version", action="version", version=f"kitpose {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", type=Path, help="TOML config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key, e.g. model.n_layers=0 (repeatable)")
        return p

    p = with_config(sub.add_parser("train", help="train a model"))
    p.add_argument("--run-dir", help="output directory (default: run_dir from the config)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", help="COCO keypoint JSON (default: the checkpoint's validation split)")
    p.add_argument("--image-root", help="image directory for --data (default: its folder)")
    p.add_argument("--flip", action=argparse.BooleanOptionalAction, default=None, help="flip-test averaging")
    p.add_argument("--out", help="output directory for results.json and CSVs")
    p.set_defaults(func=cmd_eval)

    p = with_config(sub.add_parser("gradcheck", help="verify backward against finite differences"))
    p.add_argument("--probes", type=int, default=24, help="entries probed per tensor")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--out", help="directory for gradcheck_report.csv")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("cluster", help="dump body-part clusters and attention for one instance")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--instance", help="instance id")
    p.add_argument("--data", help="COCO keypoint JSON holding the instance")
    p.add_argument("--image-root")
    p.add_argument("--sweep", action="store_true", help="retrain across 1..6 prompts and report val PCK")
    p.add_argument("--out")
    p.set_defaults(func=cmd_cluster)

    p = with_config(sub.add_parser("ablate", help="run ablation rows over seeds"))
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--table", choices=["components", "weighting"], default="components")
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose)
    try:
        return args.func(args)
    except NumericalError as e:
        logger.error(f"❌ Numerical failure: {e}")
        return EXIT_NUMERICAL
    except (KitPoseError, OSError) as e:
        logger.error(f"❌ {e}")
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
