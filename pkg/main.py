import argparse
import logging
import sys
from typing import List, Optional

import commands
from errors import EegSslError, ShapeError
from schema import METHODS
from settings import get_settings

logger = logging.getLogger("eegssl")


def _fractions(text: str) -> List[float]:
    return [float(item) for item in text.split(",") if item.strip()]


def _names(text: str) -> List[str]:
    return [item.strip() for item in text.split(",") if item.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eegssl", description="Semi-supervised EEG emotion recognition experiments")
    parser.add_argument("--seed", type=int, default=None, help="single seed (overrides the config's seed list)")
    parser.add_argument("--config", default=None, help="flat KEY=value experiment config file")
    parser.add_argument("--out", default=None, help="output directory (default: EEGSSL_OUT_DIR or ./runs)")
    parser.add_argument("--force", action="store_true", help="re-run configs that already completed")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    # ------- data -------
    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--spec", default=None, help="JSON synthetic spec file")
    p.add_argument("--mode", choices=["features", "raw"], default="features")
    p.add_argument("--snr", type=float, default=1.0)
    p.add_argument("--segments-per-class", type=int, default=20)
    p.add_argument("--sessions", type=int, default=15)
    p.add_argument("--experiments", type=int, default=1)
    p.add_argument("--output", default=None)
    p.set_defaults(handler=commands.synth)

    p = sub.add_parser("preprocess", help="resample, filter and normalize raw CSV recordings")
    p.add_argument("inputs", nargs="+", help="raw CSV files or directories")
    p.add_argument("--output", default=None)
    p.set_defaults(handler=commands.preprocess_cmd)

    p = sub.add_parser("features", help="segment recordings and extract DE features")
    p.add_argument("inputs", nargs="*", help="preprocessed raw CSV files or directories")
    p.add_argument("--mat", nargs="*", default=None, help="SEED ExtractedFeatures .mat files, one per experiment")
    p.add_argument("--output", default=None)
    p.set_defaults(handler=commands.features_cmd)

    # ------- experiments -------
    p = sub.add_parser("train", help="train and evaluate one experiment config")
    p.add_argument("--features", default=None)
    p.add_argument("--method", choices=METHODS, default=None)
    p.add_argument("--backbone", choices=["dnn", "cnn", "n/a"], default=None)
    p.add_argument("--fraction", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(handler=commands.train)

    p = sub.add_parser("sweep", help="methods x label fractions")
    p.add_argument("--features", default=None)
    p.add_argument("--methods", type=_names, default=list(METHODS))
    p.add_argument("--fractions", type=_fractions, default=[0.03, 0.05, 0.10])
    p.add_argument("--backbones", type=_names, default=["dnn", "cnn"])
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--output", default=None)
    p.set_defaults(handler=commands.sweep)

    for name, handler, text in (
        ("confusion", commands.confusion, "confusion matrix of a stored run"),
        ("boundary", commands.boundary, "PCA decision-boundary grid of a stored run"),
    ):
        p = sub.add_parser(name, help=text)
        p.add_argument("--run", required=True, help="run directory name (config hash)")
        p.add_argument("--features", default=None)
        p.add_argument("--experiment", type=int, default=0)
        p.add_argument("--job-seed", dest="seed_id", type=int, default=0, help="seed of the stored job")
        if name == "boundary":
            p.add_argument("--grid-res", type=int, default=None)
            p.add_argument("--reference", action="store_true", help="also export the linear reference classifier")
        else:
            p.add_argument("--output", default=None)
        p.set_defaults(handler=handler)

    p = sub.add_parser("report", help="aggregate registry runs to report.csv / report.json")
    p.set_defaults(handler=commands.report)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else get_settings().log_level.upper()
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.handler(args)
    except ShapeError as exc:
        # malformed input arrays reach the CLI as shape mismatches
        logger.error("%s", exc)
        return 3
    except EegSslError as exc:
        logger.error("%s", exc)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
