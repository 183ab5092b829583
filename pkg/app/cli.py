"""
Command line interface: generate | train | run | eval
"""

import argparse
import json
import sys
from typing import List, Optional

from app.core.config import settings
from app.core.errors import ConfigError, EngineError
from app.core.logging import configure_logging, get_logger
from app.schemas.config import load_run_config
from app.services.pipeline_service import PipelineService

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class UsageError(Exception):
    """Invalid command line"""


class ArgumentParser(argparse.ArgumentParser):
    """argparse that reports usage problems as exceptions instead of exiting with 2"""

    def error(self, message):
        raise UsageError(message)


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="semfusion", description=f"{settings.PROJECT_NAME} {settings.VERSION}")
    parser.add_argument("--log-level", default=None, help="override LOG_LEVEL")

    common = ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value run configuration file")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--poses", choices=("gt", "icp"), help="camera pose source")

    sub = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    sub.add_parser("generate", parents=[common], help="render a synthetic dataset")

    train = sub.add_parser("train", parents=[common], help="train the segmentation network layer by layer")
    train.add_argument("datasets", nargs="+", help="dataset directories written by generate")
    train.add_argument("--resume", help="weight file holding the already trained layers")
    train.add_argument("--start-layer", type=int, default=1, help="first layer to train (1-based)")

    run = sub.add_parser("run", parents=[common], help="reconstruct, segment and fuse a sequence")
    run.add_argument("sequence", help="sequence directory written by generate")
    run.add_argument("--weights", required=True, help="weight file written by train")

    evaluate = sub.add_parser("eval", parents=[common], help="score label views or label volumes")
    evaluate.add_argument("predicted", help="prediction directory or label-volume dump")
    evaluate.add_argument("ground_truth", help="ground-truth sequence directory or label-volume dump")
    return parser


def execute(args: argparse.Namespace) -> dict:
    config = load_run_config(args.config or settings.DEFAULT_RUN_CONFIG)
    config = config.with_overrides(seed=args.seed, pose_source=args.poses)
    pipeline = PipelineService(config)
    if args.command == "generate":
        return pipeline.generate(args.out)
    if args.command == "train":
        if args.start_layer < 1:
            raise UsageError("--start-layer is 1-based")
        if args.start_layer > 1 and not args.resume:
            raise UsageError("--start-layer needs --resume")
        report = pipeline.train(args.datasets, args.out, resume=args.resume, start_layer=args.start_layer - 1)
        return {"layer_accuracy": report.layer_accuracy, "weights_sha256": report.weights_sha256}
    if args.command == "run":
        metrics = pipeline.run(args.sequence, args.weights, args.out)
        return {"frames": metrics.frames, "mean_frame_accuracy": metrics.mean_frame_accuracy,
                "fused_accuracy": metrics.fused_volume.accuracy}
    metrics = pipeline.evaluate(args.predicted, args.ground_truth, args.out)
    return {"accuracy": metrics.accuracy, "class_average_accuracy": metrics.class_average_accuracy}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        configure_logging(level=args.log_level)
        summary = execute(args)
    except (UsageError, ConfigError) as e:
        parser.print_usage(sys.stderr)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (EngineError, OSError) as e:
        get_logger(__name__).error("cli.failed", error=str(e), kind=type(e).__name__)
        return EXIT_RUNTIME
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
