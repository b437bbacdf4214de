"""
Command-line entry point: ``python -m src.cli <command> [options]``.

Exit codes: 0 success, 2 contract or precondition error, 3 I/O error,
1 any other failure.
"""
import argparse
import sys
from typing import List, Optional, Tuple

import structlog

from src.shared.domain.exceptions import CheckpointError, ContractError, FrameIOError
from src.shared.infrastructure.logging import configure_logging
from src.shared.infrastructure.settings import get_settings

from .commands import cmd_bench, cmd_composite, cmd_eval, cmd_infer, cmd_synth, cmd_train

logger = structlog.get_logger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONTRACT = 2
EXIT_IO = 3


def parse_stages(text: str) -> Tuple[int, ...]:
    """'3', '1,2' or '1..4'."""
    try:
        if ".." in text:
            low, high = (int(p) for p in text.split("..", 1))
            return tuple(range(low, high + 1))
        return tuple(int(p) for p in text.split(",") if p.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"stages must look like 1..4 or 1,2, got '{text}'") from exc


def _on_off(text: str) -> str:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError(f"expected on or off, got '{text}'")
    return text


def build_parser() -> argparse.ArgumentParser:
    settings = get_settings()
    parser = argparse.ArgumentParser(prog="matting", description="Recurrent video matting engine")
    commands = parser.add_subparsers(dest="command", required=True)

    infer = commands.add_parser("infer", help="Matte a frame sequence")
    infer.add_argument("--checkpoint", help="Model checkpoint; without it a fresh --model is built")
    infer.add_argument("--model", default="tiny_test", help="Preset name or JSON model config (no checkpoint)")
    infer.add_argument("--seed", type=int, default=settings.default_seed)
    infer.add_argument("--input", required=True, help="PNG frame directory or raw planar file")
    infer.add_argument("--output", required=True, help="Output directory")
    infer.add_argument("--downsample", type=float, default=1.0, help="Downsample factor s in (0, 1]")
    infer.add_argument("--dgf", type=_on_off, default="off", help="Guided-filter refinement (on|off)")
    infer.add_argument("--streaming", type=_on_off, default="on", help="Frame-by-frame recurrent state (on|off)")
    infer.add_argument("--chunk", type=int, default=None, help="Frames per forward call in batch mode")
    infer.add_argument("--background", help="Background frames to composite the prediction over")
    infer.add_argument("--alpha-bits", type=int, choices=(8, 16), default=8)
    infer.set_defaults(handler=cmd_infer)

    evaluate = commands.add_parser("eval", help="Score predicted mattes against ground truth")
    evaluate.add_argument("--pred", required=True, help="Predicted clip directory (or directory of clips)")
    evaluate.add_argument("--gt", required=True, help="Ground-truth clip directory (or directory of clips)")
    evaluate.add_argument("--metrics", default="mad,mse,grad,conn,dtssd",
                          help="Comma-separated metrics: mad, mse, grad, conn, dtssd, fg_mse, miou")
    evaluate.add_argument("--report", required=True, help="JSON-lines report path")
    evaluate.add_argument("--trace", help="Per-frame MAD trace path (JSON lines)")
    evaluate.set_defaults(handler=cmd_eval)

    bench = commands.add_parser("bench", help="Parameter count, MACs and throughput")
    bench.add_argument("--config", default="default", help="Preset name or JSON model config")
    bench.add_argument("--resolution", default="512x288", help="HxW of the input frames")
    bench.add_argument("--downsample", type=float, default=1.0)
    bench.add_argument("--frames", type=int, default=8, help="Timed frames")
    bench.add_argument("--warmup", type=int, default=1, help="Untimed frames before measuring")
    bench.add_argument("--threads", type=int, default=settings.worker_threads, help="BLAS/OpenMP threads")
    bench.add_argument("--seed", type=int, default=settings.default_seed)
    bench.add_argument("--output", help="Directory for the run manifest")
    bench.set_defaults(handler=cmd_bench)

    comp = commands.add_parser("composite", help="Composite foreground and alpha over a background")
    comp.add_argument("--fg", required=True)
    comp.add_argument("--alpha", required=True)
    comp.add_argument("--bg", required=True)
    comp.add_argument("--out", required=True)
    comp.set_defaults(handler=cmd_composite)

    synth = commands.add_parser("synth", help="Write synthetic clips with manifests")
    synth.add_argument("--seed", type=int, default=settings.default_seed)
    synth.add_argument("--clips", type=int, default=1)
    synth.add_argument("--out", required=True)
    synth.add_argument("--kind", choices=("matting", "video_seg", "image_seg"), default="matting")
    synth.add_argument("--length", type=int, default=8)
    synth.add_argument("--height", type=int, default=64)
    synth.add_argument("--width", type=int, default=64)
    synth.add_argument("--augment", action="store_true", help="Apply the test-sample augmentation profile")
    synth.add_argument("--alpha-bits", type=int, choices=(8, 16), default=8)
    synth.set_defaults(handler=cmd_synth)

    train = commands.add_parser("train", help="Run training stages")
    train.add_argument("--profile", choices=("desk", "full"))
    train.add_argument("--stages", type=parse_stages, help="1..4, 1,2 or a single stage")
    train.add_argument("--config", help="JSON training config")
    train.add_argument("--resume", help="Training checkpoint to resume from")
    train.add_argument("--iterations", type=int, help="Iterations per stage")
    train.add_argument("--output", help="Run directory (checkpoints, log, manifest)")
    train.add_argument("--seed", type=int)
    train.set_defaults(handler=cmd_train)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    configure_logging()
    args = build_parser().parse_args(argv)
    try:
        args.handler(args)
    except ContractError as exc:
        logger.error("command_rejected", command=args.command, error=str(exc))
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except (FrameIOError, CheckpointError, OSError) as exc:
        logger.error("command_io_failed", command=args.command, error=str(exc))
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:
        logger.exception("command_failed", command=args.command, error=str(exc))
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
