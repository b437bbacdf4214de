"""
Command implementations. Each takes the parsed arguments, writes its outputs
plus a run manifest, and returns the manifest.
"""
import argparse
import json
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import structlog
from threadpoolctl import threadpool_limits

from src.services.data_service.domain.entities import ClipKind
from src.services.data_service.infrastructure.compositing import composite
from src.services.data_service.infrastructure.frame_io import (
    PNG_SUFFIX,
    export_clip,
    read_frames,
    read_sequence,
    write_sequence,
)
from src.services.data_service.infrastructure.pipeline import SyntheticClipSource, derive_seed
from src.services.data_service.infrastructure.synthesis import synth_matting_clip, synth_segmentation_sample
from src.services.matting_service.domain.entities import ModelConfig
from src.services.matting_service.infrastructure.checkpoint import load_model
from src.services.matting_service.infrastructure.inference import infer_clip
from src.services.matting_service.infrastructure.network import (
    build_model,
    count_macs,
    count_params,
    count_pooled_macs,
)
from src.services.ml_service.domain.entities import MetricName, MetricReport, TrainingRunConfig
from src.services.ml_service.infrastructure.metrics import evaluate_clip, per_frame_mad, write_report, write_trace
from src.services.ml_service.infrastructure.training_service import build_training_service
from src.shared.domain.exceptions import ConfigError, ContractError, FrameIOError, ShapeError
from src.shared.infrastructure.settings import get_settings
from src.shared.tensor import Tensor

from .manifest import RunManifest

logger = structlog.get_logger(__name__)


def _model_config(spec: str) -> ModelConfig:
    """A preset name or the path of a JSON model config."""
    path = Path(spec)
    if path.suffix == ".json":
        try:
            return ModelConfig.parse(json.loads(path.read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return ModelConfig.preset(spec)


def _background(path: Path, count: int) -> np.ndarray:
    bg = read_frames(path)
    if len(bg) == 1:
        return np.repeat(bg, count, axis=0)
    if len(bg) < count:
        raise FrameIOError(f"{path}: background has {len(bg)} frames, the clip needs {count}")
    return bg[:count]


# infer

def cmd_infer(args: argparse.Namespace) -> RunManifest:
    use_dgf = args.dgf == "on"
    streaming = args.streaming == "on"
    if use_dgf and args.downsample >= 1.0:
        raise ContractError("--dgf on needs --downsample below 1; the guided filter upsamples a downsampled pass")

    if args.checkpoint:
        model = load_model(args.checkpoint)
    else:
        model = build_model(_model_config(args.model), seed=args.seed)
    frames = read_frames(args.input)
    alpha, fg = infer_clip(model, frames, args.downsample, use_dgf, streaming, args.chunk)

    output = Path(args.output)
    write_sequence(output / "alpha", alpha, bits=args.alpha_bits)
    write_sequence(output / "fg", fg)
    outputs = [str(output / "alpha"), str(output / "fg")]
    if args.background:
        bg = _background(Path(args.background), len(frames))
        write_sequence(output / "composite", composite(fg, alpha, bg))
        outputs.append(str(output / "composite"))

    manifest = RunManifest(
        command="infer",
        checkpoint_path=str(args.checkpoint) if args.checkpoint else None,
        inputs=[str(args.input)] + ([str(args.background)] if args.background else []),
        outputs=outputs,
        seed=None if args.checkpoint else args.seed,
        options={
            "downsample": args.downsample,
            "dgf": use_dgf,
            "streaming": streaming,
            "chunk": args.chunk,
            "alpha_bits": args.alpha_bits,
            "model": None if args.checkpoint else args.model,
            "frames": len(frames),
        },
    )
    manifest.write(output)
    return manifest


# eval

def _is_clip_dir(path: Path) -> bool:
    return (path / "alpha").is_dir() or any(p.suffix.lower() == PNG_SUFFIX for p in path.iterdir())


def _clip_dirs(root: Path) -> Dict[str, Path]:
    if not root.is_dir():
        raise FrameIOError(f"clip directory not found: {root}")
    if _is_clip_dir(root):
        return {"clip": root}
    clips = {p.name: p for p in sorted(root.iterdir()) if p.is_dir() and _is_clip_dir(p)}
    if not clips:
        raise FrameIOError(f"no clips under {root}")
    return clips


def _read_planes(clip_dir: Path) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    alpha_dir = clip_dir / "alpha" if (clip_dir / "alpha").is_dir() else clip_dir
    alpha = read_sequence(alpha_dir, 1)
    fg = read_sequence(clip_dir / "fg", 3) if (clip_dir / "fg").is_dir() else None
    return alpha, fg


def parse_metrics(text: str) -> List[MetricName]:
    try:
        return [MetricName(name.strip()) for name in text.split(",") if name.strip()]
    except ValueError as exc:
        choices = ", ".join(m.value for m in MetricName)
        raise ConfigError(f"unknown metric in '{text}'; choose from {choices}") from exc


def cmd_eval(args: argparse.Namespace) -> RunManifest:
    metrics = parse_metrics(args.metrics)
    pred_clips = _clip_dirs(Path(args.pred))
    gt_clips = _clip_dirs(Path(args.gt))
    if set(pred_clips) != set(gt_clips):
        raise ContractError(
            f"prediction and ground-truth clips differ: {sorted(set(pred_clips) ^ set(gt_clips))}"
        )

    def evaluate(name: str) -> Tuple[MetricReport, np.ndarray]:
        alpha, fg = _read_planes(pred_clips[name])
        alpha_gt, fg_gt = _read_planes(gt_clips[name])
        if alpha.shape != alpha_gt.shape:
            raise ContractError(f"clip '{name}' is misaligned: {alpha.shape} vs {alpha_gt.shape}")
        report = evaluate_clip(alpha, alpha_gt, fg, fg_gt, metrics, clip_id=name)
        return report, per_frame_mad(alpha, alpha_gt)

    names = sorted(pred_clips)
    with ThreadPoolExecutor(max_workers=max(1, get_settings().worker_threads)) as pool:
        results = list(pool.map(evaluate, names))
    reports = [report for report, _ in results]

    report_path = write_report(args.report, reports)
    outputs = [str(report_path)]
    if args.trace:
        trace_path = Path(args.trace)
        if trace_path.exists():
            trace_path.unlink()
        for name, (_, trace) in zip(names, results):
            write_trace(trace_path, name, trace)
        outputs.append(str(trace_path))

    for report in reports + ([MetricReport.aggregate(reports)] if len(reports) > 1 else []):
        print(f"{report.clip_id}: " + ", ".join(f"{k}={v:.4f}" for k, v in sorted(report.values().items())))

    manifest = RunManifest(
        command="eval",
        inputs=[str(args.pred), str(args.gt)],
        outputs=outputs,
        options={"metrics": [m.value for m in metrics], "clips": names},
    )
    manifest.write(report_path.parent)
    return manifest


# bench

def parse_resolution(text: str) -> Tuple[int, int]:
    """'HxW' or a single number for a square frame."""
    try:
        parts = [int(p) for p in text.lower().split("x")]
    except ValueError as exc:
        raise ConfigError(f"resolution must look like 512x288, got '{text}'") from exc
    if len(parts) == 1:
        parts = parts * 2
    if len(parts) != 2 or min(parts) < 1:
        raise ConfigError(f"resolution must look like 512x288, got '{text}'")
    return parts[0], parts[1]


def cmd_bench(args: argparse.Namespace) -> RunManifest:
    config = _model_config(args.config)
    height, width = parse_resolution(args.resolution)
    if args.frames < 1:
        raise ContractError(f"--frames must be at least 1, got {args.frames}")
    model = build_model(config, seed=args.seed).eval()
    use_dgf = args.downsample < 1.0
    params = count_params(model)
    macs = count_macs(model, height, width, args.downsample, use_dgf=use_dgf)
    pooled_macs = count_pooled_macs(model, height, width, args.downsample, use_dgf=use_dgf)

    rng = np.random.default_rng(args.seed)
    frames = rng.random((1, args.frames, 3, height, width), dtype=np.float32)
    with threadpool_limits(limits=args.threads):
        for _ in range(args.warmup):
            model.forward(Tensor(frames[:, :1]), downsample=args.downsample, use_dgf=use_dgf)
        state = None
        start = time.perf_counter()
        for t in range(args.frames):
            _, state = model.forward(Tensor(frames[:, t:t + 1]), state, downsample=args.downsample, use_dgf=use_dgf)
        elapsed = time.perf_counter() - start
    fps = args.frames / elapsed if elapsed > 0 else float("inf")

    print(f"params: {params}")
    print(f"macs: {macs}")
    print(f"pooled_macs: {pooled_macs} (squeeze-excitation and LR-ASPP gate, not in macs)")
    print(f"fps: {fps:.3f}")
    logger.info("bench_finished", params=params, macs=macs, pooled_macs=pooled_macs, fps=fps, threads=args.threads)

    manifest = RunManifest(
        command="bench",
        config_path=args.config,
        seed=args.seed,
        options={
            "resolution": [height, width],
            "downsample": args.downsample,
            "frames": args.frames,
            "threads": args.threads,
            "warmup": args.warmup,
            "params": params,
            "macs": macs,
            "pooled_macs": pooled_macs,
        },
    )
    if args.output:
        manifest.write(Path(args.output))
    return manifest


# composite and synth

def cmd_composite(args: argparse.Namespace) -> RunManifest:
    fg = read_sequence(args.fg, 3)
    alpha = read_sequence(args.alpha, 1)
    if len(fg) != len(alpha):
        raise ShapeError("foreground and alpha frame counts differ", fg.shape, alpha.shape)
    bg = _background(Path(args.bg), len(fg))
    out = Path(args.out)
    write_sequence(out, composite(fg, alpha, bg))
    manifest = RunManifest(
        command="composite",
        inputs=[str(args.fg), str(args.alpha), str(args.bg)],
        outputs=[str(out)],
        options={"frames": len(fg)},
    )
    manifest.write(out)
    return manifest


def cmd_synth(args: argparse.Namespace) -> RunManifest:
    kind = ClipKind(args.kind)
    out = Path(args.out)
    source = SyntheticClipSource(seed=args.seed, testing=True)
    outputs = []
    for index in range(args.clips):
        seed = derive_seed(args.seed, index)
        if kind is ClipKind.MATTING:
            if args.augment:
                clip = source.matting_clip((index,), args.length, args.height, args.width)
            else:
                clip = synth_matting_clip(seed, args.length, args.height, args.width)
        else:
            video = kind is ClipKind.VIDEO_SEG
            length = args.length if video else 1
            if args.augment:
                clip = source.segmentation_clip((index,), video, length, args.height, args.width)
            else:
                clip = synth_segmentation_sample(seed, video, length, args.height, args.width)
        directory = out / f"clip_{index:04d}"
        export_clip(clip, directory, alpha_bits=args.alpha_bits)
        outputs.append(str(directory))

    manifest = RunManifest(
        command="synth",
        outputs=outputs,
        seed=args.seed,
        options={
            "clips": args.clips,
            "kind": kind.value,
            "length": args.length,
            "height": args.height,
            "width": args.width,
            "augment": args.augment,
            "alpha_bits": args.alpha_bits,
        },
    )
    manifest.write(out)
    logger.info("synth_finished", clips=args.clips, out=str(out))
    return manifest


# train

def _run_config(args: argparse.Namespace) -> TrainingRunConfig:
    base = TrainingRunConfig.from_file(args.config) if args.config else TrainingRunConfig()
    payload = base.model_dump(mode="json")
    if args.profile:
        payload["profile"] = args.profile
    if args.stages:
        payload["stages"] = args.stages
    if args.iterations is not None:
        payload["iterations_per_stage"] = args.iterations
    if args.output:
        payload["output_dir"] = args.output
    if args.seed is not None:
        payload["seed"] = args.seed
    return TrainingRunConfig.parse(payload)


def cmd_train(args: argparse.Namespace) -> RunManifest:
    run_config = _run_config(args)
    service, cursor = build_training_service(run_config, resume=args.resume)
    if cursor is not None:
        logger.info("training_resumed", stage=cursor.stage, iteration=cursor.iteration,
                    completed=list(cursor.completed_stages))
    records = service.run()

    output = Path(run_config.output_dir)
    checkpoints = [str(p) for p in service.storage.list_checkpoints()]
    print(f"passes: {len(records)}")
    print(f"completed stages: {list(service.cursor.completed_stages)}")
    if service.coverage.covered:
        missing = service.coverage.missing(service.model)
        print(f"parameters without gradient: {len(missing)}")

    manifest = RunManifest(
        command="train",
        config_path=str(args.config) if args.config else None,
        checkpoint_path=str(args.resume) if args.resume else None,
        outputs=checkpoints + [str(service.log_path)],
        seed=run_config.seed,
        options=run_config.model_dump(mode="json"),
    )
    manifest.write(output)
    return manifest
