"""
Ablation harnesses: recurrence on/off and learned vs fast guided-filter upsampling.
"""
from typing import Dict, Sequence

import numpy as np
import structlog

from src.services.data_service.domain.entities import ClipSample
from src.services.matting_service.infrastructure.network import MattingNetwork
from src.shared.domain.exceptions import ContractError
from src.shared.tensor import Tensor

from .metrics import dtssd, grad_metric, mad

logger = structlog.get_logger(__name__)


def _predict(model: MattingNetwork, clip: ClipSample, **forward_kwargs) -> np.ndarray:
    was_training = model.training
    model.eval()
    try:
        output, _ = model.forward(Tensor(clip.frames[None]), **forward_kwargs)
    finally:
        model.train(was_training)
    return output.alpha.numpy()[0]


def evaluate_recurrence_ablation(
    model: MattingNetwork, clip: ClipSample, downsample: float = 1.0
) -> Dict[str, Dict[str, float]]:
    """
    dtSSD and MAD of one matting clip with and without recurrence.

    The ablated run passes a zero state to every time step, so each frame is
    predicted from itself alone.
    """
    if clip.alpha_gt is None:
        raise ContractError("recurrence ablation needs a matting clip with ground-truth alpha")
    if clip.length < 2:
        raise ContractError(f"recurrence ablation needs at least 2 frames, got {clip.length}")

    results = {}
    for label, recurrence in (("recurrent", True), ("zero_state", False)):
        alpha = _predict(model, clip, downsample=downsample, recurrence=recurrence)
        results[label] = {"dtssd": dtssd(alpha, clip.alpha_gt), "mad": mad(alpha, clip.alpha_gt)}
    logger.info("recurrence_ablation", recurrent=results["recurrent"]["dtssd"],
                zero_state=results["zero_state"]["dtssd"])
    return results


def dgf_vs_fgf_ablation(
    model: MattingNetwork,
    clips: Sequence[ClipSample],
    downsample: float = 0.25,
) -> Dict[str, Dict[str, float]]:
    """
    Grad and dtSSD of the learned guided-filter head against the fast guided filter.

    Both paths share the low-resolution network output; only the upsampler
    differs. Scores are averaged over the clips.
    """
    if not clips:
        raise ContractError("ablation needs at least one clip")
    if not 0.0 < downsample < 1.0:
        raise ContractError(f"guided-filter upsampling needs a downsample factor below 1, got {downsample}")

    scores = {"dgf": {"grad": [], "dtssd": []}, "fgf": {"grad": [], "dtssd": []}}
    for clip in clips:
        if clip.alpha_gt is None:
            raise ContractError("ablation clips need ground-truth alpha")
        for upsampler in ("dgf", "fgf"):
            alpha = _predict(model, clip, downsample=downsample, use_dgf=True, upsampler=upsampler)
            scores[upsampler]["grad"].append(grad_metric(alpha, clip.alpha_gt))
            if clip.length >= 2:
                scores[upsampler]["dtssd"].append(dtssd(alpha, clip.alpha_gt))

    results = {
        path: {metric: float(np.mean(values)) if values else float("nan") for metric, values in metrics.items()}
        for path, metrics in scores.items()
    }
    logger.info("upsampler_ablation", clips=len(clips), dgf_grad=results["dgf"]["grad"], fgf_grad=results["fgf"]["grad"])
    return results
