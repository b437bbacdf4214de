"""
Evaluation metrics for alpha mattes and foregrounds.

MAD, MSE, Grad, Conn and foreground MSE are scaled by 1e3; dtSSD by 1e2.
Inputs are numpy arrays or Tensors shaped T×1×H×W (or anything whose last
two axes are spatial); values are averaged jointly over frames and pixels
unless stated otherwise.
"""
import json
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Union

import numpy as np
import structlog
from scipy import ndimage

from src.shared.domain.exceptions import ContractError, ShapeError
from src.shared.tensor import Tensor

from ..domain.entities import DEFAULT_METRICS, MetricName, MetricReport

logger = structlog.get_logger(__name__)

ArrayLike = Union[np.ndarray, Tensor]

ERROR_SCALE = 1e3
DTSSD_SCALE = 1e2
GRAD_SIGMA = 1.4
CONN_STEP = 0.1
CONN_DISTANCE_FLOOR = 0.15


def _array(x: ArrayLike) -> np.ndarray:
    if isinstance(x, Tensor):
        x = x.numpy()
    return np.asarray(x, dtype=np.float64)


def _pair(pred: ArrayLike, gt: ArrayLike, name: str):
    pred, gt = _array(pred), _array(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"{name}: prediction and ground truth shapes differ", pred.shape, gt.shape)
    return pred, gt


def _frames(x: np.ndarray) -> np.ndarray:
    """View as a stack of 2-D maps."""
    return x.reshape(-1, x.shape[-2], x.shape[-1])


def mad(alpha: ArrayLike, alpha_gt: ArrayLike) -> float:
    pred, gt = _pair(alpha, alpha_gt, "mad")
    return float(np.mean(np.abs(pred - gt)) * ERROR_SCALE)


def mse(alpha: ArrayLike, alpha_gt: ArrayLike) -> float:
    pred, gt = _pair(alpha, alpha_gt, "mse")
    return float(np.mean((pred - gt) ** 2) * ERROR_SCALE)


def per_frame_mad(alpha: ArrayLike, alpha_gt: ArrayLike) -> np.ndarray:
    """MAD of every frame along the time axis (the fourth from the end)."""
    pred, gt = _pair(alpha, alpha_gt, "per_frame_mad")
    if pred.ndim < 4:
        raise ShapeError("per_frame_mad expects T×C×H×W maps", pred.shape)
    diff = np.abs(pred - gt)
    time_axis = pred.ndim - 4
    axes = tuple(a for a in range(pred.ndim) if a != time_axis)
    return diff.mean(axis=axes) * ERROR_SCALE


def gradient_magnitude(image: np.ndarray, sigma: float = GRAD_SIGMA) -> np.ndarray:
    """Magnitude of first-order Gaussian derivatives of a 2-D map."""
    dy = ndimage.gaussian_filter(image, sigma, order=(1, 0), mode="reflect")
    dx = ndimage.gaussian_filter(image, sigma, order=(0, 1), mode="reflect")
    return np.sqrt(dx * dx + dy * dy)


def grad_metric(alpha: ArrayLike, alpha_gt: ArrayLike, sigma: float = GRAD_SIGMA) -> float:
    """Squared difference of gradient magnitudes, per pixel, averaged over frames."""
    pred, gt = _pair(alpha, alpha_gt, "grad_metric")
    errors = []
    for p, g in zip(_frames(pred), _frames(gt)):
        diff = gradient_magnitude(p, sigma) - gradient_magnitude(g, sigma)
        errors.append(np.sum(diff * diff) / p.size)
    return float(np.mean(errors) * ERROR_SCALE)


def _largest_component(mask: np.ndarray) -> np.ndarray:
    labels, count = ndimage.label(mask)
    if count == 0:
        return np.zeros_like(mask, dtype=bool)
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    return labels == int(np.argmax(sizes))


def connectivity_levels(pred: np.ndarray, gt: np.ndarray, step: float = CONN_STEP) -> np.ndarray:
    """
    Per-pixel level at which a pixel leaves the largest region both maps agree on.

    For thresholds θ = step, 2·step, … below 1, the largest 4-connected
    component of (pred ≥ θ) ∧ (gt ≥ θ) is found; a pixel outside it for the
    first time gets the previous threshold. Pixels never dropped get 1.
    """
    count = int(round(1.0 / step))
    thresholds = np.arange(count) * step
    levels = np.full(pred.shape, -1.0)
    for i in range(1, count):
        omega = _largest_component((pred >= thresholds[i]) & (gt >= thresholds[i]))
        dropped = (levels == -1) & ~omega
        levels[dropped] = thresholds[i - 1]
    levels[levels == -1] = 1.0
    return levels


def conn_metric(alpha: ArrayLike, alpha_gt: ArrayLike, step: float = CONN_STEP) -> float:
    """Connectivity error, per pixel, averaged over frames."""
    pred, gt = _pair(alpha, alpha_gt, "conn_metric")
    errors = []
    for p, g in zip(_frames(pred), _frames(gt)):
        levels = connectivity_levels(p, g, step)
        pred_d = p - levels
        gt_d = g - levels
        pred_phi = 1.0 - pred_d * (pred_d >= CONN_DISTANCE_FLOOR)
        gt_phi = 1.0 - gt_d * (gt_d >= CONN_DISTANCE_FLOOR)
        errors.append(np.sum(np.abs(pred_phi - gt_phi)) / p.size)
    return float(np.mean(errors) * ERROR_SCALE)


def dtssd(alpha: ArrayLike, alpha_gt: ArrayLike) -> float:
    """Mean over frame pairs of the RMS difference of temporal derivatives, ×1e2."""
    pred, gt = _pair(alpha, alpha_gt, "dtssd")
    if pred.ndim < 4:
        raise ShapeError("dtssd expects T×C×H×W sequences", pred.shape)
    time_axis = pred.ndim - 4
    if pred.shape[time_axis] < 2:
        raise ContractError(f"dtssd needs at least 2 frames, got {pred.shape[time_axis]}")
    gap = np.diff(pred, axis=time_axis) - np.diff(gt, axis=time_axis)
    axes = tuple(a for a in range(pred.ndim) if a > time_axis)
    per_pair = np.sqrt(np.mean(gap * gap, axis=axes))
    return float(np.mean(per_pair) * DTSSD_SCALE)


def fg_mse(fg: ArrayLike, fg_gt: ArrayLike, alpha_gt: ArrayLike) -> float:
    """Foreground MSE over pixels where α* > 0; 0 for an empty mask."""
    pred, gt = _pair(fg, fg_gt, "fg_mse")
    alpha = _array(alpha_gt)
    if alpha.shape[:-3] != pred.shape[:-3] or alpha.shape[-2:] != pred.shape[-2:]:
        raise ShapeError("fg_mse: alpha extents differ from the foreground", alpha.shape, pred.shape)
    mask = np.broadcast_to(alpha > 0, pred.shape)
    if not mask.any():
        return 0.0
    return float(np.mean(((pred - gt) ** 2)[mask]) * ERROR_SCALE)


def alpha_to_mask(alpha: ArrayLike, threshold: float = 0.5) -> np.ndarray:
    return _array(alpha) > threshold


def miou(pred_mask: ArrayLike, gt_mask: ArrayLike) -> float:
    """Mean IOU over the foreground and background classes; an empty union scores 1."""
    pred = np.asarray(pred_mask.numpy() if isinstance(pred_mask, Tensor) else pred_mask).astype(bool)
    gt = np.asarray(gt_mask.numpy() if isinstance(gt_mask, Tensor) else gt_mask).astype(bool)
    if pred.shape != gt.shape:
        raise ShapeError("miou: mask shapes differ", pred.shape, gt.shape)
    scores = []
    for p, g in ((pred, gt), (~pred, ~gt)):
        union = np.count_nonzero(p | g)
        scores.append(1.0 if union == 0 else np.count_nonzero(p & g) / union)
    return float(np.mean(scores))


def evaluate_clip(
    alpha: ArrayLike,
    alpha_gt: ArrayLike,
    fg: Optional[ArrayLike] = None,
    fg_gt: Optional[ArrayLike] = None,
    metrics: Sequence[MetricName] = DEFAULT_METRICS,
    clip_id: str = "clip",
) -> MetricReport:
    """
    Build a MetricReport with the selected metrics.

    dtSSD is skipped for single-frame clips; foreground MSE needs both
    foreground planes.
    """
    alpha_np, gt_np = _pair(alpha, alpha_gt, "evaluate_clip")
    frames = alpha_np.shape[-4] if alpha_np.ndim >= 4 else 1
    values = {}
    for metric in (MetricName(m) for m in metrics):
        if metric is MetricName.MAD:
            values["mad"] = mad(alpha_np, gt_np)
        elif metric is MetricName.MSE:
            values["mse"] = mse(alpha_np, gt_np)
        elif metric is MetricName.GRAD:
            values["grad"] = grad_metric(alpha_np, gt_np)
        elif metric is MetricName.CONN:
            values["conn"] = conn_metric(alpha_np, gt_np)
        elif metric is MetricName.DTSSD:
            if frames >= 2:
                values["dtssd"] = dtssd(alpha_np, gt_np)
        elif metric is MetricName.FG_MSE:
            if fg is not None and fg_gt is not None:
                values["fg_mse"] = fg_mse(fg, fg_gt, gt_np)
        elif metric is MetricName.MIOU:
            values["miou"] = miou(alpha_to_mask(alpha_np), alpha_to_mask(gt_np))
    return MetricReport(clip_id=clip_id, frames=frames, **values)


def write_report(path: Union[str, Path], reports: Iterable[MetricReport], include_aggregate: bool = True) -> Path:
    """Write one JSON line per (clip, metric); re-runs on equal input are byte-identical."""
    reports: List[MetricReport] = list(reports)
    if include_aggregate and len(reports) > 1:
        reports = reports + [MetricReport.aggregate(reports)]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps(record, sort_keys=True) for report in reports for record in report.records()]
    path.write_text("".join(line + "\n" for line in lines))
    logger.info("metric_report_written", path=str(path), clips=len(reports))
    return path


def write_trace(path: Union[str, Path], clip_id: str, trace: np.ndarray) -> Path:
    """Append a per-frame MAD trace as JSON lines (clip, frame, mad)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as handle:
        for frame, value in enumerate(np.asarray(trace).tolist()):
            handle.write(json.dumps({"clip": clip_id, "frame": frame, "mad": value}, sort_keys=True) + "\n")
    return path
