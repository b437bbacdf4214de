"""
Procedural clip synthesis.

Matting clips layer a soft-edged figure (torso, head, hand and thin hair
strands) over a textured, panning background with moving shapes and
composite them with I = α·F + (1−α)·B. Segmentation samples threshold
procedural shapes into binary masks. Everything is a pure function of the
seed.
"""
from typing import List, Tuple

import numpy as np
import structlog
from scipy import ndimage

from src.shared.domain.exceptions import ShapeError

from ..domain.entities import ClipKind, ClipSample, Easing

logger = structlog.get_logger(__name__)

RESOLUTION_RANGE = (256, 512)
RESOLUTION_MULTIPLE = 16
EDGE_FEATHER = 2.0


def _check_extents(height: int, width: int, length: int) -> None:
    if height % 16 or width % 16 or height <= 0 or width <= 0:
        raise ShapeError("synthetic clip extents must be positive multiples of 16", (height, width))
    if length < 1:
        raise ShapeError("synthetic clip needs at least one frame", (length,))


def _grid(height: int, width: int) -> Tuple[np.ndarray, np.ndarray]:
    return np.mgrid[0:height, 0:width].astype(np.float32)


def value_noise(rng: np.random.Generator, height: int, width: int, cells: int = 4, octaves: int = 3) -> np.ndarray:
    """Smooth fractal noise in [0, 1] from cubic-interpolated random lattices."""
    total = np.zeros((height, width), dtype=np.float64)
    amplitude, norm = 1.0, 0.0
    for octave in range(octaves):
        n = cells * 2 ** octave
        lattice = rng.random((n + 1, n + 1))
        ys = np.linspace(0.0, n, height)
        xs = np.linspace(0.0, n, width)
        coords = np.meshgrid(ys, xs, indexing="ij")
        total += amplitude * ndimage.map_coordinates(lattice, coords, order=3, mode="nearest")
        norm += amplitude
        amplitude *= 0.5
    total /= norm
    low, high = total.min(), total.max()
    return ((total - low) / max(high - low, 1e-8)).astype(np.float32)


def soft_ellipse(ys, xs, center, radii, angle: float = 0.0, feather: float = EDGE_FEATHER) -> np.ndarray:
    """Ellipse coverage with a linear ramp of ``feather`` pixels across the edge."""
    dy, dx = ys - center[0], xs - center[1]
    cos, sin = np.cos(angle), np.sin(angle)
    ry = cos * dy - sin * dx
    rx = sin * dy + cos * dx
    q = np.sqrt((ry / radii[0]) ** 2 + (rx / radii[1]) ** 2)
    distance = (q - 1.0) * min(radii)
    return np.clip(0.5 - distance / feather, 0.0, 1.0).astype(np.float32)


def soft_rectangle(ys, xs, top_left, size, feather: float = 1.0) -> np.ndarray:
    dy = np.maximum(top_left[0] - ys, ys - (top_left[0] + size[0]))
    dx = np.maximum(top_left[1] - xs, xs - (top_left[1] + size[1]))
    distance = np.maximum(dy, dx)
    return np.clip(0.5 - distance / feather, 0.0, 1.0).astype(np.float32)


def _color(rng: np.random.Generator, low: float = 0.1, high: float = 0.9) -> np.ndarray:
    return rng.uniform(low, high, size=(3, 1, 1)).astype(np.float32)


def _path(rng: np.random.Generator, length: int, start, end) -> np.ndarray:
    """length×2 positions eased from start to end."""
    easing = list(Easing)[int(rng.integers(len(Easing)))]
    start, end = np.asarray(start, dtype=np.float64), np.asarray(end, dtype=np.float64)
    steps = [easing.apply(t / (length - 1)) if length > 1 else 0.0 for t in range(length)]
    return np.array([start + (end - start) * u for u in steps])


def synth_background(rng: np.random.Generator, length: int, height: int, width: int,
                     pan: bool = True) -> np.ndarray:
    """T×3×H×W background: gradient, panning noise texture and moving shapes."""
    ys, xs = _grid(height, width)
    direction = rng.uniform(0.0, 2.0 * np.pi)
    ramp = (np.cos(direction) * ys / height + np.sin(direction) * xs / width)
    ramp = (ramp - ramp.min()) / max(ramp.max() - ramp.min(), 1e-8)
    gradient = _color(rng) * (1.0 - ramp) + _color(rng) * ramp

    margin = max(height, width) // 4
    texture = value_noise(rng, height + 2 * margin, width + 2 * margin, cells=int(rng.integers(3, 7)))
    tint = _color(rng, 0.3, 1.0)
    pan_start = rng.integers(0, 2 * margin + 1, size=2)
    pan_end = rng.integers(0, 2 * margin + 1, size=2)
    offsets = _path(rng, length, pan_start, pan_end).round().astype(np.int64)
    if not pan:
        offsets[:] = offsets[0]

    shapes = []
    for _ in range(int(rng.integers(1, 4))):
        size = rng.uniform(0.1, 0.3, size=2) * (height, width)
        start = rng.uniform(-0.1, 0.9, size=2) * (height, width)
        end = start + (rng.uniform(-0.2, 0.2, size=2) * (height, width) if pan else 0.0)
        shapes.append((_path(rng, length, start, end), size, _color(rng)))

    frames = np.empty((length, 3, height, width), dtype=np.float32)
    for t in range(length):
        oy, ox = offsets[t]
        patch = texture[oy:oy + height, ox:ox + width][None]
        frame = 0.6 * gradient + 0.4 * tint * patch
        for positions, size, color in shapes:
            cover = soft_rectangle(ys, xs, positions[t], size)[None]
            frame = frame * (1.0 - cover) + color * cover
        frames[t] = np.clip(frame, 0.0, 1.0)
    return frames


def _strand_alpha(ys, xs, root, angle: float, length: float, wave: float, phase: float,
                  width: float) -> np.ndarray:
    """Coverage of one thin wavy strand as a Gaussian falloff around its centerline."""
    s = np.linspace(0.0, 1.0, 24)
    along = np.array([np.sin(angle), np.cos(angle)]) * -1.0
    across = np.array([along[1], -along[0]])
    points = root[None] + s[:, None] * length * along[None] + (wave * np.sin(4.0 * np.pi * s + phase))[:, None] * across[None]
    nearest = np.full(ys.shape, np.inf, dtype=np.float32)
    for py, px in points:
        np.minimum(nearest, (ys - py) ** 2 + (xs - px) ** 2, out=nearest)
    return np.exp(-nearest / (2.0 * width ** 2)).astype(np.float32)


def synth_figure(rng: np.random.Generator, length: int, height: int, width: int
                 ) -> Tuple[np.ndarray, np.ndarray]:
    """T×1×H×W alpha and T×3×H×W foreground of a moving figure with hair strands."""
    ys, xs = _grid(height, width)
    scale = rng.uniform(0.7, 1.1)
    start = rng.uniform(0.35, 0.65, size=2) * (height, width)
    end = start + rng.uniform(-0.2, 0.2, size=2) * (height, width)
    centers = _path(rng, length, start, end)
    sway = rng.uniform(-0.3, 0.3, size=2)

    torso_radii = np.array([0.3 * height, 0.18 * width]) * scale
    head_radii = np.array([0.12 * height, 0.1 * width]) * scale
    hand_radii = np.array([0.05 * height, 0.05 * width]) * scale

    clothes, skin, hair = _color(rng), _color(rng, 0.45, 0.9), _color(rng, 0.0, 0.35)
    cloth_texture = value_noise(rng, height, width, cells=8, octaves=2)[None]
    strands = [
        (rng.uniform(-0.9, 0.9), rng.uniform(0.1, 0.25) * height * scale, rng.uniform(0.5, 2.5),
         rng.uniform(0.0, 2.0 * np.pi), rng.uniform(0.5, 1.0), rng.uniform(0.5, 0.9))
        for _ in range(int(rng.integers(5, 10)))
    ]

    alpha = np.empty((length, 1, height, width), dtype=np.float32)
    fg = np.empty((length, 3, height, width), dtype=np.float32)
    for t in range(length):
        u = t / (length - 1) if length > 1 else 0.0
        center = centers[t]
        tilt = sway[0] * np.sin(np.pi * u)
        torso_center = center + np.array([0.25 * height * scale, 0.0])
        head_center = center - np.array([0.15 * height * scale, 0.0])
        swing = sway[1] + np.pi * u
        hand_center = torso_center + np.array([np.sin(swing), np.cos(swing)]) * torso_radii * 1.1

        torso = soft_ellipse(ys, xs, torso_center, torso_radii, angle=tilt)
        head = soft_ellipse(ys, xs, head_center, head_radii)
        hand = soft_ellipse(ys, xs, hand_center, hand_radii)
        root = head_center - np.array([head_radii[0] * 0.8, 0.0])
        hair_cover = np.zeros_like(torso)
        for offset, strand_len, wave, phase, strand_width, opacity in strands:
            strand_root = root + np.array([0.0, offset * head_radii[1]])
            hair_cover = np.maximum(
                hair_cover,
                opacity * _strand_alpha(ys, xs, strand_root, offset + tilt, strand_len, wave, phase + 2.0 * u,
                                        strand_width),
            )

        body = np.maximum(np.maximum(torso, head), hand)
        alpha[t, 0] = np.maximum(body, hair_cover)

        color = clothes * (0.75 + 0.5 * cloth_texture)
        skin_cover = np.maximum(head, hand)[None]
        color = color * (1.0 - skin_cover) + skin * skin_cover
        hair_weight = (hair_cover / np.maximum(alpha[t, 0], 1e-6))[None]
        color = color * (1.0 - hair_weight) + hair * hair_weight
        fg[t] = np.clip(color, 0.0, 1.0)
    return alpha, fg


def synth_matting_clip(seed: int, length: int = 8, height: int = 64, width: int = 64,
                       static_background: bool = False) -> ClipSample:
    """
    Deterministic procedural matting clip.

    Args:
        seed: sole source of randomness
        length: number of frames T
        height: frame height (multiple of 16)
        width: frame width (multiple of 16)
        static_background: keep the background still so only the figure moves

    Returns:
        Matting ClipSample with frames, alpha, foreground, background and mask
    """
    _check_extents(height, width, length)
    rng = np.random.default_rng(seed)
    bg = synth_background(rng, length, height, width, pan=not static_background)
    alpha, fg = synth_figure(rng, length, height, width)
    frames = alpha * fg + (1.0 - alpha) * bg
    return ClipSample(
        frames=frames.astype(np.float32),
        alpha_gt=alpha,
        fg_gt=fg,
        bg=bg,
        seg_gt=(alpha > 0.5).astype(np.float32),
        kind=ClipKind.MATTING,
        seed=seed,
    )


def synth_segmentation_sample(seed: int, video: bool = True, length: int = 4, height: int = 64,
                              width: int = 64) -> ClipSample:
    """
    Procedural segmentation sample with a binary mask.

    Image samples always hold a single frame and have no motion.
    """
    length = length if video else 1
    _check_extents(height, width, length)
    rng = np.random.default_rng(seed)
    ys, xs = _grid(height, width)
    bg = synth_background(rng, length, height, width, pan=video)

    shapes: List[Tuple] = []
    for _ in range(int(rng.integers(1, 4))):
        radii = rng.uniform(0.1, 0.3, size=2) * (height, width)
        start = rng.uniform(0.2, 0.8, size=2) * (height, width)
        end = start + (rng.uniform(-0.15, 0.15, size=2) * (height, width) if video else 0.0)
        texture = value_noise(rng, height, width, cells=6, octaves=2)[None]
        shapes.append((_path(rng, length, start, end), radii, rng.uniform(0, np.pi), _color(rng), texture))

    frames = np.empty_like(bg)
    seg = np.empty((length, 1, height, width), dtype=np.float32)
    for t in range(length):
        frame, cover = bg[t], np.zeros((height, width), dtype=np.float32)
        for positions, radii, angle, color, texture in shapes:
            mask = soft_ellipse(ys, xs, positions[t], radii, angle=angle)
            frame = frame * (1.0 - mask[None]) + np.clip(color * (0.7 + 0.6 * texture), 0.0, 1.0) * mask[None]
            cover = np.maximum(cover, mask)
        frames[t] = np.clip(frame, 0.0, 1.0)
        seg[t, 0] = (cover > 0.5).astype(np.float32)

    return ClipSample(
        frames=frames,
        seg_gt=seg,
        kind=ClipKind.VIDEO_SEG if video else ClipKind.IMAGE_SEG,
        seed=seed,
    )


def sample_resolution(rng: np.random.Generator, low: int = RESOLUTION_RANGE[0], high: int = RESOLUTION_RANGE[1],
                      multiple: int = RESOLUTION_MULTIPLE) -> Tuple[int, int]:
    """Independent uniform height and width over the multiples of ``multiple`` in [low, high]."""
    choices = np.arange(-(-low // multiple), high // multiple + 1) * multiple
    h, w = rng.choice(choices, size=2)
    return int(h), int(w)
