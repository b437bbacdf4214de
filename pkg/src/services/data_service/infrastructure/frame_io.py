"""
Frame interchange: PNG frame directories with a JSON manifest, and a raw
planar 8-bit stream for piping.

Values in [0, 1] map to 8-bit as round(v·255) and to 16-bit as
round(v·65535). The manifest layout is documented in docs/clip_manifest.md.
"""
import json
import struct
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import structlog
from PIL import Image

from src.shared.domain.exceptions import FrameIOError, ShapeError

from ..domain.entities import ClipKind, ClipSample

logger = structlog.get_logger(__name__)

PathLike = Union[str, Path]

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1
RAW_HEADER = "<IIII"
PNG_SUFFIX = ".png"

# plane name -> (subdirectory, channels)
CLIP_PLANES: Dict[str, Tuple[str, int]] = {
    "frames": ("frames", 3),
    "alpha_gt": ("alpha", 1),
    "fg_gt": ("fg", 3),
    "bg": ("bg", 3),
    "seg_gt": ("seg", 1),
}


def quantize(values: np.ndarray, bits: int = 8) -> np.ndarray:
    """Map [0, 1] floats to unsigned integers of ``bits`` width."""
    if bits not in (8, 16):
        raise FrameIOError(f"unsupported bit depth {bits}")
    top = 255 if bits == 8 else 65535
    dtype = np.uint8 if bits == 8 else np.uint16
    return np.round(np.clip(values, 0.0, 1.0) * top).astype(dtype)


def dequantize(values: np.ndarray, bits: int = 8) -> np.ndarray:
    top = 255.0 if bits == 8 else 65535.0
    return (values.astype(np.float32) / np.float32(top)).astype(np.float32)


def frame_name(index: int) -> str:
    return f"{index:05d}{PNG_SUFFIX}"


def write_png(path: PathLike, image: np.ndarray, bits: int = 8) -> None:
    """Write one C×H×W image in [0, 1]; one channel becomes grayscale."""
    channels = image.shape[0]
    data = quantize(image, bits)
    if channels == 1:
        pil = Image.fromarray(data[0])
    elif channels == 3:
        if bits != 8:
            raise FrameIOError("16-bit output is supported for single-channel planes only")
        pil = Image.fromarray(np.ascontiguousarray(data.transpose(1, 2, 0)))
    else:
        raise ShapeError("PNG frames need 1 or 3 channels", image.shape)
    pil.save(path, format="PNG")


def read_png(path: PathLike, channels: int) -> np.ndarray:
    """Read one PNG as C×H×W float32 in [0, 1]; 16-bit grayscale is detected from the file."""
    try:
        with Image.open(path) as pil:
            pil.load()
            if pil.mode in ("I;16", "I;16B", "I;16L", "I"):
                data = np.array(pil)
                image = dequantize(np.clip(data, 0, 65535).astype(np.uint16), 16)[None]
                if channels == 3:
                    image = np.repeat(image, 3, axis=0)
                return image
            converted = pil.convert("L" if channels == 1 else "RGB")
            data = np.array(converted)
    except FileNotFoundError as exc:
        raise FrameIOError(f"missing frame {path}") from exc
    except OSError as exc:
        raise FrameIOError(f"cannot decode {path}: {exc}") from exc
    if channels == 1:
        return dequantize(data, 8)[None]
    return dequantize(data.transpose(2, 0, 1), 8)


def list_frames(directory: PathLike) -> List[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FrameIOError(f"frame directory not found: {directory}")
    frames = sorted(p for p in directory.iterdir() if p.suffix.lower() == PNG_SUFFIX)
    if not frames:
        raise FrameIOError(f"no PNG frames in {directory}")
    return frames


def write_sequence(directory: PathLike, planes: np.ndarray, bits: int = 8) -> List[Path]:
    """Write a T×C×H×W plane as numbered PNG files."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for t in range(planes.shape[0]):
        path = directory / frame_name(t)
        write_png(path, planes[t], bits)
        paths.append(path)
    return paths


def read_sequence(directory: PathLike, channels: int = 3, expected: Optional[int] = None) -> np.ndarray:
    """Read every PNG in a directory (name order) as a T×C×H×W float32 array."""
    paths = list_frames(directory)
    if expected is not None and len(paths) != expected:
        raise FrameIOError(f"{directory}: expected {expected} frames, found {len(paths)}")
    images = [read_png(path, channels) for path in paths]
    extents = {image.shape for image in images}
    if len(extents) != 1:
        raise FrameIOError(f"{directory}: frames have differing extents {sorted(extents)}")
    return np.stack(images)


def export_clip(clip: ClipSample, directory: PathLike, alpha_bits: int = 8) -> Path:
    """
    Write every plane of a clip as a PNG sequence plus the manifest.

    Args:
        clip: sample to export
        directory: destination (created when missing)
        alpha_bits: 8 or 16 for the alpha plane

    Returns:
        Path of the manifest
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    height, width = clip.extent
    manifest = {
        "version": MANIFEST_VERSION,
        "kind": clip.kind.value,
        "frame_count": clip.length,
        "height": height,
        "width": width,
        "seed": clip.seed,
        "planes": {},
    }
    for name, plane in clip.planes().items():
        subdir, channels = CLIP_PLANES[name]
        bits = alpha_bits if name == "alpha_gt" else 8
        write_sequence(directory / subdir, plane, bits)
        manifest["planes"][name] = {"directory": subdir, "channels": channels, "bits": bits}

    path = directory / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    logger.debug("clip_exported", directory=str(directory), frames=clip.length, planes=sorted(manifest["planes"]))
    return path


def read_manifest(directory: PathLike) -> Dict:
    path = Path(directory) / MANIFEST_NAME
    try:
        manifest = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise FrameIOError(f"clip manifest not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise FrameIOError(f"corrupt clip manifest {path}: {exc}") from exc
    if manifest.get("version") != MANIFEST_VERSION:
        raise FrameIOError(f"{path}: unsupported manifest version {manifest.get('version')}")
    return manifest


def import_clip(directory: PathLike) -> ClipSample:
    """Read a clip written by ``export_clip``."""
    directory = Path(directory)
    manifest = read_manifest(directory)
    planes = {}
    for name, entry in manifest["planes"].items():
        if name not in CLIP_PLANES:
            raise FrameIOError(f"{directory}: unknown plane '{name}' in manifest")
        planes[name] = read_sequence(directory / entry["directory"], entry["channels"], manifest["frame_count"])
    return ClipSample(kind=ClipKind(manifest["kind"]), seed=manifest.get("seed"), **planes)


def write_raw_video(path: PathLike, frames: np.ndarray) -> Path:
    """
    Write T×C×H×W frames in [0, 1] as raw planar 8-bit data.

    Layout: little-endian uint32 width, height, frame count, channels; then
    the frames as T×C×H×W bytes.
    """
    path = Path(path)
    if frames.ndim != 4:
        raise ShapeError("raw video expects T×C×H×W frames", frames.shape)
    count, channels, height, width = frames.shape
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as handle:
        handle.write(struct.pack(RAW_HEADER, width, height, count, channels))
        handle.write(quantize(frames, 8).tobytes())
    return path


def read_raw_video(path: PathLike) -> np.ndarray:
    """Read a raw planar stream back as T×C×H×W float32."""
    path = Path(path)
    try:
        payload = path.read_bytes()
    except FileNotFoundError as exc:
        raise FrameIOError(f"raw video not found: {path}") from exc
    header_size = struct.calcsize(RAW_HEADER)
    if len(payload) < header_size:
        raise FrameIOError(f"{path}: shorter than the raw video header")
    width, height, count, channels = struct.unpack(RAW_HEADER, payload[:header_size])
    expected = width * height * count * channels
    body = payload[header_size:]
    if len(body) != expected:
        raise FrameIOError(f"{path}: header declares {expected} bytes of frames, file holds {len(body)}")
    data = np.frombuffer(body, dtype=np.uint8).reshape(count, channels, height, width)
    return dequantize(data, 8)


def read_frames(source: PathLike) -> np.ndarray:
    """Frames from a PNG directory or a raw planar file, as T×3×H×W float32."""
    source = Path(source)
    if source.is_dir():
        return read_sequence(source, 3)
    frames = read_raw_video(source)
    if frames.shape[1] == 1:
        frames = np.repeat(frames, 3, axis=1)
    if frames.shape[1] != 3:
        raise FrameIOError(f"{source}: raw video has {frames.shape[1]} channels, expected 1 or 3")
    return frames
