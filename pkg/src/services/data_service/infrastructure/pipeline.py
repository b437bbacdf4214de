"""
Training data pipeline: a seed-addressed synthetic clip source and a
background producer feeding clips through a bounded queue.
"""
import queue
import threading
from typing import Callable, Iterator, List, Optional, Sequence

import numpy as np
import structlog

from src.shared.domain.exceptions import ContractError

from ..domain.entities import ClipSample, Interpolation, MotionAugmentConfig, TemporalAugmentConfig
from .synthesis import synth_matting_clip, synth_segmentation_sample
from .temporal import temporal_augment
from .transformations import motion_augment

logger = structlog.get_logger(__name__)

TEST_AUGMENT_STRENGTH = 0.5


def derive_seed(base: int, *key: int) -> int:
    """Stable 32-bit seed for a (base, key...) address."""
    return int(np.random.SeedSequence([int(base), *[int(k) for k in key]]).generate_state(1)[0])


class SyntheticClipSource:
    """
    Deterministic supplier of augmented synthetic clips.

    Every clip is addressed by a key (for example iteration and batch slot)
    so the same seed and key always give the same clip regardless of the
    order in which clips are requested.
    """

    def __init__(self, seed: int = 0, augment: bool = True, testing: bool = False,
                 interpolation: Interpolation = Interpolation.BILINEAR):
        self.seed = seed
        self.augment = augment
        self.testing = testing
        self.interpolation = interpolation

    def matting_clip(self, key: Sequence[int], length: int, height: int, width: int) -> ClipSample:
        """One matting clip; training clips get temporal, motion and background augmentation."""
        seed = derive_seed(self.seed, 0, *key)
        if not self.augment:
            return synth_matting_clip(seed, length, height, width)

        rng = np.random.default_rng(seed)
        source_length = length if self.testing else max(2, 2 * length)
        clip = synth_matting_clip(seed, source_length, height, width)
        if not self.testing:
            ops = TemporalAugmentConfig.sample(rng, length)
            try:
                clip = temporal_augment(clip, ops, seed)
            except ContractError:
                # fast playback plus skipping can leave too few unique frames
                logger.debug("temporal_skip_dropped", key=list(key), skip_every=ops.skip_every)
                clip = temporal_augment(clip, ops.model_copy(update={"skip_every": None}), seed)
        strength = TEST_AUGMENT_STRENGTH if self.testing else 1.0
        fg_config = MotionAugmentConfig.sample(rng, height, width, strength, affine_only=self.testing)
        bg_config = MotionAugmentConfig.sample(rng, height, width, strength, affine_only=True)
        return motion_augment(clip, fg_config, seed, bg_config, self.interpolation)

    def segmentation_clip(self, key: Sequence[int], video: bool, length: int, height: int,
                          width: int) -> ClipSample:
        """Segmentation sample; image samples get appearance changes but no motion."""
        seed = derive_seed(self.seed, 1 if video else 2, *key)
        sample = synth_segmentation_sample(seed, video, length, height, width)
        if not self.augment:
            return sample
        rng = np.random.default_rng(seed)
        config = MotionAugmentConfig.sample(rng, height, width, TEST_AUGMENT_STRENGTH if self.testing else 1.0)
        if not video:
            config = config.model_copy(update={
                name: MotionAugmentConfig.model_fields[name].default
                for name in ("translate_x", "translate_y", "scale", "rotate", "shear")
            })
        return motion_augment(sample, config, seed, interpolation=self.interpolation)

    def matting_batch(self, key: Sequence[int], batch: int, length: int, height: int, width: int
                      ) -> List[ClipSample]:
        return [self.matting_clip((*key, b), length, height, width) for b in range(batch)]

    def segmentation_batch(self, key: Sequence[int], batch: int, video: bool, length: int, height: int,
                           width: int) -> List[ClipSample]:
        return [self.segmentation_clip((*key, b), video, length, height, width) for b in range(batch)]


_DONE = object()


class _Failure:
    def __init__(self, error: BaseException):
        self.error = error


class ClipProducer:
    """
    Runs a clip factory on a background thread ahead of the consumer.

    The factory is called with consecutive indices; at most ``queue_depth``
    finished items wait in the queue. Errors raised by the factory are
    re-raised in the consuming thread.
    """

    def __init__(self, factory: Callable[[int], object], count: Optional[int] = None, queue_depth: int = 4,
                 start_index: int = 0):
        if queue_depth < 1:
            raise ContractError(f"queue depth must be >= 1, got {queue_depth}")
        self.factory = factory
        self.count = count
        self.start_index = start_index
        self.queue: "queue.Queue" = queue.Queue(maxsize=queue_depth)
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None
        self.produced = 0

    def start(self) -> "ClipProducer":
        if self._thread is None:
            self._thread = threading.Thread(target=self._run, name="clip-producer", daemon=True)
            self._thread.start()
            logger.debug("producer_started", count=self.count, depth=self.queue.maxsize)
        return self

    def _put(self, item) -> bool:
        while not self._stop.is_set():
            try:
                self.queue.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def _run(self) -> None:
        index = self.start_index
        try:
            while not self._stop.is_set() and (self.count is None or self.produced < self.count):
                if not self._put(self.factory(index)):
                    return
                self.produced += 1
                index += 1
        except BaseException as exc:  # forwarded to the consumer
            self._put(_Failure(exc))
            return
        self._put(_DONE)

    def get(self, timeout: Optional[float] = None):
        """Next produced item; raises StopIteration once the count is exhausted."""
        self.start()
        item = self.queue.get(timeout=timeout)
        if item is _DONE:
            raise StopIteration
        if isinstance(item, _Failure):
            raise item.error
        return item

    def __iter__(self) -> Iterator:
        while True:
            try:
                yield self.get()
            except StopIteration:
                return

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=5.0)
            self._thread = None

    def __enter__(self) -> "ClipProducer":
        return self.start()

    def __exit__(self, exc_type, exc, tb) -> None:
        self.stop()
