from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DEFAULT_CLIP_DURATION = 2.0
MAX_SALIENCY = 4


class ValidationError(ValueError):
    """A record violates a schema invariant."""


@dataclass
class ClipFeatureSequence:
    vid: str
    clips: np.ndarray
    clip_duration: float = DEFAULT_CLIP_DURATION
    total_duration: float | None = None

    def __post_init__(self):
        self.clips = np.asarray(self.clips, dtype=np.float64)
        if self.clips.ndim != 2 or self.clips.shape[0] < 1:
            raise ValidationError(f"{self.vid}: clips must be a non-empty L x D matrix")
        if not self.clip_duration > 0:
            raise ValidationError(f"{self.vid}: clip_duration must be positive")
        L = self.clips.shape[0]
        if self.total_duration is None:
            self.total_duration = L * self.clip_duration
        if not (L - 1) * self.clip_duration < self.total_duration <= L * self.clip_duration + 1e-9:
            raise ValidationError(
                f"{self.vid}: total_duration {self.total_duration} inconsistent with {L} clips "
                f"of {self.clip_duration}s"
            )

    @property
    def length(self) -> int:
        return self.clips.shape[0]

    @property
    def dim(self) -> int:
        return self.clips.shape[1]


@dataclass
class QueryAnnotation:
    qid: int
    vid: str
    query_tokens: np.ndarray | None
    relevant_windows: list
    saliency_labels: list
    duration: float
    extra: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.query_tokens is not None:
            self.query_tokens = np.asarray(self.query_tokens, dtype=np.float64)
        self.relevant_windows = [[float(s), float(e)] for s, e in self.relevant_windows]
        self.saliency_labels = [int(x) for x in self.saliency_labels]
        validate_annotation(self)


def validate_annotation(ann: QueryAnnotation, num_clips: int | None = None) -> None:
    if not ann.duration > 0:
        raise ValidationError(f"qid {ann.qid}: duration must be positive")
    prev_end = -math.inf
    for s, e in ann.relevant_windows:
        if not 0 <= s < e <= ann.duration:
            raise ValidationError(f"qid {ann.qid}: window [{s}, {e}] outside [0, {ann.duration}] or empty")
        if s < prev_end:
            raise ValidationError(f"qid {ann.qid}: windows overlap or are unsorted")
        prev_end = e
    if any(not 0 <= x <= MAX_SALIENCY for x in ann.saliency_labels):
        raise ValidationError(f"qid {ann.qid}: saliency labels must lie in [0, {MAX_SALIENCY}]")
    if num_clips is not None and len(ann.saliency_labels) != num_clips:
        raise ValidationError(
            f"qid {ann.qid}: {len(ann.saliency_labels)} saliency labels for a {num_clips}-clip video"
        )
    if ann.query_tokens is not None and (ann.query_tokens.ndim != 2 or ann.query_tokens.shape[0] < 1):
        raise ValidationError(f"qid {ann.qid}: query_tokens must be a non-empty W x D matrix")


@dataclass(frozen=True)
class IndexSpan:
    first: int
    last: int

    def __post_init__(self):
        if not 0 <= self.first <= self.last:
            raise ValidationError(f"invalid index span [{self.first}, {self.last}]")

    def __len__(self) -> int:
        return self.last - self.first + 1

    def __contains__(self, idx) -> bool:
        return self.first <= idx <= self.last

    def indices(self) -> range:
        return range(self.first, self.last + 1)


def window_to_span(window, clip_duration: float, num_clips: int) -> IndexSpan:
    """Clip indices touched by a [start, end] window in seconds."""
    start, end = window
    first = max(0, min(num_clips - 1, math.floor(start / clip_duration)))
    last = max(0, min(num_clips - 1, math.ceil(end / clip_duration) - 1))
    if first > last:
        raise ValidationError(f"window {list(window)} collapses to an empty span")
    return IndexSpan(first, last)


def span_to_window(span: IndexSpan, clip_duration: float) -> list[float]:
    return [span.first * clip_duration, (span.last + 1) * clip_duration]


def hull_span(windows, clip_duration: float, num_clips: int) -> IndexSpan:
    spans = [window_to_span(w, clip_duration, num_clips) for w in windows]
    return IndexSpan(min(s.first for s in spans), max(s.last for s in spans))


@dataclass
class MomentDataset:
    """Videos keyed by id plus the query annotations that reference them."""

    videos: dict
    annotations: list

    def __post_init__(self):
        for ann in self.annotations:
            if ann.vid not in self.videos:
                raise ValidationError(f"qid {ann.qid} references unknown video {ann.vid!r}")
            validate_annotation(ann, self.videos[ann.vid].length)

    def __len__(self) -> int:
        return len(self.annotations)

    def sample(self, i: int) -> tuple[ClipFeatureSequence, QueryAnnotation]:
        ann = self.annotations[i]
        return self.videos[ann.vid], ann

    def samples(self):
        for ann in self.annotations:
            yield self.videos[ann.vid], ann

    def gt_span(self, i: int) -> IndexSpan:
        video, ann = self.sample(i)
        return hull_span(ann.relevant_windows, video.clip_duration, video.length)


@dataclass
class SynthConfig:
    num_samples: int = 64
    length_range: tuple = (16, 32)
    feature_dim: int = 64
    text_dim: int = 64
    words_per_query: int = 8
    moment_length_range: tuple = (3, 8)
    signal_strength: float = 5.0
    noise_scale: float = 1.0
    # bounding clips around the moment share a direction with the query text
    context_strength: float = 0.0
    context_clips: int = 2
    text_noise: float = 0.1
    clip_duration: float = DEFAULT_CLIP_DURATION

    def __post_init__(self):
        lo, hi = self.length_range
        mlo, mhi = self.moment_length_range
        if self.num_samples < 1:
            raise ValidationError("num_samples must be at least 1")
        if not 2 <= lo <= hi:
            raise ValidationError("length_range must satisfy 2 <= L_min <= L_max")
        if not 1 <= mlo <= mhi <= lo:
            raise ValidationError("moment lengths must fit inside L_min")
        if min(self.feature_dim, self.text_dim, self.words_per_query) < 1:
            raise ValidationError("dimensions must be positive")
