"""Evaluation-time dataset rewrites: target masking and dynamic-context splits."""
from __future__ import annotations

import numpy as np

from ..numcore import RngStream
from .schema import ClipFeatureSequence, MomentDataset, QueryAnnotation, ValidationError, window_to_span


class InsufficientDataError(ValueError):
    pass


def target_mask(video: ClipFeatureSequence, annotation: QueryAnnotation) -> np.ndarray:
    """Boolean mask over clips covered by any relevant window."""
    mask = np.zeros(video.length, dtype=bool)
    for w in annotation.relevant_windows:
        span = window_to_span(w, video.clip_duration, video.length)
        mask[span.first:span.last + 1] = True
    return mask


def mask_target_moment(video: ClipFeatureSequence, annotation: QueryAnnotation, rng: RngStream) -> ClipFeatureSequence:
    """Replace every ground-truth clip by standard-gaussian noise, in clip order.

    Clip count and durations are unchanged; clips outside the windows are copied.
    """
    if annotation.vid != video.vid:
        raise ValidationError(f"annotation for {annotation.vid!r} applied to video {video.vid!r}")
    mask = target_mask(video, annotation)
    clips = video.clips.copy()
    clips[mask] = rng.standard_normal((int(mask.sum()), video.dim))
    return ClipFeatureSequence(video.vid, clips, video.clip_duration, video.total_duration)


def masked_dataset(dataset: MomentDataset, rng: RngStream) -> MomentDataset:
    """One masked copy of the video per annotation (queries on a shared video differ in GT)."""
    videos, annotations = {}, []
    for video, ann in dataset.samples():
        vid = f"{ann.vid}#q{ann.qid}"
        masked = mask_target_moment(video, ann, rng.child("mask", ann.qid))
        videos[vid] = ClipFeatureSequence(vid, masked.clips, masked.clip_duration, masked.total_duration)
        annotations.append(_revid(ann, vid))
    return MomentDataset(videos, annotations)


def build_dynamic_context_split(dataset: MomentDataset, rng: RngStream) -> MomentDataset:
    """Replace each sample's non-GT clips with clips of another random video.

    Donor clips are taken in their original order (sampled without replacement
    when the donor is long enough, otherwise with replacement, then sorted).
    """
    vids = sorted(dataset.videos)
    if len(vids) < 2:
        raise InsufficientDataError("a dynamic-context split needs at least two videos")
    videos, annotations = {}, []
    for video, ann in dataset.samples():
        r = rng.child("context", ann.qid)
        others = [v for v in vids if v != ann.vid]
        donor = dataset.videos[others[int(r.integers(0, len(others)))]]
        if donor.dim != video.dim:
            raise ValidationError("donor and target feature dimensions differ")
        keep = target_mask(video, ann)
        n = int((~keep).sum())
        picks = np.sort(r.choice(donor.length, size=n, replace=n > donor.length))
        clips = video.clips.copy()
        clips[~keep] = donor.clips[picks]
        vid = f"{ann.vid}#dc{ann.qid}"
        videos[vid] = ClipFeatureSequence(vid, clips, video.clip_duration, video.total_duration)
        new = _revid(ann, vid)
        new.extra["donor"] = donor.vid
        annotations.append(new)
    return MomentDataset(videos, annotations)


def _revid(ann: QueryAnnotation, vid: str) -> QueryAnnotation:
    return QueryAnnotation(
        qid=ann.qid,
        vid=vid,
        query_tokens=ann.query_tokens,
        relevant_windows=[list(w) for w in ann.relevant_windows],
        saliency_labels=list(ann.saliency_labels),
        duration=ann.duration,
        extra=dict(ann.extra, source_vid=ann.vid),
    )
