from __future__ import annotations

import numpy as np

from ..numcore import RngStream
from .schema import ClipFeatureSequence, IndexSpan, MomentDataset, QueryAnnotation, SynthConfig, span_to_window

PLANTED_LABEL = 3


def _unit(rng: RngStream, dim: int) -> np.ndarray:
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def generate_synthetic(config: SynthConfig, rng: RngStream) -> tuple[list, list]:
    """Planted-moment videos with correlated text queries.

    Background clips are ``noise_scale`` gaussians.  Each sample plants a moment
    whose clips also carry ``signal_strength * u`` for a per-query unit
    direction ``u``; the query's word vectors are ``u`` mapped into the text
    space plus small noise.  With ``context_strength > 0`` the clips just
    outside the moment also carry a per-query context direction that the query
    shares, a background cue a model can latch onto.
    """
    Dv, Dt = config.feature_dim, config.text_dim
    setup = rng.child("setup")
    if Dt == Dv:
        to_text = np.eye(Dv)
    else:
        q, _ = np.linalg.qr(setup.standard_normal((max(Dv, Dt), max(Dv, Dt))))
        to_text = q[:Dt, :Dv] * np.sqrt(max(Dv, Dt) / Dv)
    videos, annotations = [], []
    lo, hi = config.length_range
    mlo, mhi = config.moment_length_range
    for i in range(config.num_samples):
        r = rng.child("sample", i)
        L = int(r.integers(lo, hi, endpoint=True))
        m = int(r.integers(mlo, max(mlo, min(mhi, L - 2)), endpoint=True))
        first = int(r.integers(0, L - m, endpoint=True))
        span = IndexSpan(first, first + m - 1)
        u = _unit(r, Dv)
        ctx = _unit(r, Dv)
        clips = config.noise_scale * r.standard_normal((L, Dv))
        clips[span.first:span.last + 1] += config.signal_strength * u
        text_dir = u
        if config.context_strength > 0:
            k = config.context_clips
            for j in list(range(max(0, span.first - k), span.first)) + list(range(span.last + 1, min(L, span.last + 1 + k))):
                clips[j] += config.context_strength * ctx
            text_dir = (u + ctx) / np.sqrt(2.0)
        words = (to_text @ text_dir)[None, :] + config.text_noise * r.standard_normal((config.words_per_query, Dt))
        vid = f"syn{i:05d}"
        duration = L * config.clip_duration
        videos.append(ClipFeatureSequence(vid, clips, config.clip_duration, duration))
        labels = [PLANTED_LABEL if j in span else 0 for j in range(L)]
        annotations.append(
            QueryAnnotation(
                qid=i,
                vid=vid,
                query_tokens=words,
                relevant_windows=[span_to_window(span, config.clip_duration)],
                saliency_labels=labels,
                duration=duration,
            )
        )
    return videos, annotations


def synthetic_dataset(config: SynthConfig, seed: int) -> MomentDataset:
    videos, annotations = generate_synthetic(config, RngStream(seed).child("synthetic"))
    return MomentDataset({v.vid: v for v in videos}, annotations)
