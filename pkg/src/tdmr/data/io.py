"""Feature files and line-delimited JSON manifests.

Feature file layout (little-endian): ``b"TDMR"``, u16 format version, u32 rows,
u32 cols, then rows*cols float32 values in row-major order.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .schema import ClipFeatureSequence, MomentDataset, QueryAnnotation, ValidationError

MAGIC = b"TDMR"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHII")


class FormatError(ValueError):
    """A feature file or manifest line could not be parsed."""


def save_features(path, matrix) -> None:
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise ValueError("feature matrix must be 2-D")
    rows, cols = matrix.shape
    payload = np.ascontiguousarray(matrix, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, rows, cols))
        fh.write(payload)


def load_features(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, rows, cols = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    need = rows * cols * 4
    body = raw[_HEADER.size:]
    if len(body) != need:
        raise FormatError(f"{path}: expected {need} payload bytes, found {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(rows, cols).astype(np.float64)


REQUIRED_KEYS = ("qid", "vid", "duration", "relevant_windows", "saliency")


def parse_manifest_line(line: str, lineno: int = 0) -> dict:
    try:
        record = json.loads(line)
    except json.JSONDecodeError as exc:
        raise FormatError(f"line {lineno}: {exc.msg}") from exc
    if not isinstance(record, dict):
        raise FormatError(f"line {lineno}: expected a JSON object")
    missing = [k for k in REQUIRED_KEYS if k not in record]
    if missing:
        raise FormatError(f"line {lineno}: missing keys {missing}")
    return record


def load_manifest(path, load_features_from: str | Path | None = None) -> list[QueryAnnotation]:
    """Parse a manifest into annotations.

    Query token matrices are read from ``query_feat`` (relative to
    ``load_features_from``) when a directory is given; otherwise left as None.
    """
    path = Path(path)
    annotations = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            rec = parse_manifest_line(line, lineno)
            tokens = None
            if load_features_from is not None:
                if "query_feat" not in rec:
                    raise FormatError(f"line {lineno}: missing key 'query_feat'")
                tokens = load_features(Path(load_features_from) / rec["query_feat"])
            try:
                ann = QueryAnnotation(
                    qid=int(rec["qid"]),
                    vid=str(rec["vid"]),
                    query_tokens=tokens,
                    relevant_windows=rec["relevant_windows"],
                    saliency_labels=rec["saliency"],
                    duration=float(rec["duration"]),
                    extra={k: rec[k] for k in ("query_feat", "video_feat", "clip_duration") if k in rec},
                )
            except (TypeError, ValueError) as exc:
                if isinstance(exc, ValidationError):
                    raise ValidationError(f"line {lineno}: {exc}") from exc
                raise FormatError(f"line {lineno}: {exc}") from exc
            annotations.append(ann)
    return annotations


def load_dataset(manifest_path, clip_duration: float | None = None) -> MomentDataset:
    """Load a manifest plus its sidecar feature files (paths relative to the manifest)."""
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    annotations = load_manifest(manifest_path, load_features_from=root)
    videos = {}
    for ann in annotations:
        if ann.vid in videos:
            continue
        rel = ann.extra.get("video_feat")
        if rel is None:
            raise FormatError(f"qid {ann.qid}: missing key 'video_feat'")
        cd = clip_duration or float(ann.extra.get("clip_duration", 2.0))
        videos[ann.vid] = ClipFeatureSequence(ann.vid, load_features(root / rel), cd, ann.duration)
    return MomentDataset(videos, annotations)


def annotation_record(ann: QueryAnnotation, query_feat: str, video_feat: str, clip_duration: float) -> dict:
    return {
        "qid": ann.qid,
        "vid": ann.vid,
        "duration": ann.duration,
        "relevant_windows": ann.relevant_windows,
        "saliency": ann.saliency_labels,
        "query_feat": query_feat,
        "video_feat": video_feat,
        "clip_duration": clip_duration,
    }


def save_dataset(dataset: MomentDataset, out_dir, manifest_name: str = "manifest.jsonl") -> Path:
    """Write features under ``out_dir/features`` and a manifest referencing them."""
    out_dir = Path(out_dir)
    feat_dir = out_dir / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)
    for vid, video in sorted(dataset.videos.items()):
        save_features(feat_dir / f"{vid}.vft", video.clips)
    lines = []
    for ann in dataset.annotations:
        video = dataset.videos[ann.vid]
        save_features(feat_dir / f"q{ann.qid}.qft", ann.query_tokens)
        rec = annotation_record(ann, f"features/q{ann.qid}.qft", f"features/{ann.vid}.vft", video.clip_duration)
        lines.append(json.dumps(rec, sort_keys=True))
    manifest = out_dir / manifest_name
    manifest.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return manifest
