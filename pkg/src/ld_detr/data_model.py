"""Samples, batches, moment spans, manifest IO, and synthetic data generation.

Feature matrices travel as float32 numpy arrays (clips/tokens as rows). On
disk they are base64-encoded little-endian float32, row-major, one JSON
object per line, so datasets stay diffable and dependency-free.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SPAN_EPS = 1e-6


class ManifestError(ValueError):
    """Raised when a manifest line cannot be parsed or violates an invariant."""


class InvariantError(ValueError):
    """Raised when an in-memory value violates a documented invariant."""


@dataclass(frozen=True)
class MomentSpan:
    """A temporal interval in normalized video time, stored as (center, width)."""

    center: float
    width: float

    def __post_init__(self) -> None:
        if not (self.width > 0.0):
            raise InvariantError(f"span width must be positive, got {self.width}")
        if self.center - self.width / 2 < -SPAN_EPS or self.center + self.width / 2 > 1 + SPAN_EPS:
            raise InvariantError(
                f"span ({self.center}, {self.width}) extends outside [0, 1]"
            )

    @property
    def start(self) -> float:
        return self.center - self.width / 2

    @property
    def end(self) -> float:
        return self.center + self.width / 2


def clamp_span(center: float, width: float) -> MomentSpan:
    """Clamp an arbitrary (center, width) pair into a valid MomentSpan."""
    start = min(max(center - width / 2, 0.0), 1.0)
    end = min(max(center + width / 2, 0.0), 1.0)
    if end - start < SPAN_EPS:
        mid = (start + end) / 2
        start = min(max(mid - SPAN_EPS / 2, 0.0), 1.0 - SPAN_EPS)
        end = start + SPAN_EPS
    return MomentSpan(center=(start + end) / 2, width=end - start)


def span_to_seconds(span: MomentSpan, t: int, clip_duration_s: float) -> tuple[float, float]:
    """Normalized (center, width) -> (start_s, end_s) on a video of t clips."""
    total = t * clip_duration_s
    return (span.center - span.width / 2) * total, (span.center + span.width / 2) * total


def span_from_seconds(start_s: float, end_s: float, t: int, clip_duration_s: float) -> MomentSpan:
    """Inverse of span_to_seconds."""
    total = t * clip_duration_s
    if total <= 0:
        raise InvariantError("video duration must be positive")
    start, end = start_s / total, end_s / total
    return MomentSpan(center=(start + end) / 2, width=end - start)


@dataclass
class FeatureBundle:
    """Pre-extracted per-clip video features and per-token text features."""

    video_feats: np.ndarray  # (t, d_v) float32
    text_feats: np.ndarray  # (n, d_t) float32
    video_mask: np.ndarray  # (t,) bool
    text_mask: np.ndarray  # (n,) bool
    clip_duration_s: float = 2.0

    def validate(self, sample_id: str = "?") -> None:
        if self.video_feats.ndim != 2 or self.video_feats.shape[0] < 1:
            raise InvariantError(f"sample {sample_id!r}: video_feats must be (t, d_v) with t >= 1")
        if self.text_feats.ndim != 2 or self.text_feats.shape[0] < 1:
            raise InvariantError(f"sample {sample_id!r}: text_feats must be (n, d_t) with n >= 1")
        if self.video_mask.shape != (self.video_feats.shape[0],) or not self.video_mask.any():
            raise InvariantError(f"sample {sample_id!r}: video_mask needs >= 1 valid clip")
        if self.text_mask.shape != (self.text_feats.shape[0],) or not self.text_mask.any():
            raise InvariantError(f"sample {sample_id!r}: text_mask needs >= 1 valid token")
        if not np.isfinite(self.video_feats).all():
            raise InvariantError(f"sample {sample_id!r}: video_feats contains NaN/Inf")
        if not np.isfinite(self.text_feats).all():
            raise InvariantError(f"sample {sample_id!r}: text_feats contains NaN/Inf")
        if not (self.clip_duration_s > 0):
            raise InvariantError(f"sample {sample_id!r}: clip_duration_s must be positive")

    @property
    def t(self) -> int:
        return self.video_feats.shape[0]

    @property
    def n(self) -> int:
        return self.text_feats.shape[0]


@dataclass
class Annotation:
    """Ground truth: moment spans plus per-clip saliency scores on a 0-4 scale."""

    gt_moments: list[MomentSpan]
    saliency: np.ndarray  # (t,) float32

    def validate(self, t: int, sample_id: str = "?") -> None:
        if self.saliency.shape != (t,):
            raise InvariantError(
                f"sample {sample_id!r}: saliency length {self.saliency.shape} != t={t}"
            )


@dataclass
class Sample:
    id: str
    bundle: FeatureBundle
    annotation: Annotation


Dataset = list  # list[Sample]; immutable by convention after load


@dataclass
class Batch:
    """Samples padded to common t_max / n_max; padded positions are zero and mask-false."""

    ids: list[str]
    video_feats: np.ndarray  # (b, t_max, d_v)
    text_feats: np.ndarray  # (b, n_max, d_t)
    video_mask: np.ndarray  # (b, t_max) bool
    text_mask: np.ndarray  # (b, n_max) bool
    saliency: np.ndarray  # (b, t_max) float32, zero at padding
    gt_moments: list[np.ndarray]  # per sample (k, 2) arrays of (center, width)
    clip_durations: np.ndarray  # (b,) float32

    @property
    def size(self) -> int:
        return len(self.ids)


def pad_batch(samples: Sequence[Sample]) -> Batch:
    """Stack samples into a Batch, zero-padding features and extending masks with False."""
    if len(samples) == 0:
        raise ValueError("cannot batch an empty sample list")
    t_max = max(s.bundle.t for s in samples)
    n_max = max(s.bundle.n for s in samples)
    d_v = samples[0].bundle.video_feats.shape[1]
    d_t = samples[0].bundle.text_feats.shape[1]
    b = len(samples)

    video = np.zeros((b, t_max, d_v), dtype=np.float32)
    text = np.zeros((b, n_max, d_t), dtype=np.float32)
    vmask = np.zeros((b, t_max), dtype=bool)
    tmask = np.zeros((b, n_max), dtype=bool)
    sal = np.zeros((b, t_max), dtype=np.float32)
    gts: list[np.ndarray] = []
    durs = np.zeros(b, dtype=np.float32)

    for i, s in enumerate(samples):
        t, n = s.bundle.t, s.bundle.n
        video[i, :t] = s.bundle.video_feats
        text[i, :n] = s.bundle.text_feats
        vmask[i, :t] = s.bundle.video_mask
        tmask[i, :n] = s.bundle.text_mask
        sal[i, :t] = s.annotation.saliency
        gts.append(
            np.array([[m.center, m.width] for m in s.annotation.gt_moments], dtype=np.float32).reshape(-1, 2)
        )
        durs[i] = s.bundle.clip_duration_s

    return Batch(
        ids=[s.id for s in samples],
        video_feats=video,
        text_feats=text,
        video_mask=vmask,
        text_mask=tmask,
        saliency=sal,
        gt_moments=gts,
        clip_durations=durs,
    )


# ---------------------------------------------------------------------------
# Manifest IO


def _encode_matrix(m: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(m, dtype="<f4").tobytes()).decode("ascii")


def _decode_matrix(b64: str, rows: int, cols: int, field_name: str) -> np.ndarray:
    raw = base64.b64decode(b64.encode("ascii"))
    arr = np.frombuffer(raw, dtype="<f4")
    if arr.size != rows * cols:
        raise ManifestError(f"{field_name}: expected {rows}x{cols} floats, got {arr.size}")
    return arr.reshape(rows, cols).astype(np.float32)


def sample_to_record(sample: Sample) -> dict:
    b = sample.bundle
    return {
        "id": sample.id,
        "t": b.t,
        "n": b.n,
        "d_v": b.video_feats.shape[1],
        "d_t": b.text_feats.shape[1],
        "clip_duration_s": float(b.clip_duration_s),
        "video_feats_b64": _encode_matrix(b.video_feats),
        "text_feats_b64": _encode_matrix(b.text_feats),
        "gt_moments": [[float(m.center), float(m.width)] for m in sample.annotation.gt_moments],
        "saliency": [float(x) for x in sample.annotation.saliency],
    }


def sample_from_record(rec: dict) -> Sample:
    sid = str(rec.get("id", "?"))
    t, n = int(rec["t"]), int(rec["n"])
    d_v, d_t = int(rec["d_v"]), int(rec["d_t"])
    if t < 1:
        raise ManifestError(f"sample {sid!r}: video_feats must have t >= 1 clips (got t={t})")
    if n < 1:
        raise ManifestError(f"sample {sid!r}: text_feats must have n >= 1 tokens (got n={n})")
    video = _decode_matrix(rec["video_feats_b64"], t, d_v, "video_feats")
    text = _decode_matrix(rec["text_feats_b64"], n, d_t, "text_feats")
    bundle = FeatureBundle(
        video_feats=video,
        text_feats=text,
        video_mask=np.ones(t, dtype=bool),
        text_mask=np.ones(n, dtype=bool),
        clip_duration_s=float(rec["clip_duration_s"]),
    )
    moments = [clamp_span(float(c), float(w)) for c, w in rec.get("gt_moments", [])]
    saliency = np.asarray(rec.get("saliency", [0.0] * t), dtype=np.float32)
    sample = Sample(id=sid, bundle=bundle, annotation=Annotation(gt_moments=moments, saliency=saliency))
    bundle.validate(sid)
    sample.annotation.validate(t, sid)
    return sample


def load_manifest(path: str | Path) -> Dataset:
    """Load a JSON-lines manifest, validating every sample. Order is preserved."""
    samples: Dataset = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"{path}:{lineno}: invalid JSON: {e}") from e
            try:
                samples.append(sample_from_record(rec))
            except (ManifestError, InvariantError, KeyError) as e:
                raise ManifestError(f"{path}:{lineno}: {e}") from e
    return samples


def save_manifest(samples: Iterable[Sample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(sample_to_record(s)) + "\n")


def load_predictions(path: str | Path) -> dict[str, dict]:
    """Load the prediction interchange file: id -> {pred_moments, pred_saliency}."""
    preds: dict[str, dict] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"{path}:{lineno}: invalid JSON: {e}") from e
            preds[str(rec["id"])] = {
                "pred_moments": [[float(c), float(w), float(p)] for c, w, p in rec["pred_moments"]],
                "pred_saliency": [float(x) for x in rec.get("pred_saliency", [])],
            }
    return preds


def save_predictions(records: Iterable[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


# ---------------------------------------------------------------------------
# Synthetic data


@dataclass
class SynthConfig:
    """Controls the planted-signal generator; a fixed seed fixes every byte."""

    num_samples: int = 64
    t_range: tuple[int, int] = (20, 40)
    n_range: tuple[int, int] = (5, 12)
    d_v: int = 64
    d_t: int = 64
    pattern_bank_size: int = 32
    noise_std: float = 0.1
    moments_per_sample: tuple[int, int] = (1, 2)
    clip_duration_s: float = 2.0
    seed: int = 0

    def validate(self) -> None:
        if self.num_samples < 1 or self.pattern_bank_size < 1:
            raise InvariantError("num_samples and pattern_bank_size must be >= 1")
        if self.t_range[0] < 1 or self.n_range[0] < 1 or self.moments_per_sample[0] < 1:
            raise InvariantError("t, n and moments_per_sample ranges must start at >= 1")
        if self.t_range[1] < self.t_range[0] or self.n_range[1] < self.n_range[0]:
            raise InvariantError("ranges must be non-decreasing")
        if self.noise_std < 0:
            raise InvariantError("noise_std must be >= 0")
        if self.d_v < 1 or self.d_t < 1:
            raise InvariantError("feature dims must be >= 1")


def synth_generate(config: SynthConfig) -> Dataset:
    """Generate a dataset with planted moment signals.

    Each sample picks a pattern from a fixed bank. Tokens carry the pattern's
    text prototype plus noise; clips inside ground-truth moments carry the
    pattern's video signature on top of background noise. Saliency is the
    per-clip feature energy rescaled to [0, 4].
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    bank = config.pattern_bank_size
    video_sig = rng.standard_normal((bank, config.d_v)).astype(np.float32)
    video_sig /= np.linalg.norm(video_sig, axis=1, keepdims=True)
    video_sig *= 2.0  # signature energy well above unit noise
    text_proto = rng.standard_normal((bank, config.d_t)).astype(np.float32)
    text_proto /= np.linalg.norm(text_proto, axis=1, keepdims=True)

    samples: Dataset = []
    for idx in range(config.num_samples):
        t = int(rng.integers(config.t_range[0], config.t_range[1] + 1))
        n = int(rng.integers(config.n_range[0], config.n_range[1] + 1))
        pattern = int(rng.integers(bank))
        k = int(rng.integers(config.moments_per_sample[0], config.moments_per_sample[1] + 1))

        # moments live on the clip grid so each one covers >= 1 clip
        moments: list[MomentSpan] = []
        inside = np.zeros(t, dtype=bool)
        for _ in range(k):
            length = int(rng.integers(1, max(2, t // 3) + 1))
            start_clip = int(rng.integers(0, t - length + 1))
            inside[start_clip : start_clip + length] = True
            moments.append(
                MomentSpan(center=(start_clip + length / 2) / t, width=length / t)
            )

        video = (rng.standard_normal((t, config.d_v)) * config.noise_std).astype(np.float32)
        video[inside] += video_sig[pattern]
        text = (rng.standard_normal((n, config.d_t)) * config.noise_std).astype(np.float32)
        text += text_proto[pattern]

        energy = np.sum(video.astype(np.float64) ** 2, axis=1)
        lo, hi = energy.min(), energy.max()
        if hi - lo > 1e-12:
            saliency = (4.0 * (energy - lo) / (hi - lo)).astype(np.float32)
        else:
            saliency = np.zeros(t, dtype=np.float32)

        bundle = FeatureBundle(
            video_feats=video,
            text_feats=text,
            video_mask=np.ones(t, dtype=bool),
            text_mask=np.ones(n, dtype=bool),
            clip_duration_s=config.clip_duration_s,
        )
        samples.append(
            Sample(
                id=f"synth-{config.seed}-{idx:05d}",
                bundle=bundle,
                annotation=Annotation(gt_moments=moments, saliency=saliency),
            )
        )
    return samples
