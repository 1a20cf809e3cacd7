"""Trim / downsample / resize pipeline producing fixed 1024x36 encoder inputs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyMelodyError, InvalidInputError
from .frontend import F0Matrix

OUT_TIME = 1024
OUT_FREQ = 36
DOWNSAMPLE = 5
# 180 s of F0 frames at the reference ~11.6 ms hop.
MAX_FRAMES = 15500


@dataclass
class PreprocessedInput:
    values: np.ndarray  # (1024, 36) float32
    track_id: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.shape != (OUT_TIME, OUT_FREQ):
            raise InvalidInputError(f"expected shape {(OUT_TIME, OUT_FREQ)}, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0):
            raise InvalidInputError("preprocessed values must be finite and nonnegative")


def mean_bin(salience: np.ndarray) -> float:
    """Salience-weighted mean frequency bin over every nonzero cell."""
    weights = salience.sum(axis=0, dtype=np.float64)
    total = weights.sum()
    if total <= 0:
        raise EmptyMelodyError("melody has no salience")
    return float(np.dot(weights, np.arange(salience.shape[1])) / total)


def trim(f0: F0Matrix, octave_span: int = 3, max_seconds: float = 180.0,
         max_frames: int | None = MAX_FRAMES) -> F0Matrix:
    """Crop ``octave_span`` octaves around the mean pitch and cap the duration.

    The window stays centred on the mean bin; any part of it falling outside
    the matrix is filled with zeros.  The duration cap is the smaller of
    ``max_seconds`` at the matrix hop and ``max_frames``; shorter inputs keep
    their length.
    """
    sal = f0.salience
    if sal.size == 0 or not np.any(sal > 0):
        raise EmptyMelodyError(f"track {f0.track_id!r} has an empty melody")
    span = octave_span * 12 * f0.bins_per_semitone
    start = int(round(mean_bin(sal))) - span // 2

    cap = int(round(max_seconds / f0.hop_seconds))
    if max_frames is not None:
        cap = min(cap, max_frames)
    frames = min(sal.shape[0], cap)

    out = np.zeros((frames, span), dtype=np.float32)
    lo, hi = max(start, 0), min(start + span, sal.shape[1])
    if hi > lo:
        out[:, lo - start : hi - start] = sal[:frames, lo:hi]
    return F0Matrix(out, f0.bins_per_semitone, f0.f_min * 2.0 ** (start / (12 * f0.bins_per_semitone)),
                    f0.hop_seconds, f0.track_id)


def _axis_weights(n_in: int, n_out: int):
    # half-pixel (align_corners=False) sample grid, clamped at the borders
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    return i0, i1, frac


def bilinear_resize(matrix: np.ndarray, out_time: int, out_freq: int) -> np.ndarray:
    matrix = np.asarray(matrix)
    if matrix.ndim != 2 or min(matrix.shape) < 1 or out_time < 1 or out_freq < 1:
        raise InvalidInputError(f"cannot resize {matrix.shape} to {(out_time, out_freq)}")
    src = matrix.astype(np.float64)
    t0, t1, tf = _axis_weights(src.shape[0], out_time)
    f0, f1, ff = _axis_weights(src.shape[1], out_freq)
    rows = src[t0] * (1.0 - tf)[:, None] + src[t1] * tf[:, None]
    out = rows[:, f0] * (1.0 - ff)[None, :] + rows[:, f1] * ff[None, :]
    return out.astype(matrix.dtype if np.issubdtype(matrix.dtype, np.floating) else np.float64)


def pipeline_stages(f0: F0Matrix, octave_span: int = 3, max_seconds: float = 180.0,
                    max_frames: int | None = MAX_FRAMES) -> list[np.ndarray]:
    """Return [trimmed, downsampled, resized] matrices (time x freq)."""
    trimmed = trim(f0, octave_span, max_seconds, max_frames).salience
    small = bilinear_resize(trimmed, max(1, trimmed.shape[0] // DOWNSAMPLE),
                            max(1, trimmed.shape[1] // DOWNSAMPLE))
    resized = bilinear_resize(small, OUT_TIME, small.shape[1])
    return [trimmed, small, resized]


def preprocess_pipeline(f0: F0Matrix, octave_span: int = 3, max_seconds: float = 180.0,
                        max_frames: int | None = MAX_FRAMES) -> PreprocessedInput:
    resized = pipeline_stages(f0, octave_span, max_seconds, max_frames)[-1]
    if resized.shape[1] != OUT_FREQ:
        raise InvalidInputError(
            f"octave_span={octave_span} gives {resized.shape[1]} frequency bins, encoder needs {OUT_FREQ}"
        )
    return PreprocessedInput(np.maximum(resized, 0.0).astype(np.float32), f0.track_id)


def to_f0(pre: PreprocessedInput, hop_seconds: float = 0.011) -> F0Matrix:
    """Wrap a preprocessed input for the on-disk cache (F0 format, 36 bins, 1 bin/semitone)."""
    return F0Matrix(pre.values, bins_per_semitone=1, f_min=0.0, hop_seconds=hop_seconds,
                    track_id=pre.track_id)


def from_f0(f0: F0Matrix) -> PreprocessedInput:
    return PreprocessedInput(f0.salience, f0.track_id)
