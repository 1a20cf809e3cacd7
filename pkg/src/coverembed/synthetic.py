"""Synthetic works and covers for harness runs.

A work is a random monophonic note sequence.  Each cover re-renders it
transposed by up to +-6 semitones, at a tempo factor in [0.7, 1.4], with
additive salience noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .frontend import F0Matrix

N_BINS = 360
BINS_PER_SEMITONE = 5


@dataclass
class Work:
    work_id: str
    pitches: np.ndarray  # semitones relative to base
    durations: np.ndarray  # frames at tempo 1.0
    base_bin: int


def random_work(work_id: str, rng: np.random.Generator, n_notes: int = 64,
                min_frames: int = 20, max_frames: int = 140) -> Work:
    steps = rng.choice([-5, -4, -3, -2, -1, 0, 1, 2, 3, 4, 5, 7, -7], size=n_notes)
    pitches = np.clip(np.cumsum(steps), -12, 12)
    durations = rng.integers(min_frames, max_frames, size=n_notes)
    base_bin = int(rng.integers(120, 240))
    return Work(work_id, pitches, durations, base_bin)


def render(work: Work, transpose: int = 0, tempo: float = 1.0, noise: float = 0.0,
           rng: np.random.Generator | None = None, track_id: str = "",
           hop_seconds: float = 0.011) -> F0Matrix:
    """F0 salience with a triangular peak around the melody bin of each frame.

    Peaks span five bins, as smeared salience does in practice; a factor-5
    bilinear downsample lands on exact grid points, so one-bin peaks would
    survive or vanish depending on their residue.  ``noise`` scales Gaussian
    jitter of the peak height and of the pitch (times 5, in bins) and the
    fraction of frames that get a spurious activation in a random bin.
    """
    frames = np.maximum(1, np.round(work.durations / tempo)).astype(int)
    bins = work.base_bin + BINS_PER_SEMITONE * (work.pitches + transpose)
    centre = np.repeat(bins, frames).astype(np.float64)
    n = centre.size
    height = np.ones(n)
    if noise > 0:
        rng = rng or np.random.default_rng()
        centre += rng.normal(0.0, noise * BINS_PER_SEMITONE, n)
        height = np.clip(height + rng.normal(0.0, noise, n), 0.05, None)
    sal = np.zeros((n, N_BINS), dtype=np.float32)
    rows = np.arange(n)
    for off in range(-2, 3):
        cols = np.round(centre).astype(int) + off
        weight = np.maximum(0.0, 1.0 - np.abs(cols - centre) / 3.0)
        ok = (cols >= 0) & (cols < N_BINS)
        sal[rows[ok], cols[ok]] = (height * weight)[ok]
    if noise > 0:
        spurious = np.nonzero(rng.random(n) < noise)[0]
        sal[spurious, rng.integers(0, N_BINS, spurious.size)] += rng.uniform(0.0, 0.5, spurious.size)
    return F0Matrix(sal, BINS_PER_SEMITONE, 32.70, hop_seconds, track_id)


def make_cover(work: Work, rng: np.random.Generator, track_id: str, noise: float = 0.1,
               max_transpose: int = 6, tempo_range=(0.7, 1.4)) -> F0Matrix:
    transpose = int(rng.integers(-max_transpose, max_transpose + 1))
    tempo = float(rng.uniform(*tempo_range))
    return render(work, transpose, tempo, noise, rng, track_id)


def make_corpus(n_works: int, covers_per_work: int, seed: int = 0, noise: float = 0.1,
                prefix: str = "w"):
    """Yield ``(work_id, track_id, F0Matrix)`` for every cover of every work."""
    rng = np.random.default_rng(seed)
    works = [random_work(f"{prefix}{i:03d}", rng) for i in range(n_works)]
    for work in works:
        for c in range(covers_per_work):
            tid = f"{work.work_id}_c{c}"
            yield work.work_id, tid, make_cover(work, rng, tid, noise)


def make_manifest_counts(n_works: int, n_tracks: int, min_covers: int = 5, max_covers: int = 15,
                         seed: int = 0) -> list[int]:
    """Per-work cover counts in [min_covers, max_covers] summing exactly to ``n_tracks``."""
    if not n_works * min_covers <= n_tracks <= n_works * max_covers:
        raise ValueError("track total incompatible with the cover bounds")
    rng = np.random.default_rng(seed)
    counts = rng.integers(min_covers, max_covers + 1, size=n_works)
    diff = n_tracks - int(counts.sum())
    while diff:
        step = 1 if diff > 0 else -1
        room = np.nonzero(counts < max_covers if step > 0 else counts > min_covers)[0]
        pick = rng.choice(room, size=min(abs(diff), room.size), replace=False)
        counts[pick] += step
        diff -= step * pick.size
    return counts.tolist()
