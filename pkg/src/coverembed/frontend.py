"""Constant-Q front end, baseline dominant-melody extraction and F0 file I/O.

The CQT is a bank of Hann-windowed complex exponentials, one per bin, each
``Q * sr / f_k`` samples long and centred on the frame position.  All bins
are evaluated through a single FFT of the padded signal, which is exactly
equivalent to the direct time-domain inner products.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.fft

from .errors import ConfigError, FormatError, InvalidInputError

F0_MAGIC = b"F0CQ"
F0_VERSION = 1
_F0_HEADER = struct.Struct("<4sIIIHdd")


@dataclass(frozen=True)
class CqtParams:
    f_min: float = 32.70
    n_octaves: int = 6
    bins_per_semitone: int = 5
    hop_seconds: float = 0.011

    def __post_init__(self):
        if not self.f_min > 0:
            raise ConfigError(f"f_min must be positive, got {self.f_min}")
        if self.n_octaves < 1 or self.bins_per_semitone < 1:
            raise ConfigError("n_octaves and bins_per_semitone must be >= 1")
        if not self.hop_seconds > 0:
            raise ConfigError("hop_seconds must be positive")

    @property
    def bins_per_octave(self) -> int:
        return 12 * self.bins_per_semitone

    @property
    def n_bins(self) -> int:
        return self.n_octaves * self.bins_per_octave

    @property
    def f_max(self) -> float:
        return self.f_min * 2.0**self.n_octaves

    @property
    def quality(self) -> float:
        return 1.0 / (2.0 ** (1.0 / self.bins_per_octave) - 1.0)

    def frequencies(self) -> np.ndarray:
        return self.f_min * 2.0 ** (np.arange(self.n_bins) / self.bins_per_octave)

    def hop_samples(self, sample_rate: float) -> int:
        return max(1, int(round(self.hop_seconds * sample_rate)))


@dataclass
class CqtMatrix:
    values: np.ndarray  # (time_frames, freq_bins), magnitudes
    params: CqtParams
    sample_rate: float

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[1] != self.params.n_bins:
            raise InvalidInputError(
                f"CQT matrix must be (frames, {self.params.n_bins}), got {self.values.shape}"
            )
        if np.any(self.values < 0) or not np.all(np.isfinite(self.values)):
            raise InvalidInputError("CQT magnitudes must be finite and nonnegative")


@dataclass
class F0Matrix:
    salience: np.ndarray  # (time_frames, freq_bins), float32, >= 0
    bins_per_semitone: int = 5
    f_min: float = 32.70
    hop_seconds: float = 0.011
    track_id: str = ""
    extra: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.salience = np.asarray(self.salience, dtype=np.float32)
        if self.salience.ndim != 2:
            raise InvalidInputError(f"salience must be 2-D, got shape {self.salience.shape}")
        if np.any(self.salience < 0):
            raise InvalidInputError("salience must be nonnegative")

    @property
    def shape(self) -> tuple[int, int]:
        return self.salience.shape


def cqt_kernel(freq: float, sample_rate: float, quality: float) -> np.ndarray:
    """Unit-gain analysis atom for one bin: a cosine at ``freq`` maps to |A|/2."""
    length = int(math.ceil(quality * sample_rate / freq))
    window = np.hanning(length + 2)[1:-1]  # strictly positive taps
    n = np.arange(length) - (length - 1) / 2.0
    atom = window * np.exp(2j * np.pi * freq * n / sample_rate)
    return atom / window.sum()


def compute_cqt(audio, sample_rate: float, params: CqtParams | None = None) -> CqtMatrix:
    params = params or CqtParams()
    x = np.asarray(audio, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise InvalidInputError("audio must be a non-empty mono sample sequence")
    if sample_rate < 2.0 * params.f_max:
        raise ConfigError(
            f"sample rate {sample_rate} Hz cannot represent the top CQT bin "
            f"(needs >= {2.0 * params.f_max:.1f} Hz)"
        )

    hop = params.hop_samples(sample_rate)
    n_frames = 1 + x.size // hop
    centers = np.arange(n_frames) * hop

    kernels = [cqt_kernel(f, sample_rate, params.quality) for f in params.frequencies()]
    pad = max(k.size for k in kernels)
    nfft = scipy.fft.next_fast_len(x.size + 2 * pad)
    padded = np.zeros(nfft)
    padded[pad : pad + x.size] = x
    spectrum = scipy.fft.fft(padded)

    out = np.empty((n_frames, params.n_bins))
    chunk = 16
    for start in range(0, params.n_bins, chunk):
        stop = min(start + chunk, params.n_bins)
        bank = np.zeros((stop - start, nfft), dtype=np.complex128)
        offsets = []
        for row, k in enumerate(range(start, stop)):
            bank[row, : kernels[k].size] = kernels[k]
            offsets.append((kernels[k].size - 1) // 2)
        # circular cross-correlation: corr[t] = sum_j padded[t + j] * conj(kernel[j])
        corr = scipy.fft.ifft(spectrum[None, :] * np.conj(scipy.fft.fft(bank, axis=1)), axis=1)
        for row, half in enumerate(offsets):
            out[:, start + row] = np.abs(corr[row, centers + pad - half])
    return CqtMatrix(values=out, params=params, sample_rate=float(sample_rate))


def harmonic_offsets(n_harmonics: int, bins_per_octave: int) -> list[int]:
    return [int(round(bins_per_octave * math.log2(h))) for h in range(1, n_harmonics + 1)]


def harmonic_sum(values: np.ndarray, n_harmonics: int, bins_per_octave: int,
                 decay: float = 0.8) -> np.ndarray:
    """Salience s(b) = sum_h decay**(h-1) * values[b + offset_h]; bins past the top add nothing."""
    values = np.asarray(values, dtype=np.float64)
    n_bins = values.shape[-1]
    total = np.zeros_like(values)
    for h, off in enumerate(harmonic_offsets(n_harmonics, bins_per_octave)):
        if off >= n_bins:
            break
        total[..., : n_bins - off] += decay**h * values[..., off:]
    return total


def extract_f0_baseline(cqt: CqtMatrix, n_harmonics: int = 6, salience_floor: float = 0.05,
                        track_id: str = "") -> F0Matrix:
    """Keep, per frame, only the argmax of the harmonic-sum salience."""
    if n_harmonics < 1:
        raise ConfigError("n_harmonics must be >= 1")
    params = cqt.params
    sal = harmonic_sum(cqt.values, n_harmonics, params.bins_per_octave)
    n_frames = sal.shape[0]
    out = np.zeros(sal.shape, dtype=np.float32)
    if n_frames == 0:
        return F0Matrix(out, params.bins_per_semitone, params.f_min, params.hop_seconds, track_id)
    best = np.argmax(sal, axis=1)
    peak = sal[np.arange(n_frames), best]
    global_max = peak.max()
    keep = (peak > 0) & (peak >= salience_floor * global_max)
    rows = np.nonzero(keep)[0]
    out[rows, best[rows]] = peak[rows]
    return F0Matrix(out, params.bins_per_semitone, params.f_min, params.hop_seconds, track_id)


def load_wav(path) -> tuple[np.ndarray, int]:
    """Read PCM/float WAV as mono float64 in [-1, 1]."""
    from scipy.io import wavfile

    sr, data = wavfile.read(path)
    data = np.asarray(data)
    if np.issubdtype(data.dtype, np.integer):
        data = data.astype(np.float64) / float(np.iinfo(data.dtype).max)
    else:
        data = data.astype(np.float64)
    if data.ndim == 2:
        data = data.mean(axis=1)
    return data, int(sr)


def encode_f0(f0: F0Matrix) -> bytes:
    frames, bins = f0.salience.shape
    tid = f0.track_id.encode("utf-8")
    if len(tid) > 0xFFFF:
        raise InvalidInputError("track_id longer than 65535 bytes")
    header = _F0_HEADER.pack(F0_MAGIC, F0_VERSION, frames, bins, f0.bins_per_semitone,
                             float(f0.f_min), float(f0.hop_seconds))
    payload = np.ascontiguousarray(f0.salience, dtype="<f4").tobytes()
    return header + struct.pack("<H", len(tid)) + tid + payload


def decode_f0(blob: bytes) -> F0Matrix:
    if len(blob) < _F0_HEADER.size + 2:
        raise FormatError("F0 file truncated in header")
    magic, version, frames, bins, bps, f_min, hop = _F0_HEADER.unpack_from(blob, 0)
    if magic != F0_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {F0_MAGIC!r}")
    if version != F0_VERSION:
        raise FormatError(f"unsupported F0 file version {version}")
    pos = _F0_HEADER.size
    (id_len,) = struct.unpack_from("<H", blob, pos)
    pos += 2
    if len(blob) < pos + id_len:
        raise FormatError("F0 file truncated in track id")
    try:
        track_id = blob[pos : pos + id_len].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError("track id is not valid UTF-8") from exc
    pos += id_len
    expected = frames * bins * 4
    if len(blob) - pos != expected:
        raise FormatError(f"F0 payload has {len(blob) - pos} bytes, expected {expected}")
    sal = np.frombuffer(blob, dtype="<f4", count=frames * bins, offset=pos)
    sal = sal.reshape(frames, bins).astype(np.float32)
    return F0Matrix(sal, bps, f_min, hop, track_id)


def save_f0(f0: F0Matrix, path) -> None:
    Path(path).write_bytes(encode_f0(f0))


def load_f0(path) -> F0Matrix:
    return decode_f0(Path(path).read_bytes())
