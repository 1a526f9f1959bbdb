"""Audio ingest, log-power spectrograms and uniform subband partitioning."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    EmptyInput,
    InsufficientSamples,
    InvalidPartition,
    IoError,
    ParseError,
    ShapeMismatch,
    UnsupportedFormat,
)

HIRES_RATE = 44100
LOG_EPS = 1e-10
ALLOWED_BAND_COUNTS = (1, 2, 4, 8)

_FMT_PCM = 1
_FMT_FLOAT = 3
_FMT_EXTENSIBLE = 0xFFFE


@dataclass(frozen=True, eq=False)
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ShapeMismatch(f"expected mono samples, got shape {samples.shape}")
        if samples.size == 0:
            raise EmptyInput("audio clip has no samples")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("audio samples must be finite")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    @property
    def is_hires(self) -> bool:
        """False when the clip is not at the native 44.1 kHz rate (never resampled)."""
        return self.sample_rate == HIRES_RATE


@dataclass(frozen=True)
class StftConfig:
    window_size: int = 2048
    hop_size: int = 512
    window: str = "hann"

    def __post_init__(self):
        if self.window_size <= 0 or self.window_size % 2:
            raise ValueError(f"window_size must be positive and even, got {self.window_size}")
        if not 0 < self.hop_size <= self.window_size:
            raise ValueError(f"hop_size must lie in (0, window_size], got {self.hop_size}")
        if self.window != "hann":
            raise ValueError(f"unsupported window {self.window!r}")

    @property
    def n_bins(self) -> int:
        return self.window_size // 2 + 1

    def bin_hz(self, sample_rate: int) -> float:
        return sample_rate / self.window_size

    def n_frames(self, n_samples: int) -> int:
        return 1 + (n_samples - self.window_size) // self.hop_size


@dataclass(frozen=True, eq=False)
class Spectrogram:
    """Log-power matrix ``[freq_bins, frames]`` covering ``[f_lo, f_hi]`` Hz.

    The bin count may exceed ``(f_hi - f_lo) / bin_hz`` by one: a slice that
    reaches the Nyquist frequency carries the Nyquist bin as well.
    """

    values: np.ndarray
    f_lo: float
    f_hi: float
    sample_rate: int
    bin_hz: float

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 2 or 0 in values.shape:
            raise ShapeMismatch(f"spectrogram must be a non-empty matrix, got {values.shape}")
        if not self.f_lo < self.f_hi:
            raise ValueError(f"need f_lo < f_hi, got {self.f_lo}, {self.f_hi}")
        if self.f_hi > self.sample_rate / 2:
            raise ValueError(f"f_hi={self.f_hi} exceeds the Nyquist frequency {self.sample_rate / 2}")
        expected = (self.f_hi - self.f_lo) / self.bin_hz
        if abs(values.shape[0] - expected) > 1.0 + 1e-9:
            raise ShapeMismatch(
                f"{values.shape[0]} bins inconsistent with band width {expected:.3f} bins"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("spectrogram values must be finite")
        object.__setattr__(self, "values", values)

    @property
    def freq_bins(self) -> int:
        return self.values.shape[0]

    @property
    def frames(self) -> int:
        return self.values.shape[1]

    @property
    def nyquist(self) -> float:
        return self.sample_rate / 2

    @property
    def band(self) -> tuple[float, float]:
        return (self.f_lo, self.f_hi)


@dataclass(frozen=True)
class SubbandPartition:
    n_bands: int
    nyquist: float
    freq_bins: int
    boundaries: tuple = field(init=False)
    bin_ranges: tuple = field(init=False)

    def __post_init__(self):
        if self.n_bands not in ALLOWED_BAND_COUNTS:
            raise InvalidPartition(f"n_bands must be one of {ALLOWED_BAND_COUNTS}, got {self.n_bands}")
        if self.freq_bins < self.n_bands:
            raise InvalidPartition(f"cannot split {self.freq_bins} bins into {self.n_bands} bands")
        object.__setattr__(self, "boundaries", tuple(band_boundaries(self.n_bands, self.nyquist)))
        edges = [m * self.freq_bins // self.n_bands for m in range(self.n_bands)] + [self.freq_bins]
        object.__setattr__(self, "bin_ranges", tuple(zip(edges[:-1], edges[1:])))

    @classmethod
    def for_spectrogram(cls, spec: Spectrogram, n_bands: int) -> "SubbandPartition":
        return cls(n_bands, spec.nyquist, spec.freq_bins)


# --------------------------------------------------------------------------
# WAV I/O


def _parse_fmt(chunk: bytes):
    if len(chunk) < 16:
        raise ParseError("fmt chunk too short")
    tag, channels, rate, _, block_align, bits = struct.unpack("<HHIIHH", chunk[:16])
    if tag == _FMT_EXTENSIBLE:
        if len(chunk) < 40:
            raise ParseError("truncated WAVE_FORMAT_EXTENSIBLE header")
        tag = struct.unpack("<H", chunk[24:26])[0]
    if channels == 0 or rate == 0:
        raise ParseError("fmt chunk declares zero channels or zero sample rate")
    if (tag, bits) not in ((_FMT_PCM, 16), (_FMT_FLOAT, 32)):
        raise UnsupportedFormat(f"format tag {tag} with {bits} bits per sample")
    if block_align != channels * bits // 8:
        raise ParseError(f"block_align {block_align} inconsistent with {channels}x{bits} bits")
    return tag, channels, rate


def load_wav(path) -> AudioClip:
    """Read a RIFF/WAVE file (16-bit PCM or 32-bit float), averaging channels to mono."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise ParseError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    payload = None
    pos = 12
    while pos + 8 <= len(data):
        cid, size = struct.unpack("<4sI", data[pos : pos + 8])
        body = data[pos + 8 : pos + 8 + size]
        if len(body) < size:
            raise ParseError(f"{path}: chunk {cid!r} truncated")
        if cid == b"fmt ":
            fmt = _parse_fmt(body)
        elif cid == b"data":
            payload = body
        pos += 8 + size + (size & 1)
    if fmt is None:
        raise ParseError(f"{path}: missing fmt chunk")
    if payload is None:
        raise ParseError(f"{path}: missing data chunk")

    tag, channels, rate = fmt
    if tag == _FMT_PCM:
        usable = len(payload) - len(payload) % (2 * channels)
        raw = np.frombuffer(payload[:usable], dtype="<i2").astype(np.float64) / 32768.0
    else:
        usable = len(payload) - len(payload) % (4 * channels)
        raw = np.frombuffer(payload[:usable], dtype="<f4").astype(np.float64)
    if raw.size == 0:
        raise EmptyInput(f"{path}: no audio frames")
    frames = raw.reshape(-1, channels)
    mono = frames[:, 0] if channels == 1 else frames.mean(axis=1)
    return AudioClip(mono, rate)


def write_wav(path, clip: AudioClip, encoding: str = "pcm16") -> None:
    """Write a mono clip as 16-bit PCM (clipped to [-1, 1)) or 32-bit float."""
    if encoding == "pcm16":
        ints = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2")
        payload, tag, bits = ints.tobytes(), _FMT_PCM, 16
    elif encoding == "float32":
        payload, tag, bits = clip.samples.astype("<f4").tobytes(), _FMT_FLOAT, 32
    else:
        raise UnsupportedFormat(f"unknown encoding {encoding!r}")
    block = bits // 8
    fmt = struct.pack("<HHIIHH", tag, 1, clip.sample_rate, clip.sample_rate * block, block, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt
    body += b"data" + struct.pack("<I", len(payload)) + payload
    if len(payload) & 1:
        body += b"\x00"
    try:
        Path(path).write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


# --------------------------------------------------------------------------
# Signal processing


def standardize_duration(clip: AudioClip, target_seconds: float = 4.0) -> AudioClip:
    """Crop from sample 0 or repeat-pad (whole-clip tiling) to a fixed length."""
    if target_seconds <= 0:
        raise ValueError(f"target_seconds must be positive, got {target_seconds}")
    if len(clip) == 0:
        raise EmptyInput("cannot standardize an empty clip")
    target = int(round(target_seconds * clip.sample_rate))
    if len(clip) >= target:
        return AudioClip(clip.samples[:target].copy(), clip.sample_rate)
    reps = -(-target // len(clip))
    return AudioClip(np.tile(clip.samples, reps)[:target], clip.sample_rate)


def hann_window(n: int) -> np.ndarray:
    # periodic Hann, the usual choice for STFT analysis
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def stft_power(samples: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Squared STFT magnitude, shape ``[window_size // 2 + 1, frames]``."""
    if samples.size < cfg.window_size:
        raise InsufficientSamples(
            f"clip has {samples.size} samples, window needs {cfg.window_size}"
        )
    frames = sliding_window_view(samples, cfg.window_size)[:: cfg.hop_size]
    spec = np.fft.rfft(frames * hann_window(cfg.window_size), axis=1)
    return (spec.real**2 + spec.imag**2).T


def logpower_spectrogram(clip: AudioClip, cfg: StftConfig = StftConfig()) -> Spectrogram:
    power = stft_power(clip.samples, cfg)
    return Spectrogram(
        values=np.log(power + LOG_EPS),
        f_lo=0.0,
        f_hi=clip.sample_rate / 2,
        sample_rate=clip.sample_rate,
        bin_hz=cfg.bin_hz(clip.sample_rate),
    )


def band_boundaries(n_bands: int, nyquist_hz: float) -> list[tuple[float, float]]:
    """Split ``[0, nyquist_hz]`` into ``n_bands`` equal-width bands."""
    if n_bands < 1:
        raise InvalidPartition(f"n_bands must be >= 1, got {n_bands}")
    edges = [m * nyquist_hz / n_bands for m in range(n_bands)] + [float(nyquist_hz)]
    return [(float(lo), float(hi)) for lo, hi in zip(edges[:-1], edges[1:])]


def partition_spectrogram(spec: Spectrogram, part: SubbandPartition) -> list[Spectrogram]:
    if spec.f_lo != 0.0 or spec.f_hi != spec.nyquist:
        raise ShapeMismatch("partitioning needs a fullband spectrogram")
    if part.freq_bins != spec.freq_bins or part.nyquist != spec.nyquist:
        raise ShapeMismatch(
            f"partition built for {part.freq_bins} bins / {part.nyquist} Hz, "
            f"spectrogram has {spec.freq_bins} bins / {spec.nyquist} Hz"
        )
    return [
        Spectrogram(spec.values[start:end], lo, hi, spec.sample_rate, spec.bin_hz)
        for (start, end), (lo, hi) in zip(part.bin_ranges, part.boundaries)
    ]


def band_bin_range(f_lo: float, f_hi: float, bin_hz: float, freq_bins: int) -> tuple[int, int]:
    """Half-open bin range for a band; a band ending at Nyquist keeps the Nyquist bin."""
    start = int(round(f_lo / bin_hz))
    end = int(round(f_hi / bin_hz))
    if end == freq_bins - 1:
        end = freq_bins
    if not 0 <= start < end <= freq_bins:
        raise ShapeMismatch(f"band [{f_lo}, {f_hi}] Hz maps outside the {freq_bins}-bin grid")
    return start, end


def band_slice(spec: Spectrogram, f_lo: float, f_hi: float) -> Spectrogram:
    """Cut the rows of a fullband spectrogram that belong to ``[f_lo, f_hi]``."""
    if spec.f_lo != 0.0:
        raise ShapeMismatch("band_slice needs a spectrogram starting at 0 Hz")
    if f_hi > spec.f_hi:
        raise ShapeMismatch(f"band top {f_hi} Hz above spectrogram top {spec.f_hi} Hz")
    start, end = band_bin_range(f_lo, f_hi, spec.bin_hz, spec.freq_bins)
    return Spectrogram(spec.values[start:end], f_lo, f_hi, spec.sample_rate, spec.bin_hz)


# --------------------------------------------------------------------------
# Spectrogram cache ("SBSP")

_CACHE_MAGIC = b"SBSP"
_CACHE_VERSION = 1
_CACHE_HEADER = struct.Struct("<4sIIIddd")


def write_spectrogram_cache(path, spec: Spectrogram) -> None:
    header = _CACHE_HEADER.pack(
        _CACHE_MAGIC, _CACHE_VERSION, spec.freq_bins, spec.frames,
        spec.f_lo, spec.f_hi, float(spec.sample_rate),
    )
    try:
        Path(path).write_bytes(header + spec.values.astype("<f4").tobytes(order="C"))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_spectrogram_cache(path) -> Spectrogram:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if len(data) < _CACHE_HEADER.size:
        raise ParseError(f"{path}: truncated spectrogram header")
    magic, version, bins, frames, f_lo, f_hi, rate = _CACHE_HEADER.unpack_from(data)
    if magic != _CACHE_MAGIC:
        raise ParseError(f"{path}: bad magic {magic!r}")
    if version != _CACHE_VERSION:
        raise UnsupportedFormat(f"{path}: cache version {version}")
    body = data[_CACHE_HEADER.size :]
    if len(body) != 4 * bins * frames:
        raise ParseError(f"{path}: expected {bins}x{frames} f32 values, got {len(body)} bytes")
    values = np.frombuffer(body, dtype="<f4").reshape(bins, frames).astype(np.float64)
    sample_rate = int(rate)
    # bin spacing is not stored; slices reaching Nyquist carry the extra Nyquist bin
    if f_hi == sample_rate / 2:
        bin_hz = (f_hi - f_lo) / (bins - 1)
    else:
        bin_hz = (f_hi - f_lo) / bins
    return Spectrogram(values, f_lo, f_hi, sample_rate, bin_hz)
