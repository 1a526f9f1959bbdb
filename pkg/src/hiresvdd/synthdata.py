"""Deterministic singing-like corpus with forgery artifacts planted in one band.

Bonafide clips are harmonic tones with vibrato, note changes and shaped breath
noise. A deepfake clip is rendered exactly like a bonafide one and then
altered only inside ``ArtifactSpec.band``, so any class difference outside
that band is numerical leakage, not signal.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dsp import AudioClip, write_wav
from .errors import IoError
from .records import DatasetManifest, ManifestRow

log = logging.getLogger(__name__)

ARTIFACT_KINDS = ("band_notch", "mirrored_tones", "bandlimited_resynthesis")
PEAK_LEVEL = 0.5
_TESTB_OFFSET = 1_000_000


@dataclass(frozen=True)
class ArtifactSpec:
    kind: str = "band_notch"
    band: tuple[float, float] = (11025.0, 16537.5)
    strength: float = 1.0

    def __post_init__(self):
        if self.kind not in ARTIFACT_KINDS:
            raise ValueError(f"artifact kind must be one of {ARTIFACT_KINDS}, got {self.kind!r}")
        lo, hi = self.band
        if not 0 <= lo < hi <= 22050:
            raise ValueError(f"artifact band {self.band} must lie within [0, 22050] Hz")
        if not 0 < self.strength <= 1:
            raise ValueError(f"strength must lie in (0, 1], got {self.strength}")


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 42
    n_bonafide: int = 100
    n_deepfake: int = 100
    f0_range: tuple[float, float] = (180.0, 520.0)
    n_harmonics: int = 40
    vibrato: tuple[float, float] = (5.5, 40.0)  # rate Hz, depth cents
    breath_noise_band: tuple[float, float] = (1000.0, 21000.0)
    artifact: ArtifactSpec = field(default_factory=ArtifactSpec)
    duration: float = 4.0
    sample_rate: int = 44100
    split_fractions: tuple[float, float, float] = (0.64, 0.16, 0.20)  # train, valid, testA
    n_testb: int = 0  # per class; 0 disables the shifted-f0 split
    testb_f0_range: tuple[float, float] = (90.0, 200.0)

    def __post_init__(self):
        if self.n_bonafide < 1 or self.n_deepfake < 1:
            raise ValueError("need at least one clip per class")
        lo, hi = self.f0_range
        if not 20.0 <= lo < hi <= 20000.0:
            raise ValueError(f"f0_range {self.f0_range} outside the audible range")
        if self.n_harmonics < 1:
            raise ValueError("n_harmonics must be >= 1")
        if self.duration <= 0:
            raise ValueError(f"duration must be positive, got {self.duration}")
        if abs(sum(self.split_fractions) - 1.0) > 1e-9 or min(self.split_fractions) < 0:
            raise ValueError(f"split fractions must be non-negative and sum to 1: {self.split_fractions}")


def _band_mask(n: int, sample_rate: int, lo: float, hi: float) -> np.ndarray:
    freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
    return (freqs >= lo) & (freqs < hi) if hi < sample_rate / 2 else freqs >= lo


def _bandpass(x: np.ndarray, sample_rate: int, lo: float, hi: float, taper_hz: float = 0.0) -> np.ndarray:
    """Brick-wall band-pass in the DFT domain, optionally with raised-cosine edges inside the band."""
    spec = np.fft.rfft(x)
    gain = _band_mask(x.size, sample_rate, lo, hi).astype(np.float64)
    if taper_hz > 0:
        freqs = np.fft.rfftfreq(x.size, 1.0 / sample_rate)
        dist = np.minimum(freqs - lo, hi - freqs) if hi < sample_rate / 2 else freqs - lo
        ramp = np.clip(dist / taper_hz, 0.0, 1.0)
        gain *= 0.5 - 0.5 * np.cos(np.pi * ramp)
    return np.fft.irfft(spec * gain, n=x.size)


@dataclass
class _Voice:
    """Intermediate render kept so artifacts can reuse the harmonic tracks."""

    signal: np.ndarray
    f0: np.ndarray
    env: np.ndarray
    amps: np.ndarray
    gain: float


def _render(cfg: SynthConfig, index: int, f0_range=None) -> _Voice:
    rng = np.random.default_rng([cfg.seed, index])
    sr = cfg.sample_rate
    n = int(round(cfg.duration * sr))
    t = np.arange(n) / sr
    lo, hi = f0_range or cfg.f0_range

    # piecewise-constant note pitches, smoothed into short glides
    n_notes = int(rng.integers(2, 6))
    cuts = np.sort(rng.uniform(0.15, 0.85, n_notes - 1)) * n
    edges = np.concatenate([[0], cuts.astype(int), [n]])
    pitches = np.exp(rng.uniform(np.log(lo), np.log(hi), n_notes))
    f0 = np.repeat(pitches, np.diff(edges))
    glide = int(0.04 * sr)
    f0 = np.convolve(np.pad(f0, (glide, glide), mode="edge"), np.ones(glide) / glide, mode="same")[glide:-glide]

    rate, depth = cfg.vibrato
    rate *= rng.uniform(0.9, 1.1)
    depth *= rng.uniform(0.7, 1.3)
    f0 = f0 * 2.0 ** (depth / 1200.0 * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi)))

    gate = np.ones(n)
    gap = int(0.03 * sr)
    for e in edges[1:-1]:
        gate[max(e - gap, 0) : e] = 0.15
    ramp = int(0.02 * sr)
    env = np.convolve(np.pad(gate, (ramp, ramp), mode="edge"), np.ones(ramp) / ramp, mode="same")[ramp:-ramp]
    env *= np.minimum(1.0, np.minimum(t, t[-1] - t) / 0.05 + 0.05)

    phase = 2 * np.pi * np.cumsum(f0) / sr
    nyq = sr / 2
    k = np.arange(1, cfg.n_harmonics + 1)
    amps = np.exp(rng.normal(0.0, 0.25, k.size)) / k
    offsets = rng.uniform(0, 2 * np.pi, k.size)
    voiced = np.zeros(n)
    f0_max = f0.max()
    for kk, a, ph in zip(k, amps, offsets):
        if kk * f0_max < 0.98 * nyq:
            voiced += a * np.sin(kk * phase + ph)
            continue
        audible = (kk * f0) < 0.98 * nyq
        if not audible.any():
            break
        voiced += np.where(audible, a * np.sin(kk * phase + ph), 0.0)
    voiced *= env

    blo, bhi = cfg.breath_noise_band
    white = rng.standard_normal(n)
    spec = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n, 1.0 / sr)
    spec *= _band_mask(n, sr, blo, bhi) / np.sqrt(np.maximum(freqs, blo) / blo)
    breath = np.fft.irfft(spec, n=n) * np.sqrt(env)
    snr_db = rng.uniform(-24.0, -14.0)
    breath *= np.sqrt(np.mean(voiced**2)) * 10 ** (snr_db / 20) / max(np.sqrt(np.mean(breath**2)), 1e-12)

    mix = voiced + breath
    gain = PEAK_LEVEL / np.max(np.abs(mix))
    return _Voice(mix * gain, f0, env, amps * gain, gain)


def synth_bonafide(cfg: SynthConfig, index: int, f0_range=None) -> AudioClip:
    return AudioClip(_render(cfg, index, f0_range).signal, cfg.sample_rate)


def _apply_artifact(cfg: SynthConfig, index: int, voice: _Voice) -> np.ndarray:
    art = cfg.artifact
    sr = cfg.sample_rate
    x = voice.signal
    lo, hi = art.band
    rng = np.random.default_rng([cfg.seed, index, 7])

    if art.kind == "band_notch":
        spec = np.fft.rfft(x)
        spec[_band_mask(x.size, sr, lo, hi)] *= 1.0 - art.strength
        return np.fft.irfft(spec, n=x.size)

    taper = 0.05 * (hi - lo)
    if art.kind == "mirrored_tones":
        # harmonics just below the band folded upward about its lower edge, as aliasing would
        width = hi - lo
        extra = np.zeros_like(x)
        for kk, a in enumerate(voice.amps, start=1):
            fk = kk * voice.f0
            near = (fk >= lo - width) & (fk < lo)
            if not near.any():
                continue
            ph = 2 * np.pi * np.cumsum(2 * lo - fk) / sr + rng.uniform(0, 2 * np.pi)
            extra += np.where(near, a * np.sin(ph), 0.0)
        # folded partials are not attenuated by an anti-aliasing filter: boost them
        return x + art.strength * _bandpass(4.0 * extra * voice.env, sr, lo, hi, taper)

    # bandlimited_resynthesis: band content replaced by noise following a coarsely quantized envelope
    band = _bandpass(x, sr, lo, hi)
    block = 1024
    nb = -(-x.size // block)
    padded = np.pad(band, (0, nb * block - x.size))
    rms = np.sqrt(np.mean(padded.reshape(nb, block) ** 2, axis=1)) + 1e-12
    q_db = np.round(20 * np.log10(rms) / 6.0) * 6.0
    target = np.repeat(10 ** (q_db / 20), block)[: x.size]
    noise = _bandpass(rng.standard_normal(x.size), sr, lo, hi)
    noise_rms = np.repeat(
        np.sqrt(np.mean(np.pad(noise, (0, nb * block - x.size)).reshape(nb, block) ** 2, axis=1)) + 1e-12, block
    )[: x.size]
    resynth = _bandpass(noise / noise_rms * target, sr, lo, hi, taper)
    return x - art.strength * band + art.strength * resynth


def synth_deepfake(cfg: SynthConfig, index: int, f0_range=None) -> AudioClip:
    voice = _render(cfg, index, f0_range)
    out = _apply_artifact(cfg, index, voice)
    peak = np.max(np.abs(out))
    if peak > 1.0:
        out = out / peak
    return AudioClip(out, cfg.sample_rate)


def _stratified_splits(indices: list[int], fractions, rng: np.random.Generator) -> dict[int, str]:
    order = [indices[i] for i in rng.permutation(len(indices))]
    n = len(order)
    n_train = int(round(fractions[0] * n))
    n_valid = int(round(fractions[1] * n))
    n_train = min(n_train, n)
    n_valid = min(n_valid, n - n_train)
    out = {}
    for pos, idx in enumerate(order):
        out[idx] = "train" if pos < n_train else "valid" if pos < n_train + n_valid else "testA"
    return out


def build_corpus(cfg: SynthConfig, out_dir) -> DatasetManifest:
    """Render every clip to ``out_dir/wav`` and write ``out_dir/manifest.tsv``."""
    out_dir = Path(out_dir)
    wav_dir = out_dir / "wav"
    try:
        wav_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {wav_dir}: {exc}") from exc

    rng = np.random.default_rng([cfg.seed, 99])
    bona = list(range(cfg.n_bonafide))
    fake = list(range(cfg.n_bonafide, cfg.n_bonafide + cfg.n_deepfake))
    splits = _stratified_splits(bona, cfg.split_fractions, rng)
    splits.update(_stratified_splits(fake, cfg.split_fractions, rng))

    jobs = [(i, "bonafide", splits[i], None) for i in bona] + [(i, "deepfake", splits[i], None) for i in fake]
    if cfg.n_testb:
        base = _TESTB_OFFSET
        jobs += [(base + i, "bonafide", "testB", cfg.testb_f0_range) for i in range(cfg.n_testb)]
        jobs += [(base + cfg.n_testb + i, "deepfake", "testB", cfg.testb_f0_range) for i in range(cfg.n_testb)]

    rows = []
    for index, label, split, f0_range in jobs:
        render = synth_bonafide if label == "bonafide" else synth_deepfake
        clip = render(cfg, index, f0_range)
        uid = f"{'bf' if label == 'bonafide' else 'df'}{index:07d}"
        rel = f"wav/{uid}.wav"
        write_wav(out_dir / rel, clip)
        rows.append(ManifestRow(uid, rel, label, split, f"singer{index % 8:02d}"))
    manifest = DatasetManifest(rows, out_dir)
    manifest.write(out_dir / "manifest.tsv")
    log.info("wrote %d clips to %s", len(rows), out_dir)
    return manifest
