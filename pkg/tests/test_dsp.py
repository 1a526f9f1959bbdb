import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hiresvdd.dsp import (
    LOG_EPS,
    AudioClip,
    Spectrogram,
    StftConfig,
    SubbandPartition,
    band_boundaries,
    band_slice,
    hann_window,
    load_wav,
    logpower_spectrogram,
    partition_spectrogram,
    read_spectrogram_cache,
    standardize_duration,
    stft_power,
    write_spectrogram_cache,
    write_wav,
)
from hiresvdd.errors import (
    EmptyInput,
    InsufficientSamples,
    InvalidPartition,
    IoError,
    ParseError,
    ShapeMismatch,
    UnsupportedFormat,
)

SR = 44100


def _pcm_wav(samples_int16: np.ndarray, channels=1, rate=SR, tag=1, bits=16, extensible=False) -> bytes:
    payload = samples_int16.tobytes()
    block = channels * bits // 8
    if extensible:
        fmt = struct.pack("<HHIIHH", 0xFFFE, channels, rate, rate * block, block, bits)
        fmt += struct.pack("<HHI", 22, bits, 0) + struct.pack("<H", tag) + b"\x00" * 14
    else:
        fmt = struct.pack("<HHIIHH", tag, channels, rate, rate * block, block, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt
    body += b"LIST" + struct.pack("<I", 3) + b"abc\x00"  # odd-sized chunk with pad byte
    body += b"data" + struct.pack("<I", len(payload)) + payload
    return b"RIFF" + struct.pack("<I", len(body)) + body


# -- WAV -----------------------------------------------------------------------------


def test_one_second_sine_roundtrip(tmp_path):
    t = np.arange(SR) / SR
    clip = AudioClip(0.5 * np.sin(2 * np.pi * 440 * t), SR)
    write_wav(tmp_path / "s.wav", clip)
    back = load_wav(tmp_path / "s.wav")
    assert len(back) == 44100 and back.sample_rate == 44100
    assert np.max(np.abs(back.samples - clip.samples)) <= 1 / 32768


def test_float32_roundtrip_is_exact(tmp_path):
    x = np.random.default_rng(0).uniform(-1, 1, 1000).astype(np.float32).astype(np.float64)
    write_wav(tmp_path / "f.wav", AudioClip(x, 48000), encoding="float32")
    back = load_wav(tmp_path / "f.wav")
    assert back.sample_rate == 48000 and not back.is_hires
    assert np.array_equal(back.samples, x)


def test_stereo_opposite_channels_average_to_zero(tmp_path):
    x = np.random.default_rng(1).integers(-20000, 20000, 500).astype("<i2")
    inter = np.stack([x, -x], axis=1).reshape(-1)
    (tmp_path / "st.wav").write_bytes(_pcm_wav(inter, channels=2))
    assert np.array_equal(load_wav(tmp_path / "st.wav").samples, np.zeros(500))


def test_most_negative_pcm_sample_is_minus_one(tmp_path):
    (tmp_path / "m.wav").write_bytes(_pcm_wav(np.array([-32768, 0, 32767], dtype="<i2")))
    s = load_wav(tmp_path / "m.wav").samples
    assert s[0] == -1.0 and s[1] == 0.0 and s[2] == 32767 / 32768


def test_extensible_header_is_accepted(tmp_path):
    (tmp_path / "e.wav").write_bytes(_pcm_wav(np.array([16384, -16384], dtype="<i2"), extensible=True))
    assert np.array_equal(load_wav(tmp_path / "e.wav").samples, [0.5, -0.5])


def test_wav_errors(tmp_path):
    (tmp_path / "junk.wav").write_bytes(b"not a wav file at all")
    with pytest.raises(ParseError):
        load_wav(tmp_path / "junk.wav")
    (tmp_path / "u8.wav").write_bytes(_pcm_wav(np.array([1, 2], dtype="u1"), bits=8))
    with pytest.raises(UnsupportedFormat):
        load_wav(tmp_path / "u8.wav")
    good = _pcm_wav(np.zeros(10, dtype="<i2"))
    (tmp_path / "trunc.wav").write_bytes(good[:-6])
    with pytest.raises(ParseError):
        load_wav(tmp_path / "trunc.wav")
    with pytest.raises(IoError):
        load_wav(tmp_path / "missing.wav")


def test_clip_invariants():
    with pytest.raises(EmptyInput):
        AudioClip(np.zeros(0), SR)
    with pytest.raises(ValueError):
        AudioClip(np.array([np.nan]), SR)
    with pytest.raises(ValueError):
        AudioClip(np.zeros(3), 0)


# -- duration ------------------------------------------------------------------------


def test_standardize_tiles_short_clip():
    x = np.random.default_rng(2).normal(size=2 * SR)
    out = standardize_duration(AudioClip(x, SR), 4.0)
    assert len(out) == 176400
    assert np.array_equal(out.samples, np.concatenate([x, x]))


def test_standardize_identity_and_crop():
    x = np.random.default_rng(3).normal(size=6 * SR)
    assert np.array_equal(standardize_duration(AudioClip(x[: 4 * SR], SR)).samples, x[: 4 * SR])
    assert np.array_equal(standardize_duration(AudioClip(x, SR)).samples, x[:176400])


def test_standardize_truncates_partial_tile():
    x = np.arange(1, 4, dtype=float)
    out = standardize_duration(AudioClip(x, 4), 2.0)
    assert np.array_equal(out.samples, [1, 2, 3, 1, 2, 3, 1, 2])


# -- spectrogram ---------------------------------------------------------------------


def test_hann_window_is_periodic():
    w = hann_window(8)
    assert w[0] == 0.0 and w[4] == pytest.approx(1.0)
    assert np.allclose(w[1:], w[1:][::-1])


def test_shapes_and_zero_signal():
    cfg = StftConfig(512, 128)
    spec = logpower_spectrogram(AudioClip(np.zeros(4096), SR), cfg)
    assert spec.values.shape == (257, 1 + (4096 - 512) // 128)
    assert np.all(spec.values == np.log(LOG_EPS))
    assert (spec.f_lo, spec.f_hi, spec.bin_hz) == (0.0, 22050.0, SR / 512)


def test_short_clip_is_rejected():
    with pytest.raises(InsufficientSamples):
        logpower_spectrogram(AudioClip(np.zeros(100), SR), StftConfig(512, 128))


def test_bin_centred_sine_peaks_at_its_bin():
    cfg = StftConfig(1024, 256)
    k = 37
    t = np.arange(8192)
    x = np.sin(2 * np.pi * k * t / cfg.window_size)
    spec = logpower_spectrogram(AudioClip(x, SR), cfg)
    assert np.all(np.argmax(spec.values, axis=0) == k)


def test_parseval_per_frame():
    cfg = StftConfig(512, 200)
    x = np.random.default_rng(4).normal(size=3000)
    power = stft_power(x, cfg)
    w = hann_window(512)
    for t in range(power.shape[1]):
        frame = x[t * 200 : t * 200 + 512] * w
        energy = np.sum(frame**2)
        # one-sided spectrum: DC and Nyquist once, everything else twice
        total = (power[0, t] + power[-1, t] + 2 * power[1:-1, t].sum()) / 512
        assert total == pytest.approx(energy, rel=1e-6)


def test_spectrogram_is_deterministic():
    x = np.random.default_rng(5).normal(size=5000)
    a = logpower_spectrogram(AudioClip(x, SR), StftConfig(512, 128)).values
    b = logpower_spectrogram(AudioClip(x.copy(), SR), StftConfig(512, 128)).values
    assert a.tobytes() == b.tobytes()


def test_spectrogram_rejects_above_nyquist():
    with pytest.raises(ValueError):
        Spectrogram(np.zeros((10, 2)), 0.0, 30000.0, SR, 3000.0)


def test_stft_config_invariants():
    with pytest.raises(ValueError):
        StftConfig(511, 128)
    with pytest.raises(ValueError):
        StftConfig(512, 513)
    with pytest.raises(ValueError):
        StftConfig(512, 128, "hamming")


# -- partition -----------------------------------------------------------------------


def test_band_boundaries_exact_values():
    assert band_boundaries(2, 22050.0) == [(0.0, 11025.0), (11025.0, 22050.0)]
    assert band_boundaries(1, 22050.0) == [(0.0, 22050.0)]
    assert band_boundaries(8, 22050.0)[0] == (0.0, 2756.25)
    with pytest.raises(InvalidPartition):
        band_boundaries(0, 22050.0)


def test_partition_bin_ranges_with_remainder():
    part = SubbandPartition(4, 22050.0, 1025)
    assert part.bin_ranges == ((0, 256), (256, 512), (512, 768), (768, 1025))


def test_partition_rejects_unsupported_counts():
    with pytest.raises(InvalidPartition):
        SubbandPartition(3, 22050.0, 1025)


@settings(max_examples=100, deadline=None)
@given(st.sampled_from([1, 2, 4, 8]), st.integers(8, 2000))
def test_bin_ranges_tile_the_grid(n, bins):
    part = SubbandPartition(n, 22050.0, bins)
    ranges = part.bin_ranges
    assert ranges[0][0] == 0 and ranges[-1][1] == bins
    assert all(a < b for a, b in ranges)
    assert all(ranges[i][1] == ranges[i + 1][0] for i in range(n - 1))
    edges = [lo for lo, _ in part.boundaries] + [part.boundaries[-1][1]]
    assert edges[0] == 0.0 and edges[-1] == 22050.0
    assert all(part.boundaries[i][1] == part.boundaries[i + 1][0] for i in range(n - 1))


@pytest.mark.parametrize("n", [1, 2, 4, 8])
def test_partition_reconstructs_bitwise(n):
    rng = np.random.default_rng(n)
    spec = Spectrogram(rng.normal(size=(1025, 11)), 0.0, 22050.0, SR, SR / 2048)
    slices = partition_spectrogram(spec, SubbandPartition.for_spectrogram(spec, n))
    assert np.vstack([s.values for s in slices]).tobytes() == spec.values.tobytes()
    assert all(s.frames == 11 for s in slices)
    if n == 1:
        assert slices[0].values is spec.values or np.array_equal(slices[0].values, spec.values)


def test_partition_mismatch():
    spec = Spectrogram(np.zeros((257, 3)), 0.0, 22050.0, SR, SR / 512)
    with pytest.raises(ShapeMismatch):
        partition_spectrogram(spec, SubbandPartition(2, 22050.0, 1025))


def test_band_slice_matches_partition_at_desk_resolution():
    rng = np.random.default_rng(6)
    spec = Spectrogram(rng.normal(size=(257, 5)), 0.0, 22050.0, SR, SR / 512)
    part = SubbandPartition.for_spectrogram(spec, 4)
    for (lo, hi), (a, b) in zip(part.boundaries, part.bin_ranges):
        assert np.array_equal(band_slice(spec, lo, hi).values, spec.values[a:b])
    assert band_slice(spec, 11025.0, 16537.5).freq_bins == 64


# -- cache ---------------------------------------------------------------------------


def test_cache_roundtrip_bytes(tmp_path):
    rng = np.random.default_rng(7)
    spec = Spectrogram(rng.normal(size=(257, 9)).astype(np.float32), 0.0, 22050.0, SR, SR / 512)
    write_spectrogram_cache(tmp_path / "a.sbsp", spec)
    back = read_spectrogram_cache(tmp_path / "a.sbsp")
    assert back.bin_hz == spec.bin_hz and back.band == spec.band
    write_spectrogram_cache(tmp_path / "b.sbsp", back)
    assert (tmp_path / "a.sbsp").read_bytes() == (tmp_path / "b.sbsp").read_bytes()


@pytest.mark.parametrize("band", [(0.0, 5512.5), (11025.0, 16537.5), (16537.5, 22050.0)])
def test_cache_recovers_bin_spacing_of_slices(tmp_path, band):
    spec = Spectrogram(np.zeros((257, 2), dtype=np.float32), 0.0, 22050.0, SR, SR / 512)
    sl = band_slice(spec, *band)
    write_spectrogram_cache(tmp_path / "s.sbsp", sl)
    back = read_spectrogram_cache(tmp_path / "s.sbsp")
    assert back.bin_hz == pytest.approx(SR / 512) and back.freq_bins == sl.freq_bins


def test_cache_errors(tmp_path):
    (tmp_path / "bad.sbsp").write_bytes(b"XXXX" + b"\0" * 40)
    with pytest.raises(ParseError):
        read_spectrogram_cache(tmp_path / "bad.sbsp")
    with pytest.raises(IoError):
        read_spectrogram_cache(tmp_path / "none.sbsp")
