import numpy as np
import pytest

from conftest import TINY_SECONDS, TINY_STFT, tiny_config
from hiresvdd.dsp import Spectrogram, band_slice
from hiresvdd.engine import TrainSchedule
from hiresvdd.errors import BandMismatch, ConfigError, DegenerateDataset, DuplicateId, NumericError
from hiresvdd.expert import (
    ExpertConfig,
    ExpertModel,
    FeatureBank,
    build_expert,
    fit_loop,
    forward_expert,
    score_dataset,
    train_expert,
)
from hiresvdd.records import DatasetManifest, ManifestRow

FB = (0.0, 22050.0)


def _layer_count(cfg: ExpertConfig) -> int:
    """Parameter count summed over the layer spec: conv weight + bias, norm gain + shift, projection, head."""
    total, in_ch = 0, 1
    for ch in cfg.channels:
        total += in_ch * ch * 9 + ch + 2 * ch
        in_ch = ch
    return total + in_ch * cfg.embed_dim + cfg.embed_dim + cfg.embed_dim + 1


def test_build_is_seeded():
    a, b = build_expert(ExpertConfig(seed=3)), build_expert(ExpertConfig(seed=3))
    assert a.digest() == b.digest()
    assert build_expert(ExpertConfig(seed=4)).digest() != a.digest()


def test_default_parameter_count():
    cfg = ExpertConfig()
    assert build_expert(cfg).n_params() == _layer_count(cfg) == 62689


def test_invalid_layer_spec():
    with pytest.raises(ConfigError):
        ExpertConfig(channels=(4, 8), strides=(2,))
    with pytest.raises(ConfigError):
        ExpertConfig(embed_dim=0)
    with pytest.raises(ConfigError):
        ExpertConfig(band=(100.0, 30000.0))
    with pytest.raises(ConfigError):
        ExpertConfig(dtype="float16")


def _slice(shape, band=FB, seed=0):
    vals = np.random.default_rng(seed).normal(-5, 3, shape)
    return Spectrogram(vals, band[0], band[1], 44100, 44100 / 512)


def test_embedding_dimension_default():
    model = build_expert(ExpertConfig(stft=TINY_STFT, target_seconds=TINY_SECONDS))
    out = forward_expert(model, _slice((257, 44)))
    assert out.h.shape == (32,) and np.isfinite(out.z)


def test_forward_band_guard():
    model = build_expert(tiny_config(band=(0.0, 11025.0)))
    with pytest.raises(BandMismatch):
        forward_expert(model, _slice((128, 44), (11025.0, 22050.0)))


def test_forward_is_reproducible():
    s = _slice((257, 44))
    a = forward_expert(build_expert(tiny_config()), s)
    b = forward_expert(build_expert(tiny_config()), s)
    assert a.h.tobytes() == b.h.tobytes() and a.z == b.z


@pytest.mark.parametrize("shape", [(257, 10), (257, 44), (64, 3)])
def test_embedding_dimension_any_input(shape):
    band = FB if shape[0] == 257 else (11025.0, 16537.5)
    model = build_expert(tiny_config(band=band))
    assert forward_expert(model, _slice(shape, band)).h.shape == (8,)


def _toy_set(n=20, seed=0):
    rng = np.random.default_rng(seed)
    y = np.repeat([0.0, 1.0], n // 2)
    x = rng.normal(0, 1, (n, 1, 16, 12))
    x[y == 1, :, 4:8] += 2.0
    return x.astype(np.float32), y


def test_separable_toy_loss_drops_90_percent():
    model = build_expert(tiny_config())
    x, y = _toy_set()
    # 20 samples, batch 10: 100 epochs is 200 steps
    hist = fit_loop(model, x, y, TrainSchedule(lr_max=3e-3, lr_min=3e-4), 100, batch_size=10, loss="bce")
    assert len(hist) == 200
    first, last = np.mean(hist[:2]), np.mean(hist[-2:])
    assert last <= 0.1 * first


def test_nan_input_aborts():
    model = build_expert(tiny_config())
    x, y = _toy_set()
    x[0, 0, 0, 0] = np.nan
    with pytest.raises(NumericError):
        fit_loop(model, x, y, TrainSchedule(), 1, batch_size=20)


def test_epochs_zero_is_noop(tiny_corpus, tiny_bank):
    model = build_expert(tiny_config())
    before = model.digest()
    res = train_expert(model, tiny_corpus, TrainSchedule(), 0, bank=tiny_bank)
    assert res.loss_history == [] and model.digest() == before


def test_training_is_deterministic(tiny_corpus, tiny_bank):
    runs = []
    for _ in range(2):
        model = build_expert(tiny_config(seed=1))
        res = train_expert(model, tiny_corpus, TrainSchedule(), 2, bank=tiny_bank)
        runs.append((res.loss_history, model.digest()))
    assert runs[0] == runs[1]
    assert all(np.isfinite(runs[0][0]))


def test_single_class_manifest(tiny_corpus, tiny_bank):
    bona = DatasetManifest([r for r in tiny_corpus.rows if r.label == "bonafide"], tiny_corpus.root)
    with pytest.raises(DegenerateDataset):
        train_expert(build_expert(tiny_config()), bona, TrainSchedule(), 1, bank=tiny_bank)


def test_subband_training_reads_only_its_band(tiny_corpus, tiny_bank):
    band = (11025.0, 16537.5)
    poisoned = FeatureBank(TINY_STFT, TINY_SECONDS)
    for uid, spec in tiny_bank.spectrograms.items():
        inside = band_slice(spec, *band)
        lo = round(inside.f_lo / spec.bin_hz)
        vals = np.full_like(spec.values, 1e6)  # would wreck the input statistics if read
        vals[lo : lo + inside.values.shape[0]] = inside.values
        poisoned.spectrograms[uid] = Spectrogram(vals, spec.f_lo, spec.f_hi, spec.sample_rate, spec.bin_hz)
    model = build_expert(tiny_config(band=band))
    res = train_expert(model, tiny_corpus, TrainSchedule(), 1, bank=poisoned)
    assert all(np.isfinite(res.loss_history))
    ref = build_expert(tiny_config(band=band))
    assert train_expert(ref, tiny_corpus, TrainSchedule(), 1, bank=tiny_bank).loss_history == res.loss_history


def test_score_dataset_contract(tiny_corpus, tiny_bank):
    model = build_expert(tiny_config())
    assert len(score_dataset(model, DatasetManifest([]), bank=tiny_bank).entries) == 0
    row = tiny_corpus.rows[0]
    with pytest.raises(DuplicateId):
        score_dataset(model, [row, row], bank=tiny_bank)


def test_scoring_is_order_independent(tiny_corpus, tiny_bank):
    model = build_expert(tiny_config())
    a = score_dataset(model, tiny_corpus, bank=tiny_bank)
    rows = list(tiny_corpus.rows)
    np.random.default_rng(0).shuffle(rows)
    b = score_dataset(model, DatasetManifest(rows, tiny_corpus.root), bank=tiny_bank)
    assert {e.id: e.score for e in a.entries} == {e.id: e.score for e in b.entries}


def test_unreadable_clip_is_reported(tiny_corpus, tmp_path):
    bad = tmp_path / "bad.wav"
    bad.write_bytes(b"not a wav")
    rows = list(tiny_corpus.rows[:2]) + [ManifestRow("broken", str(bad), "bonafide", "testA")]
    scores = score_dataset(build_expert(tiny_config()), DatasetManifest(rows, tiny_corpus.root))
    assert [uid for uid, _ in scores.skipped] == ["broken"]
    assert len(scores.entries) == 2


def test_checkpoint_roundtrip(tmp_path, tiny_corpus, tiny_bank):
    model = build_expert(tiny_config(band=(5512.5, 11025.0)))
    train_expert(model, tiny_corpus, TrainSchedule(), 1, bank=tiny_bank)
    digest = model.save(tmp_path / "e.sbck")
    back = ExpertModel.load(tmp_path / "e.sbck")
    assert back.digest() == digest == model.digest()
    assert back.config == model.config


def test_reloaded_model_scores_identically(tmp_path, tiny_corpus, tiny_bank):
    model = build_expert(tiny_config())
    train_expert(model, tiny_corpus, TrainSchedule(), 1, bank=tiny_bank)
    model.save(tmp_path / "m.sbck")
    back = ExpertModel.load(tmp_path / "m.sbck")
    a = score_dataset(model, tiny_corpus, bank=tiny_bank).as_dict()
    assert score_dataset(back, tiny_corpus, bank=tiny_bank).as_dict() == a
