"""Fullband and subband expert models: spectrogram slice -> embedding h -> logit z."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .dsp import (
    HIRES_RATE,
    Spectrogram,
    StftConfig,
    band_slice,
    load_wav,
    logpower_spectrogram,
    standardize_duration,
)
from .engine import (
    Conv2d,
    GlobalAvgPool,
    LayerNorm,
    Linear,
    ParamStore,
    ReLU,
    TrainSchedule,
    adamw_step,
    arrays_digest,
    bce_with_logits,
    cosine_lr,
    load_checkpoint,
    save_checkpoint,
    sigmoid_focal_loss,
)
from .errors import BandMismatch, ConfigError, DegenerateDataset, DuplicateId, HiResError, NumericError, ShapeMismatch
from .records import LABELS, DatasetManifest, ManifestRow, ScoreEntry, ScoreSet

log = logging.getLogger(__name__)

NYQUIST = HIRES_RATE / 2


@dataclass(frozen=True)
class ExpertConfig:
    band: tuple[float, float] = (0.0, NYQUIST)
    channels: tuple[int, ...] = (16, 32, 64, 64)
    strides: tuple[int, ...] = (2, 2, 2, 2)
    embed_dim: int = 32
    seed: int = 0
    dtype: str = "float32"
    stft: StftConfig = field(default_factory=StftConfig)
    target_seconds: float = 4.0
    sample_rate: int = HIRES_RATE

    def __post_init__(self):
        if self.embed_dim < 1:
            raise ConfigError(f"embed_dim must be >= 1, got {self.embed_dim}")
        if not self.channels or len(self.channels) != len(self.strides):
            raise ConfigError("channels and strides must be non-empty and of equal length")
        if any(c < 1 for c in self.channels) or any(s < 1 for s in self.strides):
            raise ConfigError("channels and strides must be positive")
        lo, hi = self.band
        if not 0 <= lo < hi <= self.sample_rate / 2:
            raise ConfigError(f"band {self.band} outside [0, {self.sample_rate / 2}] Hz")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def role(self) -> str:
        return "fullband" if self.band == (0.0, self.sample_rate / 2) else "subband"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["band"] = list(self.band)
        d["channels"] = list(self.channels)
        d["strides"] = list(self.strides)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExpertConfig":
        d = dict(d)
        d["band"] = tuple(float(b) for b in d["band"])
        d["channels"] = tuple(d["channels"])
        d["strides"] = tuple(d["strides"])
        d["stft"] = StftConfig(**d["stft"])
        return cls(**d)


@dataclass(frozen=True)
class ExpertOutput:
    h: np.ndarray
    z: float


class ExpertModel:
    """Reference backbone: conv stages (3x3, strided) with layer norm and ReLU,
    global average pooling, a linear projection to ``h`` and a linear logit head.

    Larger ``z`` means more likely deepfake.
    """

    def __init__(self, cfg: ExpertConfig):
        self.config = cfg
        rng = np.random.default_rng(cfg.seed)
        dt = np.dtype(cfg.dtype)
        self.stages = []
        in_ch = 1
        for i, (ch, st) in enumerate(zip(cfg.channels, cfg.strides)):
            conv = Conv2d(in_ch, ch, 3, st, rng=rng, dtype=dt, input_grad=i > 0)
            self.stages.append((conv, LayerNorm(ch, dtype=dt), ReLU()))
            in_ch = ch
        self.pool = GlobalAvgPool()
        self.proj = Linear(in_ch, cfg.embed_dim, rng=rng, dtype=dt)
        self.head = Linear(cfg.embed_dim, 1, rng=rng, dtype=dt, init="xavier")
        self.store = ParamStore()
        for i, (conv, norm, _) in enumerate(self.stages):
            for name, p in conv.named_parameters(f"stage{i}.conv."):
                self.store.add(name, p)
            for name, p in norm.named_parameters(f"stage{i}.norm."):
                self.store.add(name, p)
        for name, p in self.proj.named_parameters("proj."):
            self.store.add(name, p)
        for name, p in self.head.named_parameters("head."):
            self.store.add(name, p)
        # dataset-level input statistics of this expert's own band, set by training
        self.input_mean = 0.0
        self.input_std = 1.0
        self.features = None

    @property
    def role(self) -> str:
        return self.config.role

    @property
    def band(self) -> tuple[float, float]:
        return self.config.band

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    def n_params(self) -> int:
        return self.store.n_values()

    # -- forward / backward on prepared batches ---------------------------------

    def prepare(self, values: np.ndarray) -> np.ndarray:
        """Normalize raw log-power values ``(H, W)`` or ``(B, H, W)`` into a ``(B, 1, H, W)`` batch."""
        x = np.asarray(values, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        return ((x - self.input_mean) / self.input_std)[:, None].astype(self.dtype)

    def forward_batch(self, x: np.ndarray):
        a = x
        for conv, norm, act in self.stages:
            a = act.forward(norm.forward(conv.forward(a)))
        self.features = a
        h = self.proj.forward(self.pool.forward(a))
        z = self.head.forward(h)[:, 0]
        return h, z

    def backward_batch(self, dh, dz, to_features: bool = False):
        """Accumulate parameter gradients; with ``to_features`` stop at the last conv stage
        and return the gradient w.r.t. its activations instead."""
        dt = self.dtype
        g = self.head.backward(np.asarray(dz, dtype=dt)[:, None])
        if dh is not None:
            g = g + np.asarray(dh, dtype=dt)
        da = self.pool.backward(self.proj.backward(g))
        if to_features:
            return da
        for conv, norm, act in reversed(self.stages):
            da = conv.backward(norm.backward(act.backward(da)))
        return None

    # -- state ------------------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {name: p.value for name, p in self.store.items()}
        out["buffer.input_mean"] = np.array([self.input_mean])
        out["buffer.input_std"] = np.array([self.input_std])
        return out

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        expected = set(self.store) | {"buffer.input_mean", "buffer.input_std"}
        if set(arrays) != expected:
            raise ShapeMismatch(f"checkpoint keys differ: {sorted(set(arrays) ^ expected)}")
        for name, p in self.store.items():
            if arrays[name].shape != p.shape:
                raise ShapeMismatch(f"{name}: checkpoint shape {arrays[name].shape} != {p.shape}")
            p.value = np.asarray(arrays[name], dtype=self.dtype).copy()
        self.input_mean = float(arrays["buffer.input_mean"][0])
        self.input_std = float(arrays["buffer.input_std"][0])
        self.store.state.clear()

    def digest(self) -> str:
        return arrays_digest(self.state_dict())

    def save(self, path) -> str:
        path = Path(path)
        digest = save_checkpoint(path, self.state_dict())
        path.with_suffix(".json").write_text(json.dumps(self.config.to_dict(), indent=2, sort_keys=True) + "\n")
        return digest

    @classmethod
    def load(cls, path) -> "ExpertModel":
        path = Path(path)
        cfg = ExpertConfig.from_dict(json.loads(path.with_suffix(".json").read_text()))
        model = cls(cfg)
        model.load_state_dict(load_checkpoint(path))
        return model


def build_expert(cfg: ExpertConfig) -> ExpertModel:
    return ExpertModel(cfg)


def forward_expert(model: ExpertModel, slice_: Spectrogram) -> ExpertOutput:
    if (slice_.f_lo, slice_.f_hi) != model.band:
        raise BandMismatch(f"model band {model.band} Hz, slice covers {(slice_.f_lo, slice_.f_hi)} Hz")
    h, z = model.forward_batch(model.prepare(slice_.values))
    return ExpertOutput(h[0].astype(np.float64), float(z[0]))


# -- feature extraction ----------------------------------------------------------


class FeatureBank:
    """Fullband log-power spectrograms keyed by utterance id, computed once per clip."""

    def __init__(self, stft: StftConfig = StftConfig(), target_seconds: float = 4.0):
        self.stft = stft
        self.target_seconds = target_seconds
        self.spectrograms: dict[str, Spectrogram] = {}
        self.failures: dict[str, str] = {}

    def compute(self, path) -> Spectrogram:
        clip = load_wav(path)
        if not clip.is_hires:
            log.warning("%s is sampled at %d Hz, not %d Hz; no resampling applied", path, clip.sample_rate, HIRES_RATE)
        clip = standardize_duration(clip, self.target_seconds)
        spec = logpower_spectrogram(clip, self.stft)
        return Spectrogram(spec.values.astype(np.float32), spec.f_lo, spec.f_hi, spec.sample_rate, spec.bin_hz)

    def add(self, manifest: DatasetManifest, rows=None) -> None:
        for row in manifest.rows if rows is None else rows:
            if row.id in self.spectrograms or row.id in self.failures:
                continue
            try:
                self.spectrograms[row.id] = self.compute(manifest.resolve(row))
            except (HiResError, OSError) as exc:
                self.failures[row.id] = f"{type(exc).__name__}: {exc}"

    def slice(self, uid: str, band: tuple[float, float]) -> Spectrogram:
        return band_slice(self.spectrograms[uid], *band)

    def batch(self, ids, band) -> np.ndarray:
        return np.stack([self.slice(uid, band).values for uid in ids])


def _bank_for(model: ExpertModel, manifest: DatasetManifest, bank: FeatureBank | None) -> FeatureBank:
    cfg = model.config
    if bank is None:
        bank = FeatureBank(cfg.stft, cfg.target_seconds)
    elif bank.stft != cfg.stft or bank.target_seconds != cfg.target_seconds:
        raise ConfigError("feature bank was built with a different STFT / duration than the model")
    bank.add(manifest)
    return bank


# -- training ----------------------------------------------------------------------


@dataclass
class TrainResult:
    model: ExpertModel
    loss_history: list[float]
    valid_eer: float | None = None
    valid_ids: list[str] = field(default_factory=list)


def supervised_loss(kind: str, z, y, gamma=2.0, alpha_bal=0.25):
    if kind == "focal":
        return sigmoid_focal_loss(z, y, gamma, alpha_bal)
    if kind == "bce":
        return bce_with_logits(z, y)
    raise ConfigError(f"unknown loss {kind!r}")


def stratified_holdout(rows: list[ManifestRow], fraction: float, seed: int):
    """Seeded label-stratified split of ``rows`` into (train, held-out)."""
    rng = np.random.default_rng([seed, 20])
    held = set()
    for label in LABELS:
        ids = [r.id for r in rows if r.label == label]
        k = int(round(fraction * len(ids)))
        held.update(ids[i] for i in rng.permutation(len(ids))[:k])
    return [r for r in rows if r.id not in held], [r for r in rows if r.id in held]


def fit_loop(model: ExpertModel, x_all: np.ndarray, y_all: np.ndarray, schedule: TrainSchedule, epochs: int,
             batch_size: int = 16, loss: str = "focal", extra=None, shuffle_seed: int | None = None) -> list[float]:
    """Minibatch AdamW with a cosine schedule over ``epochs`` passes.

    ``extra(idx, h, z)`` may add a per-batch term; it returns
    ``(loss_value, dh, dz)`` already averaged over the batch.
    """
    n = len(y_all)
    steps_per_epoch = math.ceil(n / batch_size)
    total = epochs * steps_per_epoch
    if total == 0:
        return []
    schedule = replace(schedule, total_steps=total)
    rng = np.random.default_rng([model.config.seed if shuffle_seed is None else shuffle_seed, 1])
    history = []
    step = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            h, z = model.forward_batch(x_all[idx])
            per, dz = supervised_loss(loss, z, y_all[idx])
            value = float(per.mean())
            dz = dz / len(idx)
            dh = None
            if extra is not None:
                e_val, e_dh, e_dz = extra(idx, h, z)
                value += e_val
                dz = dz + e_dz
                dh = e_dh
            if not math.isfinite(value):
                raise NumericError(f"non-finite training loss at step {step}")
            model.store.zero_grad()
            model.backward_batch(dh, dz)
            adamw_step(model.store, model.store.grads(), cosine_lr(step, schedule), schedule)
            history.append(value)
            step += 1
    return history


def _fit_input_stats(model: ExpertModel, x_raw: np.ndarray) -> None:
    # stored as float32 in checkpoints, so round now to keep reloaded models bit-identical
    model.input_mean = float(np.float32(x_raw.mean(dtype=np.float64)))
    model.input_std = float(np.float32(max(x_raw.std(dtype=np.float64), 1e-6)))


def training_split(manifest: DatasetManifest, seed: int):
    """Train rows and validation rows (the ``valid`` split, or a 20% stratified hold-out)."""
    train_rows = [r for r in manifest.rows if r.split == "train"]
    valid_rows = [r for r in manifest.rows if r.split == "valid"]
    if not train_rows:
        train_rows = [r for r in manifest.rows if r.split != "valid"]
    if not valid_rows:
        train_rows, valid_rows = stratified_holdout(train_rows, 0.2, seed)
    return train_rows, valid_rows


def train_expert(model: ExpertModel, manifest: DatasetManifest, schedule: TrainSchedule = TrainSchedule(),
                 epochs: int = 10, *, batch_size: int = 16, loss: str = "focal",
                 bank: FeatureBank | None = None) -> TrainResult:
    if epochs == 0:
        return TrainResult(model, [])
    train_rows, valid_rows = training_split(manifest, model.config.seed)
    labels = {r.label for r in train_rows}
    if len(labels) < 2:
        raise DegenerateDataset(f"training rows need both labels, found {sorted(labels) or 'none'}")
    bank = _bank_for(model, DatasetManifest(train_rows + valid_rows, manifest.root), bank)
    failed = [r.id for r in train_rows if r.id in bank.failures]
    if failed:
        raise DegenerateDataset(f"unreadable training clips: {failed[:5]}")
    ids = [r.id for r in train_rows]
    raw = bank.batch(ids, model.band)
    _fit_input_stats(model, raw)
    x_all = model.prepare(raw)
    y_all = np.array([r.y for r in train_rows], dtype=np.float64)
    history = fit_loop(model, x_all, y_all, schedule, epochs, batch_size, loss)

    valid_eer = None
    valid_rows = [r for r in valid_rows if r.id not in bank.failures]
    if len({r.label for r in valid_rows}) == 2:
        from .evaluate import pooled_eer

        scores = score_dataset(model, DatasetManifest(valid_rows, manifest.root), bank=bank)
        valid_eer = pooled_eer(scores)[0]
    log.info("trained %s expert %s: final loss %.4f, valid EER %s", model.role, model.band, history[-1], valid_eer)
    return TrainResult(model, history, valid_eer, [r.id for r in valid_rows])


def score_dataset(model: ExpertModel, manifest: DatasetManifest | list[ManifestRow], *,
                  bank: FeatureBank | None = None, batch_size: int = 16) -> ScoreSet:
    """Score every utterance with the pre-sigmoid logit ``z``; unreadable clips are reported, not dropped silently."""
    if not isinstance(manifest, DatasetManifest):
        manifest = DatasetManifest(list(manifest))
    ids = [r.id for r in manifest.rows]
    if len(set(ids)) != len(ids):
        raise DuplicateId("manifest contains duplicate ids")
    if not manifest.rows:
        return ScoreSet([])
    bank = _bank_for(model, manifest, bank)
    rows = sorted(manifest.rows, key=lambda r: r.id)
    ok = [r for r in rows if r.id in bank.spectrograms]
    skipped = [(r.id, bank.failures[r.id]) for r in rows if r.id in bank.failures]
    entries = []
    for start in range(0, len(ok), batch_size):
        chunk = ok[start : start + batch_size]
        _, z = model.forward_batch(model.prepare(bank.batch([r.id for r in chunk], model.band)))
        entries.extend(ScoreEntry(r.id, r.label, float(zz)) for r, zz in zip(chunk, z))
    for uid, reason in skipped:
        log.warning("skipped %s: %s", uid, reason)
    return ScoreSet(entries, skipped)


def embed_dataset(model: ExpertModel, ids: list[str], bank: FeatureBank, batch_size: int = 16):
    """``(h, z)`` arrays for ``ids`` in the given order."""
    hs, zs = [], []
    for start in range(0, len(ids), batch_size):
        h, z = model.forward_batch(model.prepare(bank.batch(ids[start : start + batch_size], model.band)))
        hs.append(h.astype(np.float64))
        zs.append(z.astype(np.float64))
    if not hs:
        return np.zeros((0, model.config.embed_dim)), np.zeros(0)
    return np.concatenate(hs), np.concatenate(zs)
