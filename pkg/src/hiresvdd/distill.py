"""Cross-expert distillation from frozen subband teachers into a fullband student."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dsp import Spectrogram
from .engine import TrainSchedule
from .errors import BandMismatch, ConfigError, ContractViolation, DegenerateDataset, ShapeMismatch
from .expert import (
    ExpertModel,
    FeatureBank,
    _bank_for,
    _fit_input_stats,
    embed_dataset,
    fit_loop,
    forward_expert,
    training_split,
)
from .records import DatasetManifest

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-12


@dataclass(frozen=True)
class DistillConfig:
    tau: float = 3.0
    alpha: float = 0.5
    beta: float = 0.2
    teacher_weights: tuple[float, ...] = (1.0,)
    supervised_loss: str = "bce"

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        w = np.asarray(self.teacher_weights, dtype=np.float64)
        if w.size == 0 or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ConfigError(f"teacher weights must be non-negative and sum to 1, got {self.teacher_weights}")
        if self.supervised_loss not in ("bce", "focal"):
            raise ConfigError(f"supervised_loss must be 'bce' or 'focal', got {self.supervised_loss!r}")


def soften(z, tau: float):
    """Temperature-softened two-class distribution ``(p, 1 - p)`` of a scalar logit."""
    if tau <= 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    p = 1.0 / (1.0 + np.exp(-np.asarray(z, dtype=np.float64) / tau))
    return p, 1.0 - p


def logit_distill_loss(z_s, z_t, tau: float):
    """``tau^2 * KL(Bern(p_s) || Bern(p_t))`` with student first; returns ``(loss, dloss/dz_s)``."""
    p_s, _ = soften(z_s, tau)
    p_t, _ = soften(z_t, tau)
    p_s = np.clip(p_s, PROB_CLAMP, 1 - PROB_CLAMP)
    p_t = np.clip(p_t, PROB_CLAMP, 1 - PROB_CLAMP)
    log_ratio_1 = np.log(p_s) - np.log(p_t)
    log_ratio_0 = np.log1p(-p_s) - np.log1p(-p_t)
    loss = tau**2 * (p_s * log_ratio_1 + (1 - p_s) * log_ratio_0)
    # dKL/dp_s = log_ratio_1 - log_ratio_0 and dp_s/dz_s = p_s (1 - p_s) / tau
    grad = tau * (log_ratio_1 - log_ratio_0) * p_s * (1 - p_s)
    return loss, grad


def feature_distill_loss(h_s, h_t):
    """Squared L2 distance summed over the embedding axis; returns ``(loss, dloss/dh_s)``."""
    h_s = np.asarray(h_s, dtype=np.float64)
    h_t = np.asarray(h_t, dtype=np.float64)
    if h_s.shape != h_t.shape:
        raise ShapeMismatch(f"student embedding {h_s.shape} vs teacher {h_t.shape}")
    diff = h_s - h_t
    return np.sum(diff * diff, axis=-1), 2.0 * diff


@dataclass
class TeacherEnsemble:
    teachers: list[ExpertModel]
    weights: tuple[float, ...]

    def __post_init__(self):
        self.weights = tuple(float(w) for w in self.weights)
        if len(self.teachers) != len(self.weights):
            raise ConfigError(f"{len(self.teachers)} teachers but {len(self.weights)} weights")
        if len(self.teachers) not in (1, 2):
            raise ConfigError(f"supported teacher counts are 1 and 2, got {len(self.teachers)}")
        w = np.array(self.weights)
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ConfigError(f"teacher weights must be non-negative and sum to 1, got {self.weights}")
        if len(self.teachers) == 2:
            (a_lo, a_hi), (b_lo, b_hi) = sorted(t.band for t in self.teachers)
            if a_hi > b_lo:
                raise ConfigError("dual-teacher bands must not overlap")

    def digests(self) -> list[str]:
        return [t.digest() for t in self.teachers]


def teacher_aggregate(ensemble: TeacherEnsemble, slices: list[Spectrogram]):
    """Weighted teacher embedding and logit for one utterance, each teacher on its own band slice."""
    if len(slices) != len(ensemble.teachers):
        raise ConfigError(f"{len(ensemble.teachers)} teachers but {len(slices)} slices")
    outs = [forward_expert(t, s) for t, s in zip(ensemble.teachers, slices)]
    return combine_teacher_outputs([o.h for o in outs], [o.z for o in outs], ensemble.weights)


def combine_teacher_outputs(hs, zs, weights):
    """``sum_m w_m h_m`` and ``sum_m w_m z_m``; works per utterance or on stacked batches."""
    if len(hs) != len(weights) or len(zs) != len(weights):
        raise ConfigError("teacher outputs and weights differ in length")
    h_t = sum(w * np.asarray(h, dtype=np.float64) for w, h in zip(weights, hs))
    z_t = sum(w * np.asarray(z, dtype=np.float64) for w, z in zip(weights, zs))
    return h_t, z_t


@dataclass
class DistillResult:
    student: ExpertModel
    loss_history: list[float]
    teacher_digests: list[str]
    run_manifest: dict = field(default_factory=dict)


def distill_train(student: ExpertModel, ensemble: TeacherEnsemble, cfg: DistillConfig, manifest: DatasetManifest,
                  schedule: TrainSchedule = TrainSchedule(), epochs: int = 10, *, batch_size: int = 16,
                  bank: FeatureBank | None = None) -> DistillResult:
    """Train the fullband student on ``L_sup + alpha * L_logit + beta * L_feat``; teachers stay frozen."""
    if student.role != "fullband":
        raise BandMismatch(f"distillation student must be fullband, got band {student.band}")
    if tuple(cfg.teacher_weights) != ensemble.weights:
        raise ConfigError(f"config weights {cfg.teacher_weights} differ from ensemble weights {ensemble.weights}")
    for t in ensemble.teachers:
        if t.config.embed_dim != student.config.embed_dim:
            raise ShapeMismatch("teacher and student embedding sizes differ")
    before = ensemble.digests()
    run = {
        "tau": cfg.tau, "alpha": cfg.alpha, "beta": cfg.beta, "teacher_weights": list(cfg.teacher_weights),
        "supervised_loss": cfg.supervised_loss, "teacher_bands": [list(t.band) for t in ensemble.teachers],
        "teacher_sha256": before, "student_seed": student.config.seed, "epochs": epochs,
    }
    if epochs == 0:
        return DistillResult(student, [], before, run)

    train_rows, _ = training_split(manifest, student.config.seed)
    if len({r.label for r in train_rows}) < 2:
        raise DegenerateDataset("distillation needs both labels in the training rows")
    bank = _bank_for(student, DatasetManifest(train_rows, manifest.root), bank)
    for t in ensemble.teachers:
        _bank_for(t, DatasetManifest(train_rows, manifest.root), bank)
    train_rows = [r for r in train_rows if r.id in bank.spectrograms]
    ids = [r.id for r in train_rows]
    raw = bank.batch(ids, student.band)
    _fit_input_stats(student, raw)
    x_all = student.prepare(raw)
    y_all = np.array([r.y for r in train_rows], dtype=np.float64)

    extra = None
    if cfg.alpha or cfg.beta:
        # teachers are frozen, so their outputs are computed once and reused every epoch
        outs = [embed_dataset(t, ids, bank) for t in ensemble.teachers]
        h_t, z_t = combine_teacher_outputs([o[0] for o in outs], [o[1] for o in outs], ensemble.weights)

        def extra(idx, h, z):
            n = len(idx)
            value = 0.0
            dz = np.zeros(n)
            dh = None
            if cfg.alpha:
                l_logit, g_logit = logit_distill_loss(z, z_t[idx], cfg.tau)
                value += cfg.alpha * float(l_logit.mean())
                dz = cfg.alpha * g_logit / n
            if cfg.beta:
                l_feat, g_feat = feature_distill_loss(h, h_t[idx])
                value += cfg.beta * float(l_feat.mean())
                dh = cfg.beta * g_feat / n
            return value, dh, dz

    history = fit_loop(student, x_all, y_all, schedule, epochs, batch_size, cfg.supervised_loss, extra)
    after = ensemble.digests()
    if after != before:
        raise ContractViolation("a teacher checkpoint changed during distillation")
    run["final_loss"] = history[-1]
    return DistillResult(student, history, before, run)


def write_run_manifest(path, result: DistillResult, student_digest: str) -> None:
    doc = dict(result.run_manifest)
    doc["student_sha256"] = student_digest
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
