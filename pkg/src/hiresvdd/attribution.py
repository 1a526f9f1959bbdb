"""Grad-CAM saliency over time-frequency inputs, band energy fractions and PNG overlays."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dsp import Spectrogram, SubbandPartition
from .errors import IoError, ShapeMismatch, UnsupportedArchitecture


@dataclass(frozen=True)
class GradCamMap:
    """Min-max normalized saliency aligned with the input grid ``[freq_bins, frames]``."""

    values: np.ndarray
    f_lo: float
    f_hi: float
    source: str = ""
    target: str = "deepfake"

    @property
    def shape(self):
        return self.values.shape


def bilinear_resize(a: np.ndarray, out_shape: tuple[int, int]) -> np.ndarray:
    """Bilinear interpolation with half-pixel centers (``align_corners=False``)."""
    a = np.asarray(a, dtype=np.float64)
    h_in, w_in = a.shape
    h_out, w_out = out_shape

    def coords(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        i0 = np.floor(src).astype(np.int64)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    r0, r1, fr = coords(h_in, h_out)
    c0, c1, fc = coords(w_in, w_out)
    top = a[r0][:, c0] * (1 - fc) + a[r0][:, c1] * fc
    bottom = a[r1][:, c0] * (1 - fc) + a[r1][:, c1] * fc
    return top * (1 - fr)[:, None] + bottom * fr[:, None]


def gradcam_from(activations: np.ndarray, gradients: np.ndarray, out_shape: tuple[int, int]) -> np.ndarray:
    """Grad-CAM for one example from ``(C, h, w)`` activations and their gradients."""
    activations = np.asarray(activations, dtype=np.float64)
    gradients = np.asarray(gradients, dtype=np.float64)
    if activations.shape != gradients.shape or activations.ndim != 3:
        raise ShapeMismatch(f"activations {activations.shape} vs gradients {gradients.shape}")
    weights = gradients.mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(weights, activations, axes=1), 0.0)
    cam = bilinear_resize(cam, out_shape)
    lo, hi = cam.min(), cam.max()
    if hi - lo <= 0:
        return np.zeros(out_shape)
    return (cam - lo) / (hi - lo)


TARGET_SIGN = {"deepfake": 1.0, "bonafide": -1.0}


def gradcam(model, slice_: Spectrogram, target: str = "deepfake", source: str = "") -> GradCamMap:
    """Saliency w.r.t. the last convolutional stage.

    The model emits one logit ``z``; the ``deepfake`` target backpropagates
    ``z`` and the ``bonafide`` target backpropagates ``-z``.
    """
    if target not in TARGET_SIGN:
        raise ValueError(f"target must be one of {sorted(TARGET_SIGN)}, got {target!r}")
    if not getattr(model, "stages", None) or not hasattr(model, "backward_batch"):
        raise UnsupportedArchitecture(f"{type(model).__name__} has no convolutional stages to attribute")
    if (slice_.f_lo, slice_.f_hi) != tuple(model.band):
        raise ShapeMismatch(f"model band {model.band} Hz, slice covers {(slice_.f_lo, slice_.f_hi)} Hz")
    model.forward_batch(model.prepare(slice_.values))
    acts = model.features[0]
    model.store.zero_grad()
    grads = model.backward_batch(None, np.full(1, TARGET_SIGN[target]), to_features=True)[0]
    model.store.zero_grad()
    return GradCamMap(gradcam_from(acts, grads, slice_.values.shape), slice_.f_lo, slice_.f_hi, source, target)


def band_energy_fraction(cam: GradCamMap | np.ndarray, partition: SubbandPartition) -> np.ndarray:
    """Share of total saliency in each subband; uniform when the map is all zero."""
    values = cam.values if isinstance(cam, GradCamMap) else np.asarray(cam, dtype=np.float64)
    if values.shape[0] != partition.freq_bins:
        raise ShapeMismatch(f"map has {values.shape[0]} frequency rows, partition expects {partition.freq_bins}")
    per_band = np.array([values[a:b].sum() for a, b in partition.bin_ranges])
    total = per_band.sum()
    if total <= 0:
        return np.full(partition.n_bands, 1.0 / partition.n_bands)
    return per_band / total


def write_fraction_csv(path, rows: list[tuple[str, str, np.ndarray]]) -> None:
    """Rows of ``(id, model, fractions)`` under the header ``id, model, band_0 .. band_{N-1}``."""
    n = max((len(frac) for _, _, frac in rows), default=0)
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "model", *(f"band_{m}" for m in range(n))])
            for uid, model, frac in rows:
                w.writerow([uid, model, *(repr(float(f)) for f in frac)])
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def export_overlay(cam: GradCamMap, spec: Spectrogram, path, partition: SubbandPartition | None = None) -> None:
    """PNG with the spectrogram in grayscale, the saliency in red with alpha ``0.6 * map``
    and dashed white lines at subband boundaries. Low frequencies sit at the bottom."""
    from PIL import Image

    if cam.values.shape != spec.values.shape:
        raise ShapeMismatch(f"map {cam.values.shape} vs spectrogram {spec.values.shape}")
    s = spec.values.astype(np.float64)
    span = s.max() - s.min()
    gray = (s - s.min()) / span if span > 0 else np.zeros_like(s)
    alpha = 0.6 * np.clip(cam.values, 0.0, 1.0)
    rgb = np.stack([gray, gray, gray], axis=-1)
    rgb = rgb * (1 - alpha[..., None]) + alpha[..., None] * np.array([1.0, 0.0, 0.0])
    if partition is not None:
        dash = (np.arange(s.shape[1]) // 4) % 2 == 0
        for lo, _ in partition.bin_ranges[1:]:
            rgb[lo, dash] = 1.0
    img = (np.flipud(rgb) * 255).round().astype(np.uint8)
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(img, "RGB").save(path, format="PNG")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
