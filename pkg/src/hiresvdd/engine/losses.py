"""Per-sample binary losses on scalar logits; each returns ``(loss, dloss/dlogit)``."""

from __future__ import annotations

import numpy as np

LOG_FLOOR = 1e-12


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _log_sigmoid(z):
    # log(sigmoid(z)) = -softplus(-z), computed without overflow
    return -np.logaddexp(0.0, -z)


def _check_labels(label):
    label = np.asarray(label, dtype=np.float64)
    if not np.all((label == 0) | (label == 1)):
        raise ValueError("labels must be 0 or 1")
    return label


def sigmoid_focal_loss(logit, label, gamma: float = 2.0, alpha_bal: float | None = 0.25):
    """Focal loss ``-a_t (1 - p_t)^gamma log(p_t)`` with ``p = sigmoid(logit)``.

    ``alpha_bal`` weights the positive (deepfake) class, ``1 - alpha_bal`` the
    negative one; ``None`` disables class weighting.
    """
    z = np.asarray(logit, dtype=np.float64)
    y = _check_labels(label)
    sign = 2.0 * y - 1.0
    sz = sign * z
    log_pt_raw = _log_sigmoid(sz)
    log_pt = np.maximum(log_pt_raw, np.log(LOG_FLOOR))
    pt = np.exp(log_pt_raw)
    one_minus = sigmoid(-sz)
    if alpha_bal is None:
        alpha_t = np.ones_like(z)
    else:
        alpha_t = y * alpha_bal + (1.0 - y) * (1.0 - alpha_bal)
    mod = one_minus**gamma
    loss = -alpha_t * mod * log_pt
    # d/dz = sign * alpha_t * (gamma * (1-pt)^gamma * pt * log(pt) - (1-pt)^(gamma+1))
    grad = sign * alpha_t * (gamma * mod * pt * log_pt - mod * one_minus)
    return loss, grad


def bce_with_logits(logit, label):
    z = np.asarray(logit, dtype=np.float64)
    y = _check_labels(label)
    loss = np.logaddexp(0.0, z) - y * z
    return loss, sigmoid(z) - y
