"""Pooled equal error rate, percentile-bootstrap intervals and result tables."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateLabels
from .records import ScoreSet

CSV_COLUMNS = ("name", "eer", "ci_lo", "ci_hi", "n", "n_boot", "seed")


def _as_arrays(scores):
    if isinstance(scores, ScoreSet):
        return scores.arrays()
    s, y = scores
    return np.asarray(s, dtype=np.float64), np.asarray(y, dtype=np.int64)


def eer_from_arrays(scores: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """EER and threshold for scores where label 1 (deepfake) is flagged when ``score >= threshold``.

    Thresholds sweep the distinct scores in ascending order, followed by
    ``+inf``. FAR falls and FRR rises along the sweep; the first sweep point
    with FRR >= FAR brackets the crossing together with its predecessor, and
    the EER is read off the straight line joining the two (FAR, FRR) points.
    """
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels("EER needs at least one bonafide and one deepfake score")
    thresholds, inverse = np.unique(scores, return_inverse=True)
    pos_at = np.bincount(inverse, weights=pos, minlength=thresholds.size)
    neg_at = np.bincount(inverse, weights=~pos, minlength=thresholds.size)
    # counts strictly below each threshold
    pos_below = np.concatenate([[0.0], np.cumsum(pos_at)])
    neg_below = np.concatenate([[0.0], np.cumsum(neg_at)])
    far = 1.0 - neg_below / n_neg
    frr = pos_below / n_pos
    thr = np.concatenate([thresholds, [np.inf]])
    diff = far - frr
    i = int(np.argmax(diff <= 0))  # diff ends at -1, so a crossing always exists
    if diff[i] == 0 or i == 0:
        return float(far[i]), float(thr[i])
    t = diff[i - 1] / (diff[i - 1] - diff[i])
    eer = far[i - 1] + t * (far[i] - far[i - 1])
    threshold = thr[i - 1] if np.isinf(thr[i]) else thr[i - 1] + t * (thr[i] - thr[i - 1])
    return float(eer), float(threshold)


def pooled_eer(scores) -> tuple[float, float]:
    """All utterances in one threshold sweep; accepts a ScoreSet or ``(scores, labels)``."""
    s, y = _as_arrays(scores)
    return eer_from_arrays(s, y)


@dataclass(frozen=True)
class EerResult:
    eer: float
    threshold: float
    ci_lo: float | None = None
    ci_hi: float | None = None
    n_boot: int = 0
    n: int = 0
    seed: int | None = None
    skipped_resamples: int = 0


def bootstrap_ci(scores, n_boot: int = 1000, level: float = 0.95, seed: int = 0):
    """Percentile bootstrap over utterances.

    Each resample gets its own child seed, so results do not depend on
    evaluation order. A resample missing a class is redrawn up to 10 times and
    then skipped. Returns ``(ci_lo, ci_hi, n_skipped)``.
    """
    if n_boot < 100:
        raise ValueError(f"n_boot must be >= 100, got {n_boot}")
    if not 0 < level < 1:
        raise ValueError(f"level must lie in (0, 1), got {level}")
    s, y = _as_arrays(scores)
    n = s.size
    children = np.random.SeedSequence(seed).spawn(n_boot)
    eers = []
    skipped = 0
    for child in children:
        rng = np.random.default_rng(child)
        for _ in range(11):
            idx = rng.integers(0, n, n)
            yy = y[idx]
            if 0 < yy.sum() < n:
                eers.append(eer_from_arrays(s[idx], yy)[0])
                break
        else:
            skipped += 1
    if not eers:
        raise DegenerateLabels("every bootstrap resample was single-class")
    tail = (1.0 - level) / 2.0
    lo, hi = np.quantile(np.array(eers), [tail, 1.0 - tail])
    return float(lo), float(hi), skipped


def evaluate_scores(scores, n_boot: int = 1000, level: float = 0.95, seed: int = 0) -> EerResult:
    s, y = _as_arrays(scores)
    eer, thr = eer_from_arrays(s, y)
    if n_boot:
        lo, hi, skipped = bootstrap_ci((s, y), n_boot, level, seed)
        return EerResult(eer, thr, lo, hi, n_boot, s.size, seed, skipped)
    return EerResult(eer, thr, n=s.size)


def format_eer(result: EerResult) -> str:
    text = f"{100 * result.eer:.2f}"
    if result.ci_lo is not None and result.ci_hi is not None:
        text += f" ({100 * result.ci_lo:.2f}--{100 * result.ci_hi:.2f})"
    return text


def report_table(results: list[tuple[str, EerResult]]) -> tuple[str, str]:
    """Render ``(text_table, csv_text)``; EER in percent with two decimals."""
    if not results:
        raise ValueError("report_table needs at least one result")
    names = [name or f"row{i}" for i, (name, _) in enumerate(results)]
    cells = [format_eer(r) for _, r in results]
    width = max(len("system"), *(len(n) for n in names))
    lines = [f"{'system':<{width}}  EER % (95% CI)", "-" * (width + 17)]
    lines += [f"{n:<{width}}  {c}" for n, c in zip(names, cells)]
    text = "\n".join(lines) + "\n"

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for n, (_, r) in zip(names, results):
        w.writerow([n, repr(r.eer), _opt(r.ci_lo), _opt(r.ci_hi), r.n, r.n_boot, "" if r.seed is None else r.seed])
    return text, buf.getvalue()


def _opt(v):
    return "" if v is None else repr(v)


def parse_report_csv(text: str) -> list[tuple[str, EerResult]]:
    reader = csv.DictReader(io.StringIO(text))
    out = []
    for rec in reader:
        out.append(
            (
                rec["name"],
                EerResult(
                    eer=float(rec["eer"]),
                    threshold=float("nan"),
                    ci_lo=float(rec["ci_lo"]) if rec["ci_lo"] else None,
                    ci_hi=float(rec["ci_hi"]) if rec["ci_hi"] else None,
                    n_boot=int(rec["n_boot"]),
                    n=int(rec["n"]),
                    seed=int(rec["seed"]) if rec["seed"] else None,
                ),
            )
        )
    return out
