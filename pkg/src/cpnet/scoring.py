"""PSNR-based anomaly scoring and frame-level ROC evaluation."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .models import ModelGraph, forward_predict
from .synth import FrameSequence
from .training import make_clips

PSNR_CAP = 300.0
POLARITIES = ("low-score-abnormal", "high-score-abnormal")


def _to01(x) -> np.ndarray:
    x = x.data if isinstance(x, T.Tensor) else np.asarray(x)
    return (x.astype(np.float64) + 1.0) / 2.0


def psnr(pred, gt, mode: str = "standard") -> float:
    """PSNR in dB between frames given in [-1, 1] (rescaled to [0, 1] first).

    ``standard``: ``10 log10(1 / MSE)`` with peak 1.0.
    ``literal``: ``10 log10(max(pred) / sum of squared error)``, no mean and
    no square on the peak. Both return +300 dB for a perfect prediction;
    ``literal`` returns -300 dB if the prediction is all black.
    """
    p, g = _to01(pred), _to01(gt)
    if p.shape != g.shape:
        raise ValueError(f"psnr: shape mismatch {p.shape} vs {g.shape}")
    sse = float(np.sum((p - g) ** 2))
    if mode == "standard":
        if sse == 0.0:
            return PSNR_CAP
        return min(PSNR_CAP, 10.0 * math.log10(p.size / sse))
    if mode == "literal":
        if sse == 0.0:
            return PSNR_CAP
        peak = float(p.max())
        if peak <= 0.0:
            return -PSNR_CAP
        return max(-PSNR_CAP, min(PSNR_CAP, 10.0 * math.log10(peak / sse)))
    raise ValueError(f"unknown psnr mode {mode!r}")


def normalize_scores(values: Sequence[float]) -> np.ndarray:
    """Per-video min-max normalisation to [0, 1]; a constant series maps to 0.5."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("normalize_scores: empty series")
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.full(v.shape, 0.5)
    return np.clip((v - lo) / (hi - lo), 0.0, 1.0)


@dataclass(frozen=True)
class DecisionConfig:
    gamma: float = 0.5
    polarity: str = "low-score-abnormal"

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.polarity not in POLARITIES:
            raise ValueError(f"polarity must be one of {POLARITIES}")


def decide(score: float, cfg: DecisionConfig = DecisionConfig()) -> int:
    """1 = abnormal, 0 = normal. A score equal to gamma is normal."""
    if cfg.polarity == "low-score-abnormal":
        return int(score < cfg.gamma)
    return int(score > cfg.gamma)


@dataclass
class RocResult:
    auc: float
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray  # first entry is +inf (nothing flagged)


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> RocResult:
    """ROC of ``score >= threshold`` over every distinct score; AUC by trapezoids.

    Ties between a positive and a negative contribute half credit, so the
    area equals the Mann-Whitney probability P(s_pos > s_neg) + P(tie)/2.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError(f"roc_auc: scores {s.shape} and labels {y.shape} must be equal-length 1-D")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("roc_auc: labels must be 0 or 1")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc: need at least one positive and one negative label")
    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    last = np.r_[np.nonzero(np.diff(s_sorted))[0], len(s_sorted) - 1]
    tp = np.cumsum(y_sorted)[last]
    fp = (last + 1) - tp
    tp = np.r_[0, tp]
    fp = np.r_[0, fp]
    # exact integer trapezoid sum, scaled once at the end
    area2 = int(np.sum((fp[1:] - fp[:-1]) * (tp[1:] + tp[:-1])))
    auc = area2 / (2 * n_pos * n_neg)
    return RocResult(auc, fp / n_neg, tp / n_pos, np.r_[np.inf, s_sorted[last]])


@dataclass
class ScoreSeries:
    video_id: str
    frame_index: np.ndarray
    psnr: np.ndarray
    score: np.ndarray
    label: np.ndarray

    @property
    def anomaly_score(self) -> np.ndarray:
        return 1.0 - self.score


@dataclass
class MarginReport:
    psnr_normal: float
    psnr_abnormal: float
    psnr_margin: float
    score_normal: float
    score_abnormal: float
    score_margin: float

    def as_dict(self) -> dict[str, float]:
        return dict(self.__dict__)


def margin_report(series: Sequence[ScoreSeries]) -> MarginReport:
    """Mean PSNR and score on normal vs abnormal frames; margins are normal minus abnormal."""
    p = np.concatenate([s.psnr for s in series]) if series else np.array([])
    sc = np.concatenate([s.score for s in series]) if series else np.array([])
    lab = np.concatenate([s.label for s in series]).astype(bool) if series else np.array([], bool)
    if not lab.any() or lab.all():
        raise ValueError("margin_report: both normal and abnormal frames are required")
    pn, pa = float(p[~lab].mean()), float(p[lab].mean())
    sn, sa = float(sc[~lab].mean()), float(sc[lab].mean())
    return MarginReport(pn, pa, pn - pa, sn, sa, sn - sa)


def predict_video(model: ModelGraph, video: FrameSequence, window: int = 4, batch: int = 8):
    """Predicted frames for every target index ``window .. len-1``."""
    clips = make_clips(video, window)
    dtype = next(iter(model.params.values())).dtype
    preds = []
    with T.no_grad():
        for lo in range(0, len(clips), batch):
            chunk = clips[lo : lo + batch]
            inputs = [np.stack([c.inputs[i] for c in chunk]).astype(dtype) for i in range(window)]
            preds.append(forward_predict(model, inputs).data)
    idx = np.array([c.target_index for c in clips], dtype=int)
    return idx, (np.concatenate(preds) if preds else np.zeros((0,) + video.frames.shape[1:], dtype))


def score_video(model: ModelGraph, video: FrameSequence, video_id: str, window: int = 4,
                psnr_mode: str = "standard") -> ScoreSeries:
    idx, preds = predict_video(model, video, window)
    if len(idx) == 0:
        raise ValueError(f"video {video_id} has {len(video)} frames; need more than {window}")
    values = np.array([psnr(p, video.frames[i], psnr_mode) for p, i in zip(preds, idx)])
    return ScoreSeries(video_id, idx, values, normalize_scores(values), video.labels[idx].astype(int))


@dataclass
class EvalResult:
    series: list[ScoreSeries]
    roc: RocResult
    margins: MarginReport

    @property
    def auc(self) -> float:
        return self.roc.auc


def evaluate(model: ModelGraph, videos: Sequence[tuple[str, FrameSequence]], window: int = 4,
             psnr_mode: str = "standard") -> EvalResult:
    """Score each video, normalise per video, then pool all frames into one ROC."""
    series = [score_video(model, v, vid, window, psnr_mode) for vid, v in sorted(videos, key=lambda t: t[0])]
    roc = roc_auc(np.concatenate([s.anomaly_score for s in series]), np.concatenate([s.label for s in series]))
    return EvalResult(series, roc, margin_report(series))


def write_scores_csv(series: Sequence[ScoreSeries], path: str | os.PathLike,
                     cfg: DecisionConfig = DecisionConfig()) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["video_id", "frame_index", "psnr_db", "score", "label", "decision"])
        for s in series:
            for i, p, sc, lab in zip(s.frame_index, s.psnr, s.score, s.label):
                w.writerow([s.video_id, int(i), f"{p:.6f}", f"{sc:.6f}", int(lab), decide(sc, cfg)])


def write_roc_csv(roc: RocResult, path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "fpr", "tpr"])
        for t, f, p in zip(roc.thresholds, roc.fpr, roc.tpr):
            w.writerow(["inf" if math.isinf(t) else f"{t:.9g}", f"{f:.9g}", f"{p:.9g}"])
