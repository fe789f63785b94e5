"""Anomaly scores, threshold choice and binary normal-vs-abnormal metrics."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from . import numerics as nx
from .beats import BeatImage
from .errors import ConfigError, ContractError
from .model import GeneratorParams, mask_indices, patchify, sample_wave_mask, generate


@dataclass
class ScoredBeat:
    source_id: str
    true_class: str
    score: float

    @property
    def is_anomalous(self) -> bool:
        return self.true_class != "N"


@dataclass
class MetricsReport:
    threshold: float
    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: float
    sensitivity: float
    specificity: float
    f1: float
    auroc: float | None


def _score_pixels(pixels: np.ndarray, gen: GeneratorParams, k_draws: int, seed: int,
                  gamma_con: float, batch_size: int, offset: int = 0) -> np.ndarray:
    cfg = gen.config
    grid = cfg.grid
    patches = patchify(pixels, grid)
    jobs = []  # (image index, mask)
    for i in range(len(patches)):
        rng = np.random.default_rng([seed, offset + i])
        for _ in range(k_draws):
            jobs.append((i, sample_wave_mask(grid, cfg.mask_ratio, rng, cfg.mask_sigma, cfg.mask_sampling)))
    per_draw = np.empty(len(jobs))
    with nx.no_grad():
        for start in range(0, len(jobs), batch_size):
            chunk = jobs[start:start + batch_size]
            idx = np.array([i for i, _ in chunk])
            masks = [m for _, m in chunk]
            x = patches[idx]
            _, drop, _ = mask_indices(masks)
            rows = np.arange(len(chunk))[:, None]
            rec = generate(x, masks, gen)
            if drop.shape[1]:
                mse = ((rec.predicted_masked.data - x[rows, drop]) ** 2).mean(axis=(1, 2))
            else:
                mse = np.zeros(len(chunk))
            l1 = np.abs(rec.full.data - x).mean(axis=(1, 2))
            per_draw[start:start + len(chunk)] = mse + gamma_con * l1
    return per_draw.reshape(len(patches), k_draws).mean(axis=1)


def anomaly_scores(images: Sequence[BeatImage] | np.ndarray, gen: GeneratorParams, k_draws: int = 8,
                   seed: int = 0, gamma_con: float = 0.0, batch_size: int = 64) -> np.ndarray:
    """Score images by masked reconstruction error averaged over ``k_draws`` wave masks.

    Each draw contributes masked-pixel MSE plus ``gamma_con`` times the
    full-image L1 error. Image ``i`` uses its own generator seeded with
    ``(seed, i)``, so a score does not depend on batching.
    """
    if k_draws < 1:
        raise ConfigError("k_draws must be >= 1")
    if len(images) == 0:
        return np.zeros(0)
    pixels = images if isinstance(images, np.ndarray) else np.stack([im.pixels for im in images])
    return _score_pixels(pixels, gen, k_draws, seed, gamma_con, batch_size)


def anomaly_score(image: BeatImage | np.ndarray, gen: GeneratorParams, k_draws: int = 8,
                  seed: int = 0, gamma_con: float = 0.0) -> float:
    pixels = image.pixels if isinstance(image, BeatImage) else np.asarray(image)
    return float(anomaly_scores(pixels[None], gen, k_draws, seed, gamma_con)[0])


def score_beats(images: Sequence[BeatImage], gen: GeneratorParams, k_draws: int = 8, seed: int = 0,
                gamma_con: float = 0.0) -> list[ScoredBeat]:
    scores = anomaly_scores(images, gen, k_draws, seed, gamma_con)
    return [ScoredBeat(im.source_id, im.aami_class, float(s)) for im, s in zip(images, scores)]


def _arrays(scored) -> tuple[np.ndarray, np.ndarray]:
    scores = np.array([s.score for s in scored], dtype=np.float64)
    labels = np.array([s.is_anomalous for s in scored], dtype=bool)
    return scores, labels


def roc_auc(scores, labels=None) -> float:
    """Rank-based AUROC, ties counted as half (Mann-Whitney U / (n_pos * n_neg)).

    Takes either a list of ScoredBeat or parallel score / boolean-label arrays.
    """
    if labels is None:
        scores, labels = _arrays(scores)
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ContractError("AUROC needs at least one anomalous and one normal sample")
    ranks = rankdata(scores, method="average")
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_curve(scores, labels=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(thresholds, tpr, fpr) for the rule ``score > threshold``, from (0, 0) to (1, 1)."""
    if labels is None:
        scores, labels = _arrays(scores)
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_pos = max(int(labels.sum()), 1)
    n_neg = max(labels.size - int(labels.sum()), 1)
    thresholds = np.concatenate([np.unique(scores)[::-1], [-np.inf]])
    pred = scores[None, :] > thresholds[:, None]
    tpr = (pred & labels).sum(axis=1) / n_pos
    fpr = (pred & ~labels).sum(axis=1) / n_neg
    return thresholds, tpr, fpr


def select_threshold(train_scores, quantile: float = 0.95) -> float:
    """Linear-interpolation quantile of training-normal scores."""
    s = np.asarray(train_scores, dtype=np.float64)
    if s.size == 0:
        raise ContractError("cannot choose a threshold from no scores")
    if not 0.0 <= quantile <= 1.0:
        raise ConfigError("quantile must lie in [0, 1]")
    return float(np.quantile(s, quantile, method="linear"))


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def confusion_metrics(scored, threshold: float, labels=None) -> MetricsReport:
    """Binary metrics for the rule ``score > threshold`` -> anomalous."""
    if labels is None:
        scores, labels = _arrays(scored)
    else:
        scores = np.asarray(scored, dtype=np.float64)
        labels = np.asarray(labels, dtype=bool)
    if scores.size == 0:
        raise ContractError("no scored beats")
    pred = scores > threshold
    tp = int((pred & labels).sum())
    fp = int((pred & ~labels).sum())
    tn = int((~pred & ~labels).sum())
    fn = int((~pred & labels).sum())
    try:
        auroc = roc_auc(scores, labels)
    except ContractError:
        auroc = None
    return MetricsReport(
        threshold=float(threshold), tp=tp, fp=fp, tn=tn, fn=fn,
        accuracy=(tp + tn) / scores.size,
        sensitivity=_ratio(tp, tp + fn),
        specificity=_ratio(tn, tn + fp),
        f1=_ratio(2 * tp, 2 * tp + fp + fn),
        auroc=auroc,
    )


# ---------------------------------------------------------------------------
# output files
# ---------------------------------------------------------------------------


def write_scores(path: str | Path, scored: Sequence[ScoredBeat]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("source_id", "true_class", "score"))
        for s in scored:
            w.writerow((s.source_id, s.true_class, repr(float(s.score))))


def read_scores(path: str | Path) -> list[ScoredBeat]:
    with open(path, newline="") as fh:
        return [ScoredBeat(r["source_id"], r["true_class"], float(r["score"])) for r in csv.DictReader(fh)]


def write_metrics(path: str | Path, report: MetricsReport) -> None:
    Path(path).write_text(json.dumps(asdict(report), indent=2, sort_keys=True) + "\n")


def read_metrics(path: str | Path) -> MetricsReport:
    return MetricsReport(**json.loads(Path(path).read_text()))


def write_roc(path: str | Path, thresholds, tpr, fpr) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("threshold", "tpr", "fpr"))
        for t, a, b in zip(thresholds, tpr, fpr):
            w.writerow((repr(float(t)), repr(float(a)), repr(float(b))))
