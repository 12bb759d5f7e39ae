"""Tag-wise ROC-AUC and average precision, track-level evaluation with
chunk averaging, and the input-length sweep."""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .data import TrackStore, _atomic_write
from .dsp import CHUNK_SECONDS, N_FFT
from .errors import DataError, ParameterError, UndefinedMetricError
from .models import predict

BCE_CLAMP = 1e-7


def _check(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ParameterError(f"scores {scores.shape} and labels {labels.shape} differ in length")
    if not np.isin(labels, (0, 1)).all():
        raise ParameterError("labels must be binary")
    return scores, labels.astype(bool)


def roc_auc(scores, labels) -> float:
    """P(random positive outranks random negative); ties count one half."""
    scores, labels = _check(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC-AUC needs at least one positive and one negative")
    ranks = rankdata(scores)  # average ranks give the half credit for ties
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def pr_auc(scores, labels) -> float:
    """Average precision: precision times recall step, thresholds at each distinct score."""
    scores, labels = _check(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UndefinedMetricError("PR-AUC needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    # last index of each tie group
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp, fp = tp[ends], fp[ends]
    precision = tp / (tp + fp)
    recall_step = np.diff(np.r_[0, tp]) / n_pos
    return float(np.sum(precision * recall_step))


def binary_cross_entropy(probs, labels) -> float:
    p = np.clip(np.asarray(probs, np.float64), BCE_CLAMP, 1 - BCE_CLAMP)
    y = np.asarray(labels, np.float64)
    return float(-(y * np.log(p) + (1 - y) * np.log(1 - p)).mean())


@dataclass
class EvalReport:
    roc_auc: list  # per tag, None when undefined
    pr_auc: list
    macro_roc_auc: float
    macro_pr_auc: float
    n_tracks: int
    chunk_seconds: float
    bce: float
    skipped_tags: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        fmt = lambda v: "nan" if v is None else repr(float(v))
        lines = [
            f"# n_tracks={self.n_tracks}",
            f"# chunk_seconds={self.chunk_seconds!r}",
            f"# bce={self.bce!r}",
            f"# skipped_tags={','.join(map(str, self.skipped_tags)) or '-'}",
            "tag\troc_auc\tpr_auc",
        ]
        lines += [f"{k}\t{fmt(r)}\t{fmt(p)}" for k, (r, p) in enumerate(zip(self.roc_auc, self.pr_auc))]
        lines.append(f"macro\t{fmt(self.macro_roc_auc)}\t{fmt(self.macro_pr_auc)}")
        return "\n".join(lines) + "\n"

    def write(self, path):
        path = Path(path)
        _atomic_write(path, self.to_text())
        _atomic_write(path.with_suffix(".json"), json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def tag_metrics(probs: np.ndarray, labels: np.ndarray) -> tuple:
    """Per-tag ROC/PR lists (None where undefined), macro means, skipped tag indices."""
    rocs, prs, skipped = [], [], []
    for k in range(labels.shape[1]):
        try:
            rocs.append(roc_auc(probs[:, k], labels[:, k]))
            prs.append(pr_auc(probs[:, k], labels[:, k]))
        except UndefinedMetricError:
            rocs.append(None)
            prs.append(None)
            skipped.append(k)
    if skipped:
        warnings.warn(f"tags {skipped} have a single class in the evaluation set; skipped in macro averages")
    valid = [k for k in range(labels.shape[1]) if k not in skipped]
    macro_roc = float(np.mean([rocs[k] for k in valid])) if valid else float("nan")
    macro_pr = float(np.mean([prs[k] for k in valid])) if valid else float("nan")
    return rocs, prs, macro_roc, macro_pr, skipped


def track_predictions(model, store: TrackStore, track_ids, chunk_seconds: float = CHUNK_SECONDS,
                      batch_size: int = 32) -> np.ndarray:
    """Mean of per-chunk predictions for each track, [n_tracks, n_tags]."""
    feats = [store.features(t, chunk_seconds) for t in track_ids]
    owners = np.concatenate([np.full(len(f), i) for i, f in enumerate(feats)])
    stacked = np.concatenate(feats)
    outs = [predict(model, stacked[i : i + batch_size]) for i in range(0, len(stacked), batch_size)]
    chunk_probs = np.concatenate(outs).astype(np.float64)
    sums = np.zeros((len(track_ids), chunk_probs.shape[1]))
    np.add.at(sums, owners, chunk_probs)
    return sums / np.bincount(owners, minlength=len(track_ids))[:, None]


def evaluate_model(model, store: TrackStore, split: str = "test", chunk_seconds: float = CHUNK_SECONDS,
                   batch_size: int = 32) -> EvalReport:
    if chunk_samples_ok(chunk_seconds, store.sr) is False:
        raise ParameterError(f"chunk of {chunk_seconds} s is shorter than one STFT window")
    track_ids = store.pool(split, "labeled")
    if not track_ids:
        raise DataError(f"split {split!r} is empty")
    probs = track_predictions(model, store, track_ids, chunk_seconds, batch_size)
    labels = store.labels(track_ids)
    rocs, prs, macro_roc, macro_pr, skipped = tag_metrics(probs, labels)
    return EvalReport(rocs, prs, macro_roc, macro_pr, len(track_ids), float(chunk_seconds),
                      binary_cross_entropy(probs, labels), skipped)


def chunk_samples_ok(chunk_seconds: float, sr: int) -> bool:
    return round(chunk_seconds * sr) >= N_FFT


def length_sweep(model, store: TrackStore, lengths, split: str = "test", batch_size: int = 32) -> list:
    """Rows of (chunk_seconds, macro ROC-AUC, macro PR-AUC), in the order given."""
    for length in lengths:
        if not chunk_samples_ok(length, store.sr):
            raise ParameterError(f"length {length} s is shorter than one STFT window ({N_FFT} samples)")
    rows = []
    for length in lengths:
        r = evaluate_model(model, store, split, length, batch_size)
        rows.append((float(length), r.macro_roc_auc, r.macro_pr_auc))
    return rows


def format_sweep(rows) -> str:
    lines = ["seconds\troc_auc\tpr_auc"]
    lines += [f"{s!r}\t{r!r}\t{p!r}" for s, r, p in rows]
    return "\n".join(lines) + "\n"
