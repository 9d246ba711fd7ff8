"""Held-out scoring, ranking AUC, and 2-D projection export."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import style
from .autodiff import Tensor
from .models import ModelParams, Networks


def score_batch(nets: Networks, params: ModelParams, images: np.ndarray) -> np.ndarray:
    """Classification scores M(F(x)) for a stack of images, grad-free."""
    feats, _ = nets.feature_extractor.forward(params.feature, Tensor(images))
    return nets.meta_learner.forward(params.meta, feats).data.copy()


def score_samples(nets: Networks, params: ModelParams, samples,
                  batch_size: int = 64) -> np.ndarray:
    out = []
    for lo in range(0, len(samples), batch_size):
        chunk = samples[lo:lo + batch_size]
        out.append(score_batch(nets, params, np.stack([s.image for s in chunk])))
    return np.concatenate(out) if out else np.zeros(0)


def extract_features(nets: Networks, params: ModelParams, samples,
                     batch_size: int = 64) -> np.ndarray:
    """Flattened extractor outputs, one row per sample."""
    out = []
    for lo in range(0, len(samples), batch_size):
        chunk = samples[lo:lo + batch_size]
        feats, _ = nets.feature_extractor.forward(
            params.feature, Tensor(np.stack([s.image for s in chunk])))
        out.append(feats.data.reshape(len(chunk), -1).copy())
    return np.concatenate(out) if out else np.zeros((0, 0))


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    sx = x[order]
    boundary = np.r_[True, sx[1:] != sx[:-1]]
    group = np.cumsum(boundary) - 1
    counts = np.bincount(group)
    starts = np.cumsum(np.r_[0, counts[:-1]])
    avg = starts + (counts + 1) / 2.0
    ranks = np.empty(len(x))
    ranks[order] = avg[group]
    return ranks


def auc(scores, labels) -> float:
    """Rank-sum AUC: P(score of a positive > score of a negative), ties half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError("auc: scores and labels differ in length")
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auc: both classes must be present")
    ranks = _average_ranks(scores)
    rank_sum = float(ranks[labels == 1].sum())
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


@dataclass
class EvalResult:
    sample_ids: list[int]
    scores: list[float]
    labels: list[int]
    auc: float
    histogram_counts: list[int]
    histogram_edges: list[float]
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"sample_ids": self.sample_ids, "scores": self.scores,
                "labels": self.labels, "auc": self.auc,
                "histogram": {"counts": self.histogram_counts,
                              "edges": self.histogram_edges},
                "metadata": self.metadata}

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1))


def evaluate(nets: Networks, params: ModelParams, samples,
             metadata: dict | None = None, batch_size: int = 64,
             n_bins: int = 20) -> EvalResult:
    scores = score_samples(nets, params, samples, batch_size=batch_size)
    labels = np.array([s.y for s in samples])
    counts, edges = np.histogram(scores, bins=n_bins, range=(0.0, 1.0))
    return EvalResult(sample_ids=[s.sample_id for s in samples],
                      scores=[float(v) for v in scores],
                      labels=[int(v) for v in labels],
                      auc=auc(scores, labels),
                      histogram_counts=[int(c) for c in counts],
                      histogram_edges=[float(e) for e in edges],
                      metadata=metadata or {})


def export_projection(features: np.ndarray, labels, scores, sample_ids, path) -> None:
    """CSV of the 2-D principal projection of test features.

    Columns: sample_id, pc1, pc2, label, score. UTF-8, LF endings.
    """
    features = np.asarray(features, dtype=np.float64)
    if len(features) < 3:
        raise ValueError("export_projection: need at least 3 samples")
    pca = style.fit_pca(features, k=2)
    reduced = style.project(pca, features)
    if reduced.shape[1] < 2:
        reduced = np.pad(reduced, ((0, 0), (0, 2 - reduced.shape[1])))
    lines = ["sample_id,pc1,pc2,label,score"]
    for sid, row, lab, sc in zip(sample_ids, reduced, labels, scores):
        lines.append(f"{sid},{row[0]:.10g},{row[1]:.10g},{int(lab)},{float(sc):.10g}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
