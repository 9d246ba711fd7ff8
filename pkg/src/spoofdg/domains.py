"""Per-epoch pseudo-domain labeling and meta-episode sampling.

Each epoch the whole training set is pushed through the current networks
(no gradients), per-channel style statistics are collected from the tapped
layers, standardized, PCA-reduced, and clustered into N pseudo-domains.
Episodes then draw one batch per pseudo-domain: N-1 meta-train batches and
one meta-test batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import style
from .autodiff import Tensor
from .data import TrainRecord
from .models import ModelParams, Networks


class ClassCollapsedDomainError(RuntimeError):
    """A pseudo-domain contains only one of the two classes."""


class EmptyDomainError(RuntimeError):
    """A pseudo-domain label ended up with no samples."""


@dataclass
class PseudoDomainAssignment:
    epoch: int
    labels: dict[int, int]            # sample_id -> label in {0..N-1}
    counts: list[int]
    degenerate: bool
    retries: int = 0
    fallback: bool = False
    ari_vs_truth: float | None = None

    @property
    def n_domains(self) -> int:
        return len(self.counts)

    def log_line(self) -> dict:
        return {"epoch": self.epoch, "label_counts": list(self.counts),
                "retries": self.retries, "fallback": self.fallback,
                "ari_vs_generator": self.ari_vs_truth}


@dataclass
class DomainBatch:
    images: np.ndarray                # [B,6,H,W]
    y: np.ndarray                     # [B] in {0,1}
    depth: np.ndarray                 # [B,1,d,d]
    domain_label: int
    sample_ids: list[int] = field(default_factory=list)

    def has_both_classes(self) -> bool:
        return bool(self.y.min() == 0 and self.y.max() == 1)


@dataclass
class EpisodeBatch:
    meta_train: list[DomainBatch]
    meta_test: DomainBatch
    episode_index: int = 0

    def validate(self) -> None:
        labels = [b.domain_label for b in self.meta_train] + [self.meta_test.domain_label]
        if sorted(labels) != list(range(len(labels))):
            raise ValueError(f"episode labels {labels} do not partition the domain set")
        for b in self.meta_train + [self.meta_test]:
            if not b.has_both_classes():
                raise ClassCollapsedDomainError(
                    f"batch from pseudo-domain {b.domain_label} is single-class")


def compute_style_matrix(nets: Networks, params: ModelParams,
                         records: list[TrainRecord], batch_size: int = 64) -> np.ndarray:
    """Raw stacked style vectors for every record, in record order.

    Runs outside any tape, so no gradients are recorded. Stacking order is
    fixed: extractor taps in ascending layer order, then the depth output.
    """
    rows = []
    for lo in range(0, len(records), batch_size):
        chunk = records[lo:lo + batch_size]
        x = Tensor(np.stack([r.image for r in chunk]))
        feats, taps = nets.feature_extractor.forward(params.feature, x)
        depth = nets.depth_estimator.forward(params.depth, feats)
        per_tap = [style.channel_stats(taps[t]) for t in nets.feature_extractor.tap_layers]
        per_tap.append(style.channel_stats(depth))
        rows.append(style.stack_style_vectors(per_tap))
    return np.concatenate(rows, axis=0)


def relabel_epoch(nets: Networks, params: ModelParams, records: list[TrainRecord],
                  n_domains: int, method: str = "kmeans", seed: int = 0,
                  pca_dim: int = 256, epoch: int = 0,
                  batch_size: int = 64) -> PseudoDomainAssignment:
    """Forward -> stats -> standardize -> PCA -> cluster -> assign, one epoch."""
    if not records:
        raise ValueError("relabel_epoch: empty training set")
    if len(records) < n_domains:
        raise ValueError(f"relabel_epoch: {len(records)} samples < {n_domains} domains")
    raw = compute_style_matrix(nets, params, records, batch_size=batch_size)
    z, _, _ = style.standardize(raw)
    pca = style.fit_pca(z, k=pca_dim)
    reduced = style.project(pca, z)
    model = style.fit_clusters(reduced, n_domains, method, seed)
    labels_arr = style.assign(model, reduced)
    labels = {r.sample_id: int(lab) for r, lab in zip(records, labels_arr)}
    counts = [int(np.sum(labels_arr == i)) for i in range(n_domains)]
    return PseudoDomainAssignment(epoch=epoch, labels=labels, counts=counts,
                                  degenerate=any(c == 0 for c in counts))


def check_assignment(assignment: PseudoDomainAssignment,
                     records: list[TrainRecord]) -> None:
    """Raise if any pseudo-domain is empty or single-class."""
    y_by_id = {r.sample_id: r.y for r in records}
    seen: dict[int, set[int]] = {i: set() for i in range(assignment.n_domains)}
    for sid, lab in assignment.labels.items():
        seen[lab].add(y_by_id[sid])
    for lab, classes in seen.items():
        if not classes:
            raise EmptyDomainError(f"pseudo-domain {lab} is empty")
        if len(classes) < 2:
            raise ClassCollapsedDomainError(f"pseudo-domain {lab} is single-class")


def random_balanced_assignment(records: list[TrainRecord], n_domains: int,
                               rng: np.random.Generator, epoch: int = 0) -> PseudoDomainAssignment:
    """Class-stratified round-robin fallback partition."""
    live = [r.sample_id for r in records if r.y == 1]
    spoof = [r.sample_id for r in records if r.y == 0]
    if len(live) < n_domains or len(spoof) < n_domains:
        raise ClassCollapsedDomainError(
            "cannot build a balanced partition: a class has fewer samples than domains")
    labels: dict[int, int] = {}
    for ids in (live, spoof):
        order = rng.permutation(len(ids))
        for pos, idx in enumerate(order):
            labels[ids[idx]] = pos % n_domains
    counts = [0] * n_domains
    for lab in labels.values():
        counts[lab] += 1
    return PseudoDomainAssignment(epoch=epoch, labels=labels, counts=counts,
                                  degenerate=False, fallback=True)


def relabel_with_retries(nets: Networks, params: ModelParams, records: list[TrainRecord],
                         n_domains: int, method: str, seed: int, pca_dim: int,
                         epoch: int = 0, max_retries: int = 3,
                         batch_size: int = 64) -> PseudoDomainAssignment:
    """Relabel, re-seeding up to max_retries on collapsed or empty domains.

    After the retry budget is spent the epoch falls back to a random
    class-balanced partition so training can continue with N domains.
    """
    for attempt in range(max_retries + 1):
        assignment = relabel_epoch(nets, params, records, n_domains, method,
                                   seed=seed + 7919 * attempt, pca_dim=pca_dim,
                                   epoch=epoch, batch_size=batch_size)
        try:
            check_assignment(assignment, records)
        except (ClassCollapsedDomainError, EmptyDomainError):
            continue
        assignment.retries = attempt
        return assignment
    fallback = random_balanced_assignment(
        records, n_domains, np.random.default_rng(np.random.SeedSequence([seed, epoch])),
        epoch=epoch)
    fallback.retries = max_retries + 1
    return fallback


def assignment_from_truth(records: list[TrainRecord], truth: dict[int, int],
                          epoch: int = 0) -> PseudoDomainAssignment:
    """Dataset-as-domain labeling from a diagnostics map (comparison mode)."""
    domain_ids = sorted({truth[r.sample_id] for r in records})
    remap = {d: i for i, d in enumerate(domain_ids)}
    labels = {r.sample_id: remap[truth[r.sample_id]] for r in records}
    counts = [0] * len(domain_ids)
    for lab in labels.values():
        counts[lab] += 1
    return PseudoDomainAssignment(epoch=epoch, labels=labels, counts=counts,
                                  degenerate=False)


class EpisodeSampler:
    """Epoch-scoped episode sampler over one pseudo-domain assignment.

    Draws are without replacement within the epoch: each pseudo-domain keeps
    a shuffled queue that is re-permuted only once exhausted. Pseudo-domains
    smaller than the batch size are sampled with replacement instead. Every
    batch is nudged to contain at least one sample of each class.
    """

    def __init__(self, records: list[TrainRecord], assignment: PseudoDomainAssignment,
                 per_domain_batch: int, rng: np.random.Generator):
        check_assignment(assignment, records)
        self.records = {r.sample_id: r for r in records}
        self.per_domain_batch = per_domain_batch
        self.rng = rng
        self.n_domains = assignment.n_domains
        self.by_label: list[list[int]] = [[] for _ in range(self.n_domains)]
        for r in records:
            self.by_label[assignment.labels[r.sample_id]].append(r.sample_id)
        self.with_replacement = [len(ids) < per_domain_batch for ids in self.by_label]
        self._queues: list[list[int]] = [
            [] if rep else list(rng.permutation(ids))
            for ids, rep in zip(self.by_label, self.with_replacement)]
        self._episode = 0

    def episodes_per_epoch(self) -> int:
        n = sum(len(ids) for ids in self.by_label)
        return max(1, n // (self.n_domains * self.per_domain_batch))

    def sample_episode(self) -> EpisodeBatch:
        test_label = int(self.rng.integers(self.n_domains))
        batches = [self._draw_batch(lab) for lab in range(self.n_domains)]
        episode = EpisodeBatch(
            meta_train=[b for b in batches if b.domain_label != test_label],
            meta_test=batches[test_label],
            episode_index=self._episode)
        self._episode += 1
        episode.validate()
        return episode

    def _draw_batch(self, label: int) -> DomainBatch:
        B = self.per_domain_batch
        if self.with_replacement[label]:
            ids = list(self.rng.choice(self.by_label[label], size=B, replace=True))
            ids = self._force_both_classes(ids, label)
        else:
            queue = self._queues[label]
            if len(queue) < B:
                queue.extend(self.rng.permutation(self.by_label[label]))
            ids = queue[:B]
            del queue[:B]
            ids = self._swap_in_missing_class(ids, label)
        y = np.array([self.records[i].y for i in ids])
        return DomainBatch(
            images=np.stack([self.records[i].image for i in ids]),
            y=y,
            depth=np.stack([self.records[i].depth for i in ids]),
            domain_label=label,
            sample_ids=[int(i) for i in ids])

    def _missing_class(self, ids: list[int]) -> int | None:
        ys = {self.records[i].y for i in ids}
        if ys == {0, 1}:
            return None
        return 1 if ys == {0} else 0

    def _force_both_classes(self, ids: list[int], label: int) -> list[int]:
        missing = self._missing_class(ids)
        if missing is None:
            return ids
        pool = [i for i in self.by_label[label] if self.records[i].y == missing]
        slot = int(self.rng.integers(len(ids)))
        ids[slot] = pool[int(self.rng.integers(len(pool)))]
        return ids

    def _swap_in_missing_class(self, ids: list[int], label: int) -> list[int]:
        missing = self._missing_class(ids)
        if missing is None:
            return ids
        queue = self._queues[label]
        for pos, candidate in enumerate(queue):
            if self.records[candidate].y == missing:
                queue[pos] = ids[-1]
                ids[-1] = candidate
                return ids
        # remainder of the pass lacks the class; splice in a fresh permutation
        queue.extend(self.rng.permutation(self.by_label[label]))
        return self._swap_in_missing_class(ids, label)
