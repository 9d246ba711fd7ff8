"""Meta-train / meta-test / meta-optimization engine and its losses.

One meta step: sample N-1 meta-train batches and one meta-test batch, take
a single inner gradient step on the classifier head per meta-train domain,
evaluate the meta-test classification loss at each updated head, then
descend the summed objective:

  head      <- head    - beta * d/dhead    sum_i [cls_i + cls_test(head_i')]
  extractor <- extr.   - beta * d/dextr.   [dep_test + sum_i (cls_i + dep_i + cls_test(head_i'))]
  depth net <- depth   - beta * d/ddepth   [dep_test + sum_i dep_i]

First-order mode (default) treats each updated head as a constant; the
second-order mode adds the curvature term assembled from finite-difference
Hessian-vector products.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .domains import DomainBatch, EpisodeBatch
from .models import ModelParams, Networks, ParamSet, param_axpy

PROB_CLAMP = 1e-12


class NumericalError(RuntimeError):
    """A loss or gradient went non-finite; carries the partial report."""

    def __init__(self, message: str, report: dict | None = None):
        super().__init__(message)
        self.report = report or {}


@dataclass
class Hyperparams:
    alpha: float = 0.001          # inner step on the classifier head
    beta: float = 0.001           # outer step on everything
    n_domains: int = 3
    per_domain_batch: int = 7
    epochs: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.n_domains < 2:
            raise ValueError("meta-learning needs at least 2 domains")


@dataclass
class MetaStepReport:
    train_cls_losses: list[float] = field(default_factory=list)
    train_depth_losses: list[float] = field(default_factory=list)
    test_cls_losses: list[float] = field(default_factory=list)
    test_depth_loss: float | None = None
    grad_norm_feature: float = 0.0
    grad_norm_meta: float = 0.0
    grad_norm_depth: float = 0.0
    clamped_probs: int = 0

    def validate(self, n_meta_train: int) -> None:
        losses = (self.train_cls_losses + self.train_depth_losses + self.test_cls_losses
                  + ([self.test_depth_loss] if self.test_depth_loss is not None else []))
        if any(not np.isfinite(v) or v < 0 for v in losses):
            raise NumericalError("non-finite or negative loss in report", self.to_dict())
        if len(self.train_cls_losses) != n_meta_train \
                or len(self.test_cls_losses) != n_meta_train:
            raise ValueError("report loss counts do not match the meta-train domain count")

    def to_dict(self) -> dict:
        return {"train_cls_losses": self.train_cls_losses,
                "train_depth_losses": self.train_depth_losses,
                "test_cls_losses": self.test_cls_losses,
                "test_depth_loss": self.test_depth_loss,
                "grad_norm_feature": self.grad_norm_feature,
                "grad_norm_meta": self.grad_norm_meta,
                "grad_norm_depth": self.grad_norm_depth,
                "clamped_probs": self.clamped_probs}


# ---------------------------------------------------------------------------
# losses


def count_clamped(probs: Tensor) -> int:
    return int(np.sum((probs.data < PROB_CLAMP) | (probs.data > 1.0 - PROB_CLAMP)))


def cls_loss(probs: Tensor, y: np.ndarray) -> Tensor:
    """Mean binary cross-entropy; probabilities clamped away from 0 and 1."""
    y = np.asarray(y, dtype=np.float64)
    if probs.shape != y.shape:
        raise ad.ShapeError(f"cls_loss: probs {probs.shape} vs labels {y.shape}")
    p = ad.clamp(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    y_t = Tensor(y)
    pos = ad.mul(y_t, ad.log(p))
    neg = ad.mul(Tensor(1.0 - y), ad.log(ad.add(ad.scale(p, -1.0), 1.0)))
    return ad.scale(ad.mean_all(ad.add(pos, neg)), -1.0)


def depth_loss(pred: Tensor, target) -> Tensor:
    """Mean squared depth error: batch-mean of ||pred - target||^2 / d^2."""
    target_t = target if isinstance(target, Tensor) else Tensor(target)
    if pred.shape != target_t.shape:
        raise ad.ShapeError(f"depth_loss: pred {pred.shape} vs target {target_t.shape}")
    # mean over every element equals the batch-mean of per-sample Frobenius
    # norms normalized by d^2, because each sample holds exactly d^2 values
    return ad.mse(pred, target_t)


# ---------------------------------------------------------------------------
# optimizers (outer updates)


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: ParamSet, grads) -> ParamSet:
        return param_axpy(params, grads, -self.lr)


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t = 0

    def step(self, params: ParamSet, grads) -> ParamSet:
        params.check_structure(grads)
        self._t += 1
        out = []
        for name, t in params.items():
            g = grads[name]
            g = g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)
            m = self._m.get(name, np.zeros_like(t.data))
            v = self._v.get(name, np.zeros_like(t.data))
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            self._m[name] = m
            self._v[name] = v
            m_hat = m / (1 - self.beta1 ** self._t)
            v_hat = v / (1 - self.beta2 ** self._t)
            out.append((name, Tensor(t.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps),
                                     requires_grad=True)))
        return ParamSet(out)


def build_optimizer(kind: str, lr: float):
    if kind == "sgd":
        return SGD(lr)
    if kind == "adam":
        return Adam(lr)
    raise ValueError(f"unknown optimizer {kind!r}")


@dataclass
class OptimizerBundle:
    feature: object
    meta: object
    depth: object

    @classmethod
    def build(cls, kind: str, lr: float) -> "OptimizerBundle":
        return cls(build_optimizer(kind, lr), build_optimizer(kind, lr),
                   build_optimizer(kind, lr))


# ---------------------------------------------------------------------------
# inner update (one gradient step on the classifier head only)


def inner_update(params_m: ParamSet, batch: DomainBatch, nets: Networks,
                 params_f: ParamSet, alpha: float) -> ParamSet:
    """head' = head - alpha * d cls_loss / d head, extractor frozen."""
    if not (0 in batch.y and 1 in batch.y):
        raise ValueError("inner_update: batch must contain both classes")
    feats, _ = nets.feature_extractor.forward(params_f, Tensor(batch.images))
    return _inner_update_from_features(params_m, feats.data, batch.y, nets, alpha)


def _inner_update_from_features(params_m: ParamSet, feats_data: np.ndarray,
                                y: np.ndarray, nets: Networks,
                                alpha: float) -> ParamSet:
    params_m.zero_grad()
    with Tape():
        probs = nets.meta_learner.forward(params_m, Tensor(feats_data))
        loss = cls_loss(probs, y)
    loss.backward()
    grads = params_m.grads()
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"inner_update: non-finite gradient for {name}")
    return param_axpy(params_m, grads, -alpha)


# ---------------------------------------------------------------------------
# meta step


def meta_step(episode: EpisodeBatch, nets: Networks, params: ModelParams,
              hp: Hyperparams, opt: OptimizerBundle,
              second_order: bool = False,
              fd_step: float = 1e-5) -> tuple[ModelParams, MetaStepReport]:
    episode.validate()
    report = MetaStepReport()
    for batch in episode.meta_train:
        if not (0 in batch.y and 1 in batch.y):
            raise ValueError("meta_step: meta-train batch must contain both classes")

    # one extractor pass over every batch of the episode; per-domain views
    # come from slicing, which is mathematically per-sample anyway
    groups = episode.meta_train + [episode.meta_test]
    bounds = np.cumsum([0] + [len(b.y) for b in groups])
    params.zero_grad()
    tape = Tape()
    with tape:
        feats_all, _ = nets.feature_extractor.forward(
            params.feature, Tensor(np.concatenate([b.images for b in groups])))
        train_feats = [ad.slice_batch(feats_all, bounds[i], bounds[i + 1])
                       for i in range(len(episode.meta_train))]
        feats_t = ad.slice_batch(feats_all, bounds[-2], bounds[-1])

    # inner updates run on their own small tapes, re-using the recorded
    # feature values as constants (the extractor is frozen for this step)
    updated_heads = [
        _inner_update_from_features(params.meta, feats.data, b.y, nets, hp.alpha)
        for feats, b in zip(train_feats, episode.meta_train)]

    params.zero_grad()
    train_feats_data = [f.data for f in train_feats]
    with tape:
        depth_all = nets.depth_estimator.forward(params.depth, feats_all)
        total = None
        for i, (batch, feats) in enumerate(zip(episode.meta_train, train_feats)):
            probs = nets.meta_learner.forward(params.meta, feats)
            report.clamped_probs += count_clamped(probs)
            lc = cls_loss(probs, batch.y)
            ld = depth_loss(ad.slice_batch(depth_all, bounds[i], bounds[i + 1]),
                            batch.depth)
            report.train_cls_losses.append(lc.item())
            report.train_depth_losses.append(ld.item())
            term = ad.add(lc, ld)
            total = term if total is None else ad.add(total, term)

        ld_t = depth_loss(ad.slice_batch(depth_all, bounds[-2], bounds[-1]),
                          episode.meta_test.depth)
        report.test_depth_loss = ld_t.item()
        total = ad.add(total, ld_t)
        for head in updated_heads:
            # updated heads enter as constants; the second-order correction
            # below restores their dependence on the base head when asked
            probs_t = nets.meta_learner.forward(head.detach(), feats_t)
            report.clamped_probs += count_clamped(probs_t)
            lc_t = cls_loss(probs_t, episode.meta_test.y)
            report.test_cls_losses.append(lc_t.item())
            total = ad.add(total, lc_t)

    if not np.isfinite(total.data):
        raise NumericalError(
            "meta_step: non-finite combined objective",
            {"report": report.to_dict(),
             "meta_train_ids": [b.sample_ids for b in episode.meta_train],
             "meta_test_ids": episode.meta_test.sample_ids})
    total.backward()

    grads_f = params.feature.grads()
    grads_m = params.meta.grads()
    grads_d = params.depth.grads()

    if second_order:
        for i, head in enumerate(updated_heads):
            correction = _second_order_head_terms(
                nets, params.meta, head, train_feats_data[i], episode.meta_train[i],
                feats_t.data, episode.meta_test, hp.alpha, fd_step)
            for name in grads_m:
                grads_m[name] += correction[name]

    report.grad_norm_feature = _norm(grads_f)
    report.grad_norm_meta = _norm(grads_m)
    report.grad_norm_depth = _norm(grads_d)
    report.validate(len(episode.meta_train))

    new_params = ModelParams(feature=opt.feature.step(params.feature, grads_f),
                             meta=opt.meta.step(params.meta, grads_m),
                             depth=opt.depth.step(params.depth, grads_d))
    return new_params, report


def _norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def _head_cls_grad(nets: Networks, head: ParamSet, feats_data: np.ndarray,
                   y: np.ndarray) -> dict[str, np.ndarray]:
    head.zero_grad()
    with Tape():
        probs = nets.meta_learner.forward(head, Tensor(feats_data))
        loss = cls_loss(probs, y)
    loss.backward()
    return head.grads()


def _second_order_head_terms(nets: Networks, params_m: ParamSet, head: ParamSet,
                             feats_i: np.ndarray, batch_i: DomainBatch,
                             feats_t: np.ndarray, batch_t: DomainBatch,
                             alpha: float, h: float) -> dict[str, np.ndarray]:
    """d/dhead of cls_test(head') = (I - alpha H_i) g_t, H_i g_t by central FD."""
    g_t = _head_cls_grad(nets, head, feats_t, batch_t.y)
    plus = _head_cls_grad(nets, param_axpy(params_m, g_t, +h), feats_i, batch_i.y)
    minus = _head_cls_grad(nets, param_axpy(params_m, g_t, -h), feats_i, batch_i.y)
    return {name: g_t[name] - alpha * (plus[name] - minus[name]) / (2.0 * h)
            for name in g_t}


# ---------------------------------------------------------------------------
# pooled-data baseline step (no inner update, no episodes)


def erm_step(batch: DomainBatch, nets: Networks, params: ModelParams,
             opt: OptimizerBundle) -> tuple[ModelParams, MetaStepReport]:
    """Joint classification+depth descent on one pooled batch."""
    report = MetaStepReport()
    params.zero_grad()
    with Tape():
        feats, _ = nets.feature_extractor.forward(params.feature, Tensor(batch.images))
        probs = nets.meta_learner.forward(params.meta, feats)
        report.clamped_probs = count_clamped(probs)
        lc = cls_loss(probs, batch.y)
        ld = depth_loss(nets.depth_estimator.forward(params.depth, feats), batch.depth)
        total = ad.add(lc, ld)
    report.train_cls_losses.append(lc.item())
    report.train_depth_losses.append(ld.item())
    if not np.isfinite(total.data):
        raise NumericalError("erm_step: non-finite loss", report.to_dict())
    total.backward()
    grads_f = params.feature.grads()
    grads_m = params.meta.grads()
    grads_d = params.depth.grads()
    report.grad_norm_feature = _norm(grads_f)
    report.grad_norm_meta = _norm(grads_m)
    report.grad_norm_depth = _norm(grads_d)
    new_params = ModelParams(feature=opt.feature.step(params.feature, grads_f),
                             meta=opt.meta.step(params.meta, grads_m),
                             depth=opt.depth.step(params.depth, grads_d))
    return new_params, report


# ---------------------------------------------------------------------------
# first-order expansion property of the meta objective


@dataclass
class TaylorReport:
    alpha: float
    beta: float
    objective: float           # F(theta) + beta * G(theta - alpha * F'(theta))
    first_order: float         # F(theta) + beta * G(theta) - beta*alpha*(G' . F')
    grad_dot: float

    @property
    def residual(self) -> float:
        return abs(self.objective - self.first_order)


def _value_and_grad(loss_fn: Callable[[ParamSet], Tensor],
                    params: ParamSet) -> tuple[float, dict[str, np.ndarray]]:
    params.zero_grad()
    with Tape():
        loss = loss_fn(params)
    value = loss.item()
    loss.backward()
    return value, params.grads()


def mldg_objective_check(params: ParamSet, alpha: float, beta: float,
                         f_loss: Callable[[ParamSet], Tensor],
                         g_loss: Callable[[ParamSet], Tensor]) -> TaylorReport:
    """Residual between the lookahead objective and its first-order form.

    The lookahead objective evaluates the held-out loss after one gradient
    step on the training loss; expanding that step to first order trades the
    shift for a gradient dot product. The residual is second order in alpha.
    """
    f0, f_grad = _value_and_grad(f_loss, params)
    g0, g_grad = _value_and_grad(g_loss, params)
    shifted = param_axpy(params, f_grad, -alpha)
    g_shifted, _ = _value_and_grad(g_loss, shifted)
    dot = float(sum(np.sum(f_grad[k] * g_grad[k]) for k in f_grad))
    objective = f0 + beta * g_shifted
    first_order = f0 + beta * g0 - beta * alpha * dot
    return TaylorReport(alpha=alpha, beta=beta, objective=objective,
                        first_order=first_order, grad_dot=dot)
