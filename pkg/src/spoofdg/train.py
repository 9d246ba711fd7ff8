"""Training loop: per-epoch relabeling, episode sampling, meta steps, logs."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import domains as dom
from . import meta
from .config import RunConfig
from .style import adjusted_rand_index
from .data import Sample, TrainRecord, split_leave_one_domain_out
from .domains import DomainBatch
from .models import ModelParams, Networks, save_checkpoint


def build_networks(cfg: RunConfig) -> Networks:
    return Networks.build(image_size=cfg.image_size,
                          conv_channels=cfg.conv_channels,
                          pool_every=cfg.pool_every,
                          tap_layers=cfg.tap_layers,
                          meta_hidden=cfg.meta_hidden,
                          depth_size=cfg.depth_size,
                          depth_widths=cfg.depth_widths)


def _epoch_seed(seed: int, stream: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, stream, epoch]).generate_state(1)[0])


@dataclass
class TrainResult:
    out_dir: Path
    final_checkpoint: Path
    log_path: Path
    relabel_log_path: Path
    steps: int
    last_report: meta.MetaStepReport | None


class _JsonlWriter:
    def __init__(self, path: Path, header: dict):
        self.path = path
        self._fh = open(path, "w", encoding="utf-8", newline="\n")
        self.write(header)

    def write(self, record: dict) -> None:
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def _pooled_batches(records: list[TrainRecord], batch_size: int,
                    rng: np.random.Generator) -> list[DomainBatch]:
    order = rng.permutation(len(records))
    out = []
    for lo in range(0, len(records) - batch_size + 1, batch_size):
        chunk = [records[i] for i in order[lo:lo + batch_size]]
        out.append(DomainBatch(images=np.stack([r.image for r in chunk]),
                               y=np.array([r.y for r in chunk]),
                               depth=np.stack([r.depth for r in chunk]),
                               domain_label=0,
                               sample_ids=[r.sample_id for r in chunk]))
    return out


def run_training(cfg: RunConfig, samples: list[Sample], out_dir,
                 verbose: bool = False) -> TrainResult:
    """Train on all domains except cfg.held_out_domain; write logs/checkpoints.

    The trainer only ever touches TrainRecord views (no generator domain);
    the diagnostics map of true domains is used solely for the relabeling
    ARI log line and for the generator-truth comparison mode.
    """
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_records, _ = split_leave_one_domain_out(samples, cfg.held_out_domain)
    truth = {s.sample_id: s.true_domain for s in samples
             if s.true_domain != cfg.held_out_domain}

    nets = build_networks(cfg)
    params = nets.init_params(cfg.seed)
    header = {"type": "config", "config_hash": cfg.config_hash(), "seed": cfg.seed,
              "config": cfg.to_dict()}
    log = _JsonlWriter(out / "train_log.jsonl", header)
    relabel_log = _JsonlWriter(out / "relabel_log.jsonl", header)
    ckpt_meta = {"config": cfg.to_dict(), "config_hash": cfg.config_hash()}
    save_checkpoint(out / "checkpoint_init.zip", params, seed=cfg.seed, config=ckpt_meta)

    hp = meta.Hyperparams(alpha=cfg.alpha, beta=cfg.beta,
                          n_domains=max(cfg.n_domains, 2),
                          per_domain_batch=cfg.per_domain_batch,
                          epochs=cfg.epochs, seed=cfg.seed)
    opt = meta.OptimizerBundle.build(cfg.optimizer, cfg.beta)

    steps = 0
    last_report: meta.MetaStepReport | None = None
    try:
        for epoch in range(cfg.epochs):
            rng = np.random.default_rng(
                np.random.SeedSequence([cfg.seed, 2, epoch]))
            if cfg.labeling_mode == "single":
                batch_size = cfg.n_domains * cfg.per_domain_batch
                for batch in _pooled_batches(train_records, batch_size, rng):
                    params, report = meta.erm_step(batch, nets, params, opt)
                    log.write({"type": "step", "epoch": epoch, "step": steps,
                               **report.to_dict()})
                    steps += 1
                    last_report = report
                relabel_log.write({"type": "relabel", "epoch": epoch,
                                   "label_counts": [len(train_records)],
                                   "retries": 0, "fallback": False,
                                   "ari_vs_generator": None})
            else:
                if cfg.labeling_mode == "generator-truth":
                    assignment = dom.assignment_from_truth(train_records, truth, epoch=epoch)
                    if assignment.n_domains != cfg.n_domains:
                        raise ValueError(
                            f"generator-truth mode: dataset has {assignment.n_domains} "
                            f"training domains but n_domains = {cfg.n_domains}")
                else:
                    assignment = dom.relabel_with_retries(
                        nets, params, train_records, cfg.n_domains,
                        method=cfg.cluster_method,
                        seed=_epoch_seed(cfg.seed, 1, epoch),
                        pca_dim=cfg.pca_dim, epoch=epoch)
                if truth:
                    labels_true = [truth[r.sample_id] for r in train_records]
                    labels_pseudo = [assignment.labels[r.sample_id] for r in train_records]
                    assignment.ari_vs_truth = adjusted_rand_index(
                        labels_true, labels_pseudo)
                relabel_log.write({"type": "relabel", **assignment.log_line()})

                sampler = dom.EpisodeSampler(train_records, assignment,
                                             cfg.per_domain_batch, rng)
                n_episodes = cfg.episodes_per_epoch or sampler.episodes_per_epoch()
                for _ in range(n_episodes):
                    episode = sampler.sample_episode()
                    params, report = meta.meta_step(episode, nets, params, hp, opt,
                                                    second_order=cfg.second_order)
                    log.write({"type": "step", "epoch": epoch, "step": steps,
                               "episode": episode.episode_index, **report.to_dict()})
                    steps += 1
                    last_report = report
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(out / f"checkpoint_epoch{epoch + 1}.zip", params,
                                seed=cfg.seed, config=ckpt_meta)
            if verbose:
                msg = last_report.to_dict() if last_report else {}
                print(f"epoch {epoch}: {json.dumps(msg, sort_keys=True)}")
    finally:
        log.close()
        relabel_log.close()

    final = out / "checkpoint_final.zip"
    save_checkpoint(final, params, seed=cfg.seed, config=ckpt_meta)
    return TrainResult(out_dir=out, final_checkpoint=final,
                       log_path=out / "train_log.jsonl",
                       relabel_log_path=out / "relabel_log.jsonl",
                       steps=steps, last_report=last_report)
