"""Run configuration: one flat dataclass, diffable text serialization."""

from __future__ import annotations

import dataclasses
import hashlib
import os
from dataclasses import dataclass
from typing import get_type_hints

ENV_SEED = "PDL_SEED"

LABELING_MODES = ("pseudo", "generator-truth", "single")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # optimization
    alpha: float = 0.001
    beta: float = 0.001
    n_domains: int = 3
    per_domain_batch: int = 7
    epochs: int = 10
    seed: int = 0
    optimizer: str = "sgd"            # "sgd" keeps updates oracle-exact; "adam" for real runs
    second_order: bool = False
    labeling_mode: str = "pseudo"     # pseudo | generator-truth | single
    episodes_per_epoch: int = 0       # 0 = one pass over the training set
    checkpoint_every: int = 0         # epochs between checkpoints; 0 = final only

    # model
    image_size: int = 32
    depth_size: int = 16
    tap_layers: tuple[int, ...] = (5, 9)
    conv_channels: tuple[int, ...] = (16, 16, 16, 32, 32, 32, 64, 64, 64)
    pool_every: int = 3
    meta_hidden: int = 32
    depth_widths: tuple[int, ...] = (32, 16)

    # pseudo-domain labeling
    cluster_method: str = "kmeans"    # kmeans | gmm
    pca_dim: int = 256

    # dataset generation and splitting
    gen_domains: int = 4
    per_domain: int = 200
    live_fraction: float = 0.5
    held_out_domain: int = 3

    # execution
    threads: int = 1

    def validate(self) -> None:
        if self.alpha <= 0 or self.beta < 0:
            raise ConfigError("alpha must be > 0 and beta >= 0")
        if self.labeling_mode not in LABELING_MODES:
            raise ConfigError(f"labeling_mode must be one of {LABELING_MODES}")
        if self.labeling_mode != "single" and self.n_domains < 2:
            raise ConfigError("n_domains must be >= 2 for meta-learning modes")
        if self.per_domain_batch < 2:
            raise ConfigError("per_domain_batch must be >= 2 (both classes per batch)")
        if self.cluster_method not in ("kmeans", "gmm"):
            raise ConfigError("cluster_method must be 'kmeans' or 'gmm'")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError("optimizer must be 'sgd' or 'adam'")
        if self.per_domain < 2:
            raise ConfigError("per_domain must be >= 2")
        if not 0.0 < self.live_fraction < 1.0:
            raise ConfigError("live_fraction must lie strictly between 0 and 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.image_size < 8:
            raise ConfigError("image_size must be >= 8")
        if max(self.tap_layers) > len(self.conv_channels):
            raise ConfigError("tap layer index exceeds the number of conv layers")

    # -- flat key=value text ------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        hints = get_type_hints(cls)
        known = {f.name: hints[f.name] for f in dataclasses.fields(cls)}
        values: dict[str, object] = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, _, val = (p.strip() for p in line.partition("="))
            if key not in known:
                raise ConfigError(f"line {lineno}: unknown config key {key!r}")
            values[key] = _parse_value(key, val, known[key])
        cfg = cls(**values)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        values = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        cfg = cls(**values)
        cfg.validate()
        return cfg

    def config_hash(self) -> str:
        canonical = "\n".join(sorted(self.to_text().splitlines()))
        return hashlib.sha256(canonical.encode()).hexdigest()

    def replace(self, **kwargs) -> "RunConfig":
        cfg = dataclasses.replace(self, **kwargs)
        cfg.validate()
        return cfg


def _parse_value(key: str, val: str, hint):
    try:
        if hint is int:
            return int(val)
        if hint is float:
            return float(val)
        if hint is bool:
            if val.lower() in ("true", "1", "yes"):
                return True
            if val.lower() in ("false", "0", "no"):
                return False
            raise ValueError(val)
        if hint is str:
            return val
        # remaining fields are tuples of ints
        return tuple(int(p) for p in val.split(",") if p.strip())
    except ValueError as e:
        raise ConfigError(f"config key {key!r}: cannot parse {val!r}") from e


def apply_env_overrides(cfg: RunConfig, env=os.environ) -> RunConfig:
    """PDL_SEED, when set, wins over file and flag seeds."""
    if ENV_SEED in env:
        try:
            return cfg.replace(seed=int(env[ENV_SEED]))
        except ValueError as e:
            raise ConfigError(f"{ENV_SEED} must be an integer") from e
    return cfg
