"""The three networks and their parameter plumbing.

All forwards are functional: parameters live in ParamSet objects passed in
explicitly, so the same classifier head can be evaluated at its base
parameters or at a one-step-updated copy without touching either.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


class ParamMismatchError(ValueError):
    """A ParamSet does not structurally match what the network expects."""


class ParamSet:
    """Ordered mapping of unique names to parameter tensors."""

    def __init__(self, items: Iterable[tuple[str, Tensor]] | Mapping[str, Tensor]):
        if isinstance(items, Mapping):
            items = items.items()
        self._items: dict[str, Tensor] = {}
        for name, t in items:
            if name in self._items:
                raise ParamMismatchError(f"duplicate parameter name {name!r}")
            if not isinstance(t, Tensor):
                t = Tensor(t, requires_grad=True)
            self._items[name] = t

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def __contains__(self, name: str) -> bool:
        return name in self._items

    def __len__(self) -> int:
        return len(self._items)

    def names(self) -> list[str]:
        return list(self._items)

    def items(self):
        return self._items.items()

    def tensors(self) -> list[Tensor]:
        return list(self._items.values())

    def clone(self) -> "ParamSet":
        """Independent copy: mutating the clone never changes the original."""
        return ParamSet((k, Tensor(v.data.copy(), requires_grad=True))
                        for k, v in self._items.items())

    def detach(self) -> "ParamSet":
        """Same values, requires_grad off; used when a set acts as constants."""
        return ParamSet((k, Tensor(v.data, requires_grad=False))
                        for k, v in self._items.items())

    def zero_grad(self) -> None:
        for t in self._items.values():
            t.zero_grad()

    def grads(self) -> dict[str, np.ndarray]:
        """Collected gradients; missing grads read as zeros."""
        return {k: (np.zeros_like(t.data) if t.grad is None else t.grad.copy())
                for k, t in self._items.items()}

    def grad_norm(self) -> float:
        total = 0.0
        for t in self._items.values():
            if t.grad is not None:
                total += float(np.sum(t.grad * t.grad))
        return float(np.sqrt(total))

    def num_values(self) -> int:
        return sum(t.size for t in self._items.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([t.data.reshape(-1) for t in self._items.values()]) \
            if self._items else np.zeros(0)

    def with_flat(self, vec: np.ndarray) -> "ParamSet":
        """New set with the same structure, values taken from a flat vector."""
        if vec.size != self.num_values():
            raise ParamMismatchError(
                f"flat vector has {vec.size} values, expected {self.num_values()}")
        out, pos = [], 0
        for k, t in self._items.items():
            n = t.size
            out.append((k, Tensor(vec[pos:pos + n].reshape(t.shape).copy(), requires_grad=True)))
            pos += n
        return ParamSet(out)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k, t in self._items.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return h.hexdigest()

    def check_structure(self, other: "ParamSet | Mapping[str, np.ndarray]") -> None:
        other_names = list(other.names()) if isinstance(other, ParamSet) else list(other)
        if other_names != self.names():
            raise ParamMismatchError(
                f"parameter names differ: {self.names()} vs {other_names}")
        for k, t in self._items.items():
            o = other[k]
            oshape = o.shape if isinstance(o, (Tensor, np.ndarray)) else np.asarray(o).shape
            if tuple(oshape) != t.shape:
                raise ParamMismatchError(f"shape of {k!r} differs: {t.shape} vs {tuple(oshape)}")


def param_axpy(base: ParamSet, grads: "ParamSet | Mapping[str, np.ndarray]",
               scale: float) -> ParamSet:
    """New set with out[k] = base[k] + scale * grads[k]; base is untouched."""
    base.check_structure(grads)
    out = []
    for k, t in base.items():
        g = grads[k]
        g = g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)
        out.append((k, Tensor(t.data + scale * g, requires_grad=True)))
    return ParamSet(out)


def _he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


class FeatureExtractor:
    """Conv backbone with tappable per-layer activations.

    conv_channels lists the output width of every 3x3 conv; a 2x2 max-pool
    follows every pool_every-th conv. Tap indices are 1-based conv layers
    whose post-relu activations are returned alongside the features.
    """

    def __init__(self, in_channels: int = 6,
                 conv_channels: tuple[int, ...] = (16, 16, 16, 32, 32, 32, 64, 64, 64),
                 pool_every: int = 3,
                 tap_layers: tuple[int, ...] = (5, 9)):
        if not conv_channels:
            raise ValueError("conv_channels must be non-empty")
        bad = [t for t in tap_layers if not 1 <= t <= len(conv_channels)]
        if bad:
            raise ValueError(
                f"tap layers {bad} out of range for {len(conv_channels)} conv layers")
        self.in_channels = in_channels
        self.conv_channels = tuple(conv_channels)
        self.pool_every = pool_every
        self.tap_layers = tuple(sorted(tap_layers))

    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        shapes = []
        prev = self.in_channels
        for i, ch in enumerate(self.conv_channels, start=1):
            shapes.append((f"conv{i}.weight", (ch, prev, 3, 3)))
            shapes.append((f"conv{i}.bias", (ch,)))
            prev = ch
        return shapes

    def init_params(self, rng: np.random.Generator) -> ParamSet:
        out = []
        for name, shape in self.param_shapes():
            if name.endswith("weight"):
                fan_in = shape[1] * shape[2] * shape[3]
                out.append((name, Tensor(_he_uniform(rng, shape, fan_in), requires_grad=True)))
            else:
                out.append((name, Tensor(np.zeros(shape), requires_grad=True)))
        return ParamSet(out)

    def n_pools(self) -> int:
        return len(self.conv_channels) // self.pool_every

    def out_shape(self, image_size: int) -> tuple[int, int, int]:
        side = image_size >> self.n_pools()
        return (self.conv_channels[-1], side, side)

    def forward(self, params: ParamSet, x: Tensor,
                trace: dict[str, Tensor] | None = None) -> tuple[Tensor, dict[int, Tensor]]:
        """Feature tensor plus {tap index: activation} for the configured taps."""
        if x.data.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(
                f"feature extractor expects [B,{self.in_channels},H,W], got {x.shape}")
        self._check_params(params)
        taps: dict[int, Tensor] = {}
        h = x
        for i in range(1, len(self.conv_channels) + 1):
            z = ad.conv2d(h, params[f"conv{i}.weight"], params[f"conv{i}.bias"], padding=1)
            if trace is not None:
                trace[f"F.conv{i}.pre"] = z
            h = ad.relu(z)
            if i in self.tap_layers:
                taps[i] = h
            if i % self.pool_every == 0:
                if trace is not None:
                    trace[f"F.pool{i}.pre"] = h
                h = ad.max_pool2d(h, 2)
        return h, taps

    def _check_params(self, params: ParamSet) -> None:
        expected = self.param_shapes()
        if params.names() != [n for n, _ in expected]:
            raise ParamMismatchError("feature extractor received a foreign ParamSet")
        for name, shape in expected:
            if params[name].shape != shape:
                raise ParamMismatchError(
                    f"{name}: expected shape {shape}, got {params[name].shape}")


class MetaLearner:
    """Small fully connected head mapping flattened features to P(live)."""

    def __init__(self, in_features: int, hidden: int = 32):
        self.in_features = in_features
        self.hidden = hidden

    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        return [("fc1.weight", (self.hidden, self.in_features)),
                ("fc1.bias", (self.hidden,)),
                ("fc2.weight", (1, self.hidden)),
                ("fc2.bias", (1,))]

    def init_params(self, rng: np.random.Generator) -> ParamSet:
        out = []
        for name, shape in self.param_shapes():
            if name.endswith("weight"):
                out.append((name, Tensor(_he_uniform(rng, shape, shape[1]), requires_grad=True)))
            else:
                out.append((name, Tensor(np.zeros(shape), requires_grad=True)))
        return ParamSet(out)

    def forward(self, params: ParamSet, features: Tensor,
                trace: dict[str, Tensor] | None = None) -> Tensor:
        """Per-sample probabilities in (0,1), evaluated at the supplied params."""
        self._check_params(params)
        x = ad.flatten(features) if features.data.ndim > 2 else features
        if x.shape[1] != self.in_features:
            raise ShapeError(
                f"classifier head expects {self.in_features} features, got {x.shape[1]}")
        z1 = ad.linear(x, params["fc1.weight"], params["fc1.bias"])
        if trace is not None:
            trace["M.fc1.pre"] = z1
        h = ad.relu(z1)
        logit = ad.linear(h, params["fc2.weight"], params["fc2.bias"])
        return ad.sigmoid(ad.reshape(logit, (x.shape[0],)))

    def _check_params(self, params: ParamSet) -> None:
        expected = self.param_shapes()
        if params.names() != [n for n, _ in expected]:
            raise ParamMismatchError("classifier head received a foreign ParamSet")
        for name, shape in expected:
            if params[name].shape != shape:
                raise ParamMismatchError(
                    f"{name}: expected shape {shape}, got {params[name].shape}")


class DepthEstimator:
    """Conv head regressing a depth map from the feature tensor.

    Upsamples the feature grid (side in_hw) to depth_size with nearest
    2x stages between convs; depth_size must be in_hw times a power of two.
    The final conv output is the tappable depth map.
    """

    def __init__(self, in_channels: int, in_hw: int, depth_size: int = 16,
                 widths: tuple[int, ...] = (32, 16)):
        if depth_size % in_hw:
            raise ValueError(f"depth size {depth_size} not a multiple of feature side {in_hw}")
        factor = depth_size // in_hw
        if factor & (factor - 1):
            raise ValueError(f"depth size / feature side must be a power of two, got {factor}")
        self.n_upsamples = factor.bit_length() - 1
        if self.n_upsamples > len(widths):
            raise ValueError(
                f"need at least {self.n_upsamples} conv stages for x{factor} upsampling")
        self.in_channels = in_channels
        self.in_hw = in_hw
        self.depth_size = depth_size
        self.widths = tuple(widths)

    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        shapes = []
        prev = self.in_channels
        for i, ch in enumerate(self.widths, start=1):
            shapes.append((f"conv{i}.weight", (ch, prev, 3, 3)))
            shapes.append((f"conv{i}.bias", (ch,)))
            prev = ch
        shapes.append(("out.weight", (1, prev, 3, 3)))
        shapes.append(("out.bias", (1,)))
        return shapes

    def init_params(self, rng: np.random.Generator) -> ParamSet:
        out = []
        for name, shape in self.param_shapes():
            if name.endswith("weight"):
                fan_in = shape[1] * shape[2] * shape[3]
                out.append((name, Tensor(_he_uniform(rng, shape, fan_in), requires_grad=True)))
            else:
                out.append((name, Tensor(np.zeros(shape), requires_grad=True)))
        return ParamSet(out)

    def forward(self, params: ParamSet, features: Tensor,
                trace: dict[str, Tensor] | None = None) -> Tensor:
        """Depth map [B,1,d,d]; doubles as the style tap of this network."""
        if features.data.ndim != 4 or features.shape[1] != self.in_channels \
                or features.shape[2] != self.in_hw or features.shape[3] != self.in_hw:
            raise ShapeError(
                f"depth estimator expects [B,{self.in_channels},{self.in_hw},{self.in_hw}], "
                f"got {features.shape}")
        self._check_params(params)
        h = features
        for i in range(1, len(self.widths) + 1):
            z = ad.conv2d(h, params[f"conv{i}.weight"], params[f"conv{i}.bias"], padding=1)
            if trace is not None:
                trace[f"D.conv{i}.pre"] = z
            h = ad.relu(z)
            if i <= self.n_upsamples:
                h = ad.upsample_nearest(h, 2)
        return ad.conv2d(h, params["out.weight"], params["out.bias"], padding=1)

    def _check_params(self, params: ParamSet) -> None:
        expected = self.param_shapes()
        if params.names() != [n for n, _ in expected]:
            raise ParamMismatchError("depth estimator received a foreign ParamSet")
        for name, shape in expected:
            if params[name].shape != shape:
                raise ParamMismatchError(
                    f"{name}: expected shape {shape}, got {params[name].shape}")


@dataclass
class ModelParams:
    """The three named parameter collections."""

    feature: ParamSet
    meta: ParamSet
    depth: ParamSet

    def clone(self) -> "ModelParams":
        return ModelParams(self.feature.clone(), self.meta.clone(), self.depth.clone())

    def zero_grad(self) -> None:
        self.feature.zero_grad()
        self.meta.zero_grad()
        self.depth.zero_grad()

    def checksum(self) -> str:
        h = hashlib.sha256()
        for ps in (self.feature, self.meta, self.depth):
            h.update(ps.checksum().encode())
        return h.hexdigest()


@dataclass
class Networks:
    """Architecture bundle; parameters are created separately and passed in."""

    feature_extractor: FeatureExtractor
    meta_learner: MetaLearner
    depth_estimator: DepthEstimator

    @classmethod
    def build(cls, image_size: int = 32, in_channels: int = 6,
              conv_channels: tuple[int, ...] = (16, 16, 16, 32, 32, 32, 64, 64, 64),
              pool_every: int = 3, tap_layers: tuple[int, ...] = (5, 9),
              meta_hidden: int = 32, depth_size: int = 16,
              depth_widths: tuple[int, ...] = (32, 16)) -> "Networks":
        fe = FeatureExtractor(in_channels, conv_channels, pool_every, tap_layers)
        c, h, w = fe.out_shape(image_size)
        if h < 1:
            raise ValueError(f"image size {image_size} too small for {fe.n_pools()} pools")
        ml = MetaLearner(in_features=c * h * w, hidden=meta_hidden)
        de = DepthEstimator(in_channels=c, in_hw=h, depth_size=depth_size, widths=depth_widths)
        return cls(fe, ml, de)

    def init_params(self, seed: int) -> ModelParams:
        ss = np.random.SeedSequence(seed)
        rf, rm, rd = (np.random.default_rng(s) for s in ss.spawn(3))
        return ModelParams(self.feature_extractor.init_params(rf),
                           self.meta_learner.init_params(rm),
                           self.depth_estimator.init_params(rd))


def architecture_hash(params: ModelParams) -> str:
    """Hash of the ordered (set, name, shape) structure, values excluded."""
    h = hashlib.sha256()
    for set_name, ps in (("feature", params.feature), ("meta", params.meta),
                         ("depth", params.depth)):
        for name, t in ps.items():
            h.update(f"{set_name}/{name}:{t.shape}".encode())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# checkpoint archive: params.bin (raw little-endian float64) + manifest.json

_CHECKPOINT_EPOCH = (1980, 1, 1, 0, 0, 0)  # fixed zip timestamp for byte-stable files


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, params: ModelParams, *, seed: int,
                    config: Mapping[str, object] | None = None,
                    extra: Mapping[str, object] | None = None) -> None:
    sets = [("feature", params.feature), ("meta", params.meta), ("depth", params.depth)]
    blob = io.BytesIO()
    tensors = []
    offset = 0
    for set_name, ps in sets:
        for name, t in ps.items():
            raw = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
            tensors.append({"set": set_name, "name": name,
                            "shape": list(t.shape), "offset": offset})
            blob.write(raw)
            offset += len(raw)
    manifest = {
        "format_version": 1,
        "architecture_hash": architecture_hash(params),
        "seed": int(seed),
        "config": dict(config) if config else {},
        "tensors": tensors,
    }
    if extra:
        manifest.update(extra)
    payload = json.dumps(manifest, sort_keys=True, indent=1).encode()
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, data in (("manifest.json", payload), ("params.bin", blob.getvalue())):
            info = zipfile.ZipInfo(name, date_time=_CHECKPOINT_EPOCH)
            info.external_attr = 0o600 << 16
            zf.writestr(info, data)


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    with zipfile.ZipFile(path, "r") as zf:
        manifest = json.loads(zf.read("manifest.json"))
        raw = zf.read("params.bin")
    sets: dict[str, list[tuple[str, Tensor]]] = {"feature": [], "meta": [], "depth": []}
    for ent in manifest["tensors"]:
        shape = tuple(ent["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = ent["offset"]
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=start).reshape(shape)
        sets[ent["set"]].append((ent["name"], Tensor(arr.copy(), requires_grad=True)))
    params = ModelParams(ParamSet(sets["feature"]), ParamSet(sets["meta"]),
                         ParamSet(sets["depth"]))
    if architecture_hash(params) != manifest["architecture_hash"]:
        raise CheckpointError("checkpoint manifest does not match its own tensor layout")
    return params, manifest
