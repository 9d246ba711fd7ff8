"""Procedural multi-domain live/spoof image generator with depth targets.

Live samples are smooth face-like blobs with a matching depth dome; spoof
samples reuse the rendering with flattened shading plus a domain-specific
print/replay texture and an all-zero depth target. Domain-level capture
differences (color cast, blur, sensor noise) are applied last.
"""

from __future__ import annotations

import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

TEXTURE_FAMILIES = ("moire", "halftone", "flat_patch")


@dataclass(frozen=True)
class DomainSpec:
    domain_id: int
    color_matrix: tuple[tuple[float, float, float], ...]
    blur_sigma: float
    noise_sigma: float
    texture: str
    texture_params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.texture not in TEXTURE_FAMILIES:
            raise ValueError(f"unknown spoof texture family {self.texture!r}")

    def to_dict(self) -> dict:
        return {"domain_id": self.domain_id,
                "color_matrix": [list(row) for row in self.color_matrix],
                "blur_sigma": self.blur_sigma, "noise_sigma": self.noise_sigma,
                "texture": self.texture, "texture_params": dict(self.texture_params)}

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        return cls(domain_id=d["domain_id"],
                   color_matrix=tuple(tuple(r) for r in d["color_matrix"]),
                   blur_sigma=d["blur_sigma"], noise_sigma=d["noise_sigma"],
                   texture=d["texture"], texture_params=dict(d.get("texture_params", {})))


def default_domain_specs() -> list[DomainSpec]:
    """Four capture domains with distinct color casts, optics, and attacks."""
    return [
        DomainSpec(0, ((1.08, 0.04, 0.00), (0.03, 0.97, 0.02), (0.00, 0.03, 0.82)),
                   blur_sigma=0.0, noise_sigma=0.015,
                   texture="moire", texture_params={"freq_lo": 5.0, "freq_hi": 8.0,
                                                    "angle_lo": 0.2, "angle_hi": 0.7}),
        DomainSpec(1, ((0.85, 0.02, 0.04), (0.00, 0.95, 0.03), (0.04, 0.02, 1.12)),
                   blur_sigma=0.5, noise_sigma=0.030,
                   texture="halftone", texture_params={"pitch": 4}),
        DomainSpec(2, ((0.92, 0.05, 0.00), (0.04, 1.10, 0.00), (0.00, 0.05, 0.88)),
                   blur_sigma=0.7, noise_sigma=0.020,
                   texture="flat_patch", texture_params={}),
        DomainSpec(3, ((1.02, 0.00, 0.05), (0.03, 0.82, 0.03), (0.05, 0.00, 1.05)),
                   blur_sigma=0.3, noise_sigma=0.045,
                   texture="moire", texture_params={"freq_lo": 10.0, "freq_hi": 14.0,
                                                    "angle_lo": 1.0, "angle_hi": 1.5}),
    ]


@dataclass
class Sample:
    """One generated record; true_domain is diagnostics-only."""

    sample_id: int
    image: np.ndarray          # [6,H,W]: RGB then HSV, all in [0,1]
    is_live: bool
    depth: np.ndarray          # [1,d,d]; identically zero for spoof
    true_domain: int

    @property
    def y(self) -> int:
        return 1 if self.is_live else 0


@dataclass
class TrainRecord:
    """What the trainer is allowed to see: no generator domain field."""

    sample_id: int
    image: np.ndarray
    y: int                     # 1 = live, 0 = spoof
    depth: np.ndarray


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    """Hexcone RGB->HSV on a [3,H,W] array, hue normalized to [0,1].

    Out-of-range inputs are clamped and reported through a warning.
    """
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise ValueError(f"rgb_to_hsv: expected [3,H,W], got {rgb.shape}")
    n_bad = int(np.sum((rgb < 0.0) | (rgb > 1.0)))
    if n_bad:
        warnings.warn(f"rgb_to_hsv: clamped {n_bad} out-of-range values", stacklevel=2)
        rgb = np.clip(rgb, 0.0, 1.0)
    r, g, b = rgb
    v = rgb.max(axis=0)
    c = v - rgb.min(axis=0)
    s = np.where(v > 0.0, c / np.where(v > 0.0, v, 1.0), 0.0)
    safe_c = np.where(c > 0.0, c, 1.0)
    h = np.where(c == 0.0, 0.0,
                 np.where(v == r, ((g - b) / safe_c) % 6.0,
                          np.where(v == g, (b - r) / safe_c + 2.0,
                                   (r - g) / safe_c + 4.0)))
    return np.stack([h / 6.0, s, v])


def _gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0.0:
        return img
    radius = max(1, int(round(3.0 * sigma)))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (xs / sigma) ** 2)
    kernel /= kernel.sum()
    for axis in (1, 2):
        pad = [(0, 0)] * 3
        pad[axis] = (radius, radius)
        padded = np.pad(img, pad, mode="reflect")
        img = sliding_window_view(padded, 2 * radius + 1, axis=axis) @ kernel
    return img


def _face_geometry(rng: np.random.Generator) -> dict:
    return {"cx": 0.5 + rng.uniform(-0.06, 0.06),
            "cy": 0.5 + rng.uniform(-0.06, 0.06),
            "radius": rng.uniform(0.27, 0.35),
            "skin": np.array([0.72, 0.58, 0.48]) + rng.uniform(-0.05, 0.05, 3),
            "bg": np.array([0.35, 0.38, 0.42]) + rng.uniform(-0.06, 0.06, 3)}


def _render_face(rng: np.random.Generator, H: int, geom: dict,
                 shading_contrast: float) -> np.ndarray:
    yy, xx = np.meshgrid(np.linspace(0, 1, H, endpoint=False), np.linspace(0, 1, H, endpoint=False),
                         indexing="ij")
    r = np.sqrt((xx - geom["cx"]) ** 2 + (yy - geom["cy"]) ** 2) / geom["radius"]
    dome = np.maximum(0.0, 1.0 - r ** 2)
    mask = np.clip((1.0 - r) / 0.08, 0.0, 1.0)
    # spoof prints flatten the 3-D shading; contrast < 1 pulls the dome
    # toward its mid level without moving the mean much
    shading = 0.55 + 0.45 * (0.5 + shading_contrast * (dome - 0.5))
    img = (geom["bg"][:, None, None] * (1.0 + 0.16 * (yy - 0.5)) * (1 - mask)
           + geom["skin"][:, None, None] * shading * mask)
    # eyes and mouth anchor the face shape
    for ex in (-0.35, 0.35):
        er = np.sqrt(((xx - geom["cx"] - ex * geom["radius"]) / 0.13) ** 2
                     + ((yy - geom["cy"] + 0.30 * geom["radius"]) / 0.10) ** 2) / geom["radius"]
        img *= np.where(er < 1.0, 0.45, 1.0)
    mr = np.maximum(np.abs(xx - geom["cx"]) / (0.40 * geom["radius"]),
                    np.abs(yy - geom["cy"] - 0.45 * geom["radius"]) / (0.10 * geom["radius"]))
    img *= np.where(mr < 1.0, 0.60, 1.0)
    return np.clip(img, 0.0, 1.0)


def _depth_dome(H_depth: int, geom: dict) -> np.ndarray:
    yy, xx = np.meshgrid(np.linspace(0, 1, H_depth, endpoint=False),
                         np.linspace(0, 1, H_depth, endpoint=False), indexing="ij")
    r = np.sqrt((xx - geom["cx"]) ** 2 + (yy - geom["cy"]) ** 2) / geom["radius"]
    return np.maximum(0.0, 1.0 - r ** 2)[None, :, :]


def _apply_spoof_texture(img: np.ndarray, spec: DomainSpec,
                         rng: np.random.Generator) -> np.ndarray:
    H = img.shape[1]
    yy, xx = np.meshgrid(np.linspace(0, 1, H, endpoint=False),
                         np.linspace(0, 1, H, endpoint=False), indexing="ij")
    # achromatic reprint grain shared by every attack type: a zero-mean
    # multiplicative speckle, so channel means stay put but local variance
    # rises; this is the texture cue that transfers across attack families
    grain = rng.standard_normal(size=(1, H, H))
    img = img * (1.0 + 0.12 * grain)
    p = spec.texture_params
    if spec.texture == "moire":
        freq = rng.uniform(p.get("freq_lo", 5.0), p.get("freq_hi", 9.0))
        angle = rng.uniform(p.get("angle_lo", 0.0), p.get("angle_hi", np.pi))
        phase = rng.uniform(0, 2 * np.pi)
        pattern = np.sin(2 * np.pi * freq * (np.cos(angle) * xx + np.sin(angle) * yy) + phase)
        img = img * (1.0 + 0.16 * pattern)
    elif spec.texture == "halftone":
        pitch = int(p.get("pitch", 4))
        gx = (xx * H) % pitch - pitch / 2.0
        gy = (yy * H) % pitch - pitch / 2.0
        dots = ((gx ** 2 + gy ** 2) < (0.35 * pitch) ** 2).astype(np.float64)
        pattern = dots - dots.mean()
        pattern /= max(1e-6, np.abs(pattern).max())
        img = img * (1.0 + 0.18 * pattern)
    else:  # flat_patch: specular glare rectangle, as from a glossy print
        pw, ph = rng.uniform(0.30, 0.45), rng.uniform(0.30, 0.45)
        px = rng.uniform(0.05, 0.95 - pw)
        py = rng.uniform(0.05, 0.95 - ph)
        inside = ((xx >= px) & (xx <= px + pw) & (yy >= py) & (yy <= py + ph))
        w = 0.55 * inside
        img = img * (1.0 - w) + 0.88 * w
    return np.clip(img, 0.0, 1.0)


def _render_sample(spec: DomainSpec, rng: np.random.Generator, H: int, d: int,
                   is_live: bool) -> tuple[np.ndarray, np.ndarray]:
    geom = _face_geometry(rng)
    rgb = _render_face(rng, H, geom, shading_contrast=1.0 if is_live else 0.45)
    if is_live:
        depth = _depth_dome(d, geom)
    else:
        rgb = _apply_spoof_texture(rgb, spec, rng)
        depth = np.zeros((1, d, d))
    # capture-domain differences come last
    cast = np.asarray(spec.color_matrix)
    rgb = np.clip(np.einsum("ij,jhw->ihw", cast, rgb), 0.0, 1.0)
    rgb = _gaussian_blur(rgb, spec.blur_sigma)
    rgb = rgb + rng.normal(0.0, spec.noise_sigma, rgb.shape)
    rgb = np.clip(rgb, 0.0, 1.0)
    return np.concatenate([rgb, rgb_to_hsv(rgb)]), depth


def generate(domains: list[DomainSpec], per_domain: int, live_fraction: float,
             H: int = 32, d: int = 16, seed: int = 0, threads: int = 1) -> list[Sample]:
    """Deterministic dataset; per-sample randomness derives from (seed, id)."""
    if per_domain < 2:
        raise ValueError("per_domain must be >= 2")
    if not 0.0 < live_fraction < 1.0:
        raise ValueError("live_fraction must lie strictly between 0 and 1")
    if H < 8:
        raise ValueError("image size below 8 is not renderable")

    jobs = []
    sample_id = 0
    for spec in domains:
        n_live = int(round(per_domain * live_fraction))
        flags = np.array([True] * n_live + [False] * (per_domain - n_live))
        order = np.random.default_rng(
            np.random.SeedSequence([seed, 1_000_003 + spec.domain_id])).permutation(per_domain)
        for flag in flags[order]:
            jobs.append((sample_id, spec, bool(flag)))
            sample_id += 1

    def build(job):
        sid, spec, is_live = job
        rng = np.random.default_rng(np.random.SeedSequence([seed, sid]))
        image, depth = _render_sample(spec, rng, H, d, is_live)
        return Sample(sample_id=sid, image=image, is_live=is_live,
                      depth=depth, true_domain=spec.domain_id)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            samples = list(pool.map(build, jobs))
    else:
        samples = [build(j) for j in jobs]
    return samples


def split_leave_one_domain_out(samples: list[Sample],
                               test_domain: int) -> tuple[list[TrainRecord], list[Sample]]:
    """Disjoint exhaustive split; the training view drops true_domain."""
    known = {s.true_domain for s in samples}
    if test_domain not in known:
        raise ValueError(f"unknown domain id {test_domain}; dataset has {sorted(known)}")
    train = [TrainRecord(s.sample_id, s.image, s.y, s.depth)
             for s in samples if s.true_domain != test_domain]
    test = [s for s in samples if s.true_domain == test_domain]
    return train, test


# ---------------------------------------------------------------------------
# on-disk layout: manifest.json plus either one blob or per-sample files


def save_dataset(samples: list[Sample], specs: list[DomainSpec], seed: int,
                 out_dir, storage: str = "blob", extra: dict | None = None) -> Path:
    if storage not in ("blob", "files"):
        raise ValueError(f"storage must be 'blob' or 'files', got {storage!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    H = samples[0].image.shape[1]
    d = samples[0].depth.shape[1]
    entries = []
    offset = 0
    floats_per_record = samples[0].image.size + samples[0].depth.size
    blob = out / "samples.bin"
    if storage == "files":
        (out / "samples").mkdir(exist_ok=True)
    with open(blob, "wb") if storage == "blob" else _null_ctx() as fh:
        for s in samples:
            raw = np.concatenate([s.image.reshape(-1), s.depth.reshape(-1)])
            raw = np.ascontiguousarray(raw, dtype="<f8").tobytes()
            ent = {"id": s.sample_id, "class": "live" if s.is_live else "spoof",
                   "true_domain": s.true_domain}
            if storage == "blob":
                ent["offset"] = offset
                fh.write(raw)
                offset += len(raw)
            else:
                ent["file"] = f"samples/{s.sample_id}.bin"
                (out / ent["file"]).write_bytes(raw)
            entries.append(ent)
    manifest = {"format_version": 1, "seed": int(seed), "storage": storage,
                "image_size": H, "depth_size": d,
                "floats_per_record": floats_per_record,
                "per_domain_counts": _per_domain_counts(samples),
                "domains": [sp.to_dict() for sp in specs],
                "samples": entries}
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
    return out


class _null_ctx:
    def __enter__(self):
        return None

    def __exit__(self, *exc):
        return False


def _per_domain_counts(samples: list[Sample]) -> dict[str, int]:
    counts: dict[str, int] = {}
    for s in samples:
        counts[str(s.true_domain)] = counts.get(str(s.true_domain), 0) + 1
    return counts


def load_dataset(path) -> tuple[list[Sample], dict]:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    H = manifest["image_size"]
    d = manifest["depth_size"]
    img_n = 6 * H * H
    blob = (path / "samples.bin").read_bytes() if manifest["storage"] == "blob" else None
    samples = []
    for ent in manifest["samples"]:
        if blob is not None:
            raw = np.frombuffer(blob, dtype="<f8", count=img_n + d * d,
                                offset=ent["offset"])
        else:
            raw = np.frombuffer((path / ent["file"]).read_bytes(), dtype="<f8")
        samples.append(Sample(sample_id=ent["id"],
                              image=raw[:img_n].reshape(6, H, H).copy(),
                              is_live=ent["class"] == "live",
                              depth=raw[img_n:].reshape(1, d, d).copy(),
                              true_domain=ent["true_domain"]))
    return samples, manifest
