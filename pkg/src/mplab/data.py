"""Synthetic multi-domain genuine/spoof images, PNG+CSV manifests and balanced batch sampling.

Genuine images are procedural face-like renders. Spoof images start from a
genuine render and pick up one or more recapture artefacts (moire grating,
specular highlight, colour banding, extra blur). Every domain then applies
its own photometric nuisance (per-channel gain, gamma, blur, sensor noise).
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

MANIFEST_NAME = "manifest.csv"
MANIFEST_HEADER = ("path", "label", "domain")
GENUINE, SPOOF = 1, 0


class ManifestError(ValueError):
    pass


@dataclass
class DomainSpec:
    name: str
    seed: int
    gain: tuple = (1.0, 1.0, 1.0)
    gamma: float = 1.0
    noise_sigma: float = 0.0
    blur_radius: int = 0
    resolution: int = 64

    def __post_init__(self) -> None:
        self.gain = tuple(float(g) for g in self.gain)
        if len(self.gain) != 3 or not all(0.6 <= g <= 1.4 for g in self.gain):
            raise ValueError(f"gain must be three values in [0.6, 1.4], got {self.gain}")
        if not 0.7 <= self.gamma <= 1.5:
            raise ValueError(f"gamma must lie in [0.7, 1.5], got {self.gamma}")
        if not 0.0 <= self.noise_sigma <= 0.08:
            raise ValueError(f"noise_sigma must lie in [0, 0.08], got {self.noise_sigma}")
        if self.blur_radius not in (0, 1, 2):
            raise ValueError(f"blur_radius must be 0, 1 or 2, got {self.blur_radius}")
        if self.resolution < 8:
            raise ValueError("resolution must be at least 8")

    @classmethod
    def from_seed(cls, name: str, seed: int, resolution: int = 64) -> "DomainSpec":
        """Draw the photometric parameters of a domain from its seed."""
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xD0]))
        return cls(
            name=name,
            seed=int(seed),
            gain=tuple(np.round(rng.uniform(0.6, 1.4, 3), 4)),
            gamma=float(np.round(rng.uniform(0.7, 1.5), 4)),
            noise_sigma=float(np.round(rng.uniform(0.0, 0.08), 4)),
            blur_radius=int(rng.integers(0, 3)),
            resolution=resolution,
        )


def make_domain_specs(n: int, seed: int, resolution: int = 64, min_gain_gap: float = 0.2) -> list[DomainSpec]:
    """``n`` domains named d0..d{n-1} whose colour gains differ pairwise.

    Candidate seeds are drawn until every pair differs by at least
    ``min_gain_gap`` in some channel gain, which keeps the domains
    separable by colour statistics alone.
    """
    ss = np.random.SeedSequence(int(seed))
    rng = np.random.default_rng(ss)
    specs: list[DomainSpec] = []
    tries = 0
    while len(specs) < n:
        cand = DomainSpec.from_seed(f"d{len(specs)}", int(rng.integers(0, 2**31 - 1)), resolution)
        tries += 1
        gap_ok = all(max(abs(a - b) for a, b in zip(cand.gain, s.gain)) >= min_gain_gap for s in specs)
        if gap_ok or tries > 1000:
            specs.append(cand)
    return specs


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    label: int  # 1 genuine, 0 spoof
    domain: str
    id: str = ""


@dataclass
class DomainData:
    """All images of one domain stacked for fast batching."""

    name: str
    images: np.ndarray  # (n, 3, H, W) float32
    labels: np.ndarray  # (n,) int64

    def __len__(self) -> int:
        return len(self.labels)

    def indices(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.labels == label)

    @classmethod
    def from_samples(cls, name: str, samples: Sequence[Sample]) -> "DomainData":
        imgs = np.stack([s.image for s in samples]).astype(np.float32)
        labels = np.array([s.label for s in samples], dtype=np.int64)
        return cls(name, imgs, labels)


@dataclass
class DomainBatch:
    images: np.ndarray
    labels: np.ndarray
    domains: np.ndarray
    composition: dict = field(default_factory=dict)  # {domain: {label: count}}


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def _grid(res: int) -> tuple[np.ndarray, np.ndarray]:
    c = (np.arange(res) + 0.5) / res * 2.0 - 1.0
    return np.meshgrid(c, c, indexing="ij")


def render_genuine(rng: np.random.Generator, res: int) -> np.ndarray:
    """Face-like render: radial-shaded ellipse on a gradient background plus blob features."""
    yy, xx = _grid(res)
    bg = rng.uniform(0.15, 0.85, 3)
    tilt = rng.uniform(-0.15, 0.15, 2)
    img = (bg[:, None, None] + tilt[0] * xx + tilt[1] * yy).astype(np.float64)
    cx, cy = rng.uniform(-0.1, 0.1, 2)
    a, b = rng.uniform(0.5, 0.7), rng.uniform(0.65, 0.85)
    r2 = ((xx - cx) / a) ** 2 + ((yy - cy) / b) ** 2
    mask = 1.0 / (1.0 + np.exp(-12.0 * (1.0 - r2)))
    skin = rng.uniform((0.55, 0.35, 0.25), (0.95, 0.75, 0.6))
    shade = np.clip(1.0 - 0.35 * r2, 0.0, 1.0)
    face = skin[:, None, None] * shade
    for _ in range(int(rng.integers(3, 7))):
        bx, by = cx + rng.uniform(-0.6, 0.6) * a, cy + rng.uniform(-0.6, 0.6) * b
        sig = rng.uniform(0.05, 0.15)
        amp = rng.uniform(-0.35, 0.2)
        face = face + amp * np.exp(-((xx - bx) ** 2 + (yy - by) ** 2) / (2 * sig * sig))
    # Fine skin texture: present on live captures, attenuated by most recapture cues.
    tex = gaussian_filter(rng.standard_normal((res, res)), 0.7)
    face = face + 0.08 * tex / (tex.std() + 1e-9)
    img = img * (1.0 - mask) + face * mask
    return np.clip(img, 0.0, 1.0)


SPOOF_CUES = ("moire", "specular", "banding", "blur")


def apply_spoof(img: np.ndarray, rng: np.random.Generator, cues: Optional[Iterable[str]] = None) -> np.ndarray:
    """Degrade a genuine render with recapture artefacts drawn per sample."""
    res = img.shape[-1]
    if cues is None:
        pick = rng.random(len(SPOOF_CUES)) < 0.5
        if not pick.any():
            pick[rng.integers(len(SPOOF_CUES))] = True
        cues = [c for c, p in zip(SPOOF_CUES, pick) if p]
    out = img.astype(np.float64, copy=True)
    yy, xx = _grid(res)
    for cue in cues:
        if cue == "moire":
            # 0.10-0.20 cycles per pixel, coarse enough to survive the domain blur
            freq = rng.uniform(0.10, 0.20) * res / 2.0
            ang = rng.uniform(0, np.pi)
            amp = rng.uniform(0.15, 0.3)
            phase = rng.uniform(0, 2 * np.pi, 3)
            wave = np.sin(2 * np.pi * freq * (xx * np.cos(ang) + yy * np.sin(ang))[None] + phase[:, None, None])
            out = out + amp * wave
        elif cue == "specular":
            bx, by = rng.uniform(-0.6, 0.6, 2)
            sig = rng.uniform(0.08, 0.2)
            strength = rng.uniform(0.6, 0.95)
            g = np.exp(-((xx - bx) ** 2 + (yy - by) ** 2) / (2 * sig * sig))
            out = out + (1.0 - out) * strength * g[None]
        elif cue == "banding":
            out = np.round(np.clip(out, 0, 1) * 15.0) / 15.0
        elif cue == "blur":
            out = gaussian_filter(out, (0, rng.uniform(1.2, 2.0), rng.uniform(1.2, 2.0)))
        else:
            raise ValueError(f"unknown spoof cue {cue!r}")
    return np.clip(out, 0.0, 1.0)


def apply_domain(img: np.ndarray, spec: DomainSpec, rng: np.random.Generator) -> np.ndarray:
    out = np.clip(img, 0.0, 1.0) ** spec.gamma
    out = out * np.asarray(spec.gain)[:, None, None]
    if spec.blur_radius:
        out = gaussian_filter(out, (0, spec.blur_radius * 0.6, spec.blur_radius * 0.6))
    if spec.noise_sigma:
        out = out + rng.normal(0.0, spec.noise_sigma, out.shape)
    return np.clip(out, 0.0, 1.0)


def _sample_seed(spec: DomainSpec, seed: int, index: int, label: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([spec.seed, int(seed), index, label])


def generate_domain(spec: DomainSpec, n_per_class: int, seed: int = 0, with_bases: bool = False):
    """Render ``n_per_class`` genuine and ``n_per_class`` spoof samples for one domain.

    Output is a pure function of (spec, n_per_class, seed). With
    ``with_bases`` the domain-processed genuine render underlying each spoof
    sample (same noise draw) is returned alongside, in sample order (None for
    genuine samples).
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    res = spec.resolution
    samples: list[Sample] = []
    bases: list[Optional[np.ndarray]] = []
    for i in range(n_per_class):
        for label in (GENUINE, SPOOF):
            content, spoof_rng, noise_seq = _sample_seed(spec, seed, i, label).spawn(3)
            base = render_genuine(np.random.default_rng(content), res)
            raw = base if label == GENUINE else apply_spoof(base, np.random.default_rng(spoof_rng))
            img = apply_domain(raw, spec, np.random.default_rng(noise_seq)).astype(np.float32)
            samples.append(Sample(img, label, spec.name, f"{2 * i + (1 - label):05d}"))
            if with_bases:
                bases.append(
                    None if label == GENUINE
                    else apply_domain(base, spec, np.random.default_rng(noise_seq)).astype(np.float32)
                )
    return (samples, bases) if with_bases else samples


def generate_domains(specs: Sequence[DomainSpec], n_per_class: int, seed: int = 0) -> dict[str, DomainData]:
    return {s.name: DomainData.from_samples(s.name, generate_domain(s, n_per_class, seed)) for s in specs}


# ---------------------------------------------------------------------------
# Balanced sampling
# ---------------------------------------------------------------------------


class BalancedSampler:
    """Draws ``per_class`` genuine + ``per_class`` spoof images from each requested domain.

    Each (domain, class) pool is consumed without replacement and reshuffled
    once exhausted, so every image is seen once per pool epoch.
    """

    def __init__(self, domains: dict[str, DomainData], rng: np.random.Generator, per_class: int = 4) -> None:
        if per_class < 1:
            raise ValueError("per_class must be >= 1")
        self.domains = domains
        self.rng = rng
        self.per_class = per_class
        self._queues: dict[tuple[str, int], list[int]] = {}
        for name, d in domains.items():
            for label in (GENUINE, SPOOF):
                if len(d.indices(label)) < per_class:
                    raise ValueError(
                        f"domain {name!r} has {len(d.indices(label))} samples of class {label}; need {per_class}"
                    )

    def _take(self, name: str, label: int, k: int) -> np.ndarray:
        key = (name, label)
        q = self._queues.get(key, [])
        if len(q) < k:
            # Top up with a fresh permutation; leftover indices are served first.
            q = q + list(self.rng.permutation(self.domains[name].indices(label)))
        taken, self._queues[key] = q[:k], q[k:]
        return np.asarray(taken, dtype=np.int64)

    def sample(self, names: Sequence[str]) -> DomainBatch:
        if not names:
            raise ValueError("need at least one domain to sample from")
        imgs, labels, doms, comp = [], [], [], {}
        for name in names:
            if name not in self.domains:
                raise KeyError(f"unknown domain {name!r}")
            d = self.domains[name]
            comp[name] = {}
            for label in (GENUINE, SPOOF):
                idx = self._take(name, label, self.per_class)
                imgs.append(d.images[idx])
                labels.append(d.labels[idx])
                doms.extend([name] * len(idx))
                comp[name][label] = len(idx)
        return DomainBatch(np.concatenate(imgs), np.concatenate(labels), np.array(doms), comp)

    def state(self) -> dict:
        return {f"{k[0]}|{k[1]}": [int(i) for i in v] for k, v in self._queues.items()}

    def load_state(self, state: dict) -> None:
        self._queues = {(k.rsplit("|", 1)[0], int(k.rsplit("|", 1)[1])): list(v) for k, v in state.items()}


def sample_balanced_batch(domains: dict[str, DomainData], names: Sequence[str], rng: np.random.Generator,
                          per_class: int = 4) -> DomainBatch:
    """One balanced batch without sampler state carried between calls."""
    return BalancedSampler({n: domains[n] for n in names}, rng, per_class).sample(names)


# ---------------------------------------------------------------------------
# PNG + CSV manifests
# ---------------------------------------------------------------------------


def _to_png(image: np.ndarray, path: Path) -> None:
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 3:
        arr = arr.transpose(1, 2, 0)
    Image.fromarray(arr).save(path, format="PNG")


def save_png(image: np.ndarray, path) -> None:
    """Write a (3, H, W) or (H, W) array in [0, 1] as an 8-bit PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _to_png(image, path)


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1).copy()


def write_manifest(samples: Sequence[Sample], root) -> Path:
    """Write ``<root>/<domain>/<id>.png`` for every sample and ``<root>/manifest.csv``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, s in enumerate(samples):
        sid = s.id or f"{i:05d}"
        rel = f"{s.domain}/{sid}.png"
        save_png(s.image, root / rel)
        rows.append((rel, int(s.label), s.domain))
    tmp = root / (MANIFEST_NAME + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        w.writerows(rows)
    os.replace(tmp, root / MANIFEST_NAME)
    return root / MANIFEST_NAME


@dataclass
class ManifestEntry:
    path: str
    label: int
    domain: str


class ManifestDataset:
    """Rows of a manifest; images are read (and cached) on first access."""

    def __init__(self, root: Path, entries: list[ManifestEntry]) -> None:
        self.root = root
        self.entries = entries
        self._cache: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.entries)

    def domain_names(self) -> list[str]:
        return list(dict.fromkeys(e.domain for e in self.entries))

    def image(self, i: int) -> np.ndarray:
        if i not in self._cache:
            e = self.entries[i]
            p = self.root / e.path
            try:
                self._cache[i] = read_png(p)
            except (OSError, ValueError) as exc:
                raise ManifestError(f"row {i + 2}: cannot read image {e.path!r}: {exc}") from exc
        return self._cache[i]

    def samples(self) -> list[Sample]:
        return [Sample(self.image(i), e.label, e.domain, Path(e.path).stem) for i, e in enumerate(self.entries)]

    def to_domains(self) -> dict[str, DomainData]:
        out = {}
        for name in self.domain_names():
            rows = [i for i, e in enumerate(self.entries) if e.domain == name]
            imgs = np.stack([self.image(i) for i in rows])
            labels = np.array([self.entries[i].label for i in rows], dtype=np.int64)
            out[name] = DomainData(name, imgs, labels)
        return out


def load_manifest(root) -> ManifestDataset:
    """Parse ``<root>/manifest.csv``; row numbers in errors count the header as row 1."""
    root = Path(root)
    path = root / MANIFEST_NAME if root.is_dir() else root
    if path.is_file() and not root.is_dir():
        root = path.parent
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    entries = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != MANIFEST_HEADER:
            raise ManifestError(f"row 1: expected header {','.join(MANIFEST_HEADER)!r}, got {header!r}")
        for rowno, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise ManifestError(f"row {rowno}: expected 3 fields, got {len(row)}: {row!r}")
            rel, label, domain = row
            if label not in ("0", "1"):
                raise ManifestError(f"row {rowno}: label must be 0 or 1, got {label!r}")
            if not rel or not domain:
                raise ManifestError(f"row {rowno}: empty path or domain")
            entries.append(ManifestEntry(rel, int(label), domain))
    return ManifestDataset(root, entries)
