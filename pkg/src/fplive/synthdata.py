"""Synthetic fingerprint identities, live/spoof impressions and datasets.

A finger is a smooth orientation field plus a master ridge map grown from
seeded noise by repeated oriented Gabor filtering (so the ridge phase is
consistent along the flow). Impressions are 64x64 crops of the master map
with a small random placement offset, pores, material artifacts and a
scanner transfer function.
"""

from __future__ import annotations

import csv
import hashlib
import io
import math
import os
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import ndimage

from .data import ImageSample, ManifestRow, write_manifest, write_pgm
from .nn import atomic_write
from .tensor import RngStream, derive_seed

IMAGE_SIZE = 64
MARGIN = 6  # max placement offset of an impression inside the master map
N_ORIENT = 16


@dataclass(frozen=True)
class ScannerProfile:
    name: str
    gain: float = 1.0  # [0.5, 1.5]
    offset: float = 0.0  # [-0.3, 0.3]
    blur: float = 0.5  # gaussian sigma, [0, 1.5]
    noise: float = 0.02  # [0, 0.1]
    vignette: float = 0.1  # [0, 0.5]

    def __post_init__(self):
        checks = {
            "gain": (0.5, 1.5),
            "offset": (-0.3, 0.3),
            "blur": (0.0, 1.5),
            "noise": (0.0, 0.1),
            "vignette": (0.0, 0.5),
        }
        for k, (lo, hi) in checks.items():
            v = getattr(self, k)
            if not lo <= v <= hi:
                raise ValueError(f"scanner {self.name}: {k}={v} outside [{lo}, {hi}]")


@dataclass(frozen=True)
class MaterialProfile:
    kind: str  # live | silica-like | gelatin-like | latex-like
    artifact_amp: float = 0.0  # high-frequency banding amplitude
    compression: float = 0.0  # ridge contrast compression in [0, 1)
    pore_dropout: float = 0.0  # fraction of pores lost in the mould

    def __post_init__(self):
        if self.kind == "live" and self.artifact_amp != 0.0:
            raise ValueError("live material has no artifacts")
        if not 0.0 <= self.compression < 1.0 or not 0.0 <= self.pore_dropout <= 1.0:
            raise ValueError(f"material {self.kind}: parameters out of range")

    @property
    def live(self) -> bool:
        return self.kind == "live"


SCANNERS = {
    "A": ScannerProfile("A", gain=1.0, offset=0.0, blur=0.4, noise=0.02, vignette=0.05),
    "B": ScannerProfile("B", gain=0.7, offset=0.15, blur=0.6, noise=0.03, vignette=0.25),
    "C": ScannerProfile("C", gain=1.2, offset=-0.1, blur=0.3, noise=0.015, vignette=0.15),
}
MATERIALS = {
    "live": MaterialProfile("live"),
    "silica-like": MaterialProfile("silica-like", artifact_amp=0.16, compression=0.25, pore_dropout=0.6),
    "gelatin-like": MaterialProfile("gelatin-like", artifact_amp=0.12, compression=0.35, pore_dropout=0.8),
    "latex-like": MaterialProfile("latex-like", artifact_amp=0.20, compression=0.15, pore_dropout=0.5),
}


@dataclass(frozen=True, eq=False)
class FingerIdentity:
    seed: int
    orientation: np.ndarray  # [S,S] ridge direction in [0, pi)
    ridges: np.ndarray  # [S,S] master ridge map in [-1, 1]
    pores: np.ndarray  # [P,2] pore centres (row, col) on ridge crests
    freq: float = 0.11


def orientation_field(seed: int, size: int, smooth: float = 9.0) -> np.ndarray:
    rng = RngStream(seed, 1)
    u = ndimage.gaussian_filter(rng.normal(size=(size, size)), smooth, mode="wrap")
    v = ndimage.gaussian_filter(rng.normal(size=(size, size)), smooth, mode="wrap")
    theta = 0.5 * np.arctan2(v, u)
    return np.mod(theta, np.pi)


@lru_cache(maxsize=8)
def _gabor_bank_fft(freq: float, size: int, n: int = N_ORIENT) -> np.ndarray:
    """FFTs of an oriented Gabor bank embedded on a ``size`` x ``size`` torus."""
    r = int(math.ceil(1.2 / freq))
    y, x = np.mgrid[-r : r + 1, -r : r + 1].astype(np.float64)
    sigma = 0.45 / freq
    bank = np.zeros((n, size, size))
    for k in range(n):
        t = np.pi * k / n
        # ridge runs along t, so intensity oscillates along its normal
        across = -x * np.sin(t) + y * np.cos(t)
        g = np.exp(-(x * x + y * y) / (2 * sigma * sigma)) * np.cos(2 * np.pi * freq * across)
        g -= g.mean()
        bank[k][np.ix_(np.arange(-r, r + 1) % size, np.arange(-r, r + 1) % size)] = g
    return np.fft.rfft2(bank)


def grow_ridges(theta: np.ndarray, freq: float, rng: RngStream, iterations: int = 8) -> np.ndarray:
    """Grow ridges from white noise; returns a map in [-1, 1]."""
    size = theta.shape[0]
    img = rng.normal(size=theta.shape)
    bins = np.rint(theta / np.pi * N_ORIENT).astype(int) % N_ORIENT
    used = np.unique(bins)
    bank = _gabor_bank_fft(round(freq, 4), size)[used]
    for it in range(iterations):
        resp = np.fft.irfft2(np.fft.rfft2(img)[None] * bank, s=theta.shape)
        out = np.zeros_like(img)
        for j, k in enumerate(used):
            sel = bins == k
            out[sel] = resp[j][sel]
        z = out / (out.std() + 1e-12)
        # saturate while growing, keep the final pass close to sinusoidal
        img = np.tanh(2.5 * z) if it < iterations - 1 else np.tanh(0.8 * z)
    return img / np.abs(img).max()


def synth_finger(identity_seed: int, freq: float = 0.11, size: int = IMAGE_SIZE + 2 * MARGIN) -> FingerIdentity:
    theta = orientation_field(identity_seed, size)
    ridges = grow_ridges(theta, freq, RngStream(identity_seed, 2))
    crest = np.argwhere(ridges > 0.8)
    rng = RngStream(identity_seed, 3)
    n_pores = min(len(crest), int(0.012 * size * size))
    pores = crest[np.sort(rng.choice(len(crest), n_pores, replace=False))] if n_pores else np.zeros((0, 2), int)
    return FingerIdentity(identity_seed, theta, ridges, pores, freq)


def _pore_map(shape, pores: np.ndarray) -> np.ndarray:
    m = np.zeros(shape)
    if len(pores):
        m[pores[:, 0], pores[:, 1]] = 1.0
    return ndimage.gaussian_filter(m, 0.7) * 3.0


def render_impression(
    finger: FingerIdentity,
    scanner: ScannerProfile,
    material: MaterialProfile,
    rng: RngStream,
    meta: dict | None = None,
) -> ImageSample:
    """One 64x64 capture of ``finger`` through ``material`` on ``scanner``."""
    size = IMAGE_SIZE
    dy, dx = (int(v) for v in rng.integers(-MARGIN // 2, MARGIN // 2 + 1, size=2))
    y0, x0 = MARGIN + dy, MARGIN + dx
    keep = rng.random(len(finger.pores)) >= material.pore_dropout
    base = finger.ridges - _pore_map(finger.ridges.shape, finger.pores[keep])
    base = base[y0 : y0 + size, x0 : x0 + size]
    pressure = rng.uniform(-0.15, 0.15)
    base = (base + pressure) * (1.0 - material.compression)
    if material.artifact_amp > 0:
        phi = rng.uniform(0, np.pi)
        f_hi = rng.uniform(0.25, 0.33)
        psi = rng.uniform(0, 2 * np.pi)
        yy, xx = np.mgrid[0:size, 0:size]
        base = base + material.artifact_amp * np.sin(2 * np.pi * f_hi * (xx * np.cos(phi) + yy * np.sin(phi)) + psi)
        base = base + 0.5 * material.artifact_amp * rng.normal(size=base.shape)
    img = 0.5 - 0.4 * np.tanh(1.2 * base)  # ridges dark
    if scanner.blur > 0:
        img = ndimage.gaussian_filter(img, scanner.blur, mode="nearest")
    yy, xx = np.mgrid[0:size, 0:size]
    r2 = ((yy - (size - 1) / 2) ** 2 + (xx - (size - 1) / 2) ** 2) / ((size / 2) ** 2)
    img = (scanner.gain * img + scanner.offset) * (1.0 - scanner.vignette * r2)
    img = img + scanner.noise * rng.normal(size=img.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    info = {"material": material.kind, "scanner": scanner.name, "finger_seed": finger.seed, "offset": (dy, dx)}
    info.update(meta or {})
    return ImageSample(img, material.live, info)


def band_energy_ratio(image: np.ndarray, lo: float = 0.2, hi: float = 0.5) -> float:
    """Fraction of non-DC spectral energy with radial frequency in [lo, hi]."""
    x = np.asarray(image, np.float64)
    spec = np.abs(np.fft.fft2(x - x.mean())) ** 2
    fy = np.fft.fftfreq(x.shape[0])[:, None]
    fx = np.fft.fftfreq(x.shape[1])[None, :]
    r = np.sqrt(fx * fx + fy * fy)
    total = spec.sum()
    if total <= 0:
        return 0.0
    return float(spec[(r >= lo) & (r <= hi)].sum() / total)


# ------------------------------------------------------------------ dataset


@dataclass
class DatasetConfig:
    subjects: int = 25
    fingers: int = 2
    scanners: tuple[str, ...] = ("A", "B")
    materials: tuple[str, ...] = ("live", "silica-like", "gelatin-like", "latex-like")
    live_impressions: int = 8
    spoof_impressions: int = 4
    split: str = "random"  # random | subject | scanner
    holdout_scanner: str = ""  # scanner mode: defaults to the last scanner
    val_fraction: float = 1.0 / 3.0
    freq: float = 0.11

    def __post_init__(self):
        self.scanners = tuple(self.scanners)
        self.materials = tuple(self.materials)
        if min(self.subjects, self.fingers, self.live_impressions, self.spoof_impressions) < 1:
            raise ValueError("dataset counts must be >= 1")
        for s in self.scanners:
            if s not in SCANNERS:
                raise ValueError(f"unknown scanner {s!r}")
        for m in self.materials:
            if m not in MATERIALS:
                raise ValueError(f"unknown material {m!r}")
        if self.split not in ("random", "subject", "scanner"):
            raise ValueError(f"unknown split mode {self.split!r}")
        if self.split == "scanner" and len(self.scanners) < 2:
            raise ValueError("scanner-holdout split needs at least two scanners")

    def impressions(self, material: str) -> int:
        return self.live_impressions if material == "live" else self.spoof_impressions

    @property
    def total(self) -> int:
        per_finger = sum(self.impressions(m) for m in self.materials)
        return self.subjects * self.fingers * len(self.scanners) * per_finger


@dataclass
class Plan:
    """Which (subject, finger, scanner, material, k) renders to which index."""

    entries: list[tuple[int, int, str, str, int]] = field(default_factory=list)


def plan_dataset(cfg: DatasetConfig) -> Plan:
    plan = Plan()
    for s in range(cfg.subjects):
        for f in range(cfg.fingers):
            for sc in cfg.scanners:
                for m in cfg.materials:
                    for k in range(cfg.impressions(m)):
                        plan.entries.append((s, f, sc, m, k))
    return plan


def assign_splits(cfg: DatasetConfig, plan: Plan, seed: int) -> list[str]:
    """2/3 train, 1/3 val by default; ``n_val = floor(N * val_fraction)``."""
    n = len(plan.entries)
    rng = RngStream(seed, 2**32)
    split = ["train"] * n
    if cfg.split == "random":
        n_val = int(math.floor(n * cfg.val_fraction))
        for i in rng.permutation(n)[:n_val]:
            split[int(i)] = "val"
    elif cfg.split == "subject":
        n_val = int(math.floor(cfg.subjects * cfg.val_fraction))
        held = {int(s) for s in rng.permutation(cfg.subjects)[:n_val]}
        split = ["val" if e[0] in held else "train" for e in plan.entries]
    else:
        held = cfg.holdout_scanner or cfg.scanners[-1]
        split = ["val" if e[2] == held else "train" for e in plan.entries]
    return split


def finger_seed(seed: int, subject: int, finger: int) -> int:
    return derive_seed(seed, 7, subject, finger)


def build_dataset(cfg: DatasetConfig, seed: int, out_dir: str | os.PathLike) -> list[ManifestRow]:
    """Render every impression as PGM under ``out_dir/images`` and write
    ``out_dir/manifest.csv``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    plan = plan_dataset(cfg)
    splits = assign_splits(cfg, plan, seed)
    fingers: dict[tuple[int, int], FingerIdentity] = {}
    rows = []
    for idx, (s, f, sc, m, k) in enumerate(plan.entries):
        if (s, f) not in fingers:
            fingers[(s, f)] = synth_finger(finger_seed(seed, s, f), cfg.freq)
        sample = render_impression(fingers[(s, f)], SCANNERS[sc], MATERIALS[m], RngStream(seed, idx))
        rel = f"images/{idx:06d}_s{s}_f{f}_{sc}_{m}_{k}.pgm"
        write_pgm(out / rel, sample.image)
        rows.append(ManifestRow(rel, "live" if m == "live" else "spoof", m, sc, s, f, splits[idx]))
    write_manifest(out / "manifest.csv", rows)
    return rows


def manifest_hash(path: str | os.PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ------------------------------------------------------------------ trials


def build_trials(rows: list[ManifestRow], n_per_type: int, seed: int, split: str = "val"):
    """Recognition protocol over one split.

    Each finger is enrolled from its first live impression in ``split``;
    genuine queries are its other live impressions, attacks are spoof
    impressions of the same finger, impostors are live impressions of other
    fingers. Returns ``(enroll, trials)`` as lists of tuples.
    """
    rng = RngStream(seed, 2**33)
    pool = [r for r in rows if r.split == split]
    by_finger: dict[tuple[int, int], list[ManifestRow]] = {}
    for r in pool:
        by_finger.setdefault((r.subject, r.finger), []).append(r)
    enroll = {}
    for key, rs in sorted(by_finger.items()):
        live = [r for r in rs if r.live]
        if live:
            enroll[key] = live[0]
    tid = lambda key: f"s{key[0]}f{key[1]}"  # noqa: E731
    genuine, attack, impostor = [], [], []
    for key, tmpl in enroll.items():
        for r in by_finger[key]:
            if r is tmpl:
                continue
            (genuine if r.live else attack).append((r.path, tid(key)))
    live_all = [r for r in pool if r.live and r is not enroll.get((r.subject, r.finger))]
    keys = list(enroll)
    if len(keys) > 1 and live_all:
        for _ in range(n_per_type):
            r = live_all[int(rng.integers(len(live_all)))]
            others = [k for k in keys if k != (r.subject, r.finger)]
            impostor.append((r.path, tid(others[int(rng.integers(len(others)))])))

    def pick(items):
        if len(items) <= n_per_type:
            return items
        idx = np.sort(rng.choice(len(items), n_per_type, replace=False))
        return [items[int(i)] for i in idx]

    trials = []
    for kind, items in (("genuine", pick(genuine)), ("impostor", impostor), ("attack", pick(attack))):
        for path, t in items:
            trials.append((f"t{len(trials):05d}", path, t, kind))
    enroll_rows = [(tid(k), r.path) for k, r in enroll.items()]
    return enroll_rows, trials


def write_trials(path, trials) -> None:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["trial_id", "query_path", "template_id", "type"])
    wr.writerows(trials)
    atomic_write(path, buf.getvalue().encode())


def read_trials(path) -> list[tuple[str, str, str, str]]:
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        if header != ["trial_id", "query_path", "template_id", "type"]:
            raise ValueError(f"{path}: bad trial header {header}")
        return [tuple(r) for r in rd]


def write_enroll(path, enroll) -> None:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["template_id", "path"])
    wr.writerows(enroll)
    atomic_write(path, buf.getvalue().encode())


def read_enroll(path) -> list[tuple[str, str]]:
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        if next(rd) != ["template_id", "path"]:
            raise ValueError(f"{path}: bad enrollment header")
        return [tuple(r) for r in rd]
