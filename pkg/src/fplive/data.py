"""Image samples, PGM files, manifests and the FPLV feature format."""

from __future__ import annotations

import csv
import io
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .nn import atomic_write

MANIFEST_FIELDS = ["path", "label", "material", "scanner", "subject", "finger", "split"]
SPLITS = ("train", "val", "test")


class DataError(Exception):
    """Malformed or missing dataset files."""


@dataclass(frozen=True)
class ImageSample:
    image: np.ndarray  # [H, W] float32 in [0, 1]
    live: bool
    meta: dict = field(default_factory=dict)

    def with_image(self, image: np.ndarray) -> ImageSample:
        return replace(self, image=image)

    @property
    def label(self) -> int:
        return 1 if self.live else 0


# -------------------------------------------------------------------- PGM


def to_u8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image, np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path: str | os.PathLike, image: np.ndarray) -> None:
    """Binary P5 PGM, maxval 255. Float images are read as [0,1]."""
    img = image if image.dtype == np.uint8 else to_u8(image)
    h, w = img.shape
    atomic_write(path, f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    """Return the image as float32 in [0,1]."""
    with open(path, "rb") as fh:
        blob = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        tokens.append(blob[start:pos])
    pos += 1
    if tokens[0] != b"P5" or int(tokens[3]) != 255:
        raise DataError(f"{path}: only P5 PGM with maxval 255 is supported")
    w, h = int(tokens[1]), int(tokens[2])
    raw = np.frombuffer(blob, np.uint8, w * h, pos) if len(blob) - pos >= w * h else None
    if raw is None:
        raise DataError(f"{path}: truncated PGM")
    return (raw.reshape(h, w).astype(np.float32)) / np.float32(255.0)


# --------------------------------------------------------------- manifest


@dataclass(frozen=True)
class ManifestRow:
    path: str
    label: str  # "live" | "spoof"
    material: str
    scanner: str
    subject: int
    finger: int
    split: str

    @property
    def live(self) -> bool:
        return self.label == "live"


def write_manifest(path: str | os.PathLike, rows: list[ManifestRow]) -> None:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(MANIFEST_FIELDS)
    for r in rows:
        wr.writerow([r.path, r.label, r.material, r.scanner, r.subject, r.finger, r.split])
    atomic_write(path, buf.getvalue().encode())


def read_manifest(path: str | os.PathLike) -> list[ManifestRow]:
    try:
        with open(path, newline="") as fh:
            rd = csv.DictReader(fh)
            if rd.fieldnames != MANIFEST_FIELDS:
                raise DataError(f"{path}: manifest header must be {','.join(MANIFEST_FIELDS)}")
            rows = [
                ManifestRow(r["path"], r["label"], r["material"], r["scanner"], int(r["subject"]), int(r["finger"]), r["split"])
                for r in rd
            ]
    except FileNotFoundError as exc:
        raise DataError(f"manifest not found: {path}") from exc
    for r in rows:
        if r.label not in ("live", "spoof") or r.split not in SPLITS:
            raise DataError(f"{path}: bad row {r}")
    return rows


def load_split(manifest_path: str | os.PathLike, split: str) -> tuple[np.ndarray, np.ndarray, list[ManifestRow]]:
    """Images [N,H,W] float32, labels [N] (1 = live) and rows of one split."""
    root = Path(manifest_path).parent
    rows = [r for r in read_manifest(manifest_path) if r.split == split]
    if not rows:
        raise DataError(f"{manifest_path}: split {split!r} is empty")
    images = np.stack([read_pgm(root / r.path) for r in rows])
    labels = np.array([1 if r.live else 0 for r in rows], dtype=np.int64)
    return images, labels, rows


# ------------------------------------------------------------------- FPLV

FPLV_MAGIC = b"FPLV"
FPLV_VERSION = 1


def write_features(path: str | os.PathLike, vectors: np.ndarray) -> None:
    v = np.asarray(vectors, dtype="<f4")
    if v.ndim != 2:
        raise ValueError("feature array must be 2-D [count, dim]")
    head = FPLV_MAGIC + struct.pack("<III", FPLV_VERSION, v.shape[0], v.shape[1])
    atomic_write(path, head + v.tobytes())


def read_features(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:4] != FPLV_MAGIC:
        raise DataError(f"{path}: not an FPLV feature file")
    version, count, dim = struct.unpack_from("<III", blob, 4)
    if version != FPLV_VERSION:
        raise DataError(f"{path}: unsupported FPLV version {version}")
    need = 16 + 4 * count * dim
    if len(blob) < need:
        raise DataError(f"{path}: truncated feature file ({len(blob)} of {need} bytes)")
    return np.frombuffer(blob, "<f4", count * dim, 16).reshape(count, dim).astype(np.float32)
