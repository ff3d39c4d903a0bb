"""Integrated match + liveness recognizer.

Query images are contrast-normalised and cut into an overlapping patch
grid. Each patch yields Harris keypoints with 32-bin gradient-orientation
descriptors that are matched against the same grid cell of the enrolled
template. Three scores come out of a comparison:

* match: top-k mean of per-patch match scores,
* compare-liveness: a logistic classifier over statistics of the matched
  descriptor pairs, averaged over patches,
* normal-liveness: P(live) of the CNN (or 3-member ensemble) on the query.

They are fused by a weighted mean and gated by two thresholds.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from .nn import LivenessModel, atomic_write, extract_feature

DESC_LEN = 32
COMPARE_DIM = 16


class QualityError(ValueError):
    """No usable fingerprint content."""


@dataclass(frozen=True)
class PatchGrid:
    rows: int = 3
    cols: int = 3
    overlap: float = 0.25

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1 or not 0.0 <= self.overlap < 1.0:
            raise ValueError(f"invalid patch grid {self}")

    def same_layout(self, other: PatchGrid) -> bool:
        """Equality at template-file precision (overlap is stored as f32)."""
        return (self.rows, self.cols, np.float32(self.overlap)) == (other.rows, other.cols, np.float32(other.overlap))

    def boxes(self, h: int, w: int) -> list[tuple[int, int, int, int, int, int]]:
        """(row, col, y0, x0, ph, pw) for every patch; the grid covers the image."""
        ph = math.ceil(h / (self.rows - (self.rows - 1) * self.overlap))
        pw = math.ceil(w / (self.cols - (self.cols - 1) * self.overlap))
        if ph > h or pw > w or ph < 1 or pw < 1:
            raise ValueError(f"image {h}x{w} smaller than one patch")
        ys = np.rint(np.linspace(0, h - ph, self.rows)).astype(int) if self.rows > 1 else [0]
        xs = np.rint(np.linspace(0, w - pw, self.cols)).astype(int) if self.cols > 1 else [0]
        return [(r, c, int(y), int(x), ph, pw) for r, y in enumerate(ys) for c, x in enumerate(xs)]


@dataclass
class Patch:
    row: int
    col: int
    y0: int
    x0: int
    data: np.ndarray


@dataclass
class Keypoint:
    y: float
    x: float
    theta: float  # [0, pi)
    desc: np.ndarray  # [32], unit L2 norm


@dataclass
class RecognizerConfig:
    grid: PatchGrid = field(default_factory=PatchGrid)
    max_keypoints: int = 16
    nms_radius: int = 3
    ratio: float = 0.8
    harris_rel: float = 0.01
    weights: tuple[float, float, float] = (0.4, 0.3, 0.3)
    tau_match: float = 0.0
    tau_im: float = 0.0


# ------------------------------------------------------------ preprocess


def preprocess(image: np.ndarray, block: int = 16, floor: float = 1e-2) -> tuple[np.ndarray, bool]:
    """Local zero-mean/unit-variance normalisation over ``block`` windows,
    clamped to [-3, 3] and mapped to [0, 1]. Returns ``(image, low_quality)``."""
    x = np.asarray(image, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("preprocess expects a 2-D grayscale image")
    if x.std() < 1e-3:
        return np.full(x.shape, 0.5, np.float32), True
    mu = ndimage.uniform_filter(x, block, mode="reflect")
    var = ndimage.uniform_filter(x * x, block, mode="reflect") - mu * mu
    sd = np.sqrt(np.maximum(var, 0.0))
    z = (x - mu) / np.maximum(sd, floor)
    out = (np.clip(z, -3.0, 3.0) + 3.0) / 6.0
    low = bool(sd.max() < floor)
    return out.astype(np.float32), low


def split_patches(image: np.ndarray, grid: PatchGrid) -> list[Patch]:
    h, w = image.shape
    return [Patch(r, c, y, x, image[y : y + ph, x : x + pw]) for r, c, y, x, ph, pw in grid.boxes(h, w)]


# ------------------------------------------------------------- keypoints


def _gradients(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(img, dtype=np.float64)
    return ndimage.sobel(x, axis=1, mode="reflect"), ndimage.sobel(x, axis=0, mode="reflect")


def harris_response(img: np.ndarray, k: float = 0.04, sigma: float = 1.0) -> np.ndarray:
    gx, gy = _gradients(img)
    sxx = ndimage.gaussian_filter(gx * gx, sigma)
    syy = ndimage.gaussian_filter(gy * gy, sigma)
    sxy = ndimage.gaussian_filter(gx * gy, sigma)
    return sxx * syy - sxy * sxy - k * (sxx + syy) ** 2


def describe(gx: np.ndarray, gy: np.ndarray, y: int, x: int, half: int = 4) -> np.ndarray | None:
    """2x2 spatial cells x 8 orientation bins over a (2*half+1)^2 window,
    magnitude weighted, L2-normalised. None for a gradient-free window."""
    wx = gx[y - half : y + half + 1, x - half : x + half + 1]
    wy = gy[y - half : y + half + 1, x - half : x + half + 1]
    mag = np.hypot(wx, wy)
    ang = np.mod(np.arctan2(wy, wx), 2 * np.pi)
    obin = np.minimum((ang / (2 * np.pi) * 8).astype(int), 7)
    size = 2 * half + 1
    cell = (np.arange(size) > half).astype(int)  # centre row/col joins the first cell
    cy, cx = np.meshgrid(cell, cell, indexing="ij")
    idx = (cy * 2 + cx) * 8 + obin
    hist = np.bincount(idx.ravel(), weights=mag.ravel(), minlength=DESC_LEN)
    norm = np.linalg.norm(hist)
    if norm < 1e-9:
        return None
    return (hist / norm).astype(np.float32)


def extract_keypoints(
    patch: np.ndarray, max_keypoints: int = 16, nms_radius: int = 3, rel_thresh: float = 0.01
) -> list[Keypoint]:
    """Top-K Harris maxima (non-max suppressed) with orientation descriptors."""
    img = np.asarray(patch, dtype=np.float64)
    half = 4
    if min(img.shape) < 3:
        return []
    resp = harris_response(img)
    peak = resp.max()
    if peak <= 1e-9:
        return []
    local_max = resp == ndimage.maximum_filter(resp, size=2 * nms_radius + 1, mode="reflect")
    ys, xs = np.nonzero(local_max & (resp > rel_thresh * peak))
    order = np.argsort(-resp[ys, xs], kind="stable")
    gx, gy = _gradients(img)
    sxx = ndimage.gaussian_filter(gx * gx, 1.5)
    syy = ndimage.gaussian_filter(gy * gy, 1.5)
    sxy = ndimage.gaussian_filter(gx * gy, 1.5)
    # descriptor windows may overhang the patch edge; mirror the gradients
    pgx, pgy = np.pad(gx, half, mode="symmetric"), np.pad(gy, half, mode="symmetric")
    out: list[Keypoint] = []
    for i in order:
        y, x = int(ys[i]), int(xs[i])
        d = describe(pgx, pgy, y + half, x + half, half)
        if d is None:
            continue
        # ridge direction is perpendicular to the dominant gradient
        theta = np.mod(0.5 * np.arctan2(2 * sxy[y, x], sxx[y, x] - syy[y, x]) + np.pi / 2, np.pi)
        out.append(Keypoint(float(y), float(x), float(theta), d))
        if len(out) >= max_keypoints:
            break
    return out


def _desc_matrix(kps: Sequence[Keypoint]) -> np.ndarray:
    if not kps:
        return np.zeros((0, DESC_LEN), np.float32)
    return np.stack([k.desc for k in kps]).astype(np.float64)


def match_patch(query: Sequence[Keypoint], template: Sequence[Keypoint], ratio: float = 0.8):
    """Mutual-nearest matching with a ratio test.

    score = (#accepted / #query keypoints) * mean cosine of accepted pairs.
    Returns ``(score, pairs)`` with pairs as ``(qi, ti, cosine)``.
    """
    q, t = _desc_matrix(query), _desc_matrix(template)
    if len(q) == 0 or len(t) == 0:
        return 0.0, []
    if q.shape[1] != t.shape[1]:
        raise ValueError("descriptor lengths differ")
    cos = np.clip(q @ t.T, -1.0, 1.0)
    dist = np.sqrt(np.maximum(2.0 - 2.0 * cos, 0.0))
    best_t = dist.argmin(axis=1)
    best_q = dist.argmin(axis=0)
    pairs = []
    for qi, ti in enumerate(best_t):
        if best_q[ti] != qi:
            continue
        row = dist[qi]
        if len(row) > 1:
            second = np.partition(row, 1)[1]
            if not row[ti] < ratio * second:
                continue
        pairs.append((qi, int(ti), float(cos[qi, ti])))
    if not pairs:
        return 0.0, []
    score = len(pairs) / max(len(q), 1) * float(np.mean([c for _, _, c in pairs]))
    return float(np.clip(score, 0.0, 1.0)), pairs


def aggregate_patches(match_scores: Sequence[float], compare_scores: Sequence[float]) -> tuple[float, float]:
    """Top-ceil(n/2) mean of match scores; plain mean of compare-liveness."""
    m = np.asarray(match_scores, dtype=np.float64)
    c = np.asarray(compare_scores, dtype=np.float64)
    if len(m) == 0:
        raise QualityError("no usable patches")
    k = math.ceil(len(m) / 2)
    top = np.sort(m)[::-1][:k]
    return float(top.mean()), float(c.mean())


# ------------------------------------------------------- compare liveness


def comparison_features(
    query: Sequence[Keypoint], template: Sequence[Keypoint], pairs: Sequence[tuple[int, int, float]]
) -> np.ndarray:
    """16 statistics of matched descriptor pairs.

    [mean|d|, max|d|, std|d|, median|d|, mean cos, std cos, min cos,
    match fraction, 8-bin cosine histogram over [0, 1]].
    """
    if not pairs:
        return np.zeros(COMPARE_DIM)
    diffs = np.abs(np.stack([query[qi].desc.astype(np.float64) - template[ti].desc for qi, ti, _ in pairs]))
    cos = np.array([c for _, _, c in pairs])
    hist = np.histogram(np.clip(cos, 0.0, 1.0), bins=8, range=(0.0, 1.0))[0] / len(cos)
    stats = [
        diffs.mean(), diffs.max(), diffs.std(), np.median(diffs),
        cos.mean(), cos.std(), cos.min(), len(pairs) / max(len(query), 1),
    ]
    return np.concatenate([stats, hist])


@dataclass
class LogisticClassifier:
    """L2-regularised logistic regression fitted by Newton's method on
    standardised features."""

    weights: np.ndarray = field(default_factory=lambda: np.zeros(COMPARE_DIM))
    bias: float = 0.0
    mean: np.ndarray = field(default_factory=lambda: np.zeros(COMPARE_DIM))
    scale: np.ndarray = field(default_factory=lambda: np.ones(COMPARE_DIM))
    fitted: bool = False

    def fit(self, x: np.ndarray, y: np.ndarray, l2: float = 1e-2, iters: int = 50) -> LogisticClassifier:
        x = np.asarray(x, np.float64)
        y = np.asarray(y, np.float64)
        self.mean = x.mean(axis=0)
        self.scale = np.where(x.std(axis=0) > 1e-12, x.std(axis=0), 1.0)
        z = np.hstack([(x - self.mean) / self.scale, np.ones((len(x), 1))])
        w = np.zeros(z.shape[1])
        reg = np.full(z.shape[1], l2)
        reg[-1] = 0.0
        for _ in range(iters):
            p = 1.0 / (1.0 + np.exp(-np.clip(z @ w, -30, 30)))
            grad = z.T @ (p - y) + reg * w
            hess = (z * (p * (1 - p))[:, None]).T @ z + np.diag(reg + 1e-9)
            step = np.linalg.solve(hess, grad)
            w -= step
            if np.abs(step).max() < 1e-10:
                break
        self.weights, self.bias, self.fitted = w[:-1], float(w[-1]), True
        return self

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        z = (np.atleast_2d(x) - self.mean) / self.scale @ self.weights + self.bias
        return 1.0 / (1.0 + np.exp(-np.clip(z, -30, 30)))

    def to_dict(self) -> dict:
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> LogisticClassifier:
        return cls(
            np.asarray(d["weights"]), float(d["bias"]), np.asarray(d["mean"]), np.asarray(d["scale"]), bool(d["fitted"])
        )


def compare_liveness_score(
    query: Sequence[Keypoint], template: Sequence[Keypoint], pairs, classifier: LogisticClassifier
) -> tuple[float, bool]:
    """P(live) from matched-pair statistics; ``(0.5, True)`` when nothing matched."""
    if not pairs or not classifier.fitted:
        return 0.5, True
    return float(classifier.predict_proba(comparison_features(query, template, pairs))[0]), False


def embedding(model, image: np.ndarray) -> tuple[np.ndarray, float]:
    """Liveness embedding of one image and its extraction time in ms.
    Ensembles return the mean of their members' embeddings."""
    if isinstance(model, LivenessModel):
        return extract_feature(model, image)
    parts = [extract_feature(m, image) for m in model.members]
    return np.mean([p[0] for p in parts], axis=0).astype(np.float32), float(sum(p[1] for p in parts))


def normal_liveness_score(image: np.ndarray, model) -> float:
    """P(live) of a :class:`LivenessModel` or ensemble on one raw image."""
    return float(model.predict_proba(np.asarray(image, np.float32)[None])[0, 1])


# ---------------------------------------------------------------- fusion


@dataclass(frozen=True)
class IMScore:
    match: float
    compare_liveness: float
    normal_liveness: float
    fused: float
    accept: bool


def fuse_im(
    match: float,
    compare: float,
    normal: float,
    weights: Sequence[float] = (0.4, 0.3, 0.3),
    tau_match: float = 0.0,
    tau_im: float = 0.0,
) -> IMScore:
    """Weighted-mean fusion; accept iff match >= tau_match and fused >= tau_im."""
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (3,) or (w < 0).any() or abs(w.sum() - 1.0) > 1e-9:
        raise ValueError(f"fusion weights must be 3 non-negative numbers summing to 1, got {weights}")
    for v in (match, compare, normal):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"scores must lie in [0,1], got {v}")
    fused = float(w[0] * match + w[1] * compare + w[2] * normal)
    fused = min(max(fused, min(match, compare, normal)), max(match, compare, normal))
    return IMScore(match, compare, normal, fused, bool(match >= tau_match and fused >= tau_im))


# --------------------------------------------------------------- template


@dataclass
class Template:
    template_id: str
    subject: int
    finger: int
    grid: PatchGrid
    patches: list[list[Keypoint]]  # row-major grid cells; empty = unusable
    embedding: np.ndarray

    @property
    def usable(self) -> list[bool]:
        return [len(p) > 0 for p in self.patches]


TEMPLATE_MAGIC = b"FPTM"
TEMPLATE_VERSION = 1


def template_bytes(t: Template) -> bytes:
    buf = io.BytesIO()
    buf.write(TEMPLATE_MAGIC)
    buf.write(struct.pack("<IIIf", TEMPLATE_VERSION, t.grid.rows, t.grid.cols, t.grid.overlap))
    tid = t.template_id.encode()
    buf.write(struct.pack("<I", len(tid)))
    buf.write(tid)
    buf.write(struct.pack("<II", t.subject, t.finger))
    for kps in t.patches:
        buf.write(struct.pack("<I", len(kps)))
        for k in kps:
            buf.write(struct.pack("<fff", k.y, k.x, k.theta))
            buf.write(np.asarray(k.desc, "<f4").tobytes())
    emb = np.asarray(t.embedding, "<f4")
    buf.write(struct.pack("<I", emb.size))
    buf.write(emb.tobytes())
    return buf.getvalue()


def template_from_bytes(blob: bytes) -> Template:
    if blob[:4] != TEMPLATE_MAGIC:
        raise ValueError("not an FPTM template")
    try:
        version, rows, cols, overlap = struct.unpack_from("<IIIf", blob, 4)
        if version != TEMPLATE_VERSION:
            raise ValueError(f"unsupported template version {version}")
        pos = 20
        (n,) = struct.unpack_from("<I", blob, pos)
        tid = blob[pos + 4 : pos + 4 + n].decode()
        pos += 4 + n
        subject, finger = struct.unpack_from("<II", blob, pos)
        pos += 8
        patches = []
        for _ in range(rows * cols):
            (count,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            kps = []
            for _ in range(count):
                y, x, th = struct.unpack_from("<fff", blob, pos)
                desc = np.frombuffer(blob, "<f4", DESC_LEN, pos + 12).astype(np.float32)
                pos += 12 + 4 * DESC_LEN
                kps.append(Keypoint(y, x, th, desc))
            patches.append(kps)
        (d,) = struct.unpack_from("<I", blob, pos)
        emb = np.frombuffer(blob, "<f4", d, pos + 4).astype(np.float32)
    except struct.error as exc:
        raise ValueError("truncated FPTM template") from exc
    return Template(tid, subject, finger, PatchGrid(rows, cols, float(overlap)), patches, emb)


def save_template(t: Template, path) -> None:
    atomic_write(path, template_bytes(t))


def load_template(path) -> Template:
    with open(path, "rb") as fh:
        return template_from_bytes(fh.read())


# ------------------------------------------------------------- recognizer


@dataclass
class Comparison:
    score: IMScore
    patch_match: list[float]
    patch_compare: list[float]
    features: list[np.ndarray]
    low_confidence: bool
    quality_error: str = ""


class Recognizer:
    """Holds the liveness model, the compare-liveness head and thresholds."""

    def __init__(self, liveness_model, config: RecognizerConfig | None = None, classifier: LogisticClassifier | None = None):
        self.model = liveness_model
        self.config = config or RecognizerConfig()
        self.classifier = classifier or LogisticClassifier()

    def keypoints(self, image: np.ndarray) -> tuple[list[list[Keypoint]], bool]:
        pre, low = preprocess(image)
        c = self.config
        kps = [
            extract_keypoints(p.data, c.max_keypoints, c.nms_radius, c.harris_rel)
            for p in split_patches(pre, c.grid)
        ]
        return kps, low

    def enroll(self, images: Sequence[np.ndarray], template_id: str = "", subject: int = 0, finger: int = 0) -> Template:
        """Descriptors from the image with most keypoints; embedding averaged."""
        if not images:
            raise ValueError("enrollment needs at least one image")
        best, best_n, embs = None, -1, []
        for img in images:
            kps, low = self.keypoints(img)
            if low:
                continue
            n = sum(len(k) for k in kps)
            if n > best_n:
                best, best_n = kps, n
            embs.append(embedding(self.model, img)[0])
        if best is None:
            raise QualityError("all enrollment images are low quality")
        emb = np.mean(embs, axis=0).astype(np.float32)
        return Template(template_id, subject, finger, self.config.grid, best, emb)

    def compare(self, image: np.ndarray, template: Template) -> Comparison:
        c = self.config
        if not template.grid.same_layout(c.grid):
            raise ValueError("template grid differs from recognizer grid")
        qkps, low = self.keypoints(image)
        normal = normal_liveness_score(image, self.model)
        if low:
            s = IMScore(0.0, 0.5, normal, 0.0, False)
            return Comparison(s, [], [], [], True, "low-quality query")
        pm, pc, feats, lowconf = [], [], [], False
        for q, t in zip(qkps, template.patches):
            if not t:
                continue
            score, pairs = match_patch(q, t, c.ratio)
            cl, flag = compare_liveness_score(q, t, pairs, self.classifier)
            lowconf |= flag
            pm.append(score)
            pc.append(cl)
            feats.append(comparison_features(q, t, pairs) if pairs else None)
        try:
            match, compare = aggregate_patches(pm, pc)
        except QualityError as exc:
            s = IMScore(0.0, 0.5, normal, 0.0, False)
            return Comparison(s, [], [], [], True, str(exc))
        s = fuse_im(match, compare, normal, c.weights, c.tau_match, c.tau_im)
        return Comparison(s, pm, pc, [f for f in feats if f is not None], lowconf)

    def fit_compare_classifier(self, comparisons: Sequence[tuple[np.ndarray, Template, bool]]) -> None:
        """Fit the compare-liveness head on (query, template, is_live) trials;
        one feature row per matched patch."""
        xs, ys = [], []
        for img, tmpl, live in comparisons:
            for f in self.compare(img, tmpl).features:
                xs.append(f)
                ys.append(1.0 if live else 0.0)
        if len(set(ys)) < 2:
            raise ValueError("compare-liveness training needs both live and attack comparisons")
        self.classifier = LogisticClassifier().fit(np.array(xs), np.array(ys))

    def state(self) -> dict:
        c = self.config
        return {
            "grid": asdict(c.grid),
            "max_keypoints": c.max_keypoints,
            "nms_radius": c.nms_radius,
            "ratio": c.ratio,
            "harris_rel": c.harris_rel,
            "weights": list(c.weights),
            "tau_match": c.tau_match,
            "tau_im": c.tau_im,
            "classifier": self.classifier.to_dict(),
        }

    def save_state(self, path) -> None:
        atomic_write(path, (json.dumps(self.state(), indent=2, sort_keys=True) + "\n").encode())

    @classmethod
    def from_state(cls, state: dict, liveness_model) -> Recognizer:
        cfg = RecognizerConfig(
            PatchGrid(**state["grid"]),
            state["max_keypoints"],
            state["nms_radius"],
            state["ratio"],
            state["harris_rel"],
            tuple(state["weights"]),
            state["tau_match"],
            state["tau_im"],
        )
        return cls(liveness_model, cfg, LogisticClassifier.from_dict(state["classifier"]))
