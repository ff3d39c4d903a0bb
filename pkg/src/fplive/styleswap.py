"""Sample-level style swapping.

An image's "style" is its per-channel mean and (population) standard
deviation. Swapping re-normalises each image's content to its partner's
statistics. Partners are only ever drawn from the same class, since the
style of live and spoof captures is itself discriminative.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import RngStream

EPS = 1e-5


@dataclass(frozen=True)
class StyleStats:
    mean: np.ndarray  # [C]
    std: np.ndarray  # [C], floored at EPS


def _chw(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim == 2:
        return x[None]
    if x.ndim != 3:
        raise ValueError(f"expected an image [C,H,W] or [H,W], got shape {x.shape}")
    return x


def compute_stats(x: np.ndarray, eps: float = EPS) -> StyleStats:
    x = _chw(x)
    if x.shape[1] * x.shape[2] < 2:
        raise ValueError("style statistics need at least two pixels per channel")
    flat = x.reshape(x.shape[0], -1).astype(np.float64)
    return StyleStats(flat.mean(axis=1), np.maximum(flat.std(axis=1), eps))


def restyle(x: np.ndarray, src: StyleStats, dst: StyleStats) -> np.ndarray:
    x = _chw(x)
    out = (x - src.mean[:, None, None]) / src.std[:, None, None] * dst.std[:, None, None] + dst.mean[:, None, None]
    return out.astype(x.dtype, copy=False)


def style_swap(a: np.ndarray, b: np.ndarray, eps: float = EPS) -> tuple[np.ndarray, np.ndarray]:
    """Give ``a`` the statistics of ``b`` and vice versa. Output is not clamped."""
    if np.shape(a) != np.shape(b):
        raise ValueError(f"style_swap shape mismatch {np.shape(a)} vs {np.shape(b)}")
    squeeze = np.ndim(a) == 2
    sa, sb = compute_stats(a, eps), compute_stats(b, eps)
    a2, b2 = restyle(a, sa, sb), restyle(b, sb, sa)
    if squeeze:
        return a2[0], b2[0]
    return a2, b2


def batch_style_swap(
    batch: np.ndarray, labels: np.ndarray, p: float, rng: RngStream, eps: float = EPS
) -> tuple[np.ndarray, list[tuple[int, int]]]:
    """Swap styles between random same-label pairs in a batch.

    Samples are visited in random order; each still-unpaired sample starts a
    swap with probability ``p`` and picks a partner uniformly among the
    remaining unpaired samples of its label. Returns the new batch and the
    pairing log.
    """
    labels = np.asarray(labels)
    out = np.array(batch, copy=True)
    if len(out) == 0:
        raise ValueError("empty batch")
    free = np.ones(len(out), dtype=bool)
    pairs: list[tuple[int, int]] = []
    for i in rng.permutation(len(out)):
        i = int(i)
        if not free[i]:
            continue
        if rng.random() >= p:
            continue
        cands = np.flatnonzero(free & (labels == labels[i]))
        cands = cands[cands != i]
        if len(cands) == 0:
            continue
        j = int(cands[rng.integers(len(cands))])
        out[i], out[j] = style_swap(batch[i], batch[j], eps)
        free[i] = free[j] = False
        pairs.append((i, j))
    return out, pairs
