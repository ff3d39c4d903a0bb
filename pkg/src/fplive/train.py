"""Losses, mutual learning, distillation, ensembling and training recipes."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .augment import SIMPLE, STRONG, FmixConfig, apply_pipeline, build_ops, fmix_batch
from .data import ImageSample, load_split
from .metrics import PadTrialSet, auc
from .nn import LivenessModel, atomic_write, build_model, load_checkpoint, save_checkpoint
from .styleswap import batch_style_swap
from .tensor import RngStream, Tensor, derive_seed

log = logging.getLogger(__name__)

KL_EPS = 1e-12
EPOCH_LOG_FIELDS = ["epoch", "train_loss", "train_auc", "val_auc", "wall_ms"]


@dataclass
class LossValue:
    """A differentiable total plus its named, unweighted components."""

    total: Tensor
    components: dict[str, float]
    weights: dict[str, float]

    @property
    def value(self) -> float:
        return float(np.asarray(self.total.data).item())

    def check(self, tol: float = 1e-6) -> None:
        expect = sum(self.weights[k] * v for k, v in self.components.items())
        if abs(expect - self.value) > tol * max(1.0, abs(expect)):
            raise AssertionError(f"loss bookkeeping off: {expect} vs {self.value}")


def _targets(target, n: int) -> np.ndarray:
    t = np.asarray(target)
    if t.ndim == 1:
        if t.shape[0] != n or not np.isin(t, (0, 1)).all():
            raise ValueError("hard targets must be 0/1 labels, one per row")
        return np.eye(2)[t.astype(int)]
    if t.shape != (n, 2):
        raise ValueError(f"soft targets must be [N,2], got {t.shape}")
    if (t < 0).any() or np.abs(t.sum(axis=1) - 1.0).max() > 1e-6:
        raise ValueError("soft targets must be non-negative and sum to 1")
    return t


def ce_from_logprobs(logp: Tensor, target) -> Tensor:
    t = _targets(target, logp.shape[0])
    return T.scale(T.sum(T.mul(logp, Tensor(t, dtype=logp.dtype))), -1.0 / logp.shape[0])


def cross_entropy(logits: Tensor, target) -> LossValue:
    """Mean of ``-sum_k t_k log softmax(logits)_k`` over the batch."""
    loss = ce_from_logprobs(T.log_softmax(logits), target)
    return LossValue(loss, {"ce": float(loss.data)}, {"ce": 1.0})


def kl_div(p, q, eps: float = KL_EPS):
    """KL(p || q) for probability vectors (last axis). Zeros are clamped to
    ``eps`` inside the log only."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    for name, v in (("p", p), ("q", q)):
        if (v < 0).any() or np.abs(v.sum(axis=-1) - 1.0).max() > 1e-6:
            raise ValueError(f"{name} is not a probability distribution")
    out = (p * (np.log(np.maximum(p, eps)) - np.log(np.maximum(q, eps)))).sum(axis=-1)
    out = np.maximum(out, 0.0)
    return float(out) if out.ndim == 0 else out


def kl_from_logprobs(const_logp: np.ndarray, logq: Tensor) -> Tensor:
    """Batch-mean KL(p || q) where p = exp(const_logp) carries no gradient.

    With ``const_logp`` produced by the same op as ``logq`` the value is
    exactly zero for identical inputs.
    """
    p = np.exp(const_logp).astype(logq.dtype)
    diff = T.sub(Tensor(const_logp, dtype=logq.dtype), logq)
    return T.scale(T.sum(T.mul(Tensor(p, dtype=logq.dtype), diff)), 1.0 / logq.shape[0])


def peer_losses(
    logits: Sequence[Tensor],
    target,
    teacher_logits=None,
    temperature: float = 5.0,
    alpha: float = 0.5,
) -> list[LossValue]:
    """Loss of each of one or two peers.

    Every peer pays CE against ``target``. With two peers each also pays
    KL(other || self) toward the other's detached prediction. With a
    teacher the CE weight becomes ``1 - alpha`` and
    ``alpha * T^2 * KL(soft_teacher || soft_self)`` is added.
    """
    if teacher_logits is not None:
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        if not 0.0 <= alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
    logps = [T.log_softmax(z) for z in logits]
    consts = [lp.data.copy() for lp in logps]
    soft_t = None
    if teacher_logits is not None:
        t = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
        soft_t = T.log_softmax(T.scale(Tensor(t, dtype=logits[0].dtype), 1.0 / temperature)).data
    out = []
    for k, (z, lp) in enumerate(zip(logits, logps)):
        ce = ce_from_logprobs(lp, target)
        comps, weights = {"ce": float(ce.data)}, {"ce": 1.0}
        total = ce
        if soft_t is not None:
            kl = kl_from_logprobs(soft_t, T.log_softmax(T.scale(z, 1.0 / temperature)))
            w = alpha * temperature**2
            total = T.add(T.scale(ce, 1.0 - alpha), T.scale(kl, w))
            comps["kl-distill"], weights["kl-distill"], weights["ce"] = float(kl.data), w, 1.0 - alpha
        if len(logits) == 2:
            kl = kl_from_logprobs(consts[1 - k], lp)
            total = T.add(total, kl)
            comps["kl-mutual"], weights["kl-mutual"] = float(kl.data), 1.0
        out.append(LossValue(total, comps, weights))
    return out


def distill_loss(student_logits: Tensor, teacher_logits, target, temperature: float = 5.0, alpha: float = 0.5) -> LossValue:
    """(1 - alpha) * CE(student, y) + alpha * T^2 * KL(soft_teacher || soft_student); teacher is constant."""
    return peer_losses([student_logits], target, teacher_logits, temperature, alpha)[0]


def mutual_losses(logits1: Tensor, logits2: Tensor, target) -> tuple[LossValue, LossValue]:
    """Per-peer CE + KL toward the other peer's detached prediction."""
    l1, l2 = peer_losses([logits1, logits2], target)
    return l1, l2


def mutual_step(
    peer1: LivenessModel, peer2: LivenessModel, images: np.ndarray, target, opt1: T.SGD, opt2: T.SGD
) -> tuple[LossValue, LossValue]:
    """One simultaneous deep-mutual-learning update of both peers."""
    x = Tensor(images[:, None] if images.ndim == 3 else images)
    _, z1 = peer1(x)
    _, z2 = peer2(x)
    l1, l2 = mutual_losses(z1, z2, target)
    l1.total.backward()
    l2.total.backward()
    opt1.step()
    opt2.step()
    return l1, l2


# ---------------------------------------------------------------- ensemble


@dataclass
class EnsembleModel:
    members: list[LivenessModel]
    roles: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.members) != 3:
            raise ValueError(f"an ensemble has exactly 3 members, got {len(self.members)}")
        shapes = {(m.input_shape, m.embed_dim) for m in self.members}
        if len(shapes) != 1:
            raise ValueError("ensemble members disagree on input/embedding shape")

    @property
    def input_shape(self):
        return self.members[0].input_shape

    def predict_proba(self, images: np.ndarray) -> np.ndarray:
        return ensemble_predict(self, images)


def ensemble_predict(ensemble: EnsembleModel, images: np.ndarray) -> np.ndarray:
    """Arithmetic mean of the members' softmax probabilities."""
    probs = [m.predict_proba(images) for m in ensemble.members]
    return np.mean(np.stack([p.astype(np.float64) for p in probs]), axis=0)


# ----------------------------------------------------------------- recipes

RECIPES = ("baseline", "capacity", "strong-aug", "mutual", "style", "distill", "ensemble")
# the ablation ladder; in stacked mode a recipe also uses every technique before it
LADDER = ("baseline", "capacity", "strong-aug", "mutual", "style", "distill", "ensemble")


@dataclass
class Recipe:
    name: str
    preset: str = "small"
    aug: str = "strong"  # simple | strong
    aug_ops: tuple[str, ...] = ()  # empty: the preset list for ``aug``
    aug_ranges: dict = field(default_factory=dict)
    mutual: bool = False
    style: bool = False
    distill: bool = False
    epochs: int = 20
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    style_p: float = 0.5
    aug_p: float = 0.5
    fmix_alpha: float = 1.0
    fmix_decay: float = 3.0
    fmix_p: float = 0.5
    teacher_preset: str = "base"
    temperature: float = 5.0
    alpha: float = 0.5
    embed_dim: int = 192
    stacked: bool = False

    @property
    def run_name(self) -> str:
        """Output directory name; stacked runs live next to standalone ones."""
        return f"{self.name}-stacked" if self.stacked else self.name

    def __post_init__(self):
        if self.name not in RECIPES:
            raise ValueError(f"unknown recipe {self.name!r}; choose from {RECIPES}")
        if self.aug not in ("simple", "strong"):
            raise ValueError(f"aug must be 'simple' or 'strong', got {self.aug!r}")
        self.aug_ops = tuple(self.aug_ops)
        build_ops(self.aug_ops, self.aug_ranges)  # validates kinds and ranges
        if self.epochs < 1 or self.batch_size < 2:
            raise ValueError("need epochs >= 1 and batch_size >= 2")


def make_recipe(name: str, stacked: bool = False, **overrides) -> Recipe:
    """Standalone recipes add one technique on top of strong-aug; stacked
    ones accumulate every technique earlier in the ladder."""
    if name not in RECIPES:
        raise ValueError(f"unknown recipe {name!r}; choose from {RECIPES}")
    flags = dict(preset="small", aug="strong", mutual=False, style=False, distill=False)
    if name == "baseline":
        flags.update(preset="tiny", aug="simple")
    elif name == "capacity":
        flags.update(aug="simple")
    elif stacked:
        rank = LADDER.index(name)
        flags.update(
            mutual=rank >= LADDER.index("mutual") and name != "ensemble",
            style=rank >= LADDER.index("style"),
            distill=rank >= LADDER.index("distill") and name != "ensemble",
        )
    else:
        flags.update(mutual=name == "mutual", style=name == "style", distill=name == "distill")
    flags.update(overrides)
    return Recipe(name=name, stacked=stacked, **flags)


@dataclass
class Dataset:
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray

    @classmethod
    def from_manifest(cls, path) -> Dataset:
        tx, ty, _ = load_split(path, "train")
        vx, vy, _ = load_split(path, "val")
        return cls(tx, ty, vx, vy)


@dataclass
class TrainedArtifacts:
    recipe: Recipe
    out_dir: str
    checkpoints: dict[str, str]
    logs: dict[str, list[dict]]
    val_auc: float
    val_scores: np.ndarray
    members: list[str] = field(default_factory=list)
    input_shape: tuple[int, ...] = (1, 64, 64)


def augment_batch(
    images: np.ndarray, labels: np.ndarray, idx: np.ndarray, recipe: Recipe, epoch_seed: int, batch_rng: RngStream
) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample pipeline (stream id = sample index), then style swap and
    FMix at batch level. Returns images [B,H,W] and soft targets [B,2]."""
    ops = build_ops(recipe.aug_ops or (STRONG if recipe.aug == "strong" else SIMPLE), recipe.aug_ranges)
    out = np.empty((len(idx),) + images.shape[1:], dtype=np.float32)
    for j, i in enumerate(idx):
        s = ImageSample(images[i], bool(labels[i]))
        out[j] = apply_pipeline(s, ops, RngStream(epoch_seed, int(i)), recipe.aug_p).image
    y = labels[idx]
    if recipe.style:
        out, _ = batch_style_swap(out, y, recipe.style_p, batch_rng)
    targets = np.eye(2)[y]
    if recipe.aug == "strong":
        out, targets, _ = fmix_batch(out, targets, FmixConfig(recipe.fmix_alpha, recipe.fmix_decay, recipe.fmix_p), batch_rng)
    return out.astype(np.float32), targets


def _safe_auc(scores, labels) -> float:
    labels = np.asarray(labels, bool)
    if labels.all() or not labels.any():
        return float("nan")
    return auc(PadTrialSet(scores, labels))


def _fit(
    recipe: Recipe,
    data: Dataset,
    models: list[LivenessModel],
    teacher: LivenessModel | None = None,
    progress=None,
) -> list[list[dict]]:
    """Train one model, or two mutual peers, under ``recipe``."""
    opts = [T.SGD(m.parameters(), recipe.lr, recipe.momentum, recipe.weight_decay) for m in models]
    n = len(data.train_x)
    steps_per_epoch = n // recipe.batch_size if n >= recipe.batch_size else 1
    total_steps = steps_per_epoch * recipe.epochs
    logs: list[list[dict]] = [[] for _ in models]
    step = 0
    for epoch in range(recipe.epochs):
        t0 = time.perf_counter()
        for m in models:
            m.train()
        epoch_seed = derive_seed(recipe.seed, 11, epoch)
        order = RngStream(epoch_seed, 2**40).permutation(n)
        losses = [[] for _ in models]
        tr_scores = [[] for _ in models]
        tr_labels = []
        for b in range(steps_per_epoch):
            idx = order[b * recipe.batch_size : (b + 1) * recipe.batch_size]
            if len(idx) < 2:
                continue
            batch_rng = RngStream(epoch_seed, 2**41 + b)
            xb, tb = augment_batch(data.train_x, data.train_y, idx, recipe, epoch_seed, batch_rng)
            lr = T.cosine_lr(recipe.lr, step, total_steps)
            for o in opts:
                o.lr = lr
            x = Tensor(xb[:, None])
            logits = [m(x)[1] for m in models]
            t_logits = _eval_logits(teacher, xb) if teacher is not None else None
            lvs = peer_losses(logits, tb, t_logits, recipe.temperature, recipe.alpha)
            for k, lv in enumerate(lvs):
                if not math.isfinite(lv.value):
                    raise T.NumericalError(f"non-finite loss at epoch {epoch}, step {b}")
                lv.total.backward()
                losses[k].append(lv.value)
                tr_scores[k].append(T.softmax_np(logits[k].data)[:, 1])
            for o in opts:
                o.step()
            tr_labels.append(data.train_y[idx])
            step += 1
        ylab = np.concatenate(tr_labels) if tr_labels else np.zeros(0)
        for k, m in enumerate(models):
            val_scores = m.predict_proba(data.val_x)[:, 1]
            row = {
                "epoch": epoch + 1,
                "train_loss": float(np.mean(losses[k])) if losses[k] else float("nan"),
                "train_auc": _safe_auc(np.concatenate(tr_scores[k]), ylab) if tr_scores[k] else float("nan"),
                "val_auc": _safe_auc(val_scores, data.val_y),
                "wall_ms": (time.perf_counter() - t0) * 1000.0,
            }
            logs[k].append(row)
        if progress:
            progress(recipe, epoch, [lg[-1] for lg in logs])
        log.info("%s epoch %d: %s", recipe.name, epoch + 1, logs[0][-1])
    return logs


def _eval_logits(model: LivenessModel, xb: np.ndarray) -> np.ndarray:
    was = model.training
    model.eval()
    try:
        _, z = model(Tensor(xb[:, None]))
    finally:
        model.train(was)
    return z.data


def write_epoch_log(path, rows: list[dict]) -> None:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(EPOCH_LOG_FIELDS)
    for r in rows:
        wr.writerow([r["epoch"]] + [repr(float(r[k])) for k in EPOCH_LOG_FIELDS[1:]])
    atomic_write(path, buf.getvalue().encode())


def read_epoch_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        if rd.fieldnames != EPOCH_LOG_FIELDS:
            raise ValueError(f"{path}: bad epoch log header")
        return [{"epoch": int(r["epoch"]), **{k: float(r[k]) for k in EPOCH_LOG_FIELDS[1:]}} for r in rd]


def run_recipe(recipe: Recipe, data: Dataset, out_dir: str | os.PathLike, progress=None) -> TrainedArtifacts:
    """Train ``recipe`` from its seed and persist checkpoints, logs and a summary."""
    if len(data.train_x) == 0 or len(data.val_x) == 0:
        raise ValueError("dataset needs non-empty train and val splits")
    out = Path(out_dir) / recipe.run_name
    out.mkdir(parents=True, exist_ok=True)
    ckpts: dict[str, str] = {}
    logs: dict[str, list[dict]] = {}
    shape = (1,) + data.train_x.shape[1:]

    def new_model(preset, tag):
        return build_model(preset, recipe.embed_dim, derive_seed(recipe.seed, 3, tag), input_shape=shape)

    def persist(role, model, rows):
        path = out / f"{role}.fplm"
        save_checkpoint(model, path)
        write_epoch_log(out / f"{role}.epochs.csv", rows)
        ckpts[role] = str(path)
        logs[role] = rows

    if recipe.name == "ensemble":
        style_r = replace(make_recipe("style", recipe.stacked), **_shared(recipe))
        mutual_r = replace(make_recipe("mutual", recipe.stacked), **_shared(recipe))
        style_art = run_recipe(style_r, data, out, progress)
        mutual_art = run_recipe(mutual_r, data, out, progress)
        members = [style_art.checkpoints["model"], mutual_art.checkpoints["peer1"], mutual_art.checkpoints["peer2"]]
        roles = ["style", "mutual-peer1", "mutual-peer2"]
        ens = EnsembleModel([load_checkpoint(p, input_shape=shape) for p in members], roles)
        scores = ensemble_predict(ens, data.val_x)[:, 1]
        val = _safe_auc(scores, data.val_y)
        for role, p in zip(roles, members):
            ckpts[role] = p
        logs.update({f"style/{k}": v for k, v in style_art.logs.items()})
        logs.update({f"mutual/{k}": v for k, v in mutual_art.logs.items()})
        art = TrainedArtifacts(recipe, str(out), ckpts, logs, val, scores, members, shape)
        _write_summary(out, art, roles)
        return art

    teacher = None
    if recipe.distill:
        t_recipe = replace(recipe, preset=recipe.teacher_preset, distill=False, mutual=False)
        teacher = new_model(recipe.teacher_preset, 99)
        (t_rows,) = _fit(t_recipe, data, [teacher], progress=progress)
        persist("teacher", teacher, t_rows)
        teacher.eval()

    if recipe.mutual:
        peers = [new_model(recipe.preset, 1), new_model(recipe.preset, 2)]
        rows = _fit(recipe, data, peers, teacher, progress)
        persist("peer1", peers[0], rows[0])
        persist("peer2", peers[1], rows[1])
        primary = peers[0]
    else:
        primary = new_model(recipe.preset, 1)
        (rows,) = _fit(recipe, data, [primary], teacher, progress)
        persist("model", primary, rows)
    scores = primary.predict_proba(data.val_x)[:, 1]
    art = TrainedArtifacts(recipe, str(out), ckpts, logs, _safe_auc(scores, data.val_y), scores, input_shape=shape)
    _write_summary(out, art)
    return art


def _shared(recipe: Recipe) -> dict:
    keep = ("preset", "aug_ops", "aug_ranges", "epochs", "batch_size", "lr", "momentum", "weight_decay", "seed", "style_p", "aug_p",
            "fmix_alpha", "fmix_decay", "fmix_p", "embed_dim")
    return {k: getattr(recipe, k) for k in keep}


def _write_summary(out: Path, art: TrainedArtifacts, roles: Sequence[str] | None = None) -> None:
    summary = {
        "recipe": asdict(art.recipe),
        "val_auc": art.val_auc,
        "input_shape": list(art.input_shape),
        "checkpoints": {k: os.path.relpath(v, out) for k, v in art.checkpoints.items()},
    }
    if roles is not None:
        summary["members"] = [{"role": r, "checkpoint": os.path.relpath(p, out)} for r, p in zip(roles, art.members)]
    atomic_write(out / "summary.json", (json.dumps(summary, indent=2, sort_keys=True) + "\n").encode())


def load_ensemble(summary_path) -> EnsembleModel:
    summary = json.loads(Path(summary_path).read_text())
    base = Path(summary_path).parent
    members = summary.get("members")
    if not members:
        raise ValueError(f"{summary_path}: not an ensemble summary")
    shape = summary_input_shape(summary)
    return EnsembleModel([load_checkpoint(base / m["checkpoint"], input_shape=shape) for m in members], [m["role"] for m in members])


def summary_input_shape(summary: dict) -> tuple[int, ...] | None:
    shape = summary.get("input_shape")
    return tuple(shape) if shape else None
