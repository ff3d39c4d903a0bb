"""ISO PAD and integrated-matching metrics.

Convention throughout: higher score means "more live", and a sample is
classified live iff ``score >= tau``. Everything accumulates in float64.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .nn import atomic_write

BONA_FIDE = "bona-fide"
ATTACK = "attack"

GENUINE = "genuine"
IMPOSTOR = "impostor"
TRIAL_ATTACK = "attack"
TRIAL_TYPES = (GENUINE, IMPOSTOR, TRIAL_ATTACK)


class MissingClassError(ValueError):
    """A rate was requested for a class/trial type with no samples."""


@dataclass(frozen=True)
class PadTrialSet:
    scores: np.ndarray
    live: np.ndarray  # bool, True = bona fide

    @classmethod
    def from_lists(cls, live_scores: Sequence[float], attack_scores: Sequence[float]) -> PadTrialSet:
        scores = np.concatenate([np.asarray(live_scores, float), np.asarray(attack_scores, float)])
        live = np.concatenate([np.ones(len(live_scores), bool), np.zeros(len(attack_scores), bool)])
        return cls(scores, live)

    def __post_init__(self):
        object.__setattr__(self, "scores", np.asarray(self.scores, dtype=np.float64))
        object.__setattr__(self, "live", np.asarray(self.live, dtype=bool))
        if self.scores.shape != self.live.shape or self.scores.ndim != 1:
            raise ValueError("scores and labels must be 1-D and equally long")
        if len(self.scores) == 0:
            raise ValueError("empty trial set")

    @property
    def n_live(self) -> int:
        return int(self.live.sum())

    @property
    def n_attack(self) -> int:
        return int((~self.live).sum())

    def require_both(self) -> None:
        if self.n_live == 0 or self.n_attack == 0:
            raise MissingClassError("need at least one bona fide and one attack sample")


def pad_rates(trials: PadTrialSet, tau: float) -> tuple[float, float, float]:
    """Return ``(pad_accuracy, bpcer, apcer)`` at threshold ``tau``."""
    if not np.isfinite(tau):
        raise ValueError("tau must be finite")
    trials.require_both()
    accept = trials.scores >= tau
    bp_err = int((trials.live & ~accept).sum())
    ap_err = int((~trials.live & accept).sum())
    bpcer = bp_err / trials.n_live
    apcer = ap_err / trials.n_attack
    n = len(trials.scores)
    acc = (n - bp_err - ap_err) / n
    return acc, bpcer, apcer


def auc(trials: PadTrialSet) -> float:
    """Pairwise ROC AUC with ties counted half (Mann-Whitney via midranks)."""
    trials.require_both()
    ranks = rankdata(trials.scores)
    n1, n0 = trials.n_live, trials.n_attack
    u = ranks[trials.live].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


def roc_curve(trials: PadTrialSet) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(apcer, 1 - bpcer, thresholds) for every distinct score, descending."""
    trials.require_both()
    thr = np.unique(trials.scores)[::-1]
    tpr = np.array([(trials.scores[trials.live] >= t).mean() for t in thr])
    fpr = np.array([(trials.scores[~trials.live] >= t).mean() for t in thr])
    return np.r_[0.0, fpr], np.r_[0.0, tpr], np.r_[np.inf, thr]


def det_points(trials: PadTrialSet) -> list[tuple[float, float, float]]:
    """(tau, apcer, bpcer) triples over the candidate thresholds."""
    points = []
    for t in candidate_thresholds(trials.scores):
        _, bpcer, apcer = pad_rates(trials, t)
        points.append((float(t), apcer, bpcer))
    return points


def candidate_thresholds(scores: np.ndarray) -> np.ndarray:
    """Lowest score, midpoints between consecutive distinct scores, and one
    value just above the highest (reject everything)."""
    u = np.unique(np.asarray(scores, dtype=np.float64))
    mids = (u[:-1] + u[1:]) / 2.0
    return np.concatenate([u[:1], mids, [np.nextafter(u[-1], np.inf)]])


def choose_threshold(trials: PadTrialSet, policy: str = "max-accuracy", apcer_target: float = 0.05) -> float:
    """Pick an operating threshold on validation trials.

    ``max-accuracy``: the smallest candidate maximising PAD accuracy; for
    separated classes this lands on the midpoint of the gap.
    ``bpcer-at-apcer-target``: the smallest candidate whose APCER is at or
    below ``apcer_target``.
    """
    trials.require_both()
    cands = candidate_thresholds(trials.scores)
    if policy == "max-accuracy":
        accs = np.array([pad_rates(trials, t)[0] for t in cands])
        return float(cands[int(np.argmax(accs))])
    if policy == "bpcer-at-apcer-target":
        if not 0.0 <= apcer_target <= 1.0:
            raise ValueError(f"unattainable APCER target {apcer_target}")
        for t in cands:
            if pad_rates(trials, t)[2] <= apcer_target:
                return float(t)
        raise ValueError(f"unattainable APCER target {apcer_target}")
    raise ValueError(f"unknown threshold policy {policy!r}")


# ----------------------------------------------------------- integrated


@dataclass(frozen=True)
class ComparisonTrialSet:
    types: np.ndarray  # str per trial
    accepted: np.ndarray  # bool decision of the integrated system

    def __post_init__(self):
        object.__setattr__(self, "types", np.asarray(self.types, dtype=object))
        object.__setattr__(self, "accepted", np.asarray(self.accepted, dtype=bool))
        if len(self.types) == 0:
            raise ValueError("empty comparison trial set")
        bad = set(self.types) - set(TRIAL_TYPES)
        if bad:
            raise ValueError(f"unknown trial types {sorted(bad)}")


def integrated_rates(trials: ComparisonTrialSet) -> dict[str, float]:
    """FNMR over genuine trials, IAPAR over attack trials, IM accuracy over all.

    FMR (impostor acceptance) is included as an extra when impostors exist.
    """
    t, acc = trials.types, trials.accepted
    gen, imp, att = t == GENUINE, t == IMPOSTOR, t == TRIAL_ATTACK
    if not gen.any():
        raise MissingClassError("FNMR needs genuine-mated trials")
    if not att.any():
        raise MissingClassError("IAPAR needs attack trials")
    correct = int((gen & acc).sum() + (imp & ~acc).sum() + (att & ~acc).sum())
    out = {
        "fnmr": float((gen & ~acc).sum() / gen.sum()),
        "iapar": float((att & acc).sum() / att.sum()),
        "im_accuracy": correct / len(t),
    }
    if imp.any():
        out["fmr_extra"] = float((imp & acc).sum() / imp.sum())
    return out


@dataclass
class MetricReport:
    pad_accuracy: float
    bpcer: float
    apcer: float
    auc: float
    tau: float
    n_live: int
    n_attack: int
    fnmr: float | None = None
    iapar: float | None = None
    im_accuracy: float | None = None
    fmr_extra: float | None = None
    thresholds: dict[str, float] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return asdict(self)


def pad_report(trials: PadTrialSet, tau: float) -> MetricReport:
    acc, bpcer, apcer = pad_rates(trials, tau)
    return MetricReport(acc, bpcer, apcer, auc(trials), float(tau), trials.n_live, trials.n_attack)


def format_table(headers: Sequence[str], rows: Sequence[Sequence]) -> str:
    """Markdown table; floats printed with 2 decimals."""

    def cell(v):
        if isinstance(v, float):
            return f"{v:.2f}"
        return str(v)

    lines = ["| " + " | ".join(headers) + " |", "|" + "|".join("---" for _ in headers) + "|"]
    lines += ["| " + " | ".join(cell(v) for v in r) + " |" for r in rows]
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------- score file

SCORE_FIELDS = ["trial_id", "type", "score"]


def write_scores(path, rows: Sequence[dict], components: Sequence[str] = ()) -> None:
    """CSV ``trial_id,type,score[,components...]``; floats written with repr
    so they parse back bit-exact."""
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(SCORE_FIELDS + list(components))
    for r in rows:
        vals = [r["trial_id"], r["type"], repr(float(r["score"]))]
        for c in components:
            v = r[c]
            vals.append(repr(float(v)) if isinstance(v, (float, np.floating)) else str(v))
        wr.writerow(vals)
    atomic_write(path, buf.getvalue().encode())


def _parse_cell(text: str):
    # ints stay ints so a rewrite reproduces the file byte for byte
    for kind in (int, float):
        try:
            return kind(text)
        except ValueError:
            pass
    return text


def read_scores(path) -> list[dict]:
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        if rd.fieldnames is None or rd.fieldnames[:3] != SCORE_FIELDS:
            raise ValueError(f"{path}: score file header must start with {','.join(SCORE_FIELDS)}")
        rows = []
        for r in rd:
            out = {"trial_id": r["trial_id"], "type": r["type"], "score": float(r["score"])}
            for k in rd.fieldnames[3:]:
                out[k] = _parse_cell(r[k])
            rows.append(out)
    return rows
