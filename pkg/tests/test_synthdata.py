import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fplive.data import read_manifest, read_pgm
from fplive.synthdata import (
    MATERIALS,
    SCANNERS,
    DatasetConfig,
    MaterialProfile,
    ScannerProfile,
    assign_splits,
    band_energy_ratio,
    build_dataset,
    build_trials,
    manifest_hash,
    orientation_field,
    plan_dataset,
    read_enroll,
    read_trials,
    render_impression,
    synth_finger,
    write_enroll,
    write_trials,
)
from fplive.tensor import RngStream

SPOOFS = ("silica-like", "gelatin-like", "latex-like")


# ------------------------------------------------------------------ fingers


def test_same_seed_same_finger():
    a, b = synth_finger(17), synth_finger(17)
    np.testing.assert_array_equal(a.orientation, b.orientation)
    np.testing.assert_array_equal(a.ridges, b.ridges)


def test_orientation_angles_in_range():
    for seed in range(10):
        th = synth_finger(seed).orientation
        assert th.min() >= 0 and th.max() < np.pi


def test_distinct_fields_are_weakly_correlated():
    corr = []
    for i in range(100):
        a, b = orientation_field(2 * i, 76), orientation_field(2 * i + 1, 76)
        # doubled angles make the axial data continuous across 0/pi
        corr.append(abs(np.corrcoef(np.cos(2 * a).ravel(), np.cos(2 * b).ravel())[0, 1]))
    assert np.mean(corr) < 0.5


# -------------------------------------------------------------- impressions


def test_render_is_deterministic():
    f = synth_finger(3)
    a = render_impression(f, SCANNERS["A"], MATERIALS["live"], RngStream(1, 2))
    b = render_impression(f, SCANNERS["A"], MATERIALS["live"], RngStream(1, 2))
    assert a.image.tobytes() == b.image.tobytes()


@settings(max_examples=20)
@given(st.integers(0, 10**6), st.sampled_from(sorted(SCANNERS)), st.sampled_from(sorted(MATERIALS)))
def test_render_shape_range_label(seed, scanner, material):
    s = render_impression(synth_finger(seed), SCANNERS[scanner], MATERIALS[material], RngStream(seed))
    assert s.image.shape == (64, 64) and s.image.dtype == np.float32
    assert s.image.min() >= 0 and s.image.max() <= 1
    assert s.live == (material == "live")
    assert s.meta["scanner"] == scanner and s.meta["material"] == material


def test_spoofs_carry_more_high_frequency_energy():
    wins = 0
    for i in range(100):
        f = synth_finger(1000 + i)
        sc = SCANNERS["AB"[i % 2]]
        live = render_impression(f, sc, MATERIALS["live"], RngStream(5, i)).image
        spoof = render_impression(f, sc, MATERIALS[SPOOFS[i % 3]], RngStream(6, i)).image
        wins += band_energy_ratio(spoof) > band_energy_ratio(live)
    assert wins >= 90


def test_band_energy_of_a_pure_tone():
    yy, xx = np.mgrid[0:64, 0:64]
    assert band_energy_ratio(np.sin(2 * np.pi * 0.3 * xx)) > 0.99
    assert band_energy_ratio(np.sin(2 * np.pi * 0.05 * yy)) < 0.01
    assert band_energy_ratio(np.zeros((8, 8))) == 0.0


def test_profile_validation():
    with pytest.raises(ValueError):
        ScannerProfile("X", gain=2.0)
    with pytest.raises(ValueError):
        MaterialProfile("live", artifact_amp=0.1)
    with pytest.raises(ValueError):
        MaterialProfile("latex-like", compression=1.0)
    assert all(MATERIALS[m].artifact_amp == 0 for m in MATERIALS if m == "live")


# ------------------------------------------------------------------ dataset


def _cfg300(**kw):
    # 5 subjects x 2 fingers x 2 scanners x (6 live + 3 x 3 spoof) = 300
    base = dict(subjects=5, fingers=2, live_impressions=6, spoof_impressions=3)
    return DatasetConfig(**{**base, **kw})


def test_default_split_300_is_200_100():
    cfg = _cfg300()
    assert cfg.total == 300
    splits = assign_splits(cfg, plan_dataset(cfg), seed=4)
    assert splits.count("train") == 200 and splits.count("val") == 100


def test_val_count_is_floored():
    cfg = DatasetConfig(subjects=1, fingers=1, scanners=("A",), materials=("live",), live_impressions=10)
    assert assign_splits(cfg, plan_dataset(cfg), 0).count("val") == 3


def test_class_balance_matches_config():
    cfg = _cfg300()
    plan = plan_dataset(cfg)
    assert sum(e[3] == "live" for e in plan.entries) == 5 * 2 * 2 * 6
    assert sum(e[3] == "latex-like" for e in plan.entries) == 5 * 2 * 2 * 3


def test_scanner_holdout_split():
    cfg = _cfg300(scanners=("A", "B", "C"), split="scanner", holdout_scanner="B")
    plan = plan_dataset(cfg)
    splits = assign_splits(cfg, plan, 0)
    train = {e[2] for e, s in zip(plan.entries, splits) if s == "train"}
    val = {e[2] for e, s in zip(plan.entries, splits) if s == "val"}
    assert val == {"B"} and not (train & val)
    default = _cfg300(split="scanner")
    assert {e[2] for e, s in zip(plan_dataset(default).entries, assign_splits(default, plan_dataset(default), 0)) if s == "val"} == {"B"}


def test_subject_split_is_disjoint():
    cfg = _cfg300(subjects=9, split="subject")
    plan = plan_dataset(cfg)
    splits = assign_splits(cfg, plan, 1)
    train = {e[0] for e, s in zip(plan.entries, splits) if s == "train"}
    val = {e[0] for e, s in zip(plan.entries, splits) if s == "val"}
    assert len(val) == 3 and not (train & val)


def test_config_validation():
    with pytest.raises(ValueError):
        DatasetConfig(subjects=0)
    with pytest.raises(ValueError):
        DatasetConfig(scanners=("Z",))
    with pytest.raises(ValueError):
        DatasetConfig(split="scanner", scanners=("A",))
    with pytest.raises(ValueError):
        DatasetConfig(split="users")


def test_build_dataset_and_hash(tmp_path):
    cfg = DatasetConfig(subjects=2, fingers=1, live_impressions=2, spoof_impressions=1)
    rows = build_dataset(cfg, 3, tmp_path / "a")
    build_dataset(cfg, 3, tmp_path / "b")
    assert manifest_hash(tmp_path / "a" / "manifest.csv") == manifest_hash(tmp_path / "b" / "manifest.csv")
    build_dataset(cfg, 4, tmp_path / "c")
    assert manifest_hash(tmp_path / "a" / "manifest.csv") != manifest_hash(tmp_path / "c" / "manifest.csv")
    assert read_manifest(tmp_path / "a" / "manifest.csv") == rows
    assert len(rows) == cfg.total
    for r in rows:
        img = read_pgm(tmp_path / "a" / r.path)
        assert img.shape == (64, 64)
        assert (tmp_path / "b" / r.path).read_bytes() == (tmp_path / "a" / r.path).read_bytes()


# ------------------------------------------------------------------- trials


def test_trial_protocol(small_dataset, tmp_path):
    _, rows = small_dataset
    enroll, trials = build_trials(rows, 30, seed=0, split="val")
    by_path = {r.path: r for r in rows}
    tids = {t for t, _ in enroll}
    kinds = [t[3] for t in trials]
    assert {"genuine", "impostor", "attack"} <= set(kinds)
    assert all(kinds.count(k) <= 30 for k in ("genuine", "impostor", "attack"))
    for _, path, tid, kind in trials:
        r = by_path[path]
        assert r.split == "val" and tid in tids
        same = tid == f"s{r.subject}f{r.finger}"
        assert (kind == "impostor") != same
        assert r.live == (kind != "attack")
    assert not {p for _, p in enroll} & {t[1] for t in trials}

    p, q = tmp_path / "trials.csv", tmp_path / "enroll.csv"
    write_trials(p, trials)
    write_enroll(q, enroll)
    assert read_trials(p) == trials and read_enroll(q) == enroll
    assert p.read_text().splitlines()[0] == "trial_id,query_path,template_id,type"
