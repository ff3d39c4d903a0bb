import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "repo", deadline=None, max_examples=int(os.environ.get("FPLIVE_HYPOTHESIS_EXAMPLES", 60)),
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """240-image dataset (6 subjects, 2 fingers, scanners A/B) on disk."""
    from fplive.synthdata import DatasetConfig, build_dataset

    root = tmp_path_factory.mktemp("ds")
    cfg = DatasetConfig(subjects=6, fingers=2, live_impressions=4, spoof_impressions=2)
    rows = build_dataset(cfg, 7, root)
    return root, rows


@pytest.fixture(scope="session")
def trained_tiny(small_dataset, tmp_path_factory):
    """A tiny-preset model trained for a few epochs on ``small_dataset``."""
    from fplive.train import Dataset, make_recipe, run_recipe

    root, _ = small_dataset
    out = tmp_path_factory.mktemp("run")
    art = run_recipe(make_recipe("strong-aug", preset="tiny", epochs=6, seed=3), Dataset.from_manifest(root / "manifest.csv"), out)
    from fplive.nn import load_checkpoint

    return load_checkpoint(art.checkpoints["model"]), art



def pytest_runtest_setup(item):
    m = item.get_closest_marker("criterion")
    if m is not None:
        item.user_properties.append(("criterion", tuple(m.args)))


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, in criterion order."""
    verdicts = {}
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            crit = dict(getattr(rep, "user_properties", [])).get("criterion")
            if crit is None:
                continue
            ok = outcome == "passed"
            if rep.when == "call" or not ok:
                verdicts[crit] = verdicts.get(crit, True) and ok
    if verdicts:
        terminalreporter.section("acceptance criteria")
        for (num, title), ok in sorted(verdicts.items()):
            terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {num:>2}: {title}")
