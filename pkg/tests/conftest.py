"""Shared fixtures: synthetic mobility series and dataset discovery."""

import os
from pathlib import Path

import numpy as np
import pytest

from dpforecast import MobilitySeries

START = np.datetime64("2020-08-24T00:00:00", "s")  # a Monday
SLOT = np.timedelta64(1800, "s")


def build_series(n_days=9, n_regions=3, seed=0, noise=5.0, base=1000.0):
    """Sinusoidal counts with daily and weekly structure, strictly positive."""
    n = n_days * 48
    ts = START + np.arange(n) * SLOT
    gen = np.random.default_rng(seed)
    slots = np.arange(n)
    cols = []
    for r in range(n_regions):
        level = base * (r + 1)
        daily = 0.4 * level * np.sin(2 * np.pi * slots / 48 + r)
        weekly = 0.1 * level * np.sin(2 * np.pi * slots / (48 * 7))
        col = level + daily + weekly + gen.normal(0.0, noise, n)
        cols.append(np.maximum(col, 0.0))
    labels = tuple(f"R{i + 1}" for i in range(n_regions))
    return MobilitySeries(ts, np.column_stack(cols), labels)


def write_series_csv(series, path: Path) -> Path:
    """Round counts to integers and write the canonical CSV layout."""
    lines = ["datetime," + ",".join(series.region_labels)]
    stamps = [str(t).replace("T", " ") for t in series.timestamps.astype("datetime64[s]")]
    for stamp, row in zip(stamps, series.counts):
        lines.append(stamp + "," + ",".join(str(int(round(v))) for v in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


@pytest.fixture
def sine_series():
    return build_series(n_days=20, n_regions=2, seed=0)


@pytest.fixture
def small_series():
    return build_series(n_days=9, n_regions=3, seed=1)


def dataset_path():
    """Published-dataset location; tests that need it skip when absent."""
    env = os.environ.get("DPFORECAST_DATASET")
    if env:
        return Path(env)
    return Path(__file__).resolve().parent.parent / "data" / "mobility.csv"


def require_dataset():
    path = dataset_path()
    if not path.exists():
        pytest.skip(
            f"published mobility dataset not found at {path}; "
            "set DPFORECAST_DATASET to run this check"
        )
    return path
