"""Shared fixtures: disk-cached datasets and policy bundles.

Expensive artifacts (the solver dataset and the trained bundle) are built
once and cached under ``tests/_cache``; reruns reuse them.  Everything is
seeded, so a cold rebuild reproduces the cached bytes exactly.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
import pytest

from ampctune.dataset import DatasetFile, StateSamplingBox, generate
from ampctune.mpc import MpcConfig
from ampctune.net import TrainConfig
from ampctune.plant import CartpoleConstants, CartpoleParams
from ampctune.policy import AdaptivePolicy

CACHE = Path(__file__).parent / "_cache"

# -- tiny artifacts: fast enough to build cold inside a test session --------

TINY_MPC = MpcConfig(n_horizon=8, dt=0.05, max_iter=150)
TINY_BOX = StateSamplingBox(lower=np.array([-0.3, -np.pi, -2.0, -6.0]),
                            upper=np.array([0.3, np.pi, 2.0, 6.0]))
TINY_N = 60
TINY_SEED = 11

# -- desk artifacts: the full-scale bundle used by the acceptance tests -----

DESK_MPC = MpcConfig()
DESK_BOX = StateSamplingBox(lower=np.array([-0.39, -math.pi, -3.0, -14.0]),
                            upper=np.array([0.39, math.pi, 3.0, 14.0]))
DESK_N = 12000
DESK_DATASET_SEED = 701
DESK_ACTION_SEED = 702
DESK_SENS_SEED = 703


def _dataset(path: Path, n, box, mpc_cfg, seed) -> DatasetFile:
    if path.is_file():
        return DatasetFile.load(path)
    ds = generate(n, box, CartpoleParams(), mpc_cfg, seed=seed)
    path.parent.mkdir(parents=True, exist_ok=True)
    ds.save(path)
    return ds


def _bundle(bundle_dir: Path, make_dataset, action_cfg, sens_cfg,
            action_hidden=None, sens_hidden=None) -> Path:
    if (bundle_dir / "bundle.json").is_file():
        return bundle_dir
    data = make_dataset()
    pol, summary = AdaptivePolicy.train_from_dataset(
        data, CartpoleParams().as_array(), CartpoleConstants().u_max,
        action_cfg=action_cfg, sens_cfg=sens_cfg,
        action_hidden=action_hidden, sens_hidden=sens_hidden)
    pol.save(bundle_dir)
    (bundle_dir / "training_summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return bundle_dir


@pytest.fixture(scope="session")
def tiny_dataset() -> DatasetFile:
    return _dataset(CACHE / "tiny_v1" / "dataset.paad",
                    TINY_N, TINY_BOX, TINY_MPC, TINY_SEED)


@pytest.fixture(scope="session")
def tiny_bundle_dir() -> Path:
    return _bundle(
        CACHE / "tiny_v1" / "bundle",
        lambda: _dataset(CACHE / "tiny_v1" / "dataset.paad",
                         TINY_N, TINY_BOX, TINY_MPC, TINY_SEED),
        TrainConfig(epochs=10, seed=5), TrainConfig(epochs=10, seed=6),
        action_hidden=(16, 16), sens_hidden=(24, 24))


@pytest.fixture(scope="session")
def tiny_policy(tiny_bundle_dir) -> AdaptivePolicy:
    return AdaptivePolicy.load(tiny_bundle_dir)


@pytest.fixture(scope="session")
def desk_dataset() -> DatasetFile:
    """12k-record solver dataset (slow cold build; cached afterwards)."""
    return _dataset(CACHE / "desk_v1" / "dataset.paad",
                    DESK_N, DESK_BOX, DESK_MPC, DESK_DATASET_SEED)


@pytest.fixture(scope="session")
def desk_bundle_dir() -> Path:
    return _bundle(
        CACHE / "desk_v1" / "bundle",
        lambda: _dataset(CACHE / "desk_v1" / "dataset.paad",
                         DESK_N, DESK_BOX, DESK_MPC, DESK_DATASET_SEED),
        TrainConfig(epochs=200, seed=DESK_ACTION_SEED),
        TrainConfig(epochs=200, seed=DESK_SENS_SEED))


@pytest.fixture(scope="session")
def desk_policy(desk_bundle_dir) -> AdaptivePolicy:
    return AdaptivePolicy.load(desk_bundle_dir)
