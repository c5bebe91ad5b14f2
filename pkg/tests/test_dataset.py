"""Tests for imitation-dataset generation and the on-disk format."""

import struct

import numpy as np
import pytest

from ampctune import dataset, mpc
from ampctune.dataset import (
    AcceptanceRateTooLow,
    DatasetFile,
    DatasetFormatError,
    StateSamplingBox,
    default_box,
    generate,
)
from ampctune.plant import CartpoleParams

THETA = CartpoleParams()
# Short horizons keep per-sample solve cost at a few milliseconds while
# exercising the full accept/reject/solve pipeline.
CFG6 = mpc.MpcConfig(n_horizon=6, dt=0.05, max_iter=200)
CFG3 = mpc.MpcConfig(n_horizon=3, dt=0.05, max_iter=150)


def test_box_validation_rejects_bad_bounds():
    good = default_box()
    good.validate()
    with pytest.raises(ValueError, match="strictly below"):
        StateSamplingBox(lower=np.zeros(4), upper=np.zeros(4)).validate()
    with pytest.raises(ValueError, match="rail"):
        StateSamplingBox(lower=np.array([-0.5, -1, -1, -1]),
                         upper=np.array([0.5, 1, 1, 1])).validate()
    with pytest.raises(ValueError, match="entry per state"):
        StateSamplingBox(lower=np.zeros(3), upper=np.ones(3)).validate()
    with pytest.raises(ValueError, match="finite"):
        StateSamplingBox(lower=np.array([-0.1, -np.inf, -1, -1]),
                         upper=np.ones(4)).validate()


def test_box_sampling_stays_inside():
    box = StateSamplingBox(lower=np.array([-0.2, -1.0, -0.5, -2.0]),
                           upper=np.array([0.1, 2.0, 0.5, 1.0]))
    rng = np.random.default_rng(0)
    for _ in range(100):
        assert box.contains(box.sample(rng))


def test_collapsed_box_at_upright_yields_null_record():
    eps = 1e-12
    box = StateSamplingBox(lower=-eps * np.ones(4), upper=eps * np.ones(4))
    ds = generate(1, box, THETA, mpc.MpcConfig(), seed=1)
    assert ds.n == 1
    assert abs(ds.actions[0, 0]) <= 1e-6
    assert np.max(np.abs(ds.sensitivities[0])) <= 1e-3
    assert ds.converged[0]


def test_same_seed_gives_byte_identical_files(tmp_path):
    a_path, b_path = tmp_path / "a.paad", tmp_path / "b.paad"
    generate(8, default_box(), THETA, CFG6, seed=91).save(a_path)
    generate(8, default_box(), THETA, CFG6, seed=91).save(b_path)
    assert a_path.read_bytes() == b_path.read_bytes()
    c_path = tmp_path / "c.paad"
    generate(8, default_box(), THETA, CFG6, seed=92).save(c_path)
    assert a_path.read_bytes() != c_path.read_bytes()


def test_output_is_independent_of_worker_count(tmp_path):
    serial, pooled = tmp_path / "serial.paad", tmp_path / "pooled.paad"
    generate(20, default_box(), THETA, CFG6, seed=17).save(serial)
    generate(20, default_box(), THETA, CFG6, seed=17, n_workers=2).save(pooled)
    assert serial.read_bytes() == pooled.read_bytes()


def test_generated_records_respect_invariants():
    box = default_box()
    ds = generate(30, box, THETA, CFG6, seed=5)
    u_max = CFG6.constants.u_max
    assert np.all(np.abs(ds.actions) <= u_max)
    assert all(box.contains(s) for s in ds.states)
    assert np.all(np.isfinite(ds.sensitivities))
    assert np.all(ds.converged)
    assert np.all(ds.iterations >= 0)


def test_empirical_state_means_match_box_midpoints():
    # Uniform i.i.d. sampling: each coordinate's empirical mean over n
    # accepted records stays within 3 standard errors of the box midpoint
    # (sigma = width / sqrt(12)).  The accept/reject gate is symmetric under
    # state mirroring, so it does not bias the means.
    n = 10_000
    box = default_box()
    ds = generate(n, box, THETA, CFG3, seed=23)
    mid = 0.5 * (box.lower + box.upper)
    sigma = (box.upper - box.lower) / np.sqrt(12.0)
    dev = np.abs(ds.states.mean(axis=0) - mid)
    assert np.all(dev <= 3.0 * sigma / np.sqrt(n)), (dev, 3 * sigma / np.sqrt(n))


def test_save_load_round_trip_is_exact(tmp_path):
    ds = generate(12, default_box(), THETA, CFG6, seed=3)
    path = tmp_path / "ds.paad"
    ds.save(path)
    back = DatasetFile.load(path)
    assert np.array_equal(back.states, ds.states)
    assert np.array_equal(back.actions, ds.actions)
    assert np.array_equal(back.sensitivities, ds.sensitivities)
    assert np.array_equal(back.converged, ds.converged)
    assert np.array_equal(back.iterations, ds.iterations)


def _tiny_saved_dataset(tmp_path, n=4):
    ds = generate(n, default_box(), THETA, CFG6, seed=7)
    path = tmp_path / "ds.paad"
    ds.save(path)
    return path


def test_wrong_magic_is_rejected(tmp_path):
    path = _tiny_saved_dataset(tmp_path)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"JUNK"
    path.write_bytes(bytes(raw))
    with pytest.raises(DatasetFormatError, match="magic"):
        DatasetFile.load(path)


def test_unsupported_version_is_rejected(tmp_path):
    path = _tiny_saved_dataset(tmp_path)
    raw = bytearray(path.read_bytes())
    raw[4:8] = struct.pack("<I", 99)
    path.write_bytes(bytes(raw))
    with pytest.raises(DatasetFormatError, match="version"):
        DatasetFile.load(path)


def test_dimension_mismatch_is_rejected(tmp_path):
    path = _tiny_saved_dataset(tmp_path)
    raw = bytearray(path.read_bytes())
    raw[16:24] = struct.pack("<Q", 3)  # claim 3 state dims
    path.write_bytes(bytes(raw))
    with pytest.raises(DatasetFormatError, match="dimension mismatch"):
        DatasetFile.load(path)


def test_truncation_error_names_the_record(tmp_path):
    path = _tiny_saved_dataset(tmp_path, n=4)
    raw = path.read_bytes()
    header = 40
    record = (4 + 1 + 5 + 2) * 8
    # Cut inside the third record (index 2).
    path.write_bytes(raw[:header + 2 * record + record // 2])
    with pytest.raises(DatasetFormatError, match="record 2"):
        DatasetFile.load(path)
    # Cleanly cut after 3 records while the header still promises 4.
    path.write_bytes(raw[:header + 3 * record])
    with pytest.raises(DatasetFormatError, match="record 3"):
        DatasetFile.load(path)


def test_unreachable_tolerance_trips_acceptance_gate():
    bad_cfg = mpc.MpcConfig(n_horizon=6, dt=0.05, max_iter=1, eps_conv=1e-30)
    with pytest.raises(AcceptanceRateTooLow, match="no accepted sample"):
        generate(2, default_box(), THETA, bad_cfg, seed=2,
                 max_attempts_per_slot=12)


def test_csv_export_mirrors_the_arrays(tmp_path):
    import csv

    ds = generate(5, default_box(), THETA, CFG6, seed=13)
    path = tmp_path / "ds.csv"
    ds.export_csv(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][:5] == ["p", "phi", "pdot", "phidot", "u"]
    assert len(rows) == ds.n + 1
    for i, row in enumerate(rows[1:]):
        assert [float(v) for v in row[:4]] == ds.states[i].tolist()
        assert float(row[4]) == ds.actions[i, 0]
        assert [float(v) for v in row[5:10]] == ds.sensitivities[i, 0].tolist()


def test_generate_rejects_nonpositive_n():
    with pytest.raises(ValueError, match=">= 1"):
        generate(0, default_box(), THETA, CFG6, seed=1)
