"""Figure rendering: files appear, bytes are stable, CSV reader round-trips."""

import numpy as np
import pytest

from ampctune import report
from ampctune.harness import write_aggregate_csv
from ampctune.simloop import EpisodeRecord


def _record(reward=0.4, failed=False, fail_reason=None):
    k = 30
    t = np.arange(k + 1) * 0.1
    states = np.column_stack([0.05 * np.sin(t), np.pi * np.exp(-t / 2),
                              np.zeros(k + 1), np.zeros(k + 1)])
    actions = np.sin(t[:-1]) * 3.0
    return EpisodeRecord(states=states, actions=actions, control_period=0.1,
                         reward=reward, failed=failed, fail_reason=fail_reason)


def test_episode_figure_writes_png(tmp_path):
    path = tmp_path / "fig" / "ep.png"
    report.episode_figure(_record(), path)
    data = path.read_bytes()
    assert data[:8] == b"\x89PNG\r\n\x1a\n"
    assert len(data) > 1000


def test_episode_figure_accepts_failed_episode(tmp_path):
    path = tmp_path / "ep.png"
    report.episode_figure(_record(reward=0.0, failed=True, fail_reason="rail"),
                          path)
    assert path.is_file()


def test_episode_figure_bytes_are_deterministic(tmp_path):
    a, b = tmp_path / "a.png", tmp_path / "b.png"
    report.episode_figure(_record(), a)
    report.episode_figure(_record(), b)
    assert a.read_bytes() == b.read_bytes()


def test_incumbent_figure(tmp_path):
    path = tmp_path / "inc.png"
    report.incumbent_figure({"turbo": [0.1, 0.1, 0.4],
                             "sobol": [0.1, 0.2, 0.2]}, path)
    assert path.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_read_aggregate_csv_roundtrip(tmp_path):
    path = tmp_path / "agg.csv"
    incumbents = np.array([[0.1, 0.2, 0.25], [0.05, 0.3, 0.3]])
    write_aggregate_csv(path, incumbents)
    agg = report.read_aggregate_csv(path)
    assert np.array_equal(agg["epoch"], [1.0, 2.0, 3.0])
    assert np.allclose(agg["mean"], incumbents.mean(axis=0))
    assert np.allclose(agg["min"], incumbents.min(axis=0))
    assert np.allclose(agg["max"], incumbents.max(axis=0))


def test_read_aggregate_csv_rejects_other_headers(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b\n1,2\n", encoding="utf-8")
    with pytest.raises(ValueError, match="aggregate"):
        report.read_aggregate_csv(path)


def test_experiment_figure_from_aggregates(tmp_path):
    rng = np.random.default_rng(0)
    for method in ("turbo", "sobol"):
        for seed in (0, 1):
            inc = np.maximum.accumulate(rng.uniform(0, 1, size=(3, 6)), axis=1)
            write_aggregate_csv(tmp_path / f"aggregate_{method}_seed{seed}.csv",
                                inc)
    out = tmp_path / "rewards.png"
    report.experiment_figure(tmp_path, ("turbo", "sobol"), (0, 1), out)
    assert out.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    # deterministic rerun
    out2 = tmp_path / "rewards2.png"
    report.experiment_figure(tmp_path, ("turbo", "sobol"), (0, 1), out2)
    assert out.read_bytes() == out2.read_bytes()
