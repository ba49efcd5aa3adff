import numpy as np
import pytest
from numpy.testing import assert_allclose

from common import ctrl_c_handler, make_rng
from visualizer import (
    EpisodeWindow,
    LoggingTrainingObserver,
    MetricsCsvObserver,
    ObserverGroup,
    plot_learning_curves,
    read_csv,
    seed_band,
    write_csv,
)


def test_seed_band_mean_and_sample_std():
    grid, mean, std = seed_band([np.arange(3.0)] * 3, [np.array([0.0, 1.0, 2.0]), np.array([1.0, 1.0, 2.0]), np.array([2.0, 1.0, 2.0])])
    assert_allclose(grid, [0.0, 1.0, 2.0])
    assert_allclose(mean, [1.0, 1.0, 2.0])
    assert_allclose(std, [1.0, 0.0, 0.0])


def test_seed_band_single_seed_has_no_spread():
    _, mean, std = seed_band([np.array([0.0, 1.0])], [np.array([0.3, 0.7])])
    assert_allclose(mean, [0.3, 0.7])
    assert_allclose(std, 0.0)


def test_seed_band_interpolates_onto_common_range():
    grid, mean, _ = seed_band([np.array([0.0, 2.0]), np.array([1.0, 3.0])], [np.array([0.0, 2.0]), np.array([1.0, 3.0])])
    assert_allclose(grid, [1.0, 2.0])
    assert_allclose(mean, [1.0, 2.0])


def test_episode_window_keeps_recent_outcomes():
    window = EpisodeWindow(2)
    assert window.success_ratio == 0.0
    for r, s in [(1.0, True), (2.0, False), (4.0, False)]:
        window.add(r, s)
    assert len(window) == 2
    assert window.mean_return == pytest.approx(3.0)
    assert window.success_ratio == 0.0


def test_csv_observer_writes_fixed_columns(tmp_path):
    path = tmp_path / "m" / "metrics.csv"
    observer = ObserverGroup([MetricsCsvObserver(path, ["update", "loss", "note"]), None])
    assert path.read_text() == "update,loss,note\n"
    observer.on_update_finished(0, {"update": 0, "loss": 0.5, "extra": 1})
    observer.on_update_finished(1, {"update": 1, "loss": 0.25})
    rows = read_csv(path)
    assert rows == [{"update": 0.0, "loss": 0.5, "note": ""}, {"update": 1.0, "loss": 0.25, "note": ""}]


def test_write_csv_cells(tmp_path):
    path = write_csv(tmp_path / "x.csv", ["a", "b", "c"], [{"a": np.float64(0.1), "b": np.bool_(True), "c": np.int64(3)}])
    assert path.read_text().splitlines()[1] == "0.1,1,3"


def test_logging_observer(caplog):
    caplog.set_level("INFO")
    LoggingTrainingObserver("update", ["loss"]).on_update_finished(3, {"loss": 0.125, "other": 1.0})
    assert "update 3: loss 0.125" in caplog.text


def test_plot_is_written(tmp_path):
    runs = [(np.arange(5.0), np.linspace(0, 1, 5)), (np.arange(5.0), np.linspace(0, 0.5, 5))]
    path = plot_learning_curves({"TacManual": runs}, tmp_path / "plots" / "curve.png")
    assert path.exists()
    assert path.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_make_rng_streams():
    a = make_rng(1, "policy_init").random(4)
    assert_allclose(make_rng(1, "policy_init").random(4), a)
    assert not np.allclose(make_rng(1, "ppo").random(4), a)
    assert not np.allclose(make_rng(2, "policy_init").random(4), a)


def test_ctrl_c_handler_starts_clear():
    with ctrl_c_handler() as interrupted:
        assert not interrupted
