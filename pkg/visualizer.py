"""
Training observers and static plots.

Trainers report through `BaseTrainingObserver` callbacks; the CSV observer writes one
metrics row per update and the plotting helpers turn per-seed metrics into learning
curves with a mean +/- std band across seeds.
"""

import csv
import logging
from collections import deque
from pathlib import Path
from typing import Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

logger = logging.getLogger(__name__)


class EpisodeWindow:
    """
    Keeps the most recent episode outcomes.
    """

    def __init__(self, size: int = 20):
        self.size = size
        self.returns = deque(maxlen=size)
        self.successes = deque(maxlen=size)

    def add(self, episode_return: float, success: bool) -> None:
        self.returns.append(float(episode_return))
        self.successes.append(bool(success))

    def __len__(self) -> int:
        return len(self.returns)

    @property
    def mean_return(self) -> float:
        return float(np.mean(self.returns)) if self.returns else 0.0

    @property
    def success_ratio(self) -> float:
        return float(np.mean(self.successes)) if self.successes else 0.0


class BaseTrainingObserver:
    """
    Training observer class. Describes all callbacks invoked by the policy and keypoint
    trainers.
    """

    def on_update_finished(self, update: int, metrics: dict) -> None:
        pass

    def on_episode_finished(self, env_index: int, episode_return: float, success: bool) -> None:
        pass

    def on_worker_failure(self, env_index: int, message: str) -> None:
        pass


class ObserverGroup(BaseTrainingObserver):
    def __init__(self, observers: Sequence[BaseTrainingObserver]):
        self.observers = [o for o in observers if o is not None]

    def on_update_finished(self, update: int, metrics: dict) -> None:
        for o in self.observers:
            o.on_update_finished(update, metrics)

    def on_episode_finished(self, env_index: int, episode_return: float, success: bool) -> None:
        for o in self.observers:
            o.on_episode_finished(env_index, episode_return, success)

    def on_worker_failure(self, env_index: int, message: str) -> None:
        for o in self.observers:
            o.on_worker_failure(env_index, message)


class LoggingTrainingObserver(BaseTrainingObserver):
    def __init__(self, name: str, keys: Sequence[str]):
        self.name = name
        self.keys = list(keys)

    def on_update_finished(self, update: int, metrics: dict) -> None:
        parts = ", ".join(f"{k} {metrics[k]:.4g}" for k in self.keys if k in metrics)
        logger.info("%s %d: %s", self.name, update, parts)

    def on_worker_failure(self, env_index: int, message: str) -> None:
        logger.warning("%s worker %d failed: %s", self.name, env_index, message)


class MetricsCsvObserver(BaseTrainingObserver):
    """
    Appends one row per update to a CSV file with a fixed column order.
    """

    def __init__(self, path: Union[str, Path], columns: Sequence[str]):
        self.path = Path(path)
        self.columns = list(columns)
        self.rows: list[dict] = []
        write_csv(self.path, self.columns, [])

    def on_update_finished(self, update: int, metrics: dict) -> None:
        row = {k: metrics.get(k, "") for k in self.columns}
        self.rows.append(row)
        with open(self.path, "a", newline="") as f:
            csv.DictWriter(f, fieldnames=self.columns, lineterminator="\n", extrasaction="ignore").writerow(row)


def _cell(value):
    if isinstance(value, (bool, np.bool_)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return int(value)
    return value


def write_csv(path: Union[str, Path], columns: Sequence[str], rows: Sequence[dict]) -> Path:
    """
    Write rows with a stable column order; an empty row list gives a header-only file.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _cell(row.get(k, "")) for k in columns})
    return path


def read_csv(path: Union[str, Path]) -> list[dict]:
    def parse(v: str):
        try:
            return float(v)
        except ValueError:
            return v

    with open(path, newline="") as f:
        return [{k: parse(v) for k, v in row.items()} for row in csv.DictReader(f)]


def seed_band(xs: Sequence[np.ndarray], ys: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Mean and sample standard deviation across seeds at each x. Curves sampled at different
    x are linearly interpolated onto the union of x values inside their common range. A
    single seed has zero spread.
    """
    if not xs:
        return np.zeros(0), np.zeros(0), np.zeros(0)
    xs = [np.asarray(x, dtype=np.float64) for x in xs]
    ys = [np.asarray(y, dtype=np.float64) for y in ys]
    if all(len(x) == len(xs[0]) and np.array_equal(x, xs[0]) for x in xs):
        grid = xs[0]
        stacked = np.stack(ys)
    else:
        lo = max(x.min() for x in xs if len(x))
        hi = min(x.max() for x in xs if len(x))
        grid = np.unique(np.concatenate(xs))
        grid = grid[(grid >= lo) & (grid <= hi)]
        stacked = np.stack([np.interp(grid, x, y) for x, y in zip(xs, ys)])
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0, ddof=1) if len(stacked) > 1 else np.zeros_like(mean)
    return grid, mean, std


def plot_learning_curves(
    curves: dict,
    path: Union[str, Path],
    xlabel: str = "environment steps",
    ylabel: str = "success ratio",
    title: Optional[str] = None,
) -> Path:
    """
    `curves` maps a label to a list of per-seed (x, y) arrays; each label is drawn as its
    seed mean with a +/- one sample std band.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, runs in curves.items():
        if not runs:
            continue
        grid, mean, std = seed_band([r[0] for r in runs], [r[1] for r in runs])
        ax.plot(grid, mean, label=label)
        ax.fill_between(grid, mean - std, mean + std, alpha=0.25)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    if curves:
        ax.legend(loc="best")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
