import numpy as np
import pytest

from rssguard.errors import ConfigError
from rssguard.metrics import ErrorStats, RoundReport, localization_error

LINE = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 0.0]])


def one_hot(pred, k=4):
    return np.eye(k)[pred]


def test_perfect_predictions():
    s = localization_error(one_hot([0, 1, 2]), np.array([0, 1, 2]), LINE)
    assert (s.mean_m, s.best_m, s.worst_m) == (0.0, 0.0, 0.0)


def test_adjacent_rp_one_meter():
    s = localization_error(one_hot([1]), np.array([0]), LINE)
    assert s.mean_m == 1.0


def test_mixed_batch_statistics():
    s = localization_error(one_hot([0, 1, 3]), np.array([0, 1, 0]), LINE)
    assert (s.mean_m, s.best_m, s.worst_m) == (1.0, 0.0, 3.0)


def test_argmax_ties_lowest_index():
    s = localization_error(np.array([[0.0, 5.0, 0.0, 5.0]]), np.array([1]), LINE)
    assert s.mean_m == 0.0


def test_euclidean_not_path_distance():
    coords = np.array([[0.0, 0.0], [3.0, 4.0]])
    assert localization_error(one_hot([1], 2), np.array([0]), coords).mean_m == 5.0


def test_missing_coordinate():
    coords = LINE.copy()
    coords[2] = np.nan
    with pytest.raises(ConfigError):
        localization_error(one_hot([2]), np.array([0]), coords)
    with pytest.raises(ConfigError):
        localization_error(one_hot([0], 6), np.array([0]), LINE)


def test_report_order_invariant():
    bad = ErrorStats(1.0, 2.0, 3.0, np.array([]))
    with pytest.raises(ValueError):
        RoundReport(0, "fedavg", bad, {}, [])
