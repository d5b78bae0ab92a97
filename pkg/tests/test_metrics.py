import math

import numpy as np
import pytest

from fastslow.metrics import EmptyInput, metrics_summary
from fastslow.trajectory import Trajectory


def traj(rewards=(1.0,), collided=False, speeds=(20.0,), accels=(0.0,),
         ttc=(math.inf,), directed=None, final=None, overtakes=0):
    return Trajectory(
        seed=0, scenario_kind="highway",
        rewards=list(rewards), collided=collided,
        step_speeds=list(speeds), step_accels=list(accels),
        step_ttc=list(ttc), directed_lane=directed, final_lane=final,
        overtakes=overtakes,
    )


def test_empty_input():
    with pytest.raises(EmptyInput):
        metrics_summary([])


def test_success_rate_counts_collision_free():
    out = metrics_summary([traj(), traj(collided=True), traj(), traj()])
    assert out["success_rate"] == 0.75
    assert out["episodes"] == 4


def test_speed_stats_pool_substeps():
    a = traj(speeds=(10.0, 20.0))
    b = traj(speeds=(30.0,))
    out = metrics_summary([a, b])
    assert out["avg_speed"] == pytest.approx(20.0)
    # extremes are per-episode, then averaged
    assert out["max_speed"] == pytest.approx((20.0 + 30.0) / 2)
    assert out["min_speed"] == pytest.approx((10.0 + 30.0) / 2)


def test_accel_variability_is_pooled_variance():
    a = traj(accels=(1.0, -1.0))
    b = traj(accels=(3.0,))
    out = metrics_summary([a, b])
    assert out["accel_variability"] == pytest.approx(np.var([1.0, -1.0, 3.0]))


def test_min_ttc_ignores_open_road_episodes():
    a = traj(ttc=(math.inf, 4.0, 6.0))
    b = traj(ttc=(math.inf,))       # never closing: contributes nothing
    c = traj(ttc=(2.0, 8.0))
    out = metrics_summary([a, b, c])
    assert out["min_ttc"] == pytest.approx((4.0 + 2.0) / 2)


def test_min_ttc_all_open_road():
    out = metrics_summary([traj(ttc=(math.inf,))])
    assert out["min_ttc"] == math.inf


def test_mean_return():
    out = metrics_summary([traj(rewards=(1.0, 2.0)), traj(rewards=(-1.0,))])
    assert out["mean_return"] == pytest.approx(1.0)


def test_adherence_over_directed_collision_free():
    eps = [
        traj(directed=2, final=2),                 # followed
        traj(directed=2, final=1),                 # missed
        traj(directed=2, final=2, collided=True),  # crashed: excluded
        traj(),                                    # no directive: excluded
    ]
    out = metrics_summary(eps)
    assert out["adherence"] == pytest.approx(0.5)


def test_adherence_none_without_directives():
    assert metrics_summary([traj(), traj()])["adherence"] is None


def test_overtakes_summed():
    out = metrics_summary([traj(overtakes=1), traj(overtakes=2)])
    assert out["overtakes"] == 3
