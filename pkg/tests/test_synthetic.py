import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spikedet.clustering import BoundingBox
from spikedet.events import SensorGeometry, validate_stream
from spikedet.synthetic import (
    NOISE_LABEL,
    STATIC_LABEL,
    MovingObjectSpec,
    SceneSpec,
    expected_noise_count,
    frame_timestamps,
    generate,
    labels_to_strings,
    scene_from_dict,
    sweep_scene,
    true_box,
)

G = SensorGeometry(64, 48)


def test_motionless_object_emits_nothing():
    spec = SceneSpec(G, 100_000, objects=(MovingObjectSpec(0, 5, 5, 10, 10),))
    labeled, frames = generate(spec)
    assert len(labeled) == 0
    # frames still exist, but only moving objects carry ground truth
    assert [f.t_us for f in frames] == [33_000, 66_000, 99_000]
    assert all(f.boxes == () for f in frames)


def test_all_quiet_scene_is_empty():
    labeled, _ = generate(SceneSpec(G, 50_000))
    assert len(labeled) == 0


def test_solid_edge_events_per_advance():
    obj = MovingObjectSpec(0, 10, 10, 10, 10, vx=100.0)
    labeled, _ = generate(SceneSpec(SensorGeometry(100, 40), 200_000, 1000, (obj,)))
    ev = labeled.events
    times, counts = np.unique(ev.t, return_counts=True)
    # one pixel every 10 ticks, first step at the half-pixel crossing
    assert np.all(np.diff(times) == 10_000)
    assert times[0] == 5_000
    assert np.all(counts == 20)
    for t in times:
        step = ev[ev.t == t]
        assert int(step.p.sum()) == 10  # 10 ON leading, 10 OFF trailing
        assert set(step.x[step.p == 1].tolist()) == {int(step.x.max())}
        assert set(step.x[step.p == 0].tolist()) == {int(step.x.min())}


def test_outline_object_emits_on_both_edge_pairs():
    obj = MovingObjectSpec(0, 10, 10, 8, 8, vx=200.0, vy=200.0, fill="outline")
    labeled, _ = generate(SceneSpec(G, 50_000, 100, (obj,)))
    ev = labeled.events
    assert len(ev)
    assert len(np.unique(ev.x)) > 8 and len(np.unique(ev.y)) > 8


def test_noise_count_within_five_sigma():
    for seed in range(5):
        spec = SceneSpec(G, 2_000_000, noise_rate_hz_per_pixel=3.0, rng_seed=seed)
        labeled, _ = generate(spec)
        mu = expected_noise_count(spec)
        assert abs(len(labeled) - mu) <= 5 * np.sqrt(mu)
        assert np.all(labeled.source == NOISE_LABEL)


def test_static_texture_stays_in_its_box():
    box = BoundingBox(10, 12, 19, 21)
    spec = SceneSpec(G, 500_000, static_objects=(box,), static_rate_hz_per_pixel=50.0, rng_seed=1)
    labeled, _ = generate(spec)
    st_ev = labeled.of_source(STATIC_LABEL)
    assert len(st_ev) == len(labeled) > 0
    assert st_ev.x.min() >= 10 and st_ev.x.max() <= 19
    assert st_ev.y.min() >= 12 and st_ev.y.max() <= 21


def test_true_box_kinematics():
    obj = MovingObjectSpec(0, 4, 6, 10, 8, vx=50.0)
    assert true_box(obj, 0, SensorGeometry(200, 50)) == BoundingBox(4, 6, 13, 13)
    assert true_box(obj, 1_000_000, SensorGeometry(200, 50)) == BoundingBox(54, 6, 63, 13)


def test_true_box_exit():
    obj = MovingObjectSpec(0, 50, 5, 10, 10, vx=100.0)
    g = SensorGeometry(64, 48)
    assert true_box(obj, 100_000, g) == BoundingBox(60, 5, 63, 14)  # clipped
    assert true_box(obj, 200_000, g) is None  # fully off-sensor


def test_bounce_keeps_object_on_sensor():
    obj = MovingObjectSpec(0, 3, 4, 12, 9, vx=400.0, vy=300.0, fill="outline", motion="bounce")
    for t in range(0, 2_000_000, 7_919):
        b = true_box(obj, t, G)
        assert b is not None and b.area == 12 * 9


def test_generate_is_deterministic_and_valid():
    spec = SceneSpec(
        G, 300_000, 100,
        (MovingObjectSpec(0, 0, 0, 10, 6, 150.0, 90.0, "outline", "bounce"),
         MovingObjectSpec(1, 40, 30, 6, 6, -80.0, 0.0)),
        noise_rate_hz_per_pixel=5.0, static_objects=(BoundingBox(50, 0, 70, 5),),
        static_rate_hz_per_pixel=20.0, rng_seed=9,
    )
    a, fa = generate(spec)
    b, fb = generate(spec)
    assert a.events == b.events and np.array_equal(a.source, b.source) and fa == fb
    assert validate_stream(a.events, G).ok
    assert set(np.unique(a.source).tolist()) <= {0, 1, NOISE_LABEL, STATIC_LABEL}
    assert labels_to_strings([0, -1, -2]) == ["0", "NOISE", "STATIC"]


@settings(max_examples=25)
@given(st.floats(10, 400), st.floats(10, 400))
def test_event_count_monotone_in_speed(v1, v2):
    lo, hi = sorted((v1, v2))
    g = SensorGeometry(400, 20)

    def count(v):
        obj = MovingObjectSpec(0, 0, 2, 6, 6, vx=v)
        return len(generate(SceneSpec(g, 500_000, 1000, (obj,)))[0])

    assert count(lo) <= count(hi)


def test_frame_timestamps():
    spec = SceneSpec(G, 10_000_000, frame_interval_us=333_333)
    ts = frame_timestamps(spec)
    assert len(ts) == 30 and ts[0] == 333_333 and ts[-1] <= 10_000_000


def test_sweep_scene_crosses_sensor():
    spec, obj = sweep_scene(200.0, G)
    labeled, _ = generate(spec)
    assert labeled.events.x.min() == 0 and labeled.events.x.max() == G.width - 1
    assert obj.fill == "outline"


def test_scene_from_dict():
    spec = scene_from_dict({
        "geometry": "32x16", "duration_us": 1000, "seed": 4,
        "objects": [{"id": 2, "x0": 1, "y0": 1, "w": 3, "h": 3, "vx": 10, "motion": "bounce"}],
        "static": [{"box": [0, 0, 3, 3]}],
    })
    assert spec.geometry == SensorGeometry(32, 16)
    assert spec.objects[0].object_id == 2 and spec.objects[0].motion == "bounce"
    assert spec.static_objects == (BoundingBox(0, 0, 3, 3),)


@pytest.mark.parametrize("kwargs", [dict(duration_us=0), dict(gen_dt_us=0), dict(noise_rate_hz_per_pixel=-1.0)])
def test_invalid_scene(kwargs):
    base = dict(geometry=G, duration_us=1000)
    base.update(kwargs)
    with pytest.raises(ValueError):
        SceneSpec(**base)
    with pytest.raises(ValueError):
        MovingObjectSpec(0, 0, 0, 1, 5)
