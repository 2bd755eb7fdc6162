from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spikedet.clustering import DbscanParams
from spikedet.config import (
    branch_fragment,
    load_pipeline_config,
    load_scene_config,
    loads_toml,
    pipeline_from_dict,
    pipeline_to_toml,
    scene_config_from_dict,
)
from spikedet.events import SensorGeometry, TimeBase
from spikedet.lif import LifParams
from spikedet.pipeline import ConfigError, PipelineConfig, SpeedBranchConfig

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

BASE = """
[geometry]
width = 64
height = 48

[windows]
eval_interval_us = 50000

[[branches]]
threshold_speed = 50.0
beta = 0.96

[[branches]]
threshold_speed = 200.0
beta = 0.86
"""


def parse(text):
    return pipeline_from_dict(loads_toml(text))


def test_minimal_config_defaults():
    cfg = parse(BASE)
    assert cfg.geometry == SensorGeometry(64, 48)
    assert cfg.time_base == TimeBase(0, 1000)
    assert cfg.dbscan == DbscanParams(5.0, 10)
    assert [b.band_index for b in cfg.branches] == [0, 1]
    assert cfg.branches[1].lif == LifParams(beta=0.86)
    assert cfg.window_us == 33_000 and cfg.eval_interval_us == 50_000


def test_shipped_configs_load():
    for name in ("benchmark", "fixture"):
        load_pipeline_config(CONFIGS / f"{name}_pipeline.toml")
        load_scene_config(CONFIGS / f"{name}_scene.toml")
    bench = load_pipeline_config(CONFIGS / "benchmark_pipeline.toml")
    assert bench.cluster_floor == 100 and bench.eval_interval_us == 333_333


@pytest.mark.parametrize("edit, message", [
    (("beta = 0.86", "beta = 1.5"), "branches[1]"),
    (("beta = 0.86\n", ""), "branches[1].beta: missing"),
    (("threshold_speed = 200.0", "threshold_speed = 20.0"), "strictly increasing"),
    (("width = 64", "width = 64\ndepth = 3"), "geometry.depth: unknown key"),
    (("width = 64", 'width = "wide"'), "geometry.width"),
    (("eval_interval_us = 50000", "eval_interval_us = 50000\neval_timestamps = [1]"), "mutually exclusive"),
    (("eval_interval_us = 50000", "eval_timestamps = [1, 2.5]"), "eval_timestamps"),
    (("eval_interval_us = 50000", ""), "eval_timestamps or eval_interval_us"),
    (("[windows]", "[windows]\nwindow_us = 0"), "window_us"),
    (("beta = 0.96", "beta = 0.96\nkernel = [[1.0]]"), "branches[0]"),
    (("beta = 0.96", "beta = 0.96\nspeed = 3"), "branches[0].speed: unknown key"),
])
def test_errors_name_the_key(edit, message):
    text = BASE.replace(*edit, 1)
    with pytest.raises(ConfigError) as exc:
        parse(text)
    assert message in str(exc.value)


def test_invalid_toml_and_missing_branches():
    with pytest.raises(ConfigError, match="invalid TOML"):
        loads_toml("[geometry\nwidth = 1")
    with pytest.raises(ConfigError, match="branches"):
        parse(BASE.split("[[branches]]")[0])


def test_scene_errors():
    with pytest.raises(ConfigError, match="duration_us: missing"):
        scene_config_from_dict({"geometry": "10x10"})
    with pytest.raises(ConfigError, match=r"objects\[0\].w: missing"):
        scene_config_from_dict({"geometry": "10x10", "duration_us": 5, "objects": [{"id": 0, "x0": 0, "y0": 0, "h": 2}]})
    with pytest.raises(ConfigError, match="duration_us"):
        scene_config_from_dict({"geometry": "10x10", "duration_us": 0})
    with pytest.raises(ConfigError, match="unknown key"):
        scene_config_from_dict({"geometry": "10x10", "duration_us": 5, "colour": 1})


betas = st.floats(0.01, 0.99, allow_nan=False)


@pytest.mark.filterwarnings("ignore:branch")
@settings(max_examples=40)
@given(st.lists(betas, min_size=1, max_size=4, unique=True), st.booleans(), st.integers(1, 500),
       st.one_of(st.none(), st.integers(1, 200)))
def test_pipeline_round_trip(bs, residual, window, floor):
    branches = tuple(
        SpeedBranchConfig(i, 25.0 * (i + 1), LifParams(beta=b, recovery_radius=1 + i % 2))
        for i, b in enumerate(sorted(bs, reverse=True))
    )
    cfg = PipelineConfig(
        SensorGeometry(40, 30), branches, TimeBase(7, 500), DbscanParams(3.5, 4), floor, window,
        eval_interval_us=1000, eval_start_us=2000, include_residual_band=residual,
    )
    assert parse(pipeline_to_toml(cfg)) == cfg


def test_explicit_timestamps_round_trip():
    cfg = parse(BASE.replace("eval_interval_us = 50000", "eval_timestamps = [5, 10, 20]"))
    assert cfg.eval_timestamps == (5, 10, 20)
    assert parse(pipeline_to_toml(cfg)) == cfg


@pytest.mark.filterwarnings("ignore:branch")
def test_branch_fragment_appends_to_a_config():
    br = SpeedBranchConfig(2, 800.0, LifParams(beta=0.5116845, binary_input=True))
    frag = branch_fragment(br, comment="calibrated for 800 px/s\nat dt_us = 1000")
    assert frag.startswith("# calibrated for 800 px/s\n# at dt_us = 1000\n[[branches]]")
    cfg = parse(BASE + "\n" + frag)
    assert cfg.branches[2] == br


def toml_blocks(path):
    text = path.read_text()
    return [b.split("```", 1)[0] for b in text.split("```toml\n")[1:]]


def test_documented_examples_load():
    pipeline, scene = toml_blocks(CONFIGS.parent / "docs" / "CONFIG.md")
    cfg = parse(pipeline)
    assert cfg.cluster_floor == 100 and len(cfg.branches) == 2
    spec = scene_config_from_dict(loads_toml(scene))
    assert spec.objects[0].motion == "bounce" and spec.frame_interval_us == 333_333
