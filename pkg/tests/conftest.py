import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))  # oracles.py

from lidar_obstacles.pipeline import PipelineConfig, dump_config  # noqa: E402
from lidar_obstacles.scene import gen_scene, write_scene  # noqa: E402


@pytest.fixture(scope="session")
def default_scene(tmp_path_factory):
    """Default synthetic scene on disk: (scene, paths, config, config_path)."""
    out = tmp_path_factory.mktemp("scene")
    scene = gen_scene()
    paths = write_scene(scene, out)
    config = PipelineConfig(static_transform=scene.sensor_tf, map_metadata_path=str(paths["map"]))
    config_path = out / "config.yaml"
    config_path.write_text(dump_config(config))
    return scene, paths, config, config_path


def pytest_terminal_summary(terminalreporter):
    results = sys.modules.get("test_acceptance")
    if results is None or not results.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results.RESULTS):
        terminalreporter.write_line(results.RESULTS[n])
