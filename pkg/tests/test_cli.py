import csv
import subprocess
import sys

import numpy as np
import pytest
import yaml

from repulsor import cli, shapes
from repulsor.cli import EFFECTIVE_CONFIG, EXIT_CONFIG, EXIT_OK, EXIT_SOLVER, main, thread_count
from repulsor.config import (
    ConfigError,
    SceneConfig,
    build_constraints,
    build_mesh,
    build_penalties,
    load_config,
    parse_config,
    serialize_config,
)
from repulsor.flow import FlowError
from repulsor.mesh import load_obj, save_obj
from repulsor.penalties import ImplicitAttractor, ImplicitObstacle, MeshObstacle, SampledField

MINIMAL = """
mesh: {shape: icosphere, level: 1}
max_steps: 1
output: out
"""

FULL = """
mesh: sphere.obj
p: 6
theta: 0.25
chi: 0.4
leaf_size: 4
metric: H1
max_steps: 3
tolerance: 1.0e-7
remesh: false
free_barycenter: true
deterministic: true
threads: 2
output: results
stride: 2
constraints:
  - {type: total_area}
  - {type: total_volume, target: 4.0}
  - {type: barycenter, component: 0}
  - {type: pin, vertex: 3, target: [0, 0, 1]}
penalties:
  - {type: area_deviation, weight: 0.5}
  - {type: willmore, weight: 0.1}
  - {type: attractor, weight: 1.0, field: {shape: sphere, center: [0, 0, 0], radius: 2}}
obstacles:
  - {mesh: obstacle.obj, weight: 2.0}
  - {field: {shape: plane, point: [0, 0, -3], normal: [0, 0, 1]}, weight: 1.0}
  - {field: {shape: sampled, path: field.bin}, weight: 1.0}
consistency: {surface: torus, major: 1.0, minor: 0.25, levels: [0, 1], thetas: [1.0, 0.5]}
"""


@pytest.fixture
def scene(tmp_path):
    save_obj(shapes.icosphere(1), tmp_path / "sphere.obj")
    save_obj(shapes.icosphere(0, 0.3, center=(0, 0, 3)), tmp_path / "obstacle.obj")
    SampledField(np.ones((2, 2, 2)), (-5.0, -5.0, -5.0), (10.0, 10.0, 10.0)).save(tmp_path / "field.bin")
    (tmp_path / "full.yaml").write_text(FULL)
    return tmp_path


def _write(tmp_path, text, name="scene.yaml"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def test_defaults():
    cfg = parse_config("")
    assert (cfg.p, cfg.theta, cfg.chi, cfg.leaf_size, cfg.metric) == (6.0, 0.5, 0.5, 8, "Hs")
    assert cfg.stride == 1 and cfg.threads is None and not cfg.deterministic


def test_full_config_builds(scene):
    cfg = load_config(scene / "full.yaml")
    assert cfg.metric == "H1" and cfg.stride == 2 and cfg.threads == 2
    mesh = build_mesh(cfg)
    assert mesh.n_faces == 80
    cs = build_constraints(cfg)
    assert [type(c).__name__ for c in cs] == ["TotalArea", "TotalVolume", "Barycenter", "Pin"]
    kinds = [type(p) for p in build_penalties(cfg)]
    assert kinds[2:] == [ImplicitAttractor, MeshObstacle, ImplicitObstacle, ImplicitObstacle]
    assert cfg.consistency.surface == "torus" and cfg.consistency.levels == [0, 1]


def test_round_trip(scene):
    cfg = load_config(scene / "full.yaml")
    again = parse_config(serialize_config(cfg), scene)
    assert again == cfg
    assert parse_config(serialize_config(SceneConfig())) == SceneConfig()


@pytest.mark.parametrize(
    "text, field",
    [
        ("mesh: nowhere.obj\n", "mesh"),
        ("p: 3\n", "p"),
        ("theta: -1\n", "theta"),
        ("metric: H3\n", "metric"),
        ("stride: 0\n", "stride"),
        ("bogus: 1\n", "bogus"),
        ("remesh: maybe\n", "remesh"),
        ("constraints: [{type: total_mass}]\n", "constraints"),
        ("penalties: [{type: willmore, weight: -1}]\n", "penalties"),
        ("obstacles: [{field: {shape: cone}}]\n", "obstacles"),
        ("consistency: {surface: cube}\n", "consistency.surface"),
        ("[1, 2]\n", "config"),
    ],
)
def test_config_errors_name_the_field(tmp_path, text, field):
    with pytest.raises(ConfigError, match=field):
        parse_config(text, tmp_path)


def test_subcritical_allows_small_p():
    assert parse_config("p: 3\nsubcritical: true\n").p == 3.0


def test_thread_count(monkeypatch):
    monkeypatch.delenv("REPULSOR_THREADS", raising=False)
    assert thread_count(SceneConfig()) is None
    assert thread_count(SceneConfig(threads=3)) == 3
    assert thread_count(SceneConfig(threads=3, deterministic=True)) == 1
    monkeypatch.setenv("REPULSOR_THREADS", "2")
    assert thread_count(SceneConfig(deterministic=True)) == 2
    monkeypatch.setenv("REPULSOR_THREADS", "many")
    with pytest.raises(ConfigError, match="REPULSOR_THREADS"):
        thread_count(SceneConfig())


def test_minimal_run(tmp_path, capsys):
    assert main(["run", _write(tmp_path, MINIMAL)]) == EXIT_OK
    out = tmp_path / "out"
    assert (out / "frame_000000.obj").is_file() and (out / "frame_000001.obj").is_file()
    rows = list(csv.reader(open(out / "energies.csv")))
    assert rows[0][:3] == ["step", "energy", "objective"] and rows[0][-3:] == ["tau", "iterations", "seconds"]
    assert "residual_barycenter_0" in rows[0]
    assert len(rows) == 2
    effective = yaml.safe_load((out / EFFECTIVE_CONFIG).read_text())
    assert effective["theta"] == 0.5 and effective["leaf_size"] == 8
    summary = yaml.safe_load((out / "summary.yaml").read_text())
    assert summary["status"] == "completed" and summary["steps"] == 1
    assert "status: completed" in capsys.readouterr().out


def test_frames_follow_stride(tmp_path):
    text = MINIMAL.replace("max_steps: 1", "max_steps: 3\nstride: 2")
    assert main(["run", _write(tmp_path, text)]) == EXIT_OK
    frames = sorted(p.name for p in (tmp_path / "out").glob("frame_*.obj"))
    assert frames == ["frame_000000.obj", "frame_000002.obj", "frame_000003.obj"]
    summary = yaml.safe_load((tmp_path / "out" / "summary.yaml").read_text())
    assert load_obj(tmp_path / "out" / "frame_000003.obj").n_faces == summary["faces"]


def test_missing_mesh_exit_code(tmp_path, capsys):
    assert main(["run", _write(tmp_path, "mesh: missing.obj\n")]) == EXIT_CONFIG
    assert "mesh" in capsys.readouterr().err
    assert main(["run", _write(tmp_path, "max_steps: 1\n", "nomesh.yaml")]) == EXIT_CONFIG
    assert main(["run", str(tmp_path / "absent.yaml")]) == EXIT_CONFIG


def test_obstacle_violation_is_config_error(tmp_path, capsys):
    text = MINIMAL + "obstacles: [{field: {shape: sphere, center: [0, 0, 0], radius: 2.0}, weight: 1.0}]\n"
    assert main(["run", _write(tmp_path, text)]) == EXIT_CONFIG
    assert "vertex" in capsys.readouterr().err


def test_solver_failure_exit_code(tmp_path, monkeypatch):
    def failing_step(state):
        raise FlowError("step 0: GMRES did not converge", state)

    monkeypatch.setattr(cli, "flow_step", failing_step)
    assert main(["run", _write(tmp_path, MINIMAL)]) == EXIT_SOLVER
    summary = yaml.safe_load((tmp_path / "out" / "summary.yaml").read_text())
    assert summary["status"] == "solver failure" and "error" in summary


def test_deterministic_reruns_identical(tmp_path):
    text = "mesh: {shape: bumpy_sphere, level: 1}\nmax_steps: 3\ndeterministic: true\n"
    blobs = []
    for name in ("a", "b"):
        assert main(["run", _write(tmp_path, text + f"output: {name}\n", f"{name}.yaml")]) == EXIT_OK
        blobs.append((tmp_path / name / "energies.csv").read_bytes())
    assert blobs[0] == blobs[1]


def test_validate(scene, capsys):
    assert main(["validate", str(scene / "full.yaml")]) == EXIT_OK
    out = capsys.readouterr().out
    assert "42 vertices" in out and "metric: H1" in out
    assert main(["validate", _write(scene, "chi: -2\n", "bad.yaml")]) == EXIT_CONFIG


def test_consistency_command(tmp_path, capsys):
    text = "consistency: {surface: sphere, levels: [1, 2, 3], thetas: [1.0, 0.5, 0.25, 0.0]}\noutput: c\n"
    assert main(["consistency", _write(tmp_path, text)]) == EXIT_OK
    rows = list(csv.reader(open(tmp_path / "c" / "consistency.csv")))
    assert [r[0] for r in rows] == ["kind"] + ["level"] * 3 + ["theta"] * 4 + ["rate_h", "rate_theta"]
    assert float(rows[7][5]) <= 1e-12  # theta = 0
    assert "fitted rate in h" in capsys.readouterr().out


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "repulsor.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "consistency" in res.stdout
