"""Scene configuration: a YAML document parsed into :class:`SceneConfig`.

Grammar (all keys optional unless noted; unknown keys are errors)::

    mesh: path/to/input.obj          # or {shape: icosphere, level: 3, ...}
    p: 6.0                           # tangent-point exponent
    subcritical: false               # required for p <= 4
    theta: 0.5                       # Barnes-Hut separation
    chi: 0.5                         # hierarchical-matrix separation
    leaf_size: 8
    metric: Hs                       # Hs | L2 | H1 | H2
    max_steps: 100
    tolerance: 1.0e-6                # stop when the direction norm < tolerance * bbox diagonal
    remesh: true
    free_barycenter: false
    disable_low_order: false
    deterministic: false
    threads: null                    # BLAS threads; null = all cores
    output: out                      # directory for frames, energies.csv, summary
    stride: 1                        # write a frame every stride steps
    constraints:
      - {type: total_area}           # target defaults to the initial value
      - {type: total_volume, target: 4.0}
      - {type: barycenter, component: 0}
      - {type: pin, vertex: 12, target: [0, 0, 1]}
    penalties:
      - {type: area_deviation, weight: 1.0}
      - {type: volume_deviation, weight: 1.0}
      - {type: boundary_length, weight: 1.0}
      - {type: boundary_curvature, weight: 1.0}
      - {type: willmore, weight: 0.1}
      - {type: attractor, weight: 1.0, field: {shape: sphere, center: [0, 0, 0], radius: 2}}
    obstacles:
      - {mesh: obstacle.obj, weight: 1.0}
      - {field: {shape: plane, point: [0, 0, -1], normal: [0, 0, 1]}, weight: 1.0}
    consistency:
      surface: sphere                # sphere | torus
      radius: 1.0                    # sphere
      major: 1.0                     # torus
      minor: 0.3333333333333333
      levels: [3, 4, 5]
      thetas: [1.0, 0.5, 0.25, 0.0]

Implicit fields: ``sphere (center, radius)``, ``cylinder (point, axis,
radius)``, ``plane (point, normal)``, ``slab (point, normal, half_width)``,
``sampled (path)``. Relative paths resolve against the config file.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import shapes
from .bvh import BvhParams, build_bvh
from .constraints import Barycenter, ConstraintSet, Pin, TotalArea, TotalVolume
from .flow import METRICS
from .mesh import TriMesh, load_obj
from .penalties import (
    AreaDeviation,
    BoundaryCurvature,
    BoundaryLength,
    CylinderField,
    ImplicitAttractor,
    ImplicitObstacle,
    MeshObstacle,
    PenaltySet,
    PlaneField,
    SampledField,
    SlabField,
    SphereField,
    VolumeDeviation,
    Willmore,
)


class ConfigError(ValueError):
    pass


CONSTRAINT_TYPES = ("total_area", "total_volume", "barycenter", "pin")
PENALTY_TYPES = ("area_deviation", "volume_deviation", "boundary_length", "boundary_curvature", "willmore",
                 "attractor")
FIELD_SHAPES = {
    "sphere": ("center", "radius"),
    "cylinder": ("point", "axis", "radius"),
    "plane": ("point", "normal"),
    "slab": ("point", "normal", "half_width"),
    "sampled": ("path",),
}
MESH_SHAPES = ("icosphere", "bumpy_sphere", "torus", "ellipsoid", "disk", "cube", "tetrahedron")


@dataclass
class ConsistencyConfig:
    surface: str = "sphere"
    radius: float = 1.0
    major: float = 1.0
    minor: float = 1.0 / 3.0
    levels: list = field(default_factory=lambda: [3, 4, 5])
    thetas: list = field(default_factory=lambda: [1.0, 0.5, 0.25, 0.0])


@dataclass
class SceneConfig:
    mesh: str | dict | None = None
    p: float = 6.0
    subcritical: bool = False
    theta: float = 0.5
    chi: float = 0.5
    leaf_size: int = 8
    metric: str = "Hs"
    max_steps: int = 100
    tolerance: float = 1e-6
    remesh: bool = True
    free_barycenter: bool = False
    disable_low_order: bool = False
    deterministic: bool = False
    threads: int | None = None
    output: str = "out"
    stride: int = 1
    constraints: list = field(default_factory=list)
    penalties: list = field(default_factory=list)
    obstacles: list = field(default_factory=list)
    consistency: ConsistencyConfig = field(default_factory=ConsistencyConfig)
    base_dir: Path = field(default=Path("."), compare=False, repr=False)

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def output_dir(self) -> Path:
        return self.resolve(self.output)


_FLOAT = ("p", "theta", "chi", "tolerance")
_INT = ("leaf_size", "max_steps", "stride")
_BOOL = ("subcritical", "remesh", "free_barycenter", "disable_low_order", "deterministic")


def _require(cond: bool, name: str, message: str):
    if not cond:
        raise ConfigError(f"{name}: {message}")


def _number(value, name: str, kind=float):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{name}: expected a number, got {value!r}")
    if kind is int and int(value) != value:
        raise ConfigError(f"{name}: expected an integer, got {value!r}")
    return kind(value)


def _vector(value, name: str) -> list:
    _require(isinstance(value, (list, tuple)) and len(value) == 3, name, f"expected 3 numbers, got {value!r}")
    return [_number(v, name) for v in value]


def _check_keys(entry: dict, allowed, name: str):
    extra = set(entry) - set(allowed)
    _require(not extra, name, f"unknown keys {sorted(extra)}")


def _field_spec(spec, name: str, base: Path) -> dict:
    _require(isinstance(spec, dict), name, "expected a mapping with a 'shape' key")
    shape = spec.get("shape")
    _require(shape in FIELD_SHAPES, f"{name}.shape", f"must be one of {sorted(FIELD_SHAPES)}")
    keys = FIELD_SHAPES[shape]
    _check_keys(spec, ("shape",) + keys, name)
    out = {"shape": shape}
    for k in keys:
        _require(k in spec, f"{name}.{k}", "missing")
        v = spec[k]
        if k == "path":
            _require(isinstance(v, str), f"{name}.path", "expected a string")
            _require((Path(v) if Path(v).is_absolute() else base / v).is_file(), f"{name}.path",
                     f"file not found: {v}")
            out[k] = v
        elif k in ("radius", "half_width"):
            out[k] = _number(v, f"{name}.{k}")
            _require(out[k] > 0, f"{name}.{k}", "must be positive")
        else:
            out[k] = _vector(v, f"{name}.{k}")
    return out


def _constraint_spec(entry, i: int) -> dict:
    name = f"constraints[{i}]"
    _require(isinstance(entry, dict), name, "expected a mapping")
    kind = entry.get("type")
    _require(kind in CONSTRAINT_TYPES, f"{name}.type", f"must be one of {list(CONSTRAINT_TYPES)}")
    out = {"type": kind}
    if kind in ("total_area", "total_volume"):
        _check_keys(entry, ("type", "target"), name)
        if entry.get("target") is not None:
            out["target"] = _number(entry["target"], f"{name}.target")
    elif kind == "barycenter":
        _check_keys(entry, ("type", "component", "target"), name)
        out["component"] = _number(entry.get("component", 0), f"{name}.component", int)
        if entry.get("target") is not None:
            out["target"] = _vector(entry["target"], f"{name}.target")
    else:
        _check_keys(entry, ("type", "vertex", "target"), name)
        _require("vertex" in entry, f"{name}.vertex", "missing")
        out["vertex"] = _number(entry["vertex"], f"{name}.vertex", int)
        if entry.get("target") is not None:
            out["target"] = _vector(entry["target"], f"{name}.target")
    return out


def _penalty_spec(entry, i: int, base: Path) -> dict:
    name = f"penalties[{i}]"
    _require(isinstance(entry, dict), name, "expected a mapping")
    kind = entry.get("type")
    _require(kind in PENALTY_TYPES, f"{name}.type", f"must be one of {list(PENALTY_TYPES)}")
    allowed = {"type", "weight"}
    if kind in ("area_deviation", "volume_deviation", "boundary_length"):
        allowed.add("target")
    if kind == "attractor":
        allowed.update(("field", "p"))
    _check_keys(entry, allowed, name)
    out = {"type": kind, "weight": _number(entry.get("weight", 1.0), f"{name}.weight")}
    _require(out["weight"] >= 0, f"{name}.weight", "must be non-negative")
    if entry.get("target") is not None:
        out["target"] = _number(entry["target"], f"{name}.target")
    if kind == "attractor":
        _require("field" in entry, f"{name}.field", "missing")
        out["field"] = _field_spec(entry["field"], f"{name}.field", base)
        if "p" in entry:
            out["p"] = _number(entry["p"], f"{name}.p")
    return out


def _obstacle_spec(entry, i: int, base: Path) -> dict:
    name = f"obstacles[{i}]"
    _require(isinstance(entry, dict), name, "expected a mapping")
    _check_keys(entry, ("mesh", "field", "weight", "theta"), name)
    _require(("mesh" in entry) != ("field" in entry), name, "needs exactly one of 'mesh' or 'field'")
    out = {"weight": _number(entry.get("weight", 1.0), f"{name}.weight")}
    _require(out["weight"] >= 0, f"{name}.weight", "must be non-negative")
    if "mesh" in entry:
        path = entry["mesh"]
        _require(isinstance(path, str), f"{name}.mesh", "expected a path")
        _require((Path(path) if Path(path).is_absolute() else base / path).is_file(), f"{name}.mesh",
                 f"file not found: {path}")
        out["mesh"] = path
        if "theta" in entry:
            out["theta"] = _number(entry["theta"], f"{name}.theta")
    else:
        out["field"] = _field_spec(entry["field"], f"{name}.field", base)
    return out


def _mesh_spec(value, base: Path):
    if value is None:
        return None
    if isinstance(value, str):
        _require((Path(value) if Path(value).is_absolute() else base / value).is_file(), "mesh",
                 f"file not found: {value}")
        return value
    _require(isinstance(value, dict), "mesh", "expected a path or a mapping with a 'shape' key")
    _require(value.get("shape") in MESH_SHAPES, "mesh.shape", f"must be one of {list(MESH_SHAPES)}")
    return dict(value)


def _consistency(value) -> ConsistencyConfig:
    if value is None:
        return ConsistencyConfig()
    _require(isinstance(value, dict), "consistency", "expected a mapping")
    names = {f.name for f in dataclasses.fields(ConsistencyConfig)}
    _check_keys(value, names, "consistency")
    out = ConsistencyConfig()
    if "surface" in value:
        _require(value["surface"] in ("sphere", "torus"), "consistency.surface", "must be sphere or torus")
        out.surface = value["surface"]
    for k in ("radius", "major", "minor"):
        if k in value:
            setattr(out, k, _number(value[k], f"consistency.{k}"))
            _require(getattr(out, k) > 0, f"consistency.{k}", "must be positive")
    if "levels" in value:
        _require(isinstance(value["levels"], list) and value["levels"], "consistency.levels", "expected a list")
        out.levels = [_number(v, "consistency.levels", int) for v in value["levels"]]
        _require(min(out.levels) >= 0, "consistency.levels", "must be non-negative")
    if "thetas" in value:
        _require(isinstance(value["thetas"], list), "consistency.thetas", "expected a list")
        out.thetas = [_number(v, "consistency.thetas") for v in value["thetas"]]
        _require(min(out.thetas, default=0) >= 0, "consistency.thetas", "must be non-negative")
    return out


def parse_config(text: str, base_dir: str | Path = ".") -> SceneConfig:
    """Parse and validate YAML text; relative paths resolve against ``base_dir``."""
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}") from exc
    data = {} if data is None else data
    _require(isinstance(data, dict), "config", "top level must be a mapping")
    base = Path(base_dir)
    names = {f.name for f in dataclasses.fields(SceneConfig)} - {"base_dir"}
    _check_keys(data, names, "config")
    cfg = SceneConfig(base_dir=base)
    for k in _FLOAT:
        if k in data:
            setattr(cfg, k, _number(data[k], k))
    for k in _INT:
        if k in data:
            setattr(cfg, k, _number(data[k], k, int))
    for k in _BOOL:
        if k in data:
            _require(isinstance(data[k], bool), k, f"expected true or false, got {data[k]!r}")
            setattr(cfg, k, data[k])
    if data.get("threads") is not None:
        cfg.threads = _number(data["threads"], "threads", int)
        _require(cfg.threads >= 1, "threads", "must be at least 1")
    if "metric" in data:
        _require(data["metric"] in METRICS, "metric", f"must be one of {list(METRICS)}")
        cfg.metric = data["metric"]
    if "output" in data:
        _require(isinstance(data["output"], str), "output", "expected a path")
        cfg.output = data["output"]
    cfg.mesh = _mesh_spec(data.get("mesh"), base)
    cfg.constraints = [_constraint_spec(e, i) for i, e in enumerate(data.get("constraints") or [])]
    cfg.penalties = [_penalty_spec(e, i, base) for i, e in enumerate(data.get("penalties") or [])]
    cfg.obstacles = [_obstacle_spec(e, i, base) for i, e in enumerate(data.get("obstacles") or [])]
    cfg.consistency = _consistency(data.get("consistency"))

    _require(cfg.p > 0, "p", "must be positive")
    _require(cfg.p > 4 or cfg.subcritical, "p", "p <= 4 requires subcritical: true")
    _require(cfg.theta >= 0, "theta", "must be non-negative")
    _require(cfg.chi >= 0, "chi", "must be non-negative")
    _require(cfg.leaf_size >= 1, "leaf_size", "must be at least 1")
    _require(cfg.max_steps >= 0, "max_steps", "must be non-negative")
    _require(cfg.tolerance >= 0, "tolerance", "must be non-negative")
    _require(cfg.stride >= 1, "stride", "must be at least 1")
    return cfg


def load_config(path: str | Path) -> SceneConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc}") from exc
    return parse_config(text, path.parent)


def config_to_dict(cfg: SceneConfig) -> dict:
    """Every field, defaults included, as plain YAML-ready data."""
    out = {}
    for f in dataclasses.fields(SceneConfig):
        if f.name == "base_dir":
            continue
        value = getattr(cfg, f.name)
        out[f.name] = dataclasses.asdict(value) if f.name == "consistency" else value
    return out


def serialize_config(cfg: SceneConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False, default_flow_style=None)


# -- building runtime objects -------------------------------------------------------


def build_mesh(cfg: SceneConfig) -> TriMesh:
    if cfg.mesh is None:
        raise ConfigError("mesh: missing (a path to an OBJ file or a {shape: ...} mapping)")
    if isinstance(cfg.mesh, str):
        return load_obj(cfg.resolve(cfg.mesh))
    spec = dict(cfg.mesh)
    make = getattr(shapes, spec.pop("shape"))
    try:
        return make(**spec)
    except TypeError as exc:
        raise ConfigError(f"mesh: {exc}") from exc


def build_field(spec: dict, cfg: SceneConfig):
    shape = spec["shape"]
    if shape == "sampled":
        return SampledField.load(cfg.resolve(spec["path"]))
    kw = {k: (np.asarray(v, float) if isinstance(v, list) else v) for k, v in spec.items() if k != "shape"}
    return {"sphere": SphereField, "cylinder": CylinderField, "plane": PlaneField, "slab": SlabField}[shape](**kw)


def build_constraints(cfg: SceneConfig) -> ConstraintSet:
    out = []
    for c in cfg.constraints:
        target = c.get("target")
        if c["type"] == "total_area":
            out.append(TotalArea(target))
        elif c["type"] == "total_volume":
            out.append(TotalVolume(target))
        elif c["type"] == "barycenter":
            out.append(Barycenter(c["component"], None if target is None else np.asarray(target, float)))
        else:
            out.append(Pin(c["vertex"], None if target is None else np.asarray(target, float)))
    return ConstraintSet(out)


def build_penalties(cfg: SceneConfig) -> PenaltySet:
    out = []
    for e in cfg.penalties:
        w, kind = e["weight"], e["type"]
        if kind == "area_deviation":
            out.append(AreaDeviation(e.get("target"), w))
        elif kind == "volume_deviation":
            out.append(VolumeDeviation(e.get("target"), w))
        elif kind == "boundary_length":
            out.append(BoundaryLength(e.get("target"), w))
        elif kind == "boundary_curvature":
            out.append(BoundaryCurvature(w))
        elif kind == "willmore":
            out.append(Willmore(w))
        else:
            out.append(ImplicitAttractor(build_field(e["field"], cfg), e.get("p", cfg.p), w))
    for e in cfg.obstacles:
        if "mesh" in e:
            obstacle = load_obj(cfg.resolve(e["mesh"]))
            tree = build_bvh(obstacle, BvhParams(cfg.leaf_size))
            out.append(MeshObstacle(obstacle, cfg.p, e["weight"], e.get("theta", cfg.theta), tree))
        else:
            out.append(ImplicitObstacle(build_field(e["field"], cfg), cfg.p, e["weight"]))
    return PenaltySet(out)
