"""Run configuration: one TOML file per experiment, every table mapped onto a dataclass.

Layout::

    seed = 1
    [camera]      fx fy cx cy width height
    [trajectory]  TrajectorySpec fields; waypoints as [[trajectory.waypoints]]
                  tables with time, position, yaw_deg, pitch_deg
    [scene]       SceneSpec fields (its seed defaults to the run seed)
    [noise]       NoiseSpec fields; frame_drop = [[start_frame, n_dropped], ...]
    [backend]     BackendParams fields
    [init]        InitParams fields
    [evaluate]    delta, scale_delta, drift_window

Unknown keys are rejected and reported with the line they were found on.
"""
from __future__ import annotations

import copy
import dataclasses
import re
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .backend.window import BackendParams
from .camera import PinholeCamera
from .initializer import InitParams
from .simworld import NoiseSpec, SceneSpec, TrajectorySpec, heading_pose

PRESETS = ("altitude_spiral", "pure_rotation", "frame_drop", "spiral_clean", "rotation_break")


class ConfigError(ValueError):
    def __init__(self, msg: str, key: Optional[str] = None, line: Optional[int] = None,
                 source: Optional[str] = None):
        where = ""
        if source:
            where = f"{source}:{line}: " if line else f"{source}: "
        super().__init__(f"{where}{msg}")
        self.key = key
        self.line = line


@dataclass
class CameraConfig:
    fx: float = 300.0
    fy: float = 300.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480

    def build(self) -> PinholeCamera:
        return PinholeCamera(self.fx, self.fy, self.cx, self.cy, self.width, self.height)


@dataclass
class EvalConfig:
    delta: float = 4.0
    # pair spacing of the relative-scale series used for the drift-rate signal
    scale_delta: float = 0.5
    # seconds of that series fitted per drift-rate sample
    drift_window: float = 5.0

    def validate(self) -> None:
        for name in ("delta", "scale_delta", "drift_window"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class RunConfig:
    seed: int = 0
    camera: CameraConfig = field(default_factory=CameraConfig)
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    scene: SceneSpec = field(default_factory=SceneSpec)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    backend: BackendParams = field(default_factory=BackendParams)
    init: InitParams = field(default_factory=InitParams)
    evaluate: EvalConfig = field(default_factory=EvalConfig)

    def with_seed(self, seed: int) -> "RunConfig":
        """Copy with a new run seed; the scene follows unless it was pinned explicitly."""
        cfg = copy.deepcopy(self)
        if cfg.scene.seed == cfg.seed:
            cfg.scene.seed = int(seed)
        cfg.seed = int(seed)
        return cfg


_SECTIONS = {"camera": CameraConfig, "trajectory": TrajectorySpec, "scene": SceneSpec,
             "noise": NoiseSpec, "backend": BackendParams, "init": InitParams, "evaluate": EvalConfig}
_WAYPOINT_KEYS = {"time", "position", "yaw_deg", "pitch_deg"}


def _line_of(text: str, section: Optional[str], key: str) -> Optional[int]:
    """First line defining ``key`` (inside ``[section]`` when given)."""
    cur = None
    pat = re.compile(rf"^\s*{re.escape(key)}\s*=")
    for n, line in enumerate(text.splitlines(), 1):
        head = re.match(r"^\s*\[\[?\s*([A-Za-z0-9_.]+)\s*\]\]?", line)
        if head:
            cur = head.group(1).split(".")[0]
            if section is None and cur == key:
                return n
            continue
        if pat.match(line) and (section is None or cur == section):
            return n
    return None


def _tuples(v):
    return tuple(_tuples(x) for x in v) if isinstance(v, list) else v


def _section(name: str, cls, data: dict, text: str, source: Optional[str]):
    known = {f.name for f in dataclasses.fields(cls)}
    for k in data:
        if k not in known:
            raise ConfigError(f"unknown key '{name}.{k}'", f"{name}.{k}", _line_of(text, name, k), source)
    kw = {}
    for k, v in data.items():
        if name == "trajectory" and k == "waypoints":
            kw[k] = [_waypoint(w, text, source) for w in v]
        elif name == "noise" and k == "frame_drop":
            kw[k] = [tuple(d) for d in v]
        else:
            kw[k] = _tuples(v)
    try:
        obj = cls(**kw)
        if hasattr(obj, "validate"):
            obj.validate()
    except (TypeError, ValueError) as e:
        bad = next((k for k in data if re.search(rf"\b{re.escape(k)}\b", str(e))), None)
        key = f"{name}.{bad}" if bad else name
        line = _line_of(text, name, bad) if bad else _line_of(text, None, name)
        raise ConfigError(f"invalid [{name}]: {e}", key, line, source) from None
    return obj


def _waypoint(w: dict, text: str, source: Optional[str]):
    extra = set(w) - _WAYPOINT_KEYS
    if extra:
        k = sorted(extra)[0]
        raise ConfigError(f"unknown key 'trajectory.waypoints.{k}'", f"trajectory.waypoints.{k}",
                          _line_of(text, "trajectory", k), source)
    try:
        return (float(w["time"]), heading_pose(float(w.get("yaw_deg", 0.0)), float(w.get("pitch_deg", -90.0)),
                                               w.get("position", (0.0, 0.0, 0.0))))
    except KeyError:
        raise ConfigError("waypoint without 'time'", "trajectory.waypoints.time",
                          _line_of(text, "trajectory", "waypoints"), source) from None


def parse_config(text: str, source: Optional[str] = None) -> RunConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"malformed TOML: {e}", None, None, source) from None
    for k, v in raw.items():
        if k != "seed" and k not in _SECTIONS:
            raise ConfigError(f"unknown key '{k}'", k, _line_of(text, None, k), source)
        if k in _SECTIONS and not isinstance(v, dict):
            raise ConfigError(f"'{k}' must be a table", k, _line_of(text, None, k), source)
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed must be a non-negative integer", "seed", _line_of(text, None, "seed"), source)
    parts: dict[str, Any] = {}
    for name, cls in _SECTIONS.items():
        data = dict(raw.get(name, {}))
        if name == "scene":
            data.setdefault("seed", seed)
        parts[name] = _section(name, cls, data, text, source)
    return RunConfig(seed=seed, **parts)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config: {e}", None, None, str(path)) from None
    return parse_config(text, str(path))


def preset_text(name: str) -> str:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset '{name}' (choose from {', '.join(PRESETS)})", name)
    return resources.files("monovo.presets").joinpath(f"{name}.toml").read_text()


def load_preset(name: str) -> RunConfig:
    return parse_config(preset_text(name), f"preset:{name}")


def resolve_config(ref: str) -> RunConfig:
    """A path to a TOML file, or the name of a bundled preset."""
    if ref in PRESETS and not Path(ref).exists():
        return load_preset(ref)
    return load_config(ref)
