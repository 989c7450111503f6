"""JSON run configuration: defaulting, dotted-path overrides and
round-tripping of the scenario and tracker dataclasses."""
from __future__ import annotations

import copy
import dataclasses
import json
import math
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .geometry import Link, Point2
from .link_state_hmm import HmmConfig
from .metrics import run_seeds
from .simulator import ScenarioConfig
from .tracker import Region, TrackerConfig


class ConfigError(ValueError):
    """Unreadable or invalid configuration."""


@dataclass
class TrackOptions:
    calibration_window: float = 5.0  # s of empty-room data used for channel means
    snapshot_stride: int = 1  # particle snapshot every n-th tracked step; 0 disables
    heading_hint: float | None = None  # rad; None takes the scenario heading
    region_margin: float | None = 0.2  # corridor prior, None disables
    match_hmm_to_noise: bool = True

    def __post_init__(self):
        if self.snapshot_stride < 0:
            raise ValueError("snapshot_stride must be >= 0")
        if self.calibration_window <= 0:
            raise ValueError("calibration_window must be positive")


@dataclass
class SweepOptions:
    grid: dict[str, list] = field(default_factory=lambda: {"use_freq": [True, False]})
    runs_per_cell: int = 50

    def __post_init__(self):
        if self.runs_per_cell < 1:
            raise ValueError("runs_per_cell must be >= 1")


@dataclass
class RunConfig:
    seed: int = 0
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    track: TrackOptions = field(default_factory=TrackOptions)
    sweep: SweepOptions = field(default_factory=SweepOptions)

    def effective_tracker(self, use_freq: bool | None = None) -> TrackerConfig:
        """Tracker settings with the options that depend on the scenario applied."""
        cfg = self.tracker
        changes: dict[str, Any] = {}
        if use_freq is not None:
            changes["use_freq"] = use_freq
        if cfg.region is None and self.track.region_margin is not None:
            changes["region"] = Region.corridor(self.scenario.links, self.track.region_margin)
        if self.track.match_hmm_to_noise:
            combined = float(np.mean(self.scenario.channel_noise_std)) / math.sqrt(self.scenario.channels)
            hmm = HmmConfig.for_noise(
                combined, transition_matrix=cfg.hmm.transition_matrix, feature_window=cfg.hmm.feature_window
            )
            changes["hmm"] = hmm
        return dataclasses.replace(cfg, **changes) if changes else cfg

    def seeds(self) -> tuple[int, int]:
        """Scenario and filter seeds; identical to run 0 of a sweep with the
        same master seed."""
        return run_seeds(self.seed, 0)

    def heading_hint(self) -> float:
        h = self.track.heading_hint
        return self.scenario.trajectory.heading if h is None else h


# -- dataclass <-> plain data ---------------------------------------------


def to_data(obj) -> Any:
    """JSON-ready representation of configs (dataclasses, arrays, tuples)."""
    if isinstance(obj, Link):
        return {"id": obj.id, "p_tx": list(obj.p_tx), "p_rx": list(obj.p_rx), "carrier_frequency": obj.carrier_frequency}
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: to_data(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, np.ndarray):
        return to_data(obj.tolist())
    if isinstance(obj, (list, tuple)):
        return [to_data(v) for v in obj]
    if isinstance(obj, dict):
        return {str(k): to_data(v) for k, v in obj.items()}
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _dataclass_in(tp) -> type | None:
    if dataclasses.is_dataclass(tp):
        return tp
    if typing.get_origin(tp) in (typing.Union, types.UnionType):
        for arg in typing.get_args(tp):
            if dataclasses.is_dataclass(arg):
                return arg
    return None


def _convert(tp, value, path: str):
    if value is None:
        return None
    if tp is Point2 or (typing.get_origin(tp) in (typing.Union, types.UnionType) and Point2 in typing.get_args(tp)):
        return Point2(*value)
    if typing.get_origin(tp) is list and typing.get_args(tp) and typing.get_args(tp)[0] is Link:
        return [_link(v, f"{path}[{i}]") for i, v in enumerate(value)]
    sub = _dataclass_in(tp)
    if sub is not None:
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object")
        return from_data(sub, value, path)
    if tp is float or tp == "float":
        return _number(value, path)
    if tp is tuple or typing.get_origin(tp) is tuple:
        return _tuplify(value)
    return value


def _number(value, path: str) -> float:
    if isinstance(value, str) and value in ("inf", "-inf"):
        return float(value)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{path}: expected a number, got {value!r}")
    return float(value)


def _tuplify(value):
    return tuple(_tuplify(v) for v in value) if isinstance(value, list) else value


def _link(value, path: str) -> Link:
    if not isinstance(value, dict):
        raise ConfigError(f"{path}: a link is an object with id, p_tx, p_rx")
    unknown = set(value) - {"id", "p_tx", "p_rx", "carrier_frequency"}
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    try:
        return Link(
            str(value["id"]),
            Point2(*value["p_tx"]),
            Point2(*value["p_rx"]),
            float(value.get("carrier_frequency", 2.4e9)),
        )
    except KeyError as exc:
        raise ConfigError(f"{path}: missing {exc.args[0]}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def from_data(cls, data: dict, path: str = ""):
    """Build ``cls`` from a (possibly partial) mapping; missing fields keep
    their defaults, unknown keys are rejected."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = set(data) - names
    if unknown:
        where = path or cls.__name__
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    defaults = cls()
    kwargs = {}
    for name in names:
        sub_path = f"{path}.{name}" if path else name
        if name not in data:
            continue
        value = data[name]
        default = getattr(defaults, name)
        sub = _dataclass_in(hints[name])
        if sub is not None and isinstance(value, dict) and default is not None and dataclasses.is_dataclass(default):
            # partial nested objects are merged onto the default
            value = _merge(to_data(default), value)
        kwargs[name] = _convert(hints[name], value, sub_path)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or cls.__name__}: {exc}") from None


def _merge(base: dict, update: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in update.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "grid":
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


# -- files and overrides ----------------------------------------------------


def set_path(data: dict, dotted: str, value) -> None:
    """Assign ``value`` at a dotted key path, creating objects on the way."""
    keys = dotted.split(".")
    if not all(keys):
        raise ConfigError(f"bad key path {dotted!r}")
    node = data
    for k in keys[:-1]:
        nxt = node.get(k)
        if nxt is None:
            nxt = node[k] = {}
        if not isinstance(nxt, dict):
            raise ConfigError(f"{dotted}: {k!r} is not an object")
        node = nxt
    node[keys[-1]] = value


def parse_override(text: str) -> tuple[str, Any]:
    """``a.b.c=<json>``; values that are not valid JSON are taken as strings."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key.path=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def read_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    except OSError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    # a run manifest carries the resolved config under "config"
    if "manifest_version" in data:
        data = data.get("config", {})
    return data


def load_config(path=None, overrides: list[str] = (), seed: int | None = None) -> RunConfig:
    data = read_json(path) if path is not None else {}
    for text in overrides:
        key, value = parse_override(text)
        set_path(data, key, value)
    if seed is not None:
        data["seed"] = seed
    cfg = from_data(RunConfig, data)
    cfg.scenario = dataclasses.replace(cfg.scenario, seed=cfg.seeds()[0])
    return cfg


def dump_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(to_data(cfg), indent=2) + "\n", encoding="utf-8")
