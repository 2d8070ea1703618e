"""Experiment configuration: flat key-value files with sectioned keys.

Format: one ``key = value`` per line, ``#`` comments, values parsed as JSON
fragments with bare words falling back to strings. Example::

    agents = 5
    edges = [[1,2],[2,3],[3,4],[4,5],[5,1],[1,3]]
    problem = sensor
    algorithm = private
    stepsize.kind = paper_default
    seed = 42

A run manifest is the same mapping serialized as JSON together with the
package version; re-running a manifest reproduces the outputs byte for byte.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .randomness import SCHEDULE_KINDS, STEPSIZE_MODES, StepsizeSchedule
from .topology import AgentGraph, build_graph

DEFAULT_EDGES = [[1, 2], [2, 3], [3, 4], [4, 5], [5, 1], [1, 3]]

DEFAULTS = {
    "agents": 5,
    "edges": DEFAULT_EDGES,
    "problem": "sensor",
    "algorithm": "private",
    "compare": True,
    "horizon": 1000,
    "reps": 20,
    "seed": 0,
    "batch": 1,
    "log_messages": False,
    "record_state": False,
    "stepsize.kind": "paper_default",
    "stepsize.mode": "draw_around_mean",
    "stepsize.params": {},
    "sensor.samples": 100,
    "sensor.obs_dim": 3,
    "sensor.dim": 2,
    "sensor.regularizer": 0.1,
    "mlp.input_dim": 10,
    "mlp.hidden": 8,
    "mlp.points": 200,
    "mlp.val_points": 400,
    "dp.sigmas": [0.0, 1e-4, 1e-3, 1e-2, 1e-1, 1.0],
    "dp.horizon": 2000,
    "dp.batch": "full",
    "dp.compare_horizon": 2000,
    "dp.compare_batch": 1,
    "privacy.grid": [],
    "privacy.samples": 1000000,
    "privacy.bins": 200,
}


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        try:
            values[key] = json.loads(val)
        except json.JSONDecodeError:
            values[key] = val
    return values


def load_config_mapping(path: str | Path) -> dict:
    """Read a config file; JSON files are treated as run manifests."""
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json":
        payload = json.loads(text)
        if "config" in payload:
            return dict(payload["config"])
        return dict(payload)
    return parse_config_text(text)


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment settings; one config = one experiment."""

    values: dict = field(default_factory=dict)

    def __post_init__(self):
        merged = dict(DEFAULTS)
        unknown = set(self.values) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        merged.update(self.values)
        object.__setattr__(self, "values", merged)
        self._validate()

    def _validate(self):
        v = self.values
        if not isinstance(v["agents"], int) or v["agents"] < 2:
            raise ConfigError("agents must be an integer >= 2")
        if v["problem"] not in ("sensor", "mlp"):
            raise ConfigError("problem must be 'sensor' or 'mlp'")
        if v["algorithm"] not in ("private", "conventional", "dp"):
            raise ConfigError("algorithm must be private, conventional or dp")
        if not isinstance(v["horizon"], int) or v["horizon"] < 0:
            raise ConfigError("horizon must be an integer >= 0")
        if not isinstance(v["reps"], int) or v["reps"] < 1:
            raise ConfigError("reps must be an integer >= 1")
        if not isinstance(v["seed"], int) or not 0 <= v["seed"] < 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if v["stepsize.kind"] not in SCHEDULE_KINDS:
            raise ConfigError(f"stepsize.kind must be one of {SCHEDULE_KINDS}")
        if v["stepsize.mode"] not in STEPSIZE_MODES:
            raise ConfigError(f"stepsize.mode must be one of {STEPSIZE_MODES}")
        batch = v["batch"]
        if batch != "full" and (not isinstance(batch, int) or batch < 1):
            raise ConfigError("batch must be a positive integer or 'full'")
        try:
            schedule = self.schedule()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if (schedule.kind == "constant_mean"
                and float(schedule.params["value"]) < 0.0):
            raise ConfigError("constant_mean stepsize must be nonnegative")

    def __getitem__(self, key: str):
        return self.values[key]

    def graph(self) -> AgentGraph:
        return build_graph(self["agents"], self["edges"])

    def schedule(self) -> StepsizeSchedule:
        return StepsizeSchedule(kind=self["stepsize.kind"],
                                params=dict(self["stepsize.params"]),
                                mode=self["stepsize.mode"])

    def batch_size(self, key: str = "batch") -> int | None:
        raw = self[key]
        return None if raw == "full" else int(raw)

    def with_overrides(self, **overrides) -> "ExperimentConfig":
        merged = dict(self.values)
        merged.update({k: v for k, v in overrides.items() if v is not None})
        return ExperimentConfig(values=merged)

    def manifest(self, version: str) -> dict:
        return {"format": "privdsgd-manifest", "version": version,
                "config": dict(self.values)}

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentConfig":
        return cls(values=load_config_mapping(path))
