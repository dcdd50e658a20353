"""TOML run configuration and its translation into module inputs.

Sections: [model] [certify] [trigger] [channel] [engine] [verify] [output],
plus an optional [sweep] with lists of sigma / m / rule / p values.
"""
from __future__ import annotations

import copy
import hashlib
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from . import channel as ch
from . import dynamics
from .certify import CONSTANT_NAMES, CertificationConstants, EstimationConfig, certify_system
from .engine import SimConfig
from .errors import ConfigError
from .trigger import CnSchedule, TriggerRule

SECTIONS = ("model", "certify", "trigger", "channel", "engine", "verify", "output", "sweep")
KEYS = {
    "model": {"preset", "c", "grid_density"},
    "certify": {"sigma", "m", "samples", "seed", "safety_factor", "excluded_fraction", "neighbors",
                "n_inputs", "overrides"},
    "trigger": {"rule", "nu", "K", "cn"},
    "channel": {"mode", "p", "m", "seed", "trace", "trace_path"},
    "engine": {"x0", "horizon", "substeps", "h"},
    "verify": {"tol"},
    "output": {"dir", "log"},
    "sweep": {"sigma", "m", "rule", "p", "seed", "simulate"},
}

_MISSING = object()


@dataclass
class RunConfig:
    data: dict
    digest: str
    base_dir: Path = field(default_factory=Path.cwd)
    source: str | None = None

    # raw access -----------------------------------------------------------
    def get(self, dotted, default=_MISSING):
        node = self.data
        for part in dotted.split("."):
            if not isinstance(node, dict) or part not in node:
                if default is _MISSING:
                    raise ConfigError(f"missing config key '{dotted}'"
                                      + (f" in {self.source}" if self.source else ""))
                return default
            node = node[part]
        return node

    def _number(self, dotted, kind=float, default=_MISSING):
        v = self.get(dotted, default)
        if v is None:
            return None
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"config key '{dotted}' must be a number, got {v!r}")
        if kind is int and int(v) != v:
            raise ConfigError(f"config key '{dotted}' must be an integer, got {v!r}")
        return kind(v)

    def with_values(self, **dotted) -> "RunConfig":
        """Copy with some keys replaced ('section.key' written as section__key)."""
        data = copy.deepcopy(self.data)
        for key, value in dotted.items():
            section, name = key.split("__", 1)
            data.setdefault(section, {})[name] = value
        return RunConfig(data, self.digest, self.base_dir, self.source)

    # module inputs ----------------------------------------------------------
    @property
    def sigma(self) -> float:
        return self._number("certify.sigma")

    @property
    def m(self) -> int:
        return self._number("certify.m", int)

    def model(self):
        name = self.get("model.preset")
        params = {}
        if "c" in self.get("model", {}):
            params["c"] = self._number("model.c")
        if "grid_density" in self.get("model", {}):
            params["grid_density"] = self._number("model.grid_density", int)
        return dynamics.get_preset(name, **params)

    def estimation(self) -> EstimationConfig:
        overrides = dict(self.get("certify.overrides", {}))
        for k in overrides:
            if k not in CONSTANT_NAMES:
                raise ConfigError(f"unknown key 'certify.overrides.{k}'; allowed: {', '.join(CONSTANT_NAMES)}")
            overrides[k] = self._number(f"certify.overrides.{k}")
        return EstimationConfig(
            samples=self._number("certify.samples", int, 100_000),
            seed=self._number("certify.seed", int, 0),
            safety_factor=self._number("certify.safety_factor", float, 1.1),
            excluded_fraction=self._number("certify.excluded_fraction", float, 1e-4),
            neighbors=self._number("certify.neighbors", int, 4),
            n_inputs=self._number("certify.n_inputs", int, 16),
            overrides=overrides)

    def certify(self, model=None, level_set=None, estimates=None) -> CertificationConstants:
        if model is None:
            model, level_set = self.model()
        return certify_system(model, level_set, self.sigma, self.m, config=self.estimation(),
                              estimates=estimates)

    def rule(self, model) -> TriggerRule:
        kind = self.get("trigger.rule", "linear")
        if kind == "exponential":
            rate = self._number("trigger.K", float, None) or model.decay_rate
            return TriggerRule.exponential(rate)
        if kind == "adaptive":
            table = self.get("trigger.cn", [[0, 0.0]])
            try:
                pairs = [(int(a), float(b)) for a, b in table]
            except (TypeError, ValueError):
                raise ConfigError("'trigger.cn' must be a list of [start_index, value] pairs") from None
            return TriggerRule.adaptive(CnSchedule(pairs))
        return TriggerRule(kind)

    def nu(self):
        return self._number("trigger.nu", int, None)

    def channel(self) -> ch.ChannelModel:
        mode = self.get("channel.mode", "always")
        m = self._number("channel.m", int, self.m)
        seed = self._number("channel.seed", int, 0)
        if mode == "trace":
            if "trace" in self.get("channel", {}):
                return ch.load_trace(ch.parse_trace_text(str(self.get("channel.trace"))), m)
            path = Path(self.get("channel.trace_path"))
            if not path.is_absolute():
                path = self.base_dir / path
            if not path.exists():
                raise ConfigError(f"trace file {path} not found ('channel.trace_path')")
            return ch.read_trace_file(path, m)
        return ch.ChannelModel(m, mode=mode, p=self._number("channel.p", float, 0.0), seed=seed)

    def sim(self, model, level_set, constants) -> SimConfig:
        x0 = self.get("engine.x0")
        try:
            x0 = np.asarray(x0, dtype=float)
        except (TypeError, ValueError):
            raise ConfigError(f"'engine.x0' must be a list of numbers, got {x0!r}") from None
        return SimConfig(model=model, level_set=level_set, constants=constants, channel=self.channel(),
                         x0=x0, horizon=self._number("engine.horizon"), rule=self.rule(model),
                         nu=self.nu(), substeps=self._number("engine.substeps", int, 1),
                         h=self._number("engine.h", float, None))

    def tolerance(self):
        return self._number("verify.tol", float, None)

    def output_dir(self, override=None) -> Path:
        if override is not None:
            return Path(override)
        out = Path(self.get("output.dir", "out"))
        return out if out.is_absolute() else self.base_dir / out

    def log_name(self) -> str:
        return str(self.get("output.log", "trajectory.csv"))


def parse(text: str | bytes, base_dir=None, source=None) -> RunConfig:
    raw = text.encode() if isinstance(text, str) else text
    try:
        data = tomllib.loads(raw.decode())
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot parse config{' ' + source if source else ''}: {exc}") from None
    unknown = set(data) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    for section, body in data.items():
        if not isinstance(body, dict):
            raise ConfigError(f"'{section}' must be a table, got {body!r}")
        extra = set(body) - KEYS[section]
        if extra:
            raise ConfigError(f"unknown key(s) in [{section}]: {sorted(extra)}; "
                              f"allowed: {', '.join(sorted(KEYS[section]))}")
    return RunConfig(data, hashlib.sha256(raw).hexdigest(), Path(base_dir or Path.cwd()), source)


def load(path) -> RunConfig:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse(raw, base_dir=path.parent, source=str(path))
