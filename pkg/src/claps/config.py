"""Sectioned key-value configuration files.

Sections: ``[system]`` dynamics and noise, ``[regions]`` named box unions,
``[task]`` reach-avoid task by region names, ``[graph]`` an optional explicit
room graph, ``[training]`` learner-verifier overrides, ``[run]`` driver options.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from .learnverify.config import TrainConfig
from .spectrl import Box, Region, parse_box, parse_region
from .system import DiscreteNoise, ReachAvoidTask, StochasticSystem, TriangularNoise


class ConfigError(ValueError):
    pass


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.replace(",", " ").split())


@dataclass
class Settings:
    path: Path | None
    system: StochasticSystem
    regions: dict[str, Region]
    task: ReachAvoidTask | None
    training: TrainConfig
    run: dict[str, str] = field(default_factory=dict)
    graph: dict[str, str] = field(default_factory=dict)
    raw: configparser.ConfigParser | None = None

    def resolve(self, name: str) -> Path:
        """A path from the file, relative to the config's directory."""
        p = Path(name)
        if not p.is_absolute() and self.path is not None:
            p = self.path.parent / p
        return p


def _region_expr(text: str, regions: dict[str, Region], dim: int) -> Region:
    """Region literal, or names joined by ``+``."""
    text = text.strip()
    if text.startswith("[") or text == "empty":
        return parse_region(text, dim)
    out = Region.empty(dim)
    for part in text.split("+"):
        name = part.strip()
        if name not in regions:
            raise ConfigError(f"unknown region {name!r}")
        out = out.union(regions[name])
    return out


def parse_system(sec) -> StochasticSystem:
    try:
        space = parse_box(sec["state_space"])
        actions = parse_box(sec["action_space"])
    except KeyError as exc:
        raise ConfigError(f"[system] is missing {exc}") from None
    d = space.dim
    a = _floats(sec.get("state_gain", " ".join(["1"] * d)))
    b = _floats(sec.get("action_gain", " ".join(["0.1"] * d)))
    g = _floats(sec.get("noise_gain", " ".join(["0.1"] * d)))
    kind = sec.get("noise", "triangular").strip()
    if kind == "triangular":
        noise = TriangularNoise(_floats(sec.get("noise_scale", " ".join(["0.5"] * d))))
    elif kind == "discrete":
        vals = [_floats(v) for v in sec["noise_values"].split(";")]
        noise = DiscreteNoise(tuple(vals), _floats(sec["noise_probs"]))
    else:
        raise ConfigError(f"unknown noise kind {kind!r}")
    lf = float(sec.get("lipschitz_f", "-1"))
    step = float(sec.get("max_step", "-1"))
    return StochasticSystem(space, actions, noise, a, b, g, lf, step)


def load_settings_text(text: str, path: Path | None = None) -> Settings:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    if "system" not in cp:
        raise ConfigError("missing [system] section")
    try:
        system = parse_system(cp["system"])
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"[system]: {exc}") from None
    d = system.dim
    regions: dict[str, Region] = {}
    if "regions" in cp:
        for name, val in cp["regions"].items():
            try:
                regions[name] = _region_expr(val, regions, d)
            except ValueError as exc:
                raise ConfigError(f"[regions] {name}: {exc}") from None
    task = None
    if "task" in cp:
        t = cp["task"]
        try:
            task = ReachAvoidTask(_region_expr(t["initial"], regions, d),
                                  _region_expr(t["target"], regions, d),
                                  _region_expr(t.get("unsafe", "empty"), regions, d))
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"[task]: {exc}") from None
    try:
        training = TrainConfig.from_strings(dict(cp["training"])) if "training" in cp else TrainConfig()
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"[training]: {exc}") from None
    run = dict(cp["run"]) if "run" in cp else {}
    graph = dict(cp["graph"]) if "graph" in cp else {}
    return Settings(path, system, regions, task, training, run, graph, cp)


def load_settings(path) -> Settings:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    return load_settings_text(text, path)


def bundled(name: str) -> Path:
    return Path(__file__).parent / "data" / name


def state_box(settings: Settings) -> Box:
    return settings.system.state_space
