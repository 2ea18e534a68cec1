"""Experiment configuration: loading, schema validation, defaults and builders."""
from __future__ import annotations

import copy
import json
import re
from importlib import resources
from pathlib import Path

import jsonschema
import yaml

from . import interval_maps as im
from . import observables as ob
from .transfer import BinGrid

__all__ = [
    "ConfigError",
    "SCHEMA",
    "MANIFEST_VERSION",
    "load_config",
    "validate_config",
    "resolve",
    "make_map",
    "make_observable",
    "make_grid",
]

MANIFEST_VERSION = 1


class ConfigError(ValueError):
    """The configuration is unreadable or violates the schema."""


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads exponent floats without a dot (``1e-12``)."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^[-+]?(?:[0-9][0-9_]*)(?:\.[0-9_]*)?[eE][-+]?[0-9]+$"""),
    list("-+0123456789"),
)


def _load_schema() -> dict:
    with resources.files(__package__).joinpath("config_schema.json").open("r") as fh:
        return json.load(fh)


SCHEMA = _load_schema()

_ANALYSIS_DEFAULTS = {
    "map_validate": {"grid_size": 1000},
    "density": {},
    "correlations": {"kmax": 20},
    "variance": {"rule": "adaptive", "threshold": 1e-10, "K": 50, "max_lag": 2000},
    "clt": {"tol": 0.02},
    "wip": {"times": [0.25, 0.5, 1.0]},
    "lil": {"threshold": "3CM"},
    "mixing": {"kmax": 30, "pair_bins": 16, "B": 64},
    "gordin": {"N": 40},
    "decompose": {"m": [1.0, 2.0, 5.0, 10.0, 100.0], "eps": 0.1},
    "martingale": {"n": 1000, "paths": 50},
    "ddm": {"kmax": 30},
    "coupling": {"levels": 5, "n": 100_000, "seeds": 10, "sigma": 1.0, "safety": 2.0,
                 "perturbation": "telescoping"},
    "scan": {"ns": [1024, 2048, 4096, 8192, 16384], "R": 500},
}


def load_config(path) -> dict:
    """Read a YAML or JSON config (or a run manifest) and validate it."""
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    try:
        data = json.loads(text) if p.suffix == ".json" else yaml.load(text, Loader=_Loader)
    except (yaml.YAMLError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot parse config {p}: {exc}") from exc
    if isinstance(data, dict) and "manifest_version" in data:
        data = data.get("config")
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    validate_config(data)
    return data


def validate_config(cfg: dict) -> None:
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(x) for x in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {exc.message}") from None
    m = cfg.get("map", {})
    if m.get("name") == "lsv" and "gamma" not in m:
        raise ConfigError("config invalid at map: lsv needs gamma")


def resolve(cfg: dict, analyses=None) -> dict:
    """Fill defaults; ``analyses`` restricts or extends the analysis block."""
    out = copy.deepcopy(cfg)
    out.setdefault("map", {"name": "doubling"})
    out.setdefault("observable", {"name": "cosine", "k": 1})
    gpm = out["map"]["name"] == "lsv"
    grid = out.setdefault("grid", {})
    grid.setdefault("kind", "geometric" if gpm else "uniform")
    grid.setdefault("B", 8192 if grid["kind"] == "geometric" else 1024)
    if grid["kind"] == "geometric":
        grid.setdefault("first_width", 1e-8)
    grid.setdefault("tol", 1e-12)
    grid.setdefault("max_iter", 100_000)
    run = out.setdefault("run", {})
    run.setdefault("seed", 0)
    run.setdefault("n", 4096)
    run.setdefault("R", 1000)
    run.setdefault("init", "stationary")
    if run["init"] == "lebesgue_burnin":
        run.setdefault("burnin", 1000)
    block = out.setdefault("analysis", {})
    if analyses is not None:
        block = {k: block.get(k, {}) for k in analyses}
        out["analysis"] = block
    for k, v in block.items():
        merged = copy.deepcopy(_ANALYSIS_DEFAULTS[k])
        merged.update(v or {})
        block[k] = merged
    o = out.setdefault("output", {})
    o.setdefault("dir", "out")
    o.setdefault("format", "csv")
    validate_config(out)
    return out


def make_map(spec: dict) -> im.IntervalMap:
    name = spec["name"]
    if name == "doubling":
        return im.doubling()
    if name == "tent":
        return im.tent()
    if name == "piecewise_linear":
        return im.piecewise_linear(spec.get("slopes"), spec.get("breakpoints"))
    return im.lsv(spec["gamma"])


def _make_tag(spec: dict | None):
    if spec is None:
        return None
    if spec["kind"] == "L2":
        if "M" not in spec:
            raise ConfigError("config invalid at observable/tag: L2 tag needs M")
        return ob.L2Class(spec["M"])
    if "q" not in spec:
        raise ConfigError("config invalid at observable/tag: tail tag needs q")
    return ob.TailClass(ob.TailFunction.power(spec["q"], spec.get("scale", 1.0)))


_PARAMS = {
    "power_law": ("a", "shift"),
    "log_damped_power": ("a", "b"),
    "cosine": ("k",),
    "indicator": ("lo", "hi"),
    "centered_linear": (),
    "constant": ("c",),
}


def make_observable(spec: dict) -> ob.Observable:
    name = spec["name"]
    tag = _make_tag(spec.get("tag"))
    if name == "combination":
        parts = spec.get("parts")
        if not parts:
            raise ConfigError("config invalid at observable: combination needs parts")
        f = ob.combine([(p["weight"], make_observable(p["observable"])) for p in parts])
        return f.with_tag(tag) if tag is not None else f
    allowed = _PARAMS[name]
    extra = [k for k in spec if k not in allowed + ("name", "tag")]
    if extra:
        raise ConfigError(f"config invalid at observable: {name} does not take {extra}")
    kwargs = {k: spec[k] for k in allowed if k in spec}
    try:
        return ob.BUILTINS[name](**kwargs, tag=tag)
    except TypeError as exc:
        raise ConfigError(f"config invalid at observable: {exc}") from None


def make_grid(spec: dict) -> BinGrid:
    if spec["kind"] == "uniform":
        return BinGrid.uniform(spec["B"])
    return BinGrid.geometric(spec["B"], spec["first_width"])
