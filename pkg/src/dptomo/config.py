"""Run configuration: INI-style key-value files with sections, or JSON.

Example::

    [geometry]
    wavelength = 0.632
    n0 = 1.515
    na_ill = 0.4
    na_img = 0.5
    shape = 32, 32, 32
    spacing = 0.3, 0.3, 0.3
    leds = na-grid
    na_step = 0.1

    [phantom]
    diameters = 2.0
    separations = 0.75, 1.5

    [model]
    name = born

    [prior]
    kind = dip+tv
    lambda_tv = 1e-8

    [optimizer]
    iterations = 500

    [noise]
    mode = poisson-8bit

    [run]
    seed = 0

Every problem is reported as ``path:line: message``.
"""

from __future__ import annotations

import configparser
import json
import re
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .geometry import NyquistWarning, SystemGeometry
from .objective import LossConfig
from .optim import Schedule
from .simkit import BeadSpec, NoiseSpec

MODELS = ("born", "rytov", "multislice")
PRIORS = ("none", "dip", "tv", "positivity")


class ConfigError(ValueError):
    """Invalid configuration; the message carries the file and line."""


# ---------------------------------------------------------------- typed blocks

@dataclass
class GeometryBlock:
    wavelength: float = 0.632
    n0: float = 1.515
    na_ill: float = 0.4
    na_img: float = 0.5
    shape: tuple = (32, 32, 32)
    spacing: tuple = (0.3, 0.3, 0.3)
    leds: str = "na-grid"  # na-grid | disk | square
    na_step: float = 0.1
    led_side: int = 31
    led_pitch: float = 4.0
    led_distance: float = 50.0
    focus_offset: float = 0.0

    def build(self) -> SystemGeometry:
        common = dict(wavelength=self.wavelength, n0=self.n0, na_ill=self.na_ill, na_img=self.na_img,
                      shape=self.shape, spacing=self.spacing, focus_offset=self.focus_offset)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", NyquistWarning)
            if self.leds == "na-grid":
                return SystemGeometry.with_na_grid(na_step=self.na_step, led_distance=self.led_distance,
                                                   **common)
            return SystemGeometry.with_led_array(led_side=self.led_side, led_pitch=self.led_pitch,
                                                 layout=self.leds, **common)


@dataclass
class PhantomBlock:
    diameters: tuple = (2.0,)
    separations: tuple = ()
    n: float = 1.525
    supersample: int = 8
    file: str = ""  # RI volume container; overrides the bead phantom

    def spec(self, n0: float) -> BeadSpec:
        return BeadSpec(self.diameters, self.separations, self.n, n0, self.supersample)


@dataclass
class ModelBlock:
    name: str = "born"
    phase_sensitive: bool = False
    apodize: bool = True


@dataclass
class PriorBlock:
    kind: str = "none"  # one of PRIORS, or several joined by "+"
    lambda_tv: float = 1e-8
    lambda_pos: float = 1.0
    dip_channels: tuple = (16, 32, 64, 128)
    dip_out_features: int = 4
    dip_output_scale: Optional[float] = None

    @property
    def kinds(self) -> set:
        return set(self.kind.split("+"))


@dataclass
class OptimizerBlock:
    iterations: int = 500
    lr: Optional[float] = None
    batch_leds: Optional[int] = None
    patch: Optional[int] = None
    optimize_u0: bool = True
    optimize_pupil: bool = False
    guard: bool = True
    checkpoint_every: int = 50
    max_restores: int = 50
    stitch_patches: int = 1000
    snapshots: bool = False


@dataclass
class NoiseBlock:
    mode: str = "none"  # none | poisson-8bit | complex-gaussian
    well_depth: float = 50_000.0
    bits: int = 8
    dark_field_boost: bool = True
    max_gain: float = 100.0

    def spec(self) -> Optional[NoiseSpec]:
        if self.mode == "none":
            return None
        return NoiseSpec(self.well_depth, self.bits, self.mode, self.dark_field_boost, self.max_gain)


@dataclass
class RunBlock:
    seed: int = 0


_BLOCKS = {"geometry": GeometryBlock, "phantom": PhantomBlock, "model": ModelBlock,
           "prior": PriorBlock, "optimizer": OptimizerBlock, "noise": NoiseBlock, "run": RunBlock}


@dataclass
class RunConfig:
    geometry: GeometryBlock = field(default_factory=GeometryBlock)
    phantom: PhantomBlock = field(default_factory=PhantomBlock)
    model: ModelBlock = field(default_factory=ModelBlock)
    prior: PriorBlock = field(default_factory=PriorBlock)
    optimizer: OptimizerBlock = field(default_factory=OptimizerBlock)
    noise: NoiseBlock = field(default_factory=NoiseBlock)
    run: RunBlock = field(default_factory=RunBlock)
    source: str = ""

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("source")
        return d

    def geometry_obj(self) -> SystemGeometry:
        return self.geometry.build()

    def loss_config(self) -> LossConfig:
        kinds = self.prior.kinds
        return LossConfig(lambda_tv=self.prior.lambda_tv if "tv" in kinds else 0.0,
                          lambda_pos=self.prior.lambda_pos if "positivity" in kinds else 0.0,
                          use_dip="dip" in kinds, model=self.model.name,
                          phase_sensitive=self.model.phase_sensitive)

    def schedule(self, **extra) -> Schedule:
        o, p = self.optimizer, self.prior
        return Schedule(iterations=o.iterations, lr=o.lr, batch_leds=o.batch_leds, patch=o.patch,
                        seed=self.run.seed, optimize_u0=o.optimize_u0, optimize_pupil=o.optimize_pupil,
                        guard=o.guard, checkpoint_every=o.checkpoint_every, max_restores=o.max_restores,
                        dip_channels=tuple(p.dip_channels), dip_out_features=p.dip_out_features,
                        dip_output_scale=p.dip_output_scale, stitch_patches=o.stitch_patches,
                        apodize=self.model.apodize, **extra)


# ---------------------------------------------------------------- parsing

def _kind(annotation: str) -> str:
    """Reduce a field annotation to one of bool, int, float, tuple, str."""
    for k in ("bool", "tuple", "int", "float"):
        if k in annotation:
            return k
    return "str"


def _coerce(raw, annotation: str, key: str):
    """Convert ``raw`` (INI string or JSON value) to the field's declared type."""
    kind = _kind(annotation)
    optional = "Optional" in annotation
    if raw is None or (isinstance(raw, str) and raw.strip().lower() in ("none", "null", "")):
        if optional:
            return None
        if kind == "tuple":
            return ()
        if kind != "str":
            raise ValueError(f"{key}: a value is required")
    if isinstance(raw, str) and kind != "str":
        s = raw.strip()
        if kind == "bool":
            if s.lower() in ("1", "true", "yes", "on"):
                return True
            if s.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"{key}: expected a boolean, got {s!r}")
        if kind == "tuple":
            return tuple(_number(v.strip(), key) for v in s.split(",") if v.strip())
        raw = _number(s, key)
    if kind == "bool":
        if not isinstance(raw, bool):
            raise ValueError(f"{key}: expected a boolean, got {raw!r}")
        return raw
    if kind == "tuple":
        vals = raw if isinstance(raw, (list, tuple)) else [raw]
        return tuple(_check_num(v, key) for v in vals)
    if kind == "int":
        v = _check_num(raw, key)
        if v != int(v):
            raise ValueError(f"{key}: expected an integer, got {raw!r}")
        return int(v)
    if kind == "float":
        return float(_check_num(raw, key))
    if not isinstance(raw, str):
        raise ValueError(f"{key}: expected a string, got {raw!r}")
    return raw.strip()


def _number(s: str, key: str):
    try:
        v = float(s)
    except ValueError:
        raise ValueError(f"{key}: expected a number, got {s!r}") from None
    return int(v) if v == int(v) and re.fullmatch(r"[+-]?\d+", s) else v


def _check_num(v, key: str):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ValueError(f"{key}: expected a number, got {v!r}")
    return v


def _line_index(text: str, is_json: bool) -> dict:
    """Map ``(section, key)`` and ``(section, None)`` to 1-based line numbers."""
    index = {}
    section = None
    for i, line in enumerate(text.splitlines(), 1):
        if is_json:
            m = re.match(r'\s*"([^"]+)"\s*:\s*(\{)?', line)
            if m and m.group(2):
                section = m.group(1)
                index.setdefault((section, None), i)
            elif m:
                index.setdefault((section, m.group(1)), i)
        else:
            m = re.match(r"\s*\[([^\]]+)\]", line)
            if m:
                section = m.group(1).strip()
                index.setdefault((section, None), i)
                continue
            m = re.match(r"\s*([^#;=:\s][^=:]*?)\s*[=:]", line)
            if m and section is not None:
                index.setdefault((section, m.group(1).strip().lower()), i)
    return index


def _read_raw(path: Path, text: str) -> dict:
    if path.suffix.lower() == ".json" or text.lstrip().startswith("{"):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}:{e.lineno}: invalid JSON ({e.msg})") from None
        if not isinstance(data, dict) or not all(isinstance(v, dict) for v in data.values()):
            raise ConfigError(f"{path}:1: top level must map section names to objects")
        return data
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=str(path))
    except configparser.MissingSectionHeaderError as e:
        raise ConfigError(f"{path}:{e.lineno}: expected a [section] header before {e.line.strip()!r}") from None
    except configparser.ParsingError as e:
        lineno, line = e.errors[0]
        raise ConfigError(f"{path}:{lineno}: cannot parse {line.strip()!r}") from None
    except configparser.Error as e:
        lineno = getattr(e, "lineno", "?")
        raise ConfigError(f"{path}:{lineno}: {e.message.splitlines()[0]}") from None
    if parser.defaults():
        raise ConfigError(f"{path}:1: keys outside a section are not allowed")
    return {s: dict(parser.items(s)) for s in parser.sections()}


def load_config(path, overrides: Optional[dict] = None) -> RunConfig:
    """Parse and validate a run configuration.

    ``overrides`` maps ``"section.key"`` to already-typed values (from CLI
    flags) applied after parsing.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{path}: configuration file not found")
    text = path.read_text()
    raw = _read_raw(path, text)
    lines = _line_index(text, path.suffix.lower() == ".json" or text.lstrip().startswith("{"))
    where = lambda sec, key=None: f"{path}:{lines.get((sec, key), lines.get((sec, None), 1))}"

    blocks = {}
    for sec, cls in _BLOCKS.items():
        values = raw.get(sec, {})
        defaults = cls()
        types = {f.name: str(f.type) for f in fields(cls)}
        kwargs = {}
        for key, v in values.items():
            key_n = key.lower() if isinstance(key, str) else key
            if key_n not in types:
                raise ConfigError(f"{where(sec, key_n)}: unknown key {key!r} in [{sec}]")
            try:
                kwargs[key_n] = _coerce(v, types[key_n], key_n)
            except ValueError as e:
                raise ConfigError(f"{where(sec, key_n)}: {e}") from None
        blocks[sec] = replace(defaults, **kwargs)
    for sec in raw:
        if sec not in _BLOCKS:
            raise ConfigError(f"{where(sec)}: unknown section [{sec}]")
    for dotted, v in (overrides or {}).items():
        sec, key = dotted.split(".")
        blocks[sec] = replace(blocks[sec], **{key: v})

    cfg = RunConfig(**blocks, source=str(path))
    _validate(cfg, where, path.parent)
    return cfg


def _validate(cfg: RunConfig, where, base: Path) -> None:
    def check(cond, sec, key, msg):
        if not cond:
            raise ConfigError(f"{where(sec, key)}: {msg}")

    g = cfg.geometry
    check(g.leds in ("na-grid", "disk", "square"), "geometry", "leds", f"unknown LED layout {g.leds!r}")
    check(len(g.shape) == 3 and min(g.shape) > 0, "geometry", "shape", "shape needs three positive ints")
    check(len(g.spacing) == 3 and min(g.spacing) > 0, "geometry", "spacing",
          "spacing needs three positive values")
    check(g.na_step > 0 or g.leds != "na-grid", "geometry", "na_step", "na_step must be positive")
    try:
        g.build()
    except ValueError as e:
        raise ConfigError(f"{where('geometry')}: {e}") from None
    check(cfg.model.name in MODELS, "model", "name", f"model must be one of {', '.join(MODELS)}")
    kinds = cfg.prior.kinds
    check(kinds <= set(PRIORS) and not ("none" in kinds and len(kinds) > 1), "prior", "kind",
          f"prior must combine {', '.join(PRIORS)} with '+'")
    for key in ("lambda_tv", "lambda_pos"):
        v = getattr(cfg.prior, key)
        check(np.isfinite(v) and v >= 0, "prior", key, f"{key} must be a finite value >= 0")
    o = cfg.optimizer
    check(o.iterations >= 0, "optimizer", "iterations", "iterations must be >= 0")
    check(o.lr is None or o.lr > 0, "optimizer", "lr", "learning rate must be positive")
    check(o.batch_leds is None or o.batch_leds >= 1, "optimizer", "batch_leds", "batch_leds must be >= 1")
    check(o.patch is None or 1 <= o.patch <= min(g.shape[:2]), "optimizer", "patch",
          "patch must fit inside the lateral grid")
    check(o.patch is None or cfg.model.name == "multislice", "optimizer", "patch",
          "spatial patching requires the multi-slice model")
    n = cfg.noise
    check(n.mode in ("none", "poisson-8bit", "complex-gaussian"), "noise", "mode", f"unknown noise mode {n.mode!r}")
    check(n.mode != "complex-gaussian" or cfg.model.phase_sensitive, "noise", "mode",
          "complex-gaussian noise needs phase-sensitive data")
    check(n.well_depth > 0 and 1 <= n.bits <= 16, "noise", "bits", "need well_depth > 0 and 1 <= bits <= 16")
    ph = cfg.phantom
    check(all(d >= 0 for d in ph.diameters), "phantom", "diameters", "diameters must be >= 0")
    if ph.file:
        p = Path(ph.file) if Path(ph.file).is_absolute() else base / ph.file
        check(p.exists(), "phantom", "file", f"phantom file {p} does not exist")
        cfg.phantom = replace(ph, file=str(p))
