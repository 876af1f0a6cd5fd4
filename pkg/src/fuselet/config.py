"""Pipeline configuration: TOML -> validated dataclasses with field-path errors."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from fuselet.errors import ConfigError


@dataclass(frozen=True)
class RasterInput:
    path: str
    fill: Any = None
    valid_range: Any = None
    channels: Any = None


@dataclass(frozen=True)
class SceneInput:
    id: str
    role: str = "train"
    dataset: str = "DATASET"
    rasters: tuple[RasterInput, ...] = ()
    labels: str | None = None
    references: dict = field(default_factory=dict)


@dataclass(frozen=True)
class SynthSection:
    train_seeds: tuple[int, ...] = (0, 1, 2, 3)
    test_seeds: tuple[int, ...] = (100, 101, 102)
    dataset: str = "SYNTH"
    n_rows: int = 128
    n_cols: int = 128
    n_vis_channels: int = 4
    n_thermal_channels: int = 2
    n_fires: int = 2
    n_plumes: int = 2
    terrain_roughness: float = 0.5
    fire_intensity: float = 8.0
    smoke_opacity: float = 3.0


@dataclass(frozen=True)
class SamplingSection:
    k: int = 50
    n_total: int = 3_000_000
    seed: int = 0
    max_iter: int = 100


@dataclass(frozen=True)
class DbnSection:
    layer_dims: tuple[int, ...] = ()
    expansion_factor: float = 2.0
    n_layers: int = 2
    k: int = 1
    learning_rate: float = 0.01
    momentum: float = 0.5
    weight_decay: float = 1e-4
    batch_size: int = 128
    epochs: int = 10
    seed: int = 0


@dataclass(frozen=True)
class IicSection:
    c_root: int = 800
    c_child: int = 100
    min_child_samples: int = 100
    epochs: int = 20
    child_epochs: int | None = None
    batch_size: int = 1024
    learning_rate: float = 1e-3
    init_scale: float = 1.0
    hidden_dim: int = 0
    noise_sigma: float = 0.05
    seed: int = 0


@dataclass(frozen=True)
class ContextSection:
    classes: tuple[str, ...] = ("fire", "smoke")
    tau: float = 0.5
    level: str = "leaf"


@dataclass(frozen=True)
class MorphSection:
    min_area: int = 2
    max_area: int | None = None
    preserve_holes: bool = False


@dataclass(frozen=True)
class EvalSection:
    window: str = "gaussian"
    K1: float = 0.01
    K2: float = 0.03
    L: float = 1.0


@dataclass(frozen=True)
class PipelineConfig:
    output_dir: str = "fuselet_out"
    threads: int = 1
    synth: SynthSection | None = None
    scenes: tuple[SceneInput, ...] = ()
    sampling: SamplingSection = SamplingSection()
    dbn: DbnSection = DbnSection()
    iic: IicSection = IicSection()
    context: ContextSection = ContextSection()
    morph: MorphSection = MorphSection()
    eval: EvalSection = EvalSection()
    base_dir: str = "."

    def section_hash(self, *names: str) -> str:
        payload = {n: _jsonable(getattr(self, n)) for n in names}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def with_seed(self, seed: int) -> "PipelineConfig":
        return dataclasses.replace(
            self,
            sampling=dataclasses.replace(self.sampling, seed=seed),
            dbn=dataclasses.replace(self.dbn, seed=seed),
            iic=dataclasses.replace(self.iic, seed=seed),
        )


def _jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    return obj


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a table, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"{path}: unknown field(s) {', '.join(sorted(unknown))}")
    kwargs = {}
    for name, value in data.items():
        kwargs[name] = _coerce(fields[name], value, f"{path}.{name}" if path else name)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from None


_SECTIONS = {
    "synth": SynthSection,
    "sampling": SamplingSection,
    "dbn": DbnSection,
    "iic": IicSection,
    "context": ContextSection,
    "morph": MorphSection,
    "eval": EvalSection,
}


def _coerce(f: dataclasses.Field, value, path: str):
    name = f.name
    if name in _SECTIONS:
        return _build(_SECTIONS[name], value, path)
    if name == "scenes":
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected an array of tables")
        return tuple(_scene(v, f"{path}[{i}]") for i, v in enumerate(value))
    default = f.default if f.default is not dataclasses.MISSING else None
    if isinstance(default, tuple) or name in ("layer_dims", "classes", "train_seeds", "test_seeds"):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected an array")
        return tuple(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
    return value


def _scene(data, path: str) -> SceneInput:
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a table")
    data = dict(data)
    rasters = data.pop("rasters", [])
    if not isinstance(rasters, list) or not rasters:
        raise ConfigError(f"{path}.rasters: at least one raster is required")
    built = tuple(_build(RasterInput, r, f"{path}.rasters[{i}]") for i, r in enumerate(rasters))
    scene = _build(SceneInput, data, path)
    if scene.role not in ("train", "test"):
        raise ConfigError(f"{path}.role: must be 'train' or 'test', got {scene.role!r}")
    return dataclasses.replace(scene, rasters=built)


def _validate(cfg: PipelineConfig) -> None:
    def need(cond, path, msg):
        if not cond:
            raise ConfigError(f"{path}: {msg}")

    need(cfg.threads >= 1, "threads", "must be >= 1")
    need(cfg.synth is not None or cfg.scenes, "scenes", "define [synth] or at least one [[scenes]] entry")
    need(not (cfg.synth is not None and cfg.scenes), "scenes", "[synth] and [[scenes]] are mutually exclusive")
    if cfg.synth is not None:
        s = cfg.synth
        need(s.n_rows >= 32 and s.n_cols >= 32, "synth.n_rows", "scenes must be at least 32x32")
        need(len(s.train_seeds) >= 1, "synth.train_seeds", "need at least one training scene")
        need(not set(s.train_seeds) & set(s.test_seeds), "synth.test_seeds", "must not overlap train_seeds")
    ids = [sc.id for sc in cfg.scenes]
    need(len(ids) == len(set(ids)), "scenes", "scene ids must be unique")
    if cfg.scenes:
        need(any(sc.role == "train" for sc in cfg.scenes), "scenes", "need at least one role='train' scene")
    sp = cfg.sampling
    need(sp.k >= 1, "sampling.k", "must be >= 1")
    need(sp.n_total >= 1, "sampling.n_total", "must be >= 1")
    need(sp.max_iter >= 1, "sampling.max_iter", "must be >= 1")
    d = cfg.dbn
    need(all(isinstance(x, int) and x >= 1 for x in d.layer_dims), "dbn.layer_dims", "entries must be positive integers")
    need(d.expansion_factor > 0, "dbn.expansion_factor", "must be > 0")
    need(d.n_layers >= 1, "dbn.n_layers", "must be >= 1")
    need(d.k >= 1, "dbn.k", "must be >= 1")
    need(d.learning_rate >= 0, "dbn.learning_rate", "must be >= 0")
    need(0 <= d.momentum < 1, "dbn.momentum", "must lie in [0, 1)")
    need(d.batch_size >= 1, "dbn.batch_size", "must be >= 1")
    need(d.epochs >= 0, "dbn.epochs", "must be >= 0")
    need(d.weight_decay >= 0, "dbn.weight_decay", "must be >= 0")
    i = cfg.iic
    need(i.c_root >= 1, "iic.c_root", "must be >= 1")
    need(i.c_child >= 1, "iic.c_child", "must be >= 1")
    need(i.min_child_samples >= 1, "iic.min_child_samples", "must be >= 1")
    need(i.batch_size >= 2, "iic.batch_size", "must be >= 2")
    need(i.epochs >= 0, "iic.epochs", "must be >= 0")
    need(i.child_epochs is None or i.child_epochs >= 0, "iic.child_epochs", "must be >= 0")
    need(i.init_scale > 0, "iic.init_scale", "must be > 0")
    need(i.hidden_dim >= 0, "iic.hidden_dim", "must be >= 0")
    need(i.noise_sigma >= 0, "iic.noise_sigma", "must be >= 0")
    need(i.learning_rate >= 0, "iic.learning_rate", "must be >= 0")
    c = cfg.context
    need(len(c.classes) >= 1, "context.classes", "need at least one class")
    need(all(isinstance(x, str) and x for x in c.classes), "context.classes", "entries must be non-empty strings")
    need(0 <= c.tau < 1, "context.tau", "must lie in [0, 1)")
    need(c.level in ("leaf", "root"), "context.level", "must be 'leaf' or 'root'")
    m = cfg.morph
    need(m.min_area >= 0, "morph.min_area", "must be >= 0")
    need(m.max_area is None or m.max_area >= m.min_area, "morph.max_area", "must be >= min_area")
    e = cfg.eval
    need(e.window in ("gaussian", "uniform"), "eval.window", "must be 'gaussian' or 'uniform'")
    need(e.K1 > 0 and e.K2 > 0 and e.L > 0, "eval", "K1, K2 and L must be positive")


def config_from_dict(data: dict, base_dir=".") -> PipelineConfig:
    data = dict(data)
    data["base_dir"] = str(base_dir)
    cfg = _build(PipelineConfig, data, "")
    _validate(cfg)
    return cfg


def load_config(path, output_dir: str | None = None, seed: int | None = None, threads: int | None = None) -> PipelineConfig:
    """Read a TOML config. FUSELET_OUT and explicit arguments override file values."""
    path = Path(path)
    try:
        data = tomllib.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    cfg = config_from_dict(data, path.parent)
    # file values are relative to the config file, overrides to the working directory
    out = output_dir or os.environ.get("FUSELET_OUT")
    out = os.path.abspath(out) if out else str(cfg.resolve(cfg.output_dir))
    cfg = dataclasses.replace(cfg, output_dir=out)
    if seed is not None:
        cfg = cfg.with_seed(seed)
    if threads is not None:
        if threads < 1:
            raise ConfigError("threads: must be >= 1")
        cfg = dataclasses.replace(cfg, threads=threads)
    return cfg
