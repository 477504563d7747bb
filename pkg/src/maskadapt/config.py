"""Run configuration: an INI file with one section per module.

Every subcommand writes the fully resolved configuration (defaults merged
with the file and command-line overrides) to ``resolved_config.ini`` in its
output directory, so a run can be repeated from that file and its seed.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field
from pathlib import Path

from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    image_size: int = 32
    patch: int = 8
    timesteps: int = 10
    mask_threshold: float = 0.5
    cls_foreground: bool = True
    prompt_seed: int = 0


@dataclass
class GenerateConfig:
    n_samples: int = 4
    gamma: float = 1.0
    guidance: float = 1.0
    ddim_steps: int = 0  # 0 walks every timestep
    renormalize: bool = False


@dataclass
class EvalConfig:
    min_joints: int = 4
    akd_pixels: bool = False
    max_cases: int = 0  # 0 means no limit


@dataclass
class RunConfig:
    seed: int = 0
    base_seed: int = 0  # seeds the frozen surrogate base; train and generate must agree
    backend: str = "surrogate"
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    generate: GenerateConfig = field(default_factory=GenerateConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    SECTIONS = ("data", "train", "generate", "eval")

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp["run"] = {"seed": str(self.seed), "base_seed": str(self.base_seed), "backend": self.backend}
        for name in self.SECTIONS:
            cp[name] = {f.name: str(getattr(getattr(self, name), f.name))
                        for f in dataclasses.fields(getattr(self, name))}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def write_resolved(self, out_dir: str | Path, command: str) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "resolved_config.ini"
        path.write_text(f"# resolved configuration for `{command}`\n" + self.to_ini(), encoding="utf-8")
        return path


def _coerce(value: str, default, key: str):
    try:
        if isinstance(default, bool):
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {value!r}") from None
    return value.strip()


def _apply(obj, items: dict[str, str], section: str):
    known = {f.name: f for f in dataclasses.fields(obj)}
    updates = {}
    for key, value in items.items():
        if key not in known:
            raise ConfigError(f"unknown key [{section}] {key}")
        updates[key] = _coerce(value, getattr(obj, key), f"[{section}] {key}")
    try:
        return dataclasses.replace(obj, **updates)
    except ValueError as exc:
        raise ConfigError(f"[{section}]: {exc}") from None


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    cfg = RunConfig()
    for section in cp.sections():
        items = dict(cp.items(section, raw=True))
        if section == "run":
            for key, value in items.items():
                if key in ("seed", "base_seed"):
                    setattr(cfg, key, _coerce(value, 0, f"[run] {key}"))
                elif key == "backend":
                    cfg.backend = value.strip()
                else:
                    raise ConfigError(f"unknown key [run] {key}")
        elif section in RunConfig.SECTIONS:
            setattr(cfg, section, _apply(getattr(cfg, section), items, section))
        else:
            raise ConfigError(f"unknown section [{section}]")
    if cfg.backend not in ("surrogate", "real"):
        raise ConfigError("backend must be 'surrogate' or 'real'")
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, str(path))


def to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def from_dict(d: dict) -> RunConfig:
    """Inverse of :func:`to_dict` (used to rebuild the stack from a checkpoint)."""
    cfg = RunConfig(seed=d.get("seed", 0), base_seed=d.get("base_seed", 0), backend=d.get("backend", "surrogate"))
    for name in RunConfig.SECTIONS:
        if name in d:
            setattr(cfg, name, dataclasses.replace(getattr(cfg, name), **d[name]))
    return cfg


def override(cfg: RunConfig, section: str, **values) -> RunConfig:
    """Apply command-line overrides, skipping ``None`` values."""
    values = {k: v for k, v in values.items() if v is not None}
    if not values:
        return cfg
    if section == "run":
        return dataclasses.replace(cfg, **values)
    return dataclasses.replace(cfg, **{section: dataclasses.replace(getattr(cfg, section), **values)})
