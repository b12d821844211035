"""Experiment configuration: defaults, the ``key = value`` text format and validation."""

import difflib
import os
from dataclasses import asdict, dataclass, fields, replace
from typing import Tuple

DATA_ROOT_ENV = "SCALECODEC_DATA_ROOT"

# Full-scale operating points used for the COCO task networks; kept for reference only.
DETECTOR_LAMBDA_BASE = {
    "faster_rcnn": (1.28e-5, 3.2e-5, 8e-5, 2e-4, 4e-4, 5.5e-4),
    "mask_rcnn": (1.28e-5, 3.2e-5, 8e-5, 2e-4, 4e-4, 5.5e-4),
    "yolov3": (5e-5, 1e-4, 4e-4, 1e-3, 2e-3),
}
DETECTOR_L_BASE = {"faster_rcnn": 96, "mask_rcnn": 128, "yolov3": 64}


class ConfigError(ValueError):
    def __init__(self, message, line=None, key=None):
        self.line, self.key = line, key
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{message}")


@dataclass(frozen=True)
class ExperimentConfig:
    # architecture
    l_base: int = 16
    l_enh: int = 48
    hidden: int = 32
    feature_channels: int = 32
    s_max: int = 64
    escape_mass: float = 2.0 ** -16
    num_classes: int = 10
    image_size: int = 32
    # loss weights
    lambda_base: float = 1.0
    lambda_enh: float = 300.0
    lambda_base_grid: Tuple[float, ...] = (0.03, 0.1, 0.3, 1.0, 3.0, 10.0)
    lambda_enh_grid: Tuple[float, ...] = (30.0, 100.0, 300.0, 1000.0)
    # schedule
    stage1_epochs: int = 40
    stage1_lr: float = 1e-3
    stage2_epochs: int = 20
    decay_interval: int = 10
    decay_power: float = 1.0
    lr_floor: float = 1e-6
    entropy_lr: float = 1e-3
    batch_size: int = 16
    patch_size: int = 32
    preview_epochs: int = 10
    preview_lr: float = 1e-3
    # task proxy
    proxy_epochs: int = 12
    proxy_lr: float = 2e-3
    # data
    dataset_root: str = ""
    synthetic_train: int = 2000
    synthetic_val: int = 500
    data_seed: int = 0
    # run
    seed: int = 0
    coder: bool = True
    residual_init: str = ""

    def validate(self, check_paths: bool = True) -> "ExperimentConfig":
        positive = ("l_base", "l_enh", "hidden", "feature_channels", "s_max", "batch_size",
                    "image_size", "patch_size", "decay_interval", "synthetic_train", "synthetic_val")
        for key in positive:
            if getattr(self, key) <= 0:
                raise ConfigError(f"{key} must be positive, got {getattr(self, key)}", key=key)
        for key in ("lambda_base", "lambda_enh", "stage1_lr", "entropy_lr", "proxy_lr", "preview_lr", "lr_floor",
                    "escape_mass"):
            if not getattr(self, key) > 0:
                raise ConfigError(f"{key} must be > 0, got {getattr(self, key)}", key=key)
        for key in ("lambda_base_grid", "lambda_enh_grid"):
            if not getattr(self, key) or any(v <= 0 for v in getattr(self, key)):
                raise ConfigError(f"{key} must be a non-empty list of positive values", key=key)
        for key in ("stage1_epochs", "stage2_epochs", "preview_epochs", "proxy_epochs"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be >= 0", key=key)
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2", key="num_classes")
        if self.image_size % 8 or self.patch_size % 8:
            raise ConfigError("image_size and patch_size must be multiples of 8", key="image_size")
        if not 0 < self.escape_mass < 1:
            raise ConfigError("escape_mass must lie in (0, 1)", key="escape_mass")
        if check_paths:
            for key in ("dataset_root", "residual_init"):
                value = getattr(self, key)
                if value and not os.path.exists(resolve_path(value)):
                    raise ConfigError(f"{key}: path {value!r} does not exist", key=key)
        return self

    def replace(self, **changes) -> "ExperimentConfig":
        return replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ", ".join(repr(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    def as_dict(self):
        return asdict(self)


def resolve_path(path: str) -> str:
    """Relative paths that do not exist fall back to ``$SCALECODEC_DATA_ROOT/path``."""
    if not path or os.path.isabs(path) or os.path.exists(path):
        return path
    root = os.environ.get(DATA_ROOT_ENV)
    if root:
        return os.path.join(root, path)
    return path


_BOOL = {"true": True, "yes": True, "on": True, "1": True,
         "false": False, "no": False, "off": False, "0": False}


def _coerce(name, raw, default, line):
    try:
        if isinstance(default, bool):
            return _BOOL[raw.lower()]
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(float(v) for v in raw.replace(",", " ").split())
        return raw
    except (KeyError, ValueError):
        raise ConfigError(f"{name}: cannot parse {raw!r} as {type(default).__name__}",
                          line=line, key=name) from None


def parse_config_text(text: str, check_paths: bool = True) -> ExperimentConfig:
    known = {f.name: f for f in fields(ExperimentConfig)}
    defaults = ExperimentConfig()
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", line=lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in known:
            close = difflib.get_close_matches(key, known, n=1)
            hint = f" (did you mean {close[0]!r}?)" if close else ""
            raise ConfigError(f"unknown key {key!r}{hint}", line=lineno, key=key)
        values[key] = _coerce(key, value, getattr(defaults, key), lineno)
        if check_paths and key in ("dataset_root", "residual_init") and value \
                and not os.path.exists(resolve_path(value)):
            raise ConfigError(f"{key}: path {value!r} does not exist", line=lineno, key=key)
        try:
            ExperimentConfig(**values).validate(check_paths=False)
        except ConfigError as err:
            raise ConfigError(str(err), line=lineno, key=err.key) from None
    return ExperimentConfig(**values).validate(check_paths=False)


def parse_config(path, check_paths: bool = True) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config_text(fh.read(), check_paths=check_paths)
