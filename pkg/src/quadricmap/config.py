"""Run configuration: flat key = value files, defaults in the binary.

A config file holds lines like

    n_frames = 50
    trajectory = "orbit"
    use_symmetry = true

Every key has a built-in default; unknown keys are rejected so typos
fail loudly instead of silently running the default. The canonical dump
of a config (dump_config) is what gets hashed, so two configs agree
exactly when their hashes do.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    # reproducibility
    seed: int = 0

    # synthetic scene
    n_objects: int = 5
    n_frames: int = 36
    trajectory: str = "orbit"
    radius: float = 3.0
    length: float = 4.0
    spread: float = 1.1
    bbox_noise: float = 2.0
    stride: int = 1
    image_width: int = 640
    image_height: int = 480
    fx: float = 525.0
    fy: float = 525.0
    cx: float = 319.5
    cy: float = 239.5
    render_edges: bool = False

    # detection loading
    filter_partial: bool = True
    partial_margin: float = 30.0

    # residual weights
    sigma_det: float = 10.0
    sigma_ssc: float = 1.0
    sigma_sym: float = 1.0
    sigma_odom_rot: float = 0.01
    sigma_odom_trans: float = 0.01
    huber_delta: float = 1.0

    # optimizer
    max_iterations: int = 100
    lambda0: float = 1e-3

    # feature toggles (ablations)
    use_support: bool = True
    use_ssc: bool = True
    use_symmetry: bool = False

    # evaluation
    min_observations: int = 3
    iou_resolution: int = 64
    allow_reflections: bool = False

    # yaw sweep
    sweep_range_deg: float = 30.0
    sweep_step_deg: float = 1.0

    def __post_init__(self):
        if self.trajectory not in ("orbit", "forward"):
            raise ConfigError(f"unknown trajectory {self.trajectory!r}")
        positive = ("radius", "length", "spread", "fx", "fy",
                    "sigma_det", "sigma_ssc", "sigma_sym", "sigma_odom_rot",
                    "sigma_odom_trans", "huber_delta", "lambda0",
                    "sweep_step_deg")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("n_objects", "n_frames", "stride", "image_width",
                     "image_height", "max_iterations", "iou_resolution"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if self.bbox_noise < 0 or self.partial_margin < 0:
            raise ConfigError("noise and margins must be non-negative")
        if self.sweep_range_deg <= 0:
            raise ConfigError("sweep_range_deg must be positive")


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _parse_value(key: str, raw: str):
    kind = _FIELDS[key].type
    raw = raw.strip()
    if len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in "'\"":
        raw = raw[1:-1]
        kind = "str"
    if kind == "bool":
        if raw == "true":
            return True
        if raw == "false":
            return False
        raise ConfigError(f"{key}: expected true or false, got {raw!r}")
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None
    return raw


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    values = dataclasses.asdict(base) if base is not None else {}
    for num, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {num}: expected key = value")
        key, _, val = line.partition("=")
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"line {num}: unknown key {key!r}")
        values[key] = _parse_value(key, val)
    try:
        return RunConfig(**values)
    except TypeError as ex:
        raise ConfigError(str(ex)) from None


def load_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as ex:
        raise ConfigError(f"cannot read config: {ex}") from None
    try:
        return parse_config(text)
    except ConfigError as ex:
        raise ConfigError(f"{path}: {ex}") from None


def dump_config(cfg: RunConfig) -> str:
    """Canonical text form: declaration order, repr values, one per line."""
    lines = []
    for f in dataclasses.fields(RunConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            text = "true" if v else "false"
        elif isinstance(v, str):
            text = f'"{v}"'
        else:
            text = repr(v)
        lines.append(f"{f.name} = {text}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(dump_config(cfg).encode("utf-8")).hexdigest()[:12]
