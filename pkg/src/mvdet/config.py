"""Run configuration: flat key=value files, defaults, and the model hash.

The config file format is lines of ``key = value`` (``#`` starts a
comment); keys and value types are listed in docs/FORMATS.md. Values
with multiple numbers are space-separated.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields

from .head import HeadConfig
from .loss import LossConfig

Bounds = tuple[tuple[float, float], tuple[float, float], tuple[float, float]]


@dataclass
class RunConfig:
    seed: int = 7
    dataset: str = "dataset/manifest.txt"
    out_dir: str = "runs/default"

    steps: int = 2000
    learning_rate: float = 1e-3
    # schedule: multiply by decay_factor at these fractions of total steps
    milestones: tuple = (0.6, 0.9)
    decay_factor: float = 0.1
    weight_decay: float = 1e-4
    grad_clip: float = 10.0  # global gradient-norm cap (0 disables)
    checkpoint_every: int = 0  # 0 = once per epoch

    lambda_box: float = 0.25
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0

    num_layers: int = 4
    num_queries: int = 50
    hidden: int = 64
    num_heads: int = 8
    num_classes: int = 4
    bounds: Bounds = ((-11.0, 11.0), (-11.0, 11.0), (0.0, 2.5))

    def __post_init__(self):
        if list(self.milestones) != sorted(self.milestones):
            raise ValueError("schedule milestones must ascend")

    def head_config(self) -> HeadConfig:
        return HeadConfig(
            num_layers=self.num_layers,
            num_queries=self.num_queries,
            hidden=self.hidden,
            num_heads=self.num_heads,
            num_classes=self.num_classes,
            bounds=self.bounds,
        )

    def loss_config(self) -> LossConfig:
        return LossConfig(
            lambda_box=self.lambda_box,
            focal_alpha=self.focal_alpha,
            focal_gamma=self.focal_gamma,
        )

    def model_hash(self) -> str:
        """Hash of the model-defining fields; embedded in checkpoints so
        evaluation refuses a checkpoint whose head shape differs."""
        parts = [
            self.num_layers,
            self.num_queries,
            self.hidden,
            self.num_heads,
            self.num_classes,
            tuple(tuple(b) for b in self.bounds),
        ]
        return hashlib.sha256(repr(parts).encode()).hexdigest()[:16]


_INT_KEYS = {
    "seed", "steps", "checkpoint_every", "num_layers", "num_queries",
    "hidden", "num_heads", "num_classes",
}
_FLOAT_KEYS = {
    "learning_rate", "decay_factor", "weight_decay", "grad_clip", "lambda_box",
    "focal_alpha", "focal_gamma",
}
_STR_KEYS = {"dataset", "out_dir"}


def parse_config(text: str) -> RunConfig:
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key in _INT_KEYS:
            values[key] = int(val)
        elif key in _FLOAT_KEYS:
            values[key] = float(val)
        elif key in _STR_KEYS:
            values[key] = val
        elif key == "milestones":
            values[key] = tuple(float(x) for x in val.split())
        elif key == "bounds":
            nums = [float(x) for x in val.split()]
            if len(nums) != 6:
                raise ValueError(f"line {lineno}: bounds needs 6 numbers")
            values[key] = ((nums[0], nums[1]), (nums[2], nums[3]), (nums[4], nums[5]))
        else:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
    return RunConfig(**values)


def load_config(path: str) -> RunConfig:
    with open(path, "r", encoding="ascii") as fh:
        return parse_config(fh.read())


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        v = getattr(cfg, f.name)
        if f.name == "milestones":
            lines.append(f"milestones = {' '.join(format(x, 'g') for x in v)}")
        elif f.name == "bounds":
            flat = " ".join(format(x, "g") for pair in v for x in pair)
            lines.append(f"bounds = {flat}")
        else:
            lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
