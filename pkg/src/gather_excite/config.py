"""Run configuration files (TOML) and architecture name parsing.

A run config looks like::

    name = "smoke"
    seed = 0
    output_dir = "runs"

    [arch]
    family = "cifar-resnet"
    depth = 110
    width_divisor = 4

    [placement]
    ge = "theta-minus:global:all"

    [data]
    path = "data/synthetic"
    variant = "cifar10"
    subset = 1000

    [train]
    epochs = 2
    batch_size = 32

Every key is checked before any work starts; unknown keys are errors.
"""

from __future__ import annotations

import dataclasses
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .exceptions import ConfigurationError
from .models import ArchSpec, GEPlacement
from .training import TrainConfig

ARCH_KEYS = {"family", "depth", "widen", "width_divisor", "in_channels", "height", "width", "num_classes"}
DATA_KEYS = {"path", "variant", "subset", "eval_subset"}
TOP_KEYS = {"name", "seed", "output_dir", "arch", "placement", "data", "train"}
TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)} - {"seed"}


def parse_arch(text, num_classes=None, width_divisor=1):
    """Architecture shorthand: ``resnet50``, ``resnet101``, ``resnet110``/``resnet164``
    (CIFAR pre-activation), ``cifar-resnet<depth>``, ``wrn-16-8``, ``resnet50-narrow``."""
    t = str(text).strip().lower()
    if t == "resnet50":
        return ArchSpec.resnet50(**({"num_classes": num_classes} if num_classes else {}))
    if t == "resnet101":
        return ArchSpec.resnet101(**({"num_classes": num_classes} if num_classes else {}))
    if t == "resnet50-narrow":
        return ArchSpec.resnet50_narrow(num_classes or 10)
    m = re.fullmatch(r"(?:cifar-)?resnet-?(\d+)", t)
    if m:
        return ArchSpec.cifar_resnet(int(m.group(1)), num_classes or 10, width_divisor)
    m = re.fullmatch(r"wrn-?(\d+)-(\d+)", t)
    if m:
        return ArchSpec.wrn(int(m.group(1)), int(m.group(2)), num_classes or 10, width_divisor)
    raise ConfigurationError(
        f"unknown architecture {text!r}; try resnet50, resnet101, resnet110, resnet164, wrn-16-8, resnet50-narrow"
    )


def _arch_from_table(table):
    _reject_unknown(table, ARCH_KEYS, "arch")
    if "family" not in table:
        raise ConfigurationError("[arch] needs a family")
    family = table["family"]
    base = {
        "resnet50": ArchSpec.resnet50,
        "resnet101": ArchSpec.resnet101,
        "cifar-resnet": ArchSpec.cifar_resnet,
        "wrn": ArchSpec.wrn,
        "resnet50-narrow": ArchSpec.resnet50_narrow,
    }.get(family)
    if base is None:
        raise ConfigurationError(f"unknown architecture family {family!r}")
    fields = {**base().to_dict(), **table}
    try:
        return ArchSpec(**fields)
    except TypeError as exc:
        raise ConfigurationError(f"[arch]: {exc}") from exc


def _reject_unknown(table, allowed, where):
    if not isinstance(table, dict):
        raise ConfigurationError(f"{where} must be a table")
    unknown = sorted(set(table) - allowed)
    if unknown:
        raise ConfigurationError(f"unknown key(s) {unknown} in {where}; allowed: {sorted(allowed)}")


@dataclass
class DataConfig:
    path: str | None = None
    variant: str = "cifar10"
    subset: int | None = None
    eval_subset: int | None = None


@dataclass
class RunConfig:
    name: str
    arch: ArchSpec
    placement: GEPlacement | None = None
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    output_dir: str = "runs"
    source: str | None = None

    @property
    def run_dir(self):
        return Path(self.output_dir) / self.name

    def to_dict(self):
        train = dataclasses.asdict(self.train)
        train.pop("seed")
        return {
            "name": self.name,
            "seed": self.seed,
            "output_dir": self.output_dir,
            "arch": self.arch.to_dict(),
            "placement": {"ge": self.placement.describe() if self.placement else "none"},
            "data": dataclasses.asdict(self.data),
            "train": train,
        }

    def write_echo(self, run_dir=None):
        """Write the fully resolved config into the run directory."""
        run_dir = Path(run_dir or self.run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        path = run_dir / "config.json"
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


def from_dict(raw, source=None):
    _reject_unknown(raw, TOP_KEYS, "config")
    name = raw.get("name")
    if not name or not re.fullmatch(r"[A-Za-z0-9_.-]+", str(name)):
        raise ConfigurationError("config needs a 'name' made of letters, digits, '_', '.', '-'")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigurationError(f"seed must be a non-negative integer, got {seed!r}")
    arch = _arch_from_table(raw.get("arch", {}))

    ptable = raw.get("placement", {})
    _reject_unknown(ptable, {"ge"}, "[placement]")
    placement = GEPlacement.parse(ptable.get("ge", "none"))
    if placement is not None:
        placement.selected(arch)

    dtable = raw.get("data", {})
    _reject_unknown(dtable, DATA_KEYS, "[data]")
    data = DataConfig(**dtable)
    for key in ("subset", "eval_subset"):
        v = getattr(data, key)
        if v is not None and (not isinstance(v, int) or v < 1):
            raise ConfigurationError(f"[data] {key} must be a positive integer")

    ttable = raw.get("train", {})
    _reject_unknown(ttable, TRAIN_KEYS, "[train]")
    train = TrainConfig(**{**ttable, "seed": seed})
    train.make_schedule()
    return RunConfig(name, arch, placement, data, train, seed, str(raw.get("output_dir", "runs")), source)


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc
    cfg = from_dict(raw, source=str(path))
    if cfg.data.path is not None and not Path(cfg.data.path).is_absolute():
        cfg.data.path = str((path.parent / cfg.data.path).resolve())
    return cfg
