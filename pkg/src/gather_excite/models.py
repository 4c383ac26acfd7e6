"""Residual backbones with optional GE units at the end of each residual branch.

Families:

* ``resnet50`` / ``resnet101`` - bottleneck ResNets at 224x224, stride on the
  first 1x1 conv of a downsampling block.
* ``cifar-resnet`` - pre-activation ResNets for 32x32 inputs; depth 6n+2
  uses basic blocks (e.g. 110), depth 9n+2 bottlenecks (e.g. 164).
* ``wrn`` - pre-activation wide ResNet (e.g. 16-8).
* ``resnet50-narrow`` - desk-scale ResNet-50 with channel widths divided by 4
  and a 3x3 stem for 32x32 inputs, for quick experiments.

Stages are numbered from 2 (``stage2`` is the first residual stage, as in the
``conv2_x`` convention); block ``stage{s}.block{b}`` has the alias
``conv{s}-{b}``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .exceptions import ConfigurationError, DimensionError
from .ge import ExtentSpec, GEUnit, GEUnitConfig
from .nn import BatchNorm2d, Conv2d, Linear, Module, ModuleList
from .tensor import Tensor

FAMILIES = ("resnet50", "resnet101", "cifar-resnet", "wrn", "resnet50-narrow")


@dataclass(frozen=True)
class ArchSpec:
    family: str
    depth: int = 50
    widen: int = 1
    width_divisor: int = 1
    in_channels: int = 3
    height: int = 224
    width: int = 224
    num_classes: int = 1000

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown architecture family {self.family!r}; choose from {FAMILIES}")
        if self.width_divisor < 1 or self.widen < 1:
            raise ConfigurationError("width_divisor and widen must be >= 1")
        if self.family == "cifar-resnet" and (self.depth - 2) % 6 and (self.depth - 2) % 9:
            raise ConfigurationError(f"cifar-resnet depth must be 6n+2 or 9n+2, got {self.depth}")
        if self.family == "wrn" and (self.depth - 4) % 6:
            raise ConfigurationError(f"wrn depth must be 6n+4, got {self.depth}")

    @classmethod
    def resnet50(cls, num_classes=1000, height=224, width=224):
        return cls("resnet50", 50, num_classes=num_classes, height=height, width=width)

    @classmethod
    def resnet101(cls, num_classes=1000, height=224, width=224):
        return cls("resnet101", 101, num_classes=num_classes, height=height, width=width)

    @classmethod
    def cifar_resnet(cls, depth=110, num_classes=10, width_divisor=1):
        return cls("cifar-resnet", depth, width_divisor=width_divisor, height=32, width=32,
                   num_classes=num_classes)

    @classmethod
    def wrn(cls, depth=16, widen=8, num_classes=10, width_divisor=1):
        return cls("wrn", depth, widen=widen, width_divisor=width_divisor, height=32, width=32,
                   num_classes=num_classes)

    @classmethod
    def resnet50_narrow(cls, num_classes=10):
        return cls("resnet50-narrow", 50, width_divisor=4, height=32, width=32, num_classes=num_classes)

    @property
    def input_shape(self):
        return (self.in_channels, self.height, self.width)

    def ch(self, c):
        return max(1, c // self.width_divisor)

    def stage_names(self):
        return [s.name for s in self.plan().stages]

    def plan(self):
        return _plan(self)

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass(frozen=True)
class BlockPlan:
    name: str
    kind: str  # bottleneck | preact-basic | preact-bottleneck
    cin: int
    mid: int
    cout: int
    stride: int
    in_hw: tuple
    out_hw: tuple

    @property
    def projection(self):
        return self.stride != 1 or self.cin != self.cout


@dataclass(frozen=True)
class StagePlan:
    name: str
    blocks: tuple


@dataclass(frozen=True)
class NetPlan:
    stem: str  # imagenet | cifar
    stem_out: int
    stem_hw: tuple  # spatial size entering the first stage
    stages: tuple
    preact: bool
    final_channels: int


def _down(hw, s):
    return (-(-hw[0] // s), -(-hw[1] // s)) if s > 1 else hw


def _plan(arch):
    ch = arch.ch
    if arch.family in ("resnet50", "resnet101", "resnet50-narrow"):
        counts = (3, 4, 6, 3) if arch.family != "resnet101" else (3, 4, 23, 3)
        mids = [ch(m) for m in (64, 128, 256, 512)]
        if arch.family == "resnet50-narrow":
            stem, stem_out, hw = "cifar", ch(64), (arch.height, arch.width)
        else:
            stem, stem_out = "imagenet", ch(64)
            hw = (arch.height, arch.width)
            hw = ((hw[0] + 6 - 7) // 2 + 1, (hw[1] + 6 - 7) // 2 + 1)  # 7x7 s2 p3
            hw = ((hw[0] + 2 - 3) // 2 + 1, (hw[1] + 2 - 3) // 2 + 1)  # maxpool 3 s2 p1
        kind, expansion, preact = "bottleneck", 4, False
        strides = (1, 2, 2, 2)
    elif arch.family == "cifar-resnet":
        stem, stem_out, hw, preact = "cifar", ch(16), (arch.height, arch.width), True
        if (arch.depth - 2) % 6 == 0 and arch.depth != 164:
            n = (arch.depth - 2) // 6
            kind, expansion = "preact-basic", 1
        else:
            n = (arch.depth - 2) // 9
            kind, expansion = "preact-bottleneck", 4
        counts = (n, n, n)
        mids = [ch(16), ch(32), ch(64)]
        strides = (1, 2, 2)
    else:  # wrn
        n = (arch.depth - 4) // 6
        stem, stem_out, hw, preact = "cifar", ch(16), (arch.height, arch.width), True
        kind, expansion = "preact-basic", 1
        counts = (n, n, n)
        mids = [ch(16 * arch.widen), ch(32 * arch.widen), ch(64 * arch.widen)]
        strides = (1, 2, 2)

    stages = []
    cin = stem_out
    stem_hw = hw
    for si, (count, mid, stride) in enumerate(zip(counts, mids, strides)):
        sname = f"stage{si + 2}"
        cout = mid * expansion
        blocks = []
        for bi in range(count):
            s = stride if bi == 0 else 1
            out_hw = _down(hw, s)
            blocks.append(BlockPlan(f"{sname}.block{bi + 1}", kind, cin, mid, cout, s, hw, out_hw))
            cin, hw = cout, out_hw
        stages.append(StagePlan(sname, tuple(blocks)))
    return NetPlan(stem, stem_out, stem_hw, tuple(stages), preact, cin)


# ---------------------------------------------------------------------------
# placement


_KINDS = ("theta-minus", "theta-minus-max", "theta", "theta-plus", "se")


@dataclass(frozen=True)
class GEPlacement:
    """Which GE variant goes into every block of which stages (``stages=None`` means all)."""

    config: GEUnitConfig
    stages: tuple | None = None

    @classmethod
    def parse(cls, text):
        """Parse ``kind:extent:stages``, e.g. ``theta:e8:stage3,stage4`` or ``se:global:all``."""
        parts = str(text).strip().split(":")
        if len(parts) == 1 and parts[0].lower() in ("", "none", "baseline"):
            return None
        if len(parts) == 2:
            parts.append("all")
        if len(parts) != 3:
            raise ConfigurationError(f"placement {text!r} is not of the form kind:extent:stages")
        kind, extent_text, stage_text = (p.strip().lower() for p in parts)
        extent = ExtentSpec.parse(extent_text)
        if kind == "theta-minus":
            cfg = GEUnitConfig.theta_minus(extent)
        elif kind == "theta-minus-max":
            cfg = GEUnitConfig.theta_minus(extent, pool="max")
        elif kind == "theta":
            cfg = GEUnitConfig.theta(extent)
        elif kind == "theta-plus":
            cfg = GEUnitConfig.theta_plus(extent)
        elif kind == "se":
            if not extent.is_global:
                raise ConfigurationError("se placement uses global extent only")
            cfg = GEUnitConfig.se()
        else:
            raise ConfigurationError(f"unknown GE kind {kind!r}; choose from {_KINDS}")
        if stage_text in ("all", "*"):
            stages = None
        else:
            stages = []
            for s in stage_text.split(","):
                s = s.strip()
                if s.isdigit():
                    s = f"stage{s}"
                if not re.fullmatch(r"stage\d+", s):
                    raise ConfigurationError(f"bad stage name {s!r} in placement {text!r}")
                stages.append(s)
            stages = tuple(stages)
        return cls(cfg, stages)

    def describe(self):
        kind = self.config.variant
        if kind == "theta-minus" and self.config.gather.value == "max":
            kind = "theta-minus-max"
        extent = str(self.config.extent)
        stages = "all" if self.stages is None else ",".join(self.stages)
        return f"{kind}:{extent}:{stages}"

    def selected(self, arch):
        names = arch.stage_names()
        if self.stages is None:
            return set(names)
        missing = [s for s in self.stages if s not in names]
        if missing:
            raise ConfigurationError(f"placement stages {missing} not in {arch.family} stages {names}")
        return set(self.stages)

    def unit_config(self, block):
        return self.config.with_geometry(block.cout, *block.out_hw)


def ge_block_names(arch, placement):
    """Names of the blocks that receive a GE unit."""
    if placement is None:
        return []
    chosen = placement.selected(arch)
    return [b.name for st in arch.plan().stages if st.name in chosen for b in st.blocks]


def block_alias(name):
    """``stage4.block6`` -> ``conv4-6``."""
    m = re.fullmatch(r"stage(\d+)\.block(\d+)", name)
    return f"conv{m.group(1)}-{m.group(2)}" if m else name


def resolve_block_name(name):
    """Accept ``stage4.block6``, ``conv4-6`` or ``conv4-6-relu``."""
    m = re.fullmatch(r"conv(\d+)-(\d+)(?:-relu)?", name)
    if m:
        return f"stage{m.group(1)}.block{m.group(2)}"
    return name[: -len("-relu")] if name.endswith("-relu") else name


# ---------------------------------------------------------------------------
# modules


class Block(Module):
    """One residual block. Hooks:

    ``residual_hook(r, gate)`` rewrites the residual branch output after the
    GE unit (``gate`` is None without one); ``output_hook(out)`` observes
    the block output.
    """

    def __init__(self, plan, ge_cfg=None, rng=None):
        super().__init__()
        self.plan = plan
        self.kind = plan.kind
        self.stride = plan.stride
        p = plan
        if p.kind == "bottleneck":
            self.conv_a = Conv2d(p.cin, p.mid, 1, stride=p.stride, rng=rng)
            self.bn_a = BatchNorm2d(p.mid)
            self.conv_b = Conv2d(p.mid, p.mid, 3, pad=1, rng=rng)
            self.bn_b = BatchNorm2d(p.mid)
            self.conv_c = Conv2d(p.mid, p.cout, 1, rng=rng)
            self.bn_c = BatchNorm2d(p.cout)
            if p.projection:
                self.downsample = Conv2d(p.cin, p.cout, 1, stride=p.stride, rng=rng)
                self.downsample_bn = BatchNorm2d(p.cout)
        elif p.kind == "preact-basic":
            self.bn_a = BatchNorm2d(p.cin)
            self.conv_a = Conv2d(p.cin, p.cout, 3, stride=p.stride, pad=1, rng=rng)
            self.bn_b = BatchNorm2d(p.cout)
            self.conv_b = Conv2d(p.cout, p.cout, 3, pad=1, rng=rng)
            if p.projection:
                self.downsample = Conv2d(p.cin, p.cout, 1, stride=p.stride, rng=rng)
        elif p.kind == "preact-bottleneck":
            self.bn_a = BatchNorm2d(p.cin)
            self.conv_a = Conv2d(p.cin, p.mid, 1, rng=rng)
            self.bn_b = BatchNorm2d(p.mid)
            self.conv_b = Conv2d(p.mid, p.mid, 3, stride=p.stride, pad=1, rng=rng)
            self.bn_c = BatchNorm2d(p.mid)
            self.conv_c = Conv2d(p.mid, p.cout, 1, rng=rng)
            if p.projection:
                self.downsample = Conv2d(p.cin, p.cout, 1, stride=p.stride, rng=rng)
        else:
            raise ConfigurationError(f"unknown block kind {p.kind!r}")
        self.ge = GEUnit(ge_cfg, rng=rng) if ge_cfg is not None else None
        self._hooks = {"residual": None, "output": None}

    @property
    def residual_hook(self):
        return self._hooks["residual"]

    @residual_hook.setter
    def residual_hook(self, fn):
        self._hooks["residual"] = fn

    @property
    def output_hook(self):
        return self._hooks["output"]

    @output_hook.setter
    def output_hook(self, fn):
        self._hooks["output"] = fn

    def forward(self, x):
        relu = F.relu
        if self.kind == "bottleneck":
            r = relu(self.bn_a(self.conv_a(x)))
            r = relu(self.bn_b(self.conv_b(r)))
            r = self.bn_c(self.conv_c(r))
            shortcut = self.downsample_bn(self.downsample(x)) if self.plan.projection else x
        else:
            pre = relu(self.bn_a(x))
            if self.kind == "preact-basic":
                r = self.conv_a(pre)
                r = self.conv_b(relu(self.bn_b(r)))
            else:
                r = self.conv_a(pre)
                r = self.conv_b(relu(self.bn_b(r)))
                r = self.conv_c(relu(self.bn_c(r)))
            shortcut = self.downsample(pre) if self.plan.projection else x
        gate = None
        if self.ge is not None:
            r = self.ge(r)
            gate = self.ge.last_gate
        hook = self._hooks["residual"]
        if hook is not None:
            r = hook(r, gate)
        out = F.add(r, shortcut)
        if self.kind == "bottleneck":
            out = relu(out)
        if self._hooks["output"] is not None:
            self._hooks["output"](out)
        return out


class Stage(Module):
    def __init__(self, plan, ge_cfgs, rng):
        super().__init__()
        self.block = ModuleList([Block(b, ge_cfgs.get(b.name), rng) for b in plan.blocks], one_based=True)

    def forward(self, x):
        for b in self.block:
            x = b(x)
        return x


class Model(Module):
    """A built backbone. ``forward`` maps ``(N, C, H, W)`` images to ``(N, classes)`` logits."""

    def __init__(self, arch, placement=None, seed=0):
        super().__init__()
        self.arch = arch
        self.placement = placement
        rng = np.random.default_rng(seed)
        plan = arch.plan()
        self.net_plan = plan
        chosen = placement.selected(arch) if placement is not None else set()
        ge_cfgs = {}
        for st in plan.stages:
            if st.name in chosen:
                for b in st.blocks:
                    ge_cfgs[b.name] = placement.unit_config(b)
        if plan.stem == "imagenet":
            self.conv1 = Conv2d(arch.in_channels, plan.stem_out, 7, stride=2, pad=3, rng=rng)
            self.bn1 = BatchNorm2d(plan.stem_out)
        else:
            self.conv1 = Conv2d(arch.in_channels, plan.stem_out, 3, pad=1, rng=rng)
            if not plan.preact:
                self.bn1 = BatchNorm2d(plan.stem_out)
        for st in plan.stages:
            setattr(self, st.name, Stage(st, ge_cfgs, rng))
        if plan.preact:
            self.bn_final = BatchNorm2d(plan.final_channels)
        self.fc = Linear(plan.final_channels, arch.num_classes, rng=rng)
        self.assign_names()

    def stages(self):
        return [getattr(self, st.name) for st in self.net_plan.stages]

    def blocks(self):
        """Ordered mapping of block name to :class:`Block`."""
        return {b.plan.name: b for st in self.stages() for b in st.block}

    def block(self, name):
        key = resolve_block_name(name)
        blocks = self.blocks()
        if key not in blocks:
            raise ConfigurationError(f"no block named {name!r}; blocks are {list(blocks)[:3]}...")
        return blocks[key]

    def ge_units(self):
        return {n: b.ge for n, b in self.blocks().items() if b.ge is not None}

    def set_gate_logit(self, value):
        """Test hook: force every GE gate logit to ``value`` (None restores normal gating)."""
        for unit in self.ge_units().values():
            unit.gate_logit = value

    def check_input(self, x):
        if x.ndim != 4 or tuple(x.shape[1:]) != self.arch.input_shape:
            raise DimensionError(
                f"model expects input (N, {', '.join(map(str, self.arch.input_shape))}), got {tuple(x.shape)}"
            )

    def forward(self, x):
        if not isinstance(x, Tensor):
            x = Tensor(x)
        self.check_input(x)
        plan = self.net_plan
        out = self.conv1(x)
        if plan.stem == "imagenet":
            out = F.max_pool2d(F.relu(self.bn1(out)), 3, 2, 1)
        elif not plan.preact:
            out = F.relu(self.bn1(out))
        for st in self.stages():
            out = st(out)
        if plan.preact:
            out = F.relu(self.bn_final(out))
        out = F.flatten(F.global_avg_pool(out))
        return self.fc(out)

    def state_dict(self):
        state = {n: p.data for n, p in self.named_parameters()}
        state.update({n: b for n, b in self.named_buffers()})
        return state

    def load_state_dict(self, state, strict=True):
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        for name, value in state.items():
            if name in params:
                target = params[name]
                if target.shape != np.shape(value):
                    raise DimensionError(f"{name}: shape {np.shape(value)} != {target.shape}")
                target.data = np.array(value, dtype=target.dtype, copy=True)
            elif name in buffers:
                self.set_buffer(name, value)
            elif strict:
                raise KeyError(f"unexpected entry {name!r}")
        if strict:
            missing = set(params) | set(buffers)
            missing -= set(state)
            if missing:
                raise KeyError(f"missing entries: {sorted(missing)[:5]}")


def build_model(arch, place=None, seed=0):
    """Build ``arch`` with GE units per ``place`` (a :class:`GEPlacement`, string or None)."""
    if isinstance(place, str):
        place = GEPlacement.parse(place)
    return Model(arch, place, seed)


def count_ge_units(arch, placement):
    return len(ge_block_names(arch, placement))
