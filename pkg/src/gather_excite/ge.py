"""Gather and excite operators and their composition into a GE unit.

A gather operator reduces each channel over spatial neighbourhoods whose
size is set by an extent ratio ``e``; an excite operator turns the gathered
aggregates into a gate in (0, 1) and multiplies it into the input. The
named pairings are

============  ===================  ====================
variant       gather               excite
============  ===================  ====================
theta-minus   avg / max pooling    sigmoid gate
theta         depth-wise conv      sigmoid gate
theta-plus    depth-wise conv      1x1 channel subnet
se            global avg pooling   1x1 channel subnet
============  ===================  ====================
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import functional as F
from .exceptions import ConfigurationError, DimensionError
from .nn import BatchNorm2d, Conv2d, Module, ModuleList
from .tensor import Tensor


@dataclass(frozen=True)
class ExtentSpec:
    """Either a ratio ``e`` (a power of two, at least 2) or global extent (``ratio=None``)."""

    ratio: int | None = None

    def __post_init__(self):
        e = self.ratio
        if e is not None and (int(e) != e or e < 2 or e & (e - 1)):
            raise ConfigurationError(f"extent ratio must be a power of two >= 2, got {e}")

    @classmethod
    def Ratio(cls, e):
        return cls(int(e))

    @classmethod
    def Global(cls):
        return cls(None)

    @property
    def is_global(self):
        return self.ratio is None

    def output_size(self, h, w):
        if self.is_global:
            return 1, 1
        return math.ceil(h / self.ratio), math.ceil(w / self.ratio)

    @classmethod
    def parse(cls, text):
        t = str(text).strip().lower()
        if t in ("global", "g"):
            return cls.Global()
        if t.startswith("e") and t[1:].isdigit():
            return cls.Ratio(int(t[1:]))
        raise ConfigurationError(f"unknown extent {text!r} (expected 'global' or 'e<ratio>')")

    def __str__(self):
        return "global" if self.is_global else f"e{self.ratio}"


GLOBAL = ExtentSpec.Global()


class GatherKind(enum.Enum):
    AVG_POOL = "avg"
    MAX_POOL = "max"
    DEPTHWISE_CONV = "depthwise"


@dataclass(frozen=True)
class ExciteKind:
    """``direct`` gates with the aggregates; ``subnet`` first maps them through a
    1x1 conv bottleneck of width ``ceil(C / reduction)``."""

    kind: str = "direct"
    reduction: int = 16

    def __post_init__(self):
        if self.kind not in ("direct", "subnet"):
            raise ConfigurationError(f"unknown excite kind {self.kind!r}")
        if self.reduction < 1:
            raise ConfigurationError("reduction must be >= 1")

    @classmethod
    def Direct(cls):
        return cls("direct")

    @classmethod
    def ChannelSubnet(cls, reduction=16):
        return cls("subnet", int(reduction))

    def hidden_width(self, channels):
        return max(1, math.ceil(channels / self.reduction))


@dataclass(frozen=True)
class GEUnitConfig:
    extent: ExtentSpec
    gather: GatherKind
    excite: ExciteKind = field(default_factory=ExciteKind.Direct)
    channels: int = 0
    height: int = 0
    width: int = 0

    @classmethod
    def theta_minus(cls, extent=GLOBAL, pool="avg", **geometry):
        kind = GatherKind.MAX_POOL if pool == "max" else GatherKind.AVG_POOL
        return cls(extent, kind, ExciteKind.Direct(), **geometry)

    @classmethod
    def theta(cls, extent=GLOBAL, **geometry):
        return cls(extent, GatherKind.DEPTHWISE_CONV, ExciteKind.Direct(), **geometry)

    @classmethod
    def theta_plus(cls, extent=GLOBAL, reduction=16, **geometry):
        return cls(extent, GatherKind.DEPTHWISE_CONV, ExciteKind.ChannelSubnet(reduction), **geometry)

    @classmethod
    def se(cls, reduction=16, **geometry):
        return cls(GLOBAL, GatherKind.AVG_POOL, ExciteKind.ChannelSubnet(reduction), **geometry)

    @property
    def variant(self):
        pooled = self.gather in (GatherKind.AVG_POOL, GatherKind.MAX_POOL)
        if pooled and self.excite.kind == "direct":
            return "theta-minus"
        if not pooled and self.excite.kind == "direct":
            return "theta"
        if not pooled:
            return "theta-plus"
        if self.gather is GatherKind.AVG_POOL and self.extent.is_global:
            return "se"
        return "pool-subnet"

    @property
    def is_parameter_free(self):
        return self.gather is not GatherKind.DEPTHWISE_CONV and self.excite.kind == "direct"

    def with_geometry(self, channels, height, width):
        return replace(self, channels=int(channels), height=int(height), width=int(width))


# ---------------------------------------------------------------------------
# gather


def selection_window(u, e, grid=None):
    """Input cells selected for 1-based output index ``u`` at extent ratio ``e``.

    The window is centred at ``e*u`` with side ``2e - 1``; cells are 1-based
    ``(row, col)`` pairs, clipped to ``grid = (H, W)`` when given.
    """
    if e < 1:
        raise ConfigurationError(f"extent ratio must be >= 1, got {e}")
    half = (2 * e - 1) // 2
    cr, cc = e * u[0], e * u[1]
    cells = {(cr + dr, cc + dc) for dr in range(-half, half + 1) for dc in range(-half, half + 1)}
    if grid is not None:
        h, w = grid
        cells = {(r, c) for r, c in cells if 1 <= r <= h and 1 <= c <= w}
    return cells


def pooling_geometry(size, e):
    """Kernel, stride and (leading, trailing) padding of a ratio-``e`` pooling gather.

    Output ``v`` (0-based) covers input cells ``e*v .. e*v + 2e - 2``, i.e. the
    window centred on 1-based cell ``e*(v + 1)``. Only the trailing edge can
    run past the grid.
    """
    out = math.ceil(size / e)
    k = 2 * e - 1
    trail = e * out + e - 1 - size
    return k, e, (0, trail), out


def gather_pool(x, kind, extent):
    """Parameter-free gather: per-channel average or max over selection windows."""
    if isinstance(kind, str):
        kind = GatherKind(kind)
    if kind is GatherKind.DEPTHWISE_CONV:
        raise ConfigurationError("gather_pool handles pooling kinds only")
    F._check_rank4(x)
    if extent.is_global:
        return F.global_avg_pool(x) if kind is GatherKind.AVG_POOL else F.global_max_pool(x)
    h, w = x.shape[2:]
    e = extent.ratio
    # maps smaller than e still get one window per axis, covering the whole map
    k, stride, pad_h, _ = pooling_geometry(h, e)
    _, _, pad_w, _ = pooling_geometry(w, e)
    pool = F.avg_pool2d if kind is GatherKind.AVG_POOL else F.max_pool2d
    return pool(x, k, stride, (pad_h, pad_w))


class DepthwiseGather(Module):
    """Learned gather: chained 3x3 stride-2 depth-wise convs, or one global depth-wise conv.

    A ratio ``e`` uses ``log2(e)`` stages (conv then batchnorm, ReLU between
    stages). Global extent uses a single ``H x W`` depth-wise conv and
    batchnorm, so it is tied to the input geometry given here.
    """

    def __init__(self, channels, extent, height=None, width=None, rng=None):
        super().__init__()
        self.extent = extent
        self.channels = channels
        if extent.is_global:
            if not height or not width:
                raise ConfigurationError("global depth-wise gather needs the input height and width")
            self.height, self.width = height, width
            self.conv = Conv2d(channels, channels, 0, groups=channels, rng=rng, kernel=(height, width))
            self.bn = BatchNorm2d(channels)
        else:
            stages = int(math.log2(extent.ratio))
            self.stage = ModuleList(
                [_DepthwiseStage(channels, rng) for _ in range(stages)], one_based=True
            )

    def forward(self, x):
        if x.shape[1] != self.channels:
            raise DimensionError(f"channel axis (1): gather built for {self.channels}, got {x.shape[1]}")
        if self.extent.is_global:
            if x.shape[2:] != (self.height, self.width):
                raise DimensionError(
                    f"global depth-wise gather built for {self.height}x{self.width}, got {x.shape[2:]}"
                )
            return self.bn(self.conv(x))
        out = x
        for i, st in enumerate(self.stage):
            if i:
                out = F.relu(out)
            out = st(out)
        return out


class _DepthwiseStage(Module):
    def __init__(self, channels, rng):
        super().__init__()
        self.conv = Conv2d(channels, channels, 3, stride=2, pad=1, groups=channels, rng=rng)
        self.bn = BatchNorm2d(channels)

    def forward(self, x):
        return self.bn(self.conv(x))


def gather_depthwise(x, params, extent):
    """Apply a :class:`DepthwiseGather` after checking it matches ``extent``."""
    if not extent.is_global and extent.ratio & (extent.ratio - 1):
        raise ConfigurationError(f"depth-wise gather needs a power-of-two extent, got {extent.ratio}")
    if params.extent != extent:
        raise ConfigurationError(f"gather parameters built for {params.extent}, asked for {extent}")
    return params(x)


# ---------------------------------------------------------------------------
# excite


class ChannelSubnet(Module):
    """1x1 conv C -> ceil(C/r), ReLU, 1x1 conv back to C (both with bias)."""

    def __init__(self, channels, reduction=16, rng=None):
        super().__init__()
        hidden = ExciteKind.ChannelSubnet(reduction).hidden_width(channels)
        self.reduce = Conv2d(channels, hidden, 1, bias=True, rng=rng)
        self.expand = Conv2d(hidden, channels, 1, bias=True, rng=rng)

    def forward(self, x):
        return self.expand(F.relu(self.reduce(x)))


def _check_excite_inputs(x, xhat):
    F._check_rank4(x)
    F._check_rank4(xhat, "aggregate")
    if x.shape[1] != xhat.shape[1]:
        raise DimensionError(
            f"channel axis (1): input has {x.shape[1]} channels, aggregate has {xhat.shape[1]}"
        )
    if x.shape[0] != xhat.shape[0]:
        raise DimensionError(f"batch axis (0): {x.shape[0]} vs {xhat.shape[0]}")


def _gate(x, logits, logit_override=None):
    if logit_override is not None:
        logits = Tensor(np.full(logits.shape, logit_override, dtype=logits.dtype))
    h, w = x.shape[2:]
    return F.nearest_interpolate(F.sigmoid(logits), h, w)


def excite_direct(x, xhat, return_gate=False, logit_override=None):
    """``y = x * sigmoid(interp(xhat))``."""
    _check_excite_inputs(x, xhat)
    gate = _gate(x, xhat, logit_override)
    y = F.hadamard(x, gate)
    return (y, gate) if return_gate else y


def excite_subnet(x, xhat, subnet, return_gate=False, logit_override=None):
    """``y = x * sigmoid(interp(subnet(xhat)))``; the subnet runs at gathered resolution."""
    _check_excite_inputs(x, xhat)
    gate = _gate(x, subnet(xhat), logit_override)
    y = F.hadamard(x, gate)
    return (y, gate) if return_gate else y


# ---------------------------------------------------------------------------
# unit


class GEUnit(Module):
    """A gather-excite pair applied to one feature map.

    Test and analysis hooks:

    * ``gate_logit`` – when set, every gate logit is replaced by this value
      (``inf`` saturates the gate, making the unit an identity).
    * ``record_gate`` – keep the last full-resolution gate in ``last_gate``.
    * ``post_gate_hook`` – ``hook(y, gate) -> y`` applied to the output.
    """

    def __init__(self, cfg, rng=None):
        super().__init__()
        self.cfg = cfg
        if cfg.channels < 1:
            raise ConfigurationError("GE unit needs a positive channel count")
        self.gather = None
        self.excite = None
        if cfg.gather is GatherKind.DEPTHWISE_CONV:
            self.gather = DepthwiseGather(cfg.channels, cfg.extent, cfg.height, cfg.width, rng=rng)
        if cfg.excite.kind == "subnet":
            self.excite = ChannelSubnet(cfg.channels, cfg.excite.reduction, rng=rng)
        self.gate_logit = None
        self.record_gate = False
        self.last_gate = None
        self.post_gate_hook = None

    def forward(self, x):
        y, gate = ge_unit_forward(x, self.cfg, self, return_gate=True)
        if self.record_gate:
            self.last_gate = gate.data
        if self.post_gate_hook is not None:
            y = self.post_gate_hook(y, gate.data)
        return y


def ge_unit_forward(x, cfg, params=None, return_gate=False):
    """Gather then excite ``x`` according to ``cfg``. Output shape equals input shape.

    ``params`` is a :class:`GEUnit` (or anything with ``gather``/``excite``
    modules); it may be None for parameter-free configurations.
    """
    F._check_rank4(x)
    if cfg.channels and x.shape[1] != cfg.channels:
        raise DimensionError(f"channel axis (1): unit built for {cfg.channels}, got {x.shape[1]}")
    if cfg.gather is GatherKind.DEPTHWISE_CONV:
        if params is None or params.gather is None:
            raise ConfigurationError("depth-wise gather needs parameters")
        xhat = gather_depthwise(x, params.gather, cfg.extent)
    else:
        xhat = gather_pool(x, cfg.gather, cfg.extent)
    override = getattr(params, "gate_logit", None)
    if cfg.excite.kind == "subnet":
        if params is None or params.excite is None:
            raise ConfigurationError("channel-subnet excite needs parameters")
        y, gate = excite_subnet(x, xhat, params.excite, True, override)
    else:
        y, gate = excite_direct(x, xhat, True, override)
    return (y, gate) if return_gate else y
