"""Analytic parameter and multiply-accumulate (MAC) accounting.

Nothing here builds tensors: the architecture plan is walked and every
convolution, batchnorm and fully connected layer is costed by formula.
Counting convention: a conv costs ``k_h*k_w*(C_in/g)*C_out*H_out*W_out``
MACs, a linear layer ``in*out``; batchnorm, pooling, activations and the
elementwise gate cost nothing. GFLOPs are reported as MACs / 1e9, the
convention under which ResNet-50 comes to 3.86.

Line names match the parameter registry of the built model with the
``.weight``/``.bias`` suffix removed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

from .ge import GatherKind
from .models import ArchSpec, GEPlacement


@dataclass(frozen=True)
class CostLine:
    name: str
    params: int
    macs: int


@dataclass
class CostReport:
    lines: list = field(default_factory=list)

    @property
    def params(self):
        return sum(l.params for l in self.lines)

    @property
    def macs(self):
        return sum(l.macs for l in self.lines)

    @property
    def gflops(self):
        return self.macs / 1e9

    @property
    def params_m(self):
        return self.params / 1e6

    def by_name(self):
        return {l.name: l for l in self.lines}

    def to_dict(self):
        return {
            "layers": [{"name": l.name, "params": l.params, "macs": l.macs} for l in self.lines],
            "totals": {"params": self.params, "macs": self.macs,
                       "gflops": self.gflops, "params_m": self.params_m},
        }

    def to_json(self, indent=2):
        return json.dumps(self.to_dict(), indent=indent)

    def to_text(self, layers=True):
        rows = []
        if layers:
            width = max([len(l.name) for l in self.lines] + [5])
            rows.append(f"{'layer':<{width}}  {'params':>12}  {'MACs':>15}")
            for l in self.lines:
                rows.append(f"{l.name:<{width}}  {l.params:>12,d}  {l.macs:>15,d}")
            rows.append("")
        rows.append(f"params: {self.params:,d} ({self.params_m:.2f}M)")
        rows.append(f"MACs:   {self.macs:,d} ({self.gflops:.3f} GFLOPs)")
        return "\n".join(rows)


class _Walker:
    def __init__(self):
        self.lines = []

    def conv(self, name, cin, cout, kh, kw, out_hw, groups=1, bias=False):
        per_out = kh * kw * (cin // groups)
        params = per_out * cout + (cout if bias else 0)
        self.lines.append(CostLine(name, params, per_out * cout * out_hw[0] * out_hw[1]))

    def bn(self, name, c):
        self.lines.append(CostLine(name, 2 * c, 0))

    def linear(self, name, fin, fout):
        self.lines.append(CostLine(name, fin * fout + fout, fin * fout))


def _conv_out(hw, k, s, p):
    return ((hw[0] + 2 * p - k) // s + 1, (hw[1] + 2 * p - k) // s + 1)


def _ge_lines(w, prefix, cfg):
    c, hw = cfg.channels, (cfg.height, cfg.width)
    gathered = cfg.extent.output_size(*hw)
    if cfg.gather is GatherKind.DEPTHWISE_CONV:
        if cfg.extent.is_global:
            w.conv(f"{prefix}.gather.conv", c, c, hw[0], hw[1], (1, 1), groups=c)
            w.bn(f"{prefix}.gather.bn", c)
        else:
            cur = hw
            for i in range(int(math.log2(cfg.extent.ratio))):
                cur = _conv_out(cur, 3, 2, 1)
                w.conv(f"{prefix}.gather.stage{i + 1}.conv", c, c, 3, 3, cur, groups=c)
                w.bn(f"{prefix}.gather.stage{i + 1}.bn", c)
            gathered = cur
    if cfg.excite.kind == "subnet":
        hidden = cfg.excite.hidden_width(c)
        w.conv(f"{prefix}.excite.reduce", c, hidden, 1, 1, gathered, bias=True)
        w.conv(f"{prefix}.excite.expand", hidden, c, 1, 1, gathered, bias=True)


def count(arch, place=None, input_size=None):
    """Cost report for ``arch`` (optionally at another square ``input_size``) with ``place``."""
    if isinstance(place, str):
        place = GEPlacement.parse(place)
    if input_size is not None:
        arch = ArchSpec(**{**arch.to_dict(), "height": input_size, "width": input_size})
    plan = arch.plan()
    chosen = place.selected(arch) if place is not None else set()
    w = _Walker()
    hw = (arch.height, arch.width)
    if plan.stem == "imagenet":
        w.conv("conv1", arch.in_channels, plan.stem_out, 7, 7, _conv_out(hw, 7, 2, 3))
        w.bn("bn1", plan.stem_out)
    else:
        w.conv("conv1", arch.in_channels, plan.stem_out, 3, 3, hw)
        if not plan.preact:
            w.bn("bn1", plan.stem_out)
    for st in plan.stages:
        for b in st.blocks:
            p = b.name
            if b.kind == "bottleneck":
                w.conv(f"{p}.conv_a", b.cin, b.mid, 1, 1, b.out_hw)
                w.bn(f"{p}.bn_a", b.mid)
                w.conv(f"{p}.conv_b", b.mid, b.mid, 3, 3, b.out_hw)
                w.bn(f"{p}.bn_b", b.mid)
                w.conv(f"{p}.conv_c", b.mid, b.cout, 1, 1, b.out_hw)
                w.bn(f"{p}.bn_c", b.cout)
                if b.projection:
                    w.conv(f"{p}.downsample", b.cin, b.cout, 1, 1, b.out_hw)
                    w.bn(f"{p}.downsample_bn", b.cout)
            elif b.kind == "preact-basic":
                w.bn(f"{p}.bn_a", b.cin)
                w.conv(f"{p}.conv_a", b.cin, b.cout, 3, 3, b.out_hw)
                w.bn(f"{p}.bn_b", b.cout)
                w.conv(f"{p}.conv_b", b.cout, b.cout, 3, 3, b.out_hw)
                if b.projection:
                    w.conv(f"{p}.downsample", b.cin, b.cout, 1, 1, b.out_hw)
            else:
                w.bn(f"{p}.bn_a", b.cin)
                w.conv(f"{p}.conv_a", b.cin, b.mid, 1, 1, b.in_hw)
                w.bn(f"{p}.bn_b", b.mid)
                w.conv(f"{p}.conv_b", b.mid, b.mid, 3, 3, b.out_hw)
                w.bn(f"{p}.bn_c", b.mid)
                w.conv(f"{p}.conv_c", b.mid, b.cout, 1, 1, b.out_hw)
                if b.projection:
                    w.conv(f"{p}.downsample", b.cin, b.cout, 1, 1, b.out_hw)
            if st.name in chosen:
                _ge_lines(w, f"{p}.ge", place.unit_config(b))
    if plan.preact:
        w.bn("bn_final", plan.final_channels)
    w.linear("fc", plan.final_channels, arch.num_classes)
    return CostReport(w.lines)


def registry_census(model):
    """Parameter counts of a built model grouped by layer (the independent check path)."""
    census = {}
    for name, p in model.named_parameters():
        layer = name.rsplit(".", 1)[0]
        census[layer] = census.get(layer, 0) + int(p.size)
    return census
