"""Central finite-difference checks of the analytic gradients.

The reference derivative is the fourth-order central stencil
``(8(f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`` with ``h = 1e-4``.
The analytic gradient comes from the production 32-bit path (or the 64-bit
path in ``check_mode="float64"``); the numerical reference always re-runs
the kernels in 64-bit. Per coordinate the error is
``|analytic - numeric| / max(|analytic|, |numeric|, ERR_FLOOR)``.

A check passes when, in 32-bit mode, at least 95% of the sampled
coordinates are below 1e-3 and none exceeds 1e-2; in 64-bit mode every
coordinate must be below 1e-6.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .ge import GLOBAL, ExtentSpec, GEUnit, GEUnitConfig
from .tensor import Tensor, backward

ERR_FLOOR = 1e-3
EPS = 1e-4
THRESHOLDS = {"float32": (1e-3, 0.95, 1e-2), "float64": (1e-6, 1.0, 1e-6)}


@dataclass
class GradcheckResult:
    name: str
    mode: str
    checked: int = 0
    within: int = 0
    max_err: float = 0.0
    failures: list = field(default_factory=list)  # (tensor, index, analytic, numeric, err)

    @property
    def fraction_ok(self):
        return self.within / self.checked if self.checked else 1.0

    @property
    def passed(self):
        tol, frac, hard = THRESHOLDS[self.mode]
        return self.fraction_ok >= frac and self.max_err < hard

    def summary(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name} [{self.mode}] coords={self.checked} "
                f"ok={self.fraction_ok:.3f} max_err={self.max_err:.2e}")


def relative_error(a, n):
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), ERR_FLOOR)


def _sample(size, rng, max_coords):
    if size <= max_coords:
        return np.arange(size)
    return np.sort(rng.choice(size, max_coords, replace=False))


def check(name, build, mode="float32", max_coords=64, seed=0, eps=EPS):
    """Check one case.

    ``build(dtype)`` returns ``(loss_fn, tensors)``: ``loss_fn()`` computes a
    scalar loss from the current contents of ``tensors`` (a dict of named
    Tensors whose gradients are checked). It is called once per dtype, so it
    must recreate identical values each time. Whole networks need a smaller
    ``eps`` (with 64-bit mode) so the probes do not straddle ReLU kinks.
    """
    rng = np.random.default_rng(seed)
    tol, _, _ = THRESHOLDS[mode]
    loss_fn, tensors = build(np.float32 if mode == "float32" else np.float64)
    for t in tensors.values():
        t.grad = None
    backward(loss_fn())
    analytic = {k: (t.grad if t.grad is not None else np.zeros(t.shape)).astype(np.float64)
                for k, t in tensors.items()}

    ref_fn, ref_tensors = build(np.float64)
    result = GradcheckResult(name, mode)
    for key, t in ref_tensors.items():
        flat = t.data.reshape(-1)
        for idx in _sample(flat.size, rng, max_coords):
            orig = flat[idx]
            f = {}
            for step in (-2, -1, 1, 2):
                flat[idx] = orig + step * eps
                f[step] = ref_fn().item()
            flat[idx] = orig
            num = (8 * (f[1] - f[-1]) - (f[2] - f[-2])) / (12 * eps)
            ana = analytic[key].reshape(-1)[idx]
            err = float(relative_error(ana, num))
            result.checked += 1
            result.max_err = max(result.max_err, err)
            if err < tol:
                result.within += 1
            else:
                result.failures.append((key, int(idx), float(ana), float(num), err))
    return result


# ---------------------------------------------------------------------------
# cases


def _rand(seed, shape, dtype, scale=1.0):
    return (np.random.default_rng(seed).standard_normal(shape) * scale).astype(dtype)


def _projected(out, seed):
    """``sum(out * R)`` with a fixed random ``R`` so every output coordinate matters."""
    r = Tensor(_rand(seed, out.shape, out.dtype))
    return F.sum(F.hadamard(out, r))


def _op_case(fn, shapes, seed=0, positive=()):
    def build(dtype):
        ts = {}
        for i, (key, shape) in enumerate(shapes.items()):
            data = _rand(seed + i, shape, dtype)
            if key in positive:
                data = np.abs(data) + 0.5
            ts[key] = Tensor(data, requires_grad=True)

        def loss():
            return _projected(fn(ts), seed + 100)

        return loss, ts

    return build


def _bn_case(training):
    def build(dtype):
        ts = {
            "x": Tensor(_rand(1, (3, 4, 4, 5), dtype), requires_grad=True),
            "gamma": Tensor(_rand(2, (4,), dtype) + 1.0, requires_grad=True),
            "beta": Tensor(_rand(3, (4,), dtype), requires_grad=True),
        }
        rm = np.abs(_rand(4, (4,), dtype)) * 0.1
        rv = np.abs(_rand(5, (4,), dtype)) + 0.5

        def loss():
            out = F.batchnorm2d(ts["x"], ts["gamma"], ts["beta"], rm.copy(), rv.copy(), training)
            return _projected(out, 100)

        return loss, ts

    return build


def _ce_case(dtype):
    ts = {"logits": Tensor(_rand(7, (4, 6), dtype), requires_grad=True)}
    labels = np.array([0, 5, 2, 2])
    return (lambda: F.softmax_cross_entropy(ts["logits"], labels)), ts


def _module_case(make_module, x_shape, training=True, seed=0):
    """Gradients of input and every parameter of a module."""
    template = make_module()

    def build(dtype):
        module = copy.deepcopy(template).astype(dtype)
        module.train(training)
        ts = {"x": Tensor(_rand(seed, x_shape, dtype), requires_grad=True)}
        ts.update(dict(module.named_parameters()))

        def loss():
            return _projected(module(ts["x"]), seed + 100)

        return loss, ts

    return build


def op_cases():
    """Named builders for every differentiable kernel."""
    return {
        "conv2d": _op_case(lambda t: F.conv2d(t["x"], t["w"], t["b"], 1, 1),
                           {"x": (2, 3, 5, 5), "w": (4, 3, 3, 3), "b": (4,)}),
        "conv2d_strided": _op_case(lambda t: F.conv2d(t["x"], t["w"], None, 2, 1),
                                   {"x": (2, 4, 5, 5), "w": (2, 4, 3, 3)}),
        "conv2d_grouped": _op_case(lambda t: F.conv2d(t["x"], t["w"], None, 1, 0, groups=2),
                                   {"x": (1, 4, 5, 5), "w": (4, 2, 3, 3)}),
        "conv2d_depthwise": _op_case(lambda t: F.conv2d(t["x"], t["w"], None, 2, 1, groups=4),
                                     {"x": (2, 4, 5, 5), "w": (4, 1, 3, 3)}),
        "conv2d_1x1": _op_case(lambda t: F.conv2d(t["x"], t["w"], t["b"]),
                               {"x": (2, 4, 3, 3), "w": (3, 4, 1, 1), "b": (3,)}),
        "avg_pool2d": _op_case(lambda t: F.avg_pool2d(t["x"], 3, 2, ((0, 2), (0, 2))), {"x": (2, 3, 5, 5)}),
        "max_pool2d": _op_case(lambda t: F.max_pool2d(t["x"], 3, 2, 1), {"x": (2, 3, 5, 5)}),
        "nearest_interpolate": _op_case(lambda t: F.nearest_interpolate(t["x"], 5, 5), {"x": (2, 3, 2, 3)}),
        "global_avg_pool": _op_case(lambda t: F.global_avg_pool(t["x"]), {"x": (2, 3, 4, 5)}),
        "global_max_pool": _op_case(lambda t: F.global_max_pool(t["x"]), {"x": (2, 3, 4, 5)}),
        "sigmoid": _op_case(lambda t: F.sigmoid(t["x"]), {"x": (2, 3, 4, 4)}),
        "relu": _op_case(lambda t: F.relu(t["x"]), {"x": (2, 3, 4, 4)}),
        "hadamard": _op_case(lambda t: F.hadamard(t["a"], t["b"]), {"a": (2, 3, 4, 4), "b": (2, 3, 4, 4)}),
        "add": _op_case(lambda t: F.add(t["a"], t["b"]), {"a": (2, 3, 4, 4), "b": (2, 3, 4, 4)}),
        "linear": _op_case(lambda t: F.linear(t["x"], t["w"], t["b"]), {"x": (3, 5), "w": (4, 5), "b": (4,)}),
        "flatten": _op_case(lambda t: F.flatten(t["x"]), {"x": (2, 3, 2, 2)}),
        "batchnorm2d_train": _bn_case(True),
        "batchnorm2d_eval": _bn_case(False),
        "softmax_cross_entropy": _ce_case,
        "gated_sum": _op_case(
            lambda t: F.hadamard(t["x"], F.nearest_interpolate(F.sigmoid(t["xhat"]), 4, 4)),
            {"x": (2, 3, 4, 4), "xhat": (2, 3, 1, 1)}),
    }


def ge_cases():
    """Every named GE variant at extent 2 and global extent."""
    cases = {}
    shape = (3, 4, 5, 5)
    geometry = dict(channels=4, height=5, width=5)
    for ext in (ExtentSpec.Ratio(2), GLOBAL):
        configs = {
            "theta-minus": GEUnitConfig.theta_minus(ext, **geometry),
            "theta-minus-max": GEUnitConfig.theta_minus(ext, pool="max", **geometry),
            "theta": GEUnitConfig.theta(ext, **geometry),
            "theta-plus": GEUnitConfig.theta_plus(ext, reduction=2, **geometry),
        }
        if ext.is_global:
            configs["se"] = GEUnitConfig.se(reduction=2, **geometry)
        for label, cfg in configs.items():
            make = (lambda c: (lambda: GEUnit(c, rng=np.random.default_rng(3)).assign_names()))(cfg)
            cases[f"ge:{label}:{ext}"] = _module_case(make, shape, training=True, seed=11)
    return cases


def model_case(arch, placement=None, batch=2):
    from .models import build_model

    def make():
        return build_model(arch, placement, seed=5)

    return _module_case(make, (batch,) + arch.input_shape, training=True, seed=21)


def run(names="all", mode="float32", max_coords=64, eps=EPS):
    cases = {**op_cases(), **ge_cases()}
    if names != "all":
        wanted = [names] if isinstance(names, str) else list(names)
        unknown = [n for n in wanted if n not in cases]
        if unknown:
            raise KeyError(f"unknown gradcheck case(s) {unknown}; known: {sorted(cases)}")
        cases = {n: cases[n] for n in wanted}
    return [check(name, build, mode, max_coords, eps=eps) for name, build in cases.items()]
