"""Feature analyses: class selectivity of block outputs and gate-importance pruning."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .data import channel_stats, normalize
from .exceptions import ConfigurationError
from .tensor import Tensor, no_grad
from .training import topk_errors

HIST_BINS = 50
PRUNE_GRID = tuple(round(0.1 * i, 1) for i in range(11))
ORDERS = ("ascending", "descending")


# ---------------------------------------------------------------------------
# class selectivity


def selectivity_index(class_means):
    """Per-channel selectivity from a ``(classes, channels)`` array of mean activities.

    ``(mu_max - mu_rest) / (mu_max + mu_rest)`` where ``mu_rest`` averages the
    other class means; 0 for channels that never fire. Activities must be
    non-negative, which keeps the index in [0, 1].
    """
    mu = np.asarray(class_means, dtype=np.float64)
    if mu.ndim == 1:
        mu = mu[:, None]
    k = mu.shape[0]
    if k < 2:
        raise ConfigurationError("class selectivity needs at least two classes")
    top = mu.max(axis=0)
    rest = (mu.sum(axis=0) - top) / (k - 1)
    denom = top + rest
    out = np.zeros(mu.shape[1])
    nz = denom > 0
    out[nz] = (top[nz] - rest[nz]) / denom[nz]
    return np.clip(out, 0.0, 1.0)


def class_means(activity, labels, num_classes):
    """Mean of ``activity`` (samples x channels) per class; absent classes are skipped."""
    activity = np.asarray(activity, dtype=np.float64)
    labels = np.asarray(labels)
    rows = [activity[labels == k].mean(axis=0) for k in range(num_classes) if np.any(labels == k)]
    return np.stack(rows)


@dataclass
class SelectivityHistogram:
    layer: str
    indices: np.ndarray
    edges: np.ndarray = field(default_factory=lambda: np.linspace(0.0, 1.0, HIST_BINS + 1))

    @property
    def counts(self):
        return np.histogram(self.indices, bins=self.edges)[0]


def layer_activity(model, dataset, layer, batch_size=256, mean=None, std=None):
    """Spatial mean of the rectified block output named ``layer`` for every sample."""
    block = model.block(layer)
    if mean is None:
        mean, std = (dataset.mean, dataset.std) if dataset.mean is not None else channel_stats(dataset.images)
    captured = []
    block.output_hook = lambda out: captured.append(np.maximum(out.data, 0).mean(axis=(2, 3)))
    model.eval()
    try:
        with no_grad():
            for i in range(0, len(dataset), batch_size):
                model(Tensor(normalize(dataset.images[i : i + batch_size], mean, std)))
    finally:
        block.output_hook = None
    return np.concatenate(captured)


def class_selectivity(model, dataset, layer, batch_size=256):
    """Selectivity histogram of the block output ``layer`` (e.g. ``conv4-6-relu``) over ``dataset``."""
    act = layer_activity(model, dataset, layer, batch_size)
    idx = selectivity_index(class_means(act, dataset.labels, dataset.num_classes))
    return SelectivityHistogram(layer, idx)


# ---------------------------------------------------------------------------
# gate importance and pruning


def gate_importances(model, x, block):
    """Per-image, per-channel gate values (spatially averaged) of ``block``'s GE unit."""
    b = model.block(block)
    if b.ge is None:
        raise ConfigurationError(f"block {block!r} has no GE unit")
    unit = b.ge
    unit.record_gate = True
    model.eval()
    try:
        with no_grad():
            model(x if isinstance(x, Tensor) else Tensor(x))
        gate = unit.last_gate
    finally:
        unit.record_gate = False
        unit.last_gate = None
    return gate.mean(axis=(2, 3))


def _order_key(order):
    o = str(order).lower()
    if o in ("ascending", "asc"):
        return "ascending"
    if o in ("descending", "desc", "des"):
        return "descending"
    raise ConfigurationError(f"order must be ascending or descending, got {order!r}")


def pruned_count(ratio, channels):
    return int(math.floor(ratio * channels + 1e-9))


def prune_masks(importances, ratio, order):
    """0/1 keep-masks ``(N, C)``: per row, the first ``floor(ratio*C)`` channels in
    ``order`` of importance are zeroed. Sorting is stable, so equal importances
    keep channel order."""
    if not 0.0 <= ratio <= 1.0:
        raise ConfigurationError(f"prune ratio must lie in [0, 1], got {ratio}")
    imp = np.asarray(importances)
    n, c = imp.shape
    key = imp if _order_key(order) == "ascending" else -imp
    ranked = np.argsort(key, axis=1, kind="stable")
    m = pruned_count(ratio, c)
    keep = np.ones((n, c), dtype=bool)
    np.put_along_axis(keep, ranked[:, :m], False, axis=1)
    return keep


def _prune_hook(ratio, order):
    def hook(r, gate):
        n, c = r.shape[:2]
        if gate is not None:
            imp = gate.mean(axis=(2, 3))
        else:
            # no gate: rank channels by index, enough for the 0 and 1 reference points
            imp = np.broadcast_to(np.arange(c, dtype=np.float64), (n, c))
        keep = prune_masks(imp, ratio, order).astype(r.dtype)
        mask = np.broadcast_to(keep[:, :, None, None], r.shape)
        return F.hadamard(r, Tensor(np.ascontiguousarray(mask)))

    return hook


def prune_eval(model, dataset, block, ratio, order, batch_size=256):
    """Top-1 accuracy with the least (ascending) or most (descending) important
    gated channels of ``block`` zeroed per image."""
    if not 0.0 <= ratio <= 1.0:
        raise ConfigurationError(f"prune ratio must lie in [0, 1], got {ratio}")
    order = _order_key(order)
    b = model.block(block)
    if b.ge is not None:
        b.ge.record_gate = True
    if pruned_count(ratio, b.plan.cout) > 0:
        b.residual_hook = _prune_hook(ratio, order)
    mean, std = (dataset.mean, dataset.std) if dataset.mean is not None else channel_stats(dataset.images)
    model.eval()
    logits = []
    try:
        with no_grad():
            for i in range(0, len(dataset), batch_size):
                logits.append(model(Tensor(normalize(dataset.images[i : i + batch_size], mean, std))).data)
    finally:
        b.residual_hook = None
        if b.ge is not None:
            b.ge.record_gate = False
            b.ge.last_gate = None
    top1_err, = topk_errors(np.concatenate(logits), dataset.labels, ks=(1,))
    return 1.0 - top1_err


@dataclass
class PruneCurve:
    block: str
    order: str
    points: list  # (ratio, top1 accuracy)


def prune_curve(model, dataset, block, order, ratios=PRUNE_GRID, batch_size=256):
    order = _order_key(order)
    return PruneCurve(block, order, [(r, prune_eval(model, dataset, block, r, order, batch_size)) for r in ratios])


# ---------------------------------------------------------------------------
# export


def _open(path):
    try:
        return open(path, "w", newline="")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def export_csv(obj, path):
    """Write a histogram (``channel,index``) or one or more prune curves (``ratio,order,top1``)."""
    with _open(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        if isinstance(obj, SelectivityHistogram):
            w.writerow(["channel", "index"])
            for c, v in enumerate(obj.indices):
                w.writerow([c, repr(float(v))])
            return
        curves = [obj] if isinstance(obj, PruneCurve) else list(obj)
        w.writerow(["ratio", "order", "top1"])
        for curve in curves:
            for ratio, acc in curve.points:
                w.writerow([repr(float(ratio)), curve.order, repr(float(acc))])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
