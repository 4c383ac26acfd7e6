"""Training loop, learning-rate schedules, evaluation and checkpoints."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import functional as F
from .data import augment_batch, channel_stats, normalize
from .exceptions import (
    CheckpointMagicError,
    CheckpointNameError,
    CheckpointShapeError,
    CheckpointVersionError,
    ConfigurationError,
    DimensionError,
    FormatError,
    NumericalError,
)
from .models import ArchSpec, GEPlacement, build_model
from .optim import SGD
from .tensor import Tensor, backward, no_grad

logger = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "lr", "train_loss", "train_top1", "val_top1", "val_top5"]


# ---------------------------------------------------------------------------
# schedules


@dataclass
class FixedStep:
    """``lr = initial / factor ** (epoch // every)`` for ``total`` epochs."""

    initial: float = 0.1
    factor: float = 10.0
    every: int = 30
    total: int = 100

    def lr_at(self, epoch):
        return self.initial / self.factor ** (epoch // self.every)

    def observe(self, epoch, loss):
        pass

    def state(self):
        return {}

    def load_state(self, state):
        pass


@dataclass
class Plateau:
    """Divide the rate by ``factor`` when the epoch-mean training loss has not
    improved by more than ``threshold`` (relative) for ``patience`` epochs,
    at most ``max_drops`` times."""

    initial: float = 0.1
    factor: float = 10.0
    max_drops: int = 3
    patience: int = 5
    threshold: float = 1e-3
    drops: int = 0
    best: float = math.inf
    bad_epochs: int = 0

    def lr_at(self, epoch):
        return self.initial / self.factor ** self.drops

    def observe(self, epoch, loss):
        if loss < self.best * (1 - self.threshold):
            self.best = loss
            self.bad_epochs = 0
            return
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience and self.drops < self.max_drops:
            self.drops += 1
            self.bad_epochs = 0
            self.best = loss

    def state(self):
        return {"drops": self.drops, "best": None if math.isinf(self.best) else self.best,
                "bad_epochs": self.bad_epochs}

    def load_state(self, state):
        self.drops = state["drops"]
        self.best = math.inf if state["best"] is None else state["best"]
        self.bad_epochs = state["bad_epochs"]


def make_schedule(kind="fixed", lr=0.1, factor=10.0, every=30, total=100, patience=5, max_drops=3):
    if kind == "fixed":
        return FixedStep(lr, factor, every, total)
    if kind == "plateau":
        return Plateau(lr, factor, max_drops, patience)
    raise ConfigurationError(f"unknown schedule {kind!r} (fixed or plateau)")


@dataclass
class TrainConfig:
    epochs: int = 2
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    schedule: str = "fixed"
    step_every: int = 30
    drop_factor: float = 10.0
    patience: int = 5
    max_drops: int = 3
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigurationError("epochs >= 0, batch_size >= 1 and lr > 0 are required")

    def make_schedule(self):
        return make_schedule(self.schedule, self.lr, self.drop_factor, self.step_every,
                             self.epochs, self.patience, self.max_drops)


def rng_streams(seed):
    """Independent generators for (init, shuffle, augment)."""
    init, shuffle, aug = np.random.SeedSequence(seed).spawn(3)
    return (int(init.generate_state(1)[0]), np.random.default_rng(shuffle), np.random.default_rng(aug))


def seeded_model(arch, placement=None, seed=0):
    return build_model(arch, placement, seed=rng_streams(seed)[0])


# ---------------------------------------------------------------------------
# evaluation


def true_label_rank(logits, labels):
    """Position of the true label when classes are sorted by logit, ties to the lower index."""
    logits = np.asarray(logits)
    n = len(labels)
    true = logits[np.arange(n), labels][:, None]
    idx = np.arange(logits.shape[1])[None, :]
    above = (logits > true) | ((logits == true) & (idx < np.asarray(labels)[:, None]))
    return above.sum(axis=1)


def topk_errors(logits, labels, ks=(1, 5)):
    rank = true_label_rank(logits, labels)
    return tuple(float(np.mean(rank >= k)) for k in ks)


def _stats(model, dataset):
    if dataset.mean is not None:
        return dataset.mean, dataset.std
    return channel_stats(dataset.images)


def predict_logits(model, dataset, batch_size=256, mean=None, std=None):
    if mean is None:
        mean, std = _stats(model, dataset)
    model.eval()
    out = []
    with no_grad():
        for i in range(0, len(dataset), batch_size):
            x = normalize(dataset.images[i : i + batch_size], mean, std)
            out.append(model(Tensor(x)).data)
    return np.concatenate(out) if out else np.zeros((0, model.arch.num_classes), np.float32)


def evaluate(model, dataset, batch_size=256, mean=None, std=None):
    """Top-1 and top-5 error of ``model`` (in eval mode) on ``dataset``."""
    logits = predict_logits(model, dataset, batch_size, mean, std)
    return topk_errors(logits, dataset.labels)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainState:
    epoch: int = 0  # epochs completed
    metrics: list = field(default_factory=list)


def write_metrics(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in rows:
            vals = [float("nan") if r[k] is None else r[k] for k in METRICS_HEADER[2:]]
            w.writerow([r["epoch"], repr(float(r["lr"]))] + [f"{v:.6f}" for v in vals])


def read_metrics(path):
    with open(path, newline="") as fh:
        return [
            {k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()}
            for row in csv.DictReader(fh)
        ]


def train(model, dataset, cfg, eval_dataset=None, run_dir=None, resume=None, progress=None):
    """Train ``model`` in place with SGD + momentum; returns ``(model, metrics)``.

    ``metrics`` holds one dict per epoch with the columns of ``metrics.csv``
    (errors as fractions). With ``run_dir`` the CSV and checkpoints are
    written there. ``resume`` is a path to a checkpoint written by a
    previous call with the same config.
    """
    if tuple(dataset.images.shape[1:]) != model.arch.input_shape:
        raise DimensionError(f"dataset images {dataset.images.shape[1:]} do not match model input "
                             f"{model.arch.input_shape}")
    if dataset.num_classes != model.arch.num_classes:
        raise DimensionError(f"dataset has {dataset.num_classes} classes, model {model.arch.num_classes}")
    mean, std = _stats(model, dataset)
    _, shuffle_rng, aug_rng = rng_streams(cfg.seed)
    schedule = cfg.make_schedule()
    opt = SGD(model.parameters(), cfg.lr, cfg.momentum, cfg.weight_decay)
    state = TrainState()
    if resume is not None:
        record = read_checkpoint(resume)
        _restore(model, record)
        opt.buffers = {k: v.copy() for k, v in record.momentum.items()}
        state.epoch = record.epoch
        extra = record.state
        shuffle_rng.bit_generator.state = extra["rng"]["shuffle"]
        aug_rng.bit_generator.state = extra["rng"]["augment"]
        schedule.load_state(extra.get("schedule", {}))
        state.metrics = list(extra.get("metrics", []))

    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)

    n = len(dataset)
    for epoch in range(state.epoch, cfg.epochs):
        lr = schedule.lr_at(epoch)
        opt.lr = lr
        model.train()
        order = shuffle_rng.permutation(n)
        loss_sum, wrong, seen = 0.0, 0, 0
        for bi, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            x = Tensor(augment_batch(dataset.images[idx], aug_rng, mean, std))
            y = dataset.labels[idx]
            logits = model(x)
            loss = F.softmax_cross_entropy(logits, y)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericalError(f"non-finite loss {value} at epoch {epoch + 1}, batch {bi + 1}, lr {lr}")
            backward(loss)
            opt.step()
            loss_sum += value * len(idx)
            wrong += int(np.sum(true_label_rank(logits.data, y) >= 1))
            seen += len(idx)
            if progress is not None:
                progress(epoch + 1, bi + 1, value)
        train_loss = loss_sum / max(seen, 1)
        schedule.observe(epoch, train_loss)
        if eval_dataset is not None:
            v1, v5 = evaluate(model, eval_dataset, mean=mean, std=std)
        else:
            v1, v5 = float("nan"), float("nan")
        row = {"epoch": epoch + 1, "lr": lr, "train_loss": train_loss,
               "train_top1": wrong / max(seen, 1), "val_top1": v1, "val_top5": v5}
        state.metrics.append(row)
        state.epoch = epoch + 1
        logger.info("epoch %d lr %.4g loss %.4f train err %.4f val err %.4f",
                    epoch + 1, lr, train_loss, row["train_top1"], v1)
        if run_dir is not None:
            write_metrics(run_dir / "metrics.csv", state.metrics)
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0 or epoch + 1 == cfg.epochs:
                extra = {"rng": {"shuffle": shuffle_rng.bit_generator.state,
                                 "augment": aug_rng.bit_generator.state},
                         "schedule": schedule.state(), "metrics": state.metrics,
                         "train": asdict(cfg)}
                for name in (f"epoch_{epoch + 1:03d}.gekt", "last.gekt"):
                    save_checkpoint(model, opt, run_dir / "checkpoints" / name, epoch + 1, extra)
    return model, state.metrics


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"GEKT"
VERSION = 1


@dataclass
class CheckpointRecord:
    config: dict
    epoch: int
    state: dict
    tensors: dict  # name -> float32 array
    momentum: dict


def _dump_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else None
    return obj


def model_config(model):
    place = model.placement.describe() if model.placement is not None else None
    return {"arch": model.arch.to_dict(), "placement": place}


def _write_tensors(buf, tensors):
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode()
        arr = np.ascontiguousarray(arr, dtype="<f4")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())


def encode_checkpoint(record):
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    for blob in (_dump_json(_jsonable(record.config)),):
        buf.write(struct.pack("<I", len(blob)))
        buf.write(blob)
    buf.write(struct.pack("<I", record.epoch))
    blob = _dump_json(_jsonable(record.state))
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    _write_tensors(buf, record.tensors)
    _write_tensors(buf, record.momentum)
    return buf.getvalue()


class _Reader:
    def __init__(self, raw, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n):
        if self.pos + n > len(self.raw):
            raise FormatError("checkpoint truncated", offset=self.pos, path=self.path)
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        vals = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return vals if len(vals) > 1 else vals[0]

    def tensors(self):
        out = {}
        for _ in range(self.unpack("<I")):
            start = self.pos
            try:
                name = self.take(self.unpack("<H")).decode()
            except UnicodeDecodeError:
                raise FormatError("tensor name is not valid UTF-8", offset=start, path=self.path) from None
            ndim = self.unpack("<B")
            shape = tuple(struct.unpack(f"<{ndim}I", self.take(4 * ndim))) if ndim else ()
            count = int(np.prod(shape)) if shape else 1
            out[name] = np.frombuffer(self.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
        return out


def decode_checkpoint(raw, path=None):
    r = _Reader(raw, path)
    if r.take(4) != MAGIC:
        raise CheckpointMagicError(f"{path or 'checkpoint'}: bad magic, not a GEKT file")
    version = r.unpack("<I")
    if version != VERSION:
        raise CheckpointVersionError(f"{path or 'checkpoint'}: format version {version}, expected {VERSION}")
    config = json.loads(r.take(r.unpack("<I")))
    epoch = r.unpack("<I")
    state = json.loads(r.take(r.unpack("<I")))
    tensors = r.tensors()
    momentum = r.tensors()
    if r.pos != len(raw):
        raise FormatError("trailing bytes after checkpoint", offset=r.pos, path=path)
    return CheckpointRecord(config, epoch, state, tensors, momentum)


def read_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes(), str(path))


def save_checkpoint(model, opt, path, epoch=0, state=None):
    """Write model parameters, batchnorm statistics and momentum buffers to ``path``."""
    tensors = dict(model.state_dict())
    momentum = {}
    if opt is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for key, v in opt.buffers.items():
            name = key if isinstance(key, str) else names.get(key)
            if name is not None:
                momentum[name] = v
    record = CheckpointRecord(model_config(model), int(epoch), state or {}, tensors, momentum)
    Path(path).write_bytes(encode_checkpoint(record))
    return record


def model_from_config(config):
    arch = ArchSpec(**config["arch"])
    place = config.get("placement")
    return build_model(arch, GEPlacement.parse(place) if place else None)


def _restore(model, record):
    expected = {n: p.shape for n, p in model.named_parameters()}
    expected.update({n: b.shape for n, b in model.named_buffers()})
    for name, arr in record.tensors.items():
        if name not in expected:
            raise CheckpointNameError(f"checkpoint tensor {name!r} is not in the model registry")
        if tuple(arr.shape) != tuple(expected[name]):
            raise CheckpointShapeError(
                f"tensor {name!r}: checkpoint shape {arr.shape}, model expects {expected[name]}"
            )
    missing = sorted(set(expected) - set(record.tensors))
    if missing:
        raise CheckpointNameError(f"checkpoint lacks tensors {missing[:5]}")
    for name, arr in record.momentum.items():
        if name not in expected or tuple(arr.shape) != tuple(expected[name]):
            raise CheckpointShapeError(f"momentum buffer {name!r} does not match the model registry")
    model.load_state_dict(record.tensors)


def load_checkpoint(path, return_record=False):
    """Rebuild the model described by a checkpoint and load its tensors."""
    record = read_checkpoint(path)
    model = model_from_config(record.config)
    _restore(model, record)
    model.eval()
    return (model, record) if return_record else model
