import numpy as np
import pytest

from gather_excite.data import Dataset
from gather_excite.exceptions import (CheckpointMagicError, CheckpointNameError, CheckpointShapeError,
                                      CheckpointVersionError, DimensionError, FormatError, NumericalError)
from gather_excite.models import ArchSpec
from gather_excite.tensor import Tensor, no_grad
from gather_excite.training import (FixedStep, Plateau, TrainConfig, decode_checkpoint, encode_checkpoint,
                                    evaluate, load_checkpoint, read_checkpoint, read_metrics, save_checkpoint,
                                    seeded_model, topk_errors, train, true_label_rank)

PLACE = "theta-minus:global:all"


@pytest.fixture
def tiny_data(synth_train):
    return synth_train.subset(64)


def _cfg(**kw):
    base = dict(epochs=2, batch_size=16, lr=0.05, seed=3)
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# schedules


def test_fixed_step_values():
    s = FixedStep(0.1, 10, 30, 100)
    lrs = [s.lr_at(e) for e in range(100)]
    assert set(lrs[:30]) == {0.1} and set(lrs[30:60]) == {0.01}
    assert set(lrs[60:90]) == {0.001} and set(lrs[90:]) == {0.0001}


def test_plateau_drops_after_patience_and_at_most_three_times():
    s = Plateau(0.1, 10, max_drops=3, patience=5)
    lrs = []
    for epoch in range(60):
        lrs.append(s.lr_at(epoch))
        s.observe(epoch, 1.0)  # never improves after the first epoch
    assert lrs[0] == 0.1 and lrs[5] == 0.1 and lrs[6] == pytest.approx(0.01)
    assert min(lrs) == pytest.approx(1e-4) and s.drops == 3
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_plateau_small_improvement_counts_as_plateau():
    s = Plateau(patience=2)
    for epoch, loss in enumerate([1.0, 0.9995, 0.9991]):
        s.observe(epoch, loss)
    assert s.drops == 1


# ---------------------------------------------------------------------------
# evaluation


def test_topk_fixture():
    logits = np.array([
        [0.1, 0.9, 0.0, 0.0, 0.0, 0.0],  # label 1: top-1 hit
        [0.6, 0.5, 0.4, 0.3, 0.2, 0.1],  # label 4: rank 4 -> top-5 hit only
        [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],  # label 5: all tied, rank 5 under lower-index rule
        [0.9, 0.8, 0.7, 0.6, 0.5, 0.4],  # label 5: rank 5 -> top-5 miss
    ])
    labels = np.array([1, 4, 5, 5])
    assert true_label_rank(logits, labels).tolist() == [0, 4, 5, 5]
    assert topk_errors(logits, labels) == (0.75, 0.5)


def test_uniform_and_perfect_predictors():
    labels = np.repeat(np.arange(10), 3)
    assert topk_errors(np.zeros((30, 10)), labels)[0] == pytest.approx(0.9)
    assert topk_errors(np.eye(10)[labels], labels) == (0.0, 0.0)


def test_evaluate_returns_fractions(tiny_arch, synth_test):
    top1, top5 = evaluate(seeded_model(tiny_arch, PLACE), synth_test.subset(40))
    assert 0 <= top5 <= top1 <= 1


# ---------------------------------------------------------------------------
# training


def test_train_writes_metrics_and_checkpoints(tiny_arch, tiny_data, synth_test, tmp_path):
    model = seeded_model(tiny_arch, PLACE, 3)
    _, metrics = train(model, tiny_data, _cfg(), synth_test.subset(32), run_dir=tmp_path)
    rows = read_metrics(tmp_path / "metrics.csv")
    assert [r["epoch"] for r in rows] == [1, 2]
    assert (tmp_path / "metrics.csv").read_text().splitlines()[0] == "epoch,lr,train_loss,train_top1,val_top1,val_top5"
    assert (tmp_path / "checkpoints" / "epoch_002.gekt").exists()
    assert (tmp_path / "checkpoints" / "last.gekt").read_bytes() == \
        (tmp_path / "checkpoints" / "epoch_002.gekt").read_bytes()


def test_same_seed_same_metrics(tiny_arch, tiny_data, tmp_path):
    for run in ("a", "b"):
        train(seeded_model(tiny_arch, PLACE, 3), tiny_data, _cfg(), run_dir=tmp_path / run)
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_different_seed_differs(tiny_arch, tiny_data):
    _, a = train(seeded_model(tiny_arch, PLACE, 3), tiny_data, _cfg(epochs=1))
    _, b = train(seeded_model(tiny_arch, PLACE, 4), tiny_data, _cfg(epochs=1, seed=4))
    assert a[0]["train_loss"] != b[0]["train_loss"]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts_with_context(tiny_arch, tiny_data):
    with pytest.raises(NumericalError, match=r"epoch 1, batch \d+, lr 1e\+30"):
        train(seeded_model(tiny_arch, None, 0), tiny_data, _cfg(lr=1e30, epochs=1))


def test_geometry_mismatch(tiny_arch):
    ds = Dataset(np.zeros((4, 3, 32, 32), np.uint8), np.zeros(4, np.int64), classes=5)
    with pytest.raises(DimensionError):
        train(seeded_model(tiny_arch), ds, _cfg())


# ---------------------------------------------------------------------------
# checkpoints


@pytest.fixture
def trained_run(tiny_arch, tiny_data, tmp_path):
    model = seeded_model(tiny_arch, "theta-plus:e2:all", 1)
    train(model, tiny_data, _cfg(epochs=1), run_dir=tmp_path)
    return model, tmp_path / "checkpoints" / "last.gekt"


def test_save_load_same_logits(trained_run, rng):
    model, path = trained_run
    x = Tensor(rng.standard_normal((3, 3, 32, 32)).astype(np.float32))
    model.eval()
    with no_grad():
        before = model(x).data
        after = load_checkpoint(path)(x).data
    assert before.tobytes() == after.tobytes()


def test_load_save_byte_identical(trained_run, tmp_path):
    _, path = trained_run
    raw = path.read_bytes()
    assert encode_checkpoint(decode_checkpoint(raw)) == raw
    from gather_excite.optim import SGD

    model, record = load_checkpoint(path, return_record=True)
    opt = SGD(model.parameters())
    opt.buffers = dict(record.momentum)
    save_checkpoint(model, opt, tmp_path / "again.gekt", record.epoch, record.state)
    assert (tmp_path / "again.gekt").read_bytes() == raw


def test_checkpoint_header(trained_run):
    _, path = trained_run
    raw = path.read_bytes()
    assert raw[:4] == b"GEKT" and int.from_bytes(raw[4:8], "little") == 1
    rec = read_checkpoint(path)
    assert rec.config["placement"] == "theta-plus:e2:all" and rec.epoch == 1
    assert rec.momentum.keys() <= rec.tensors.keys()


def _tamper_shape(raw, name):
    key = name.encode()
    i = raw.index(len(key).to_bytes(2, "little") + key) + 2 + len(key)
    ndim = raw[i]
    dims = bytearray(raw[i + 1 : i + 1 + 4 * ndim])
    dims[0:4] = (int.from_bytes(dims[0:4], "little") + 1).to_bytes(4, "little")
    dims[4:8] = (int.from_bytes(dims[4:8], "little") - 1).to_bytes(4, "little")
    return raw[: i + 1] + bytes(dims) + raw[i + 1 + 4 * ndim :]


def test_tampered_shape_names_tensor(trained_run, tmp_path):
    _, path = trained_run
    name = "stage3.block1.conv_a.weight"
    bad = tmp_path / "bad.gekt"
    # swap one unit between the first two dims: payload size may stay valid or not
    bad.write_bytes(_tamper_shape(path.read_bytes(), name))
    with pytest.raises((CheckpointShapeError, FormatError)) as exc:
        load_checkpoint(bad)
    if isinstance(exc.value, CheckpointShapeError):
        assert name in str(exc.value)


def test_tampered_shape_same_size_is_shape_error(trained_run, tmp_path):
    _, path = trained_run
    rec = read_checkpoint(path)
    name = "fc.weight"
    rec.tensors[name] = rec.tensors[name].reshape(rec.tensors[name].shape[::-1])
    bad = tmp_path / "bad.gekt"
    bad.write_bytes(encode_checkpoint(rec))
    with pytest.raises(CheckpointShapeError, match="fc.weight"):
        load_checkpoint(bad)


def test_bad_magic_version_and_name(trained_run, tmp_path):
    _, path = trained_run
    raw = path.read_bytes()
    (tmp_path / "m.gekt").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(CheckpointMagicError):
        load_checkpoint(tmp_path / "m.gekt")
    (tmp_path / "v.gekt").write_bytes(raw[:4] + (2).to_bytes(4, "little") + raw[8:])
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(tmp_path / "v.gekt")
    rec = read_checkpoint(path)
    rec.tensors["stage9.mystery"] = np.zeros(2, np.float32)
    (tmp_path / "n.gekt").write_bytes(encode_checkpoint(rec))
    with pytest.raises(CheckpointNameError, match="stage9.mystery"):
        load_checkpoint(tmp_path / "n.gekt")
    (tmp_path / "t.gekt").write_bytes(raw[:-3])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "t.gekt")


def test_resume_matches_uninterrupted_run(tiny_arch, tiny_data, tmp_path):
    cfg = _cfg(epochs=4, checkpoint_every=1)
    full = seeded_model(tiny_arch, PLACE, 3)
    train(full, tiny_data, cfg, run_dir=tmp_path / "full")
    resumed = seeded_model(tiny_arch, PLACE, 3)
    train(resumed, tiny_data, cfg, run_dir=tmp_path / "part",
          resume=tmp_path / "full" / "checkpoints" / "epoch_002.gekt")
    assert (tmp_path / "full" / "metrics.csv").read_bytes() == (tmp_path / "part" / "metrics.csv").read_bytes()
    a, b = full.state_dict(), resumed.state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_resume_at_epoch_10_continues_schedule(tiny_arch, synth_train, tmp_path):
    data = synth_train.subset(16)
    cfg = _cfg(epochs=12, batch_size=16, lr=0.1, step_every=5, checkpoint_every=10)
    train(seeded_model(tiny_arch, PLACE, 3), data, TrainConfig(**{**cfg.__dict__, "epochs": 10}),
          run_dir=tmp_path / "a")
    _, metrics = train(seeded_model(tiny_arch, PLACE, 3), data, cfg, run_dir=tmp_path / "b",
                       resume=tmp_path / "a" / "checkpoints" / "epoch_010.gekt")
    lrs = [r["lr"] for r in metrics]
    assert lrs[:5] == [0.1] * 5 and lrs[9] == pytest.approx(0.01) and lrs[10] == pytest.approx(0.001)
    assert [r["epoch"] for r in metrics] == list(range(1, 13))
