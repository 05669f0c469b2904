import json
import math
import struct
import zlib

import numpy as np
import pytest

from cetnet import cli
from cetnet.checkpoint import decode, encode, load_checkpoint, read_config, save_checkpoint
from cetnet.errors import ConfigurationError, DimensionError, FormatError, NumericError, UsageError
from cetnet.model import build_model, tiny
from cetnet.tensor import Tensor, backward, no_grad
from cetnet.train import (AdamW, TrainConfig, adamw_step, cosine_warmup_lr, cross_entropy_smoothed, evaluate,
                          preprocess, read_dataset, synthetic_dataset, train, write_dataset)

RNG = np.random.default_rng


# -- schedule -----------------------------------------------------------------------

def test_lr_schedule_examples():
    cfg = TrainConfig(steps=100, warmup_steps=10, lr=1e-3, min_lr=1e-5)
    assert cosine_warmup_lr(0, cfg) == 0.0
    assert cosine_warmup_lr(5, cfg) == pytest.approx(5e-4, rel=1e-12)
    assert cosine_warmup_lr(10, cfg) == 1e-3
    assert cosine_warmup_lr(100, cfg) == 1e-5
    assert cosine_warmup_lr(55, cfg) == pytest.approx((1e-3 + 1e-5) / 2, rel=1e-12)
    with pytest.raises(UsageError):
        cosine_warmup_lr(101, cfg)


def test_lr_schedule_continuous_and_monotone_after_warmup():
    cfg = TrainConfig(steps=200, warmup_steps=20, lr=2e-3, min_lr=0.0)
    lrs = [cosine_warmup_lr(s, cfg) for s in range(201)]
    assert max(abs(a - b) for a, b in zip(lrs, lrs[1:])) < 2e-3 / 19
    assert all(a >= b for a, b in zip(lrs[20:], lrs[21:]))


@pytest.mark.parametrize("bad", [dict(warmup_steps=300), dict(lr=0.0), dict(min_lr=1.0),
                                 dict(weight_decay=-1.0), dict(label_smoothing=1.0), dict(steps=0)])
def test_train_config_validation(bad):
    with pytest.raises(ConfigurationError):
        TrainConfig(**bad)


def test_train_config_rejects_unknown_and_resolves_paths(tmp_path):
    (tmp_path / "t.json").write_text(json.dumps({"steps": 5, "warmup_steps": 1, "data": "d.bin"}))
    cfg = TrainConfig.load(tmp_path / "t.json")
    assert cfg.data == str(tmp_path / "d.bin")
    with pytest.raises(ConfigurationError, match="momentum"):
        TrainConfig.from_dict({"momentum": 0.9})


# -- optimiser -------------------------------------------------------------------------

def test_adamw_zero_gradient_only_decays():
    p = np.full((3, 2), 2.0)
    adamw_step([p], [np.zeros_like(p)], {}, lr=0.1, wd=0.05)
    np.testing.assert_allclose(p, 2.0 * (1 - 0.1 * 0.05), rtol=0, atol=1e-15)


def test_adamw_first_step_closed_form():
    g = np.array([0.5, -2.0, 1e-3])
    p = np.zeros(3)
    adamw_step([p], [g], {}, lr=0.01, eps=1e-8)
    np.testing.assert_allclose(p, -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12)


def test_adamw_constant_gradient_moves_like_sign():
    g = np.array([3.0, -0.2])
    p = np.zeros(2)
    state = {}
    for _ in range(50):
        before = p.copy()
        adamw_step([p], [g], state, lr=1e-2)
    np.testing.assert_allclose(p - before, -1e-2 * np.sign(g), rtol=1e-6)


def test_adamw_names_nonfinite_parameter():
    with pytest.raises(NumericError, match="blocks.3.weight"):
        adamw_step([np.zeros(2)], [np.array([1.0, np.nan])], {}, 0.1, names=["blocks.3.weight"])


def test_adamw_decay_mask_skips_norms_and_tables():
    m = build_model(tiny(), seed=0)
    opt = AdamW(m.named_parameters(), 0.05)
    decayed = {n for (n, _), d in zip(opt.named, opt.mask) if d}
    assert all(not n.endswith("bias") and "relative_position_bias_table" not in n for n in decayed)
    assert any(n.endswith("weight") for n in decayed)


# -- loss ---------------------------------------------------------------------------------

def test_cross_entropy_examples():
    confident = Tensor(np.array([[100.0, 0.0, 0.0]]), dtype=np.float64)
    assert cross_entropy_smoothed(confident, [0]).item() < 1e-12
    uniform = Tensor(np.zeros((4, 7)), dtype=np.float64)
    assert cross_entropy_smoothed(uniform, [0, 1, 2, 6]).item() == pytest.approx(math.log(7), rel=1e-12)


def test_cross_entropy_oracle_with_smoothing():
    z = RNG(0).standard_normal((5, 4))
    y = np.array([0, 3, 1, 1, 2])
    eps = 0.1
    logp = z - z.max(1, keepdims=True)
    logp = logp - np.log(np.exp(logp).sum(1, keepdims=True))
    q = np.full((5, 4), eps / 4)
    q[np.arange(5), y] += 1 - eps
    ref = -(q * logp).sum() / 5
    assert abs(cross_entropy_smoothed(Tensor(z, dtype=np.float64), y, eps).item() - ref) <= 1e-6


@pytest.mark.parametrize("labels", [[0, 4], [0], [-1, 0], [0.0, 1.0]])
def test_cross_entropy_rejects_bad_labels(labels):
    with pytest.raises(UsageError):
        cross_entropy_smoothed(Tensor(np.zeros((2, 4))), np.array(labels))


def test_single_small_step_lowers_loss():
    m = build_model(tiny(), seed=0)
    ds = synthetic_dataset(16, 10, 32, seed=0)
    x, y = Tensor(preprocess(ds.images)), ds.labels.astype(np.int64)
    opt = AdamW(m.named_parameters(), 0.0)
    m.eval()  # fixed normalisation statistics so both losses see the same function
    loss0 = cross_entropy_smoothed(m(x), y)
    backward(loss0)
    opt.step(1e-5)
    m.zero_grad()
    with no_grad():
        loss1 = cross_entropy_smoothed(m(x), y)
    assert loss1.item() < loss0.item()


# -- data ---------------------------------------------------------------------------------

def test_dataset_round_trip(tmp_path):
    ds = synthetic_dataset(12, 3, 8, seed=2)
    write_dataset(tmp_path / "d.bin", ds.images, ds.labels)
    raw = (tmp_path / "d.bin").read_bytes()
    assert len(raw) == 4 + 12 * (1 + 3 * 8 * 8) and struct.unpack("<I", raw[:4])[0] == 12
    back = read_dataset(tmp_path / "d.bin")
    assert back.size == 8
    assert np.array_equal(back.images, ds.images) and np.array_equal(back.labels, ds.labels)


def test_dataset_malformed(tmp_path):
    ds = synthetic_dataset(4, 2, 8, seed=0)
    write_dataset(tmp_path / "d.bin", ds.images, ds.labels)
    raw = (tmp_path / "d.bin").read_bytes()
    (tmp_path / "cut.bin").write_bytes(raw[:-5])
    with pytest.raises(FormatError):
        read_dataset(tmp_path / "cut.bin")
    (tmp_path / "tiny.bin").write_bytes(b"\x01\x00")
    with pytest.raises(FormatError):
        read_dataset(tmp_path / "tiny.bin")
    with pytest.raises(OSError):
        read_dataset(tmp_path / "absent.bin")


def test_preprocess_normalises_and_flips():
    img = np.zeros((1, 3, 2, 3), dtype=np.uint8)
    img[0, :, :, 0] = 255
    x = preprocess(img)
    np.testing.assert_allclose(x[0, 0, 0, 0], (1 - 0.485) / 0.229, rtol=1e-6)
    flipped = preprocess(img, np.array([True]))
    assert np.array_equal(flipped[0, :, :, ::-1], x[0])


def test_evaluate_self_consistency():
    m = build_model(tiny(), seed=3)
    ds = synthetic_dataset(20, 10, 32, seed=1)
    m.eval()
    with no_grad():
        ds.labels = m(Tensor(preprocess(ds.images))).data.argmax(1).astype(np.uint8)
    assert evaluate(m, ds, batch_size=7) == 1.0


# -- checkpoint ----------------------------------------------------------------------------

def test_checkpoint_round_trip_byte_identical(tmp_path):
    m = build_model(tiny(), seed=4)
    m(Tensor(RNG(0).standard_normal((2, 3, 32, 32)).astype(np.float32)))  # move BN buffers off defaults
    save_checkpoint(m, tmp_path / "a.cetn")
    back = load_checkpoint(tmp_path / "a.cetn")
    save_checkpoint(back, tmp_path / "b.cetn")
    assert (tmp_path / "a.cetn").read_bytes() == (tmp_path / "b.cetn").read_bytes()
    assert read_config(tmp_path / "a.cetn") == tiny()
    x = Tensor(RNG(1).standard_normal((2, 3, 32, 32)).astype(np.float32))
    assert np.array_equal(m.eval()(x).data, back.eval()(x).data)


def test_checkpoint_layout():
    cfg = tiny()
    data = encode(cfg, {"w": np.arange(6, dtype=np.float64).reshape(2, 3)})
    assert data[:4] == b"CETN" and struct.unpack("<I", data[4:8])[0] == 1
    n = struct.unpack("<I", data[8:12])[0]
    assert data[12:12 + n].decode() == cfg.to_json()
    assert struct.unpack("<I", data[-4:])[0] == zlib.crc32(data[:-4])
    _, state = decode(data)
    assert state["w"].dtype == np.float64 and state["w"].tolist() == [[0, 1, 2], [3, 4, 5]]


def test_checkpoint_corruption_detected(tmp_path):
    data = encode(tiny(), build_model(tiny(), seed=0).state_dict())
    flipped = bytearray(data)
    flipped[len(data) // 2] ^= 0x10
    with pytest.raises(FormatError, match="CRC"):
        decode(bytes(flipped))
    with pytest.raises(FormatError):
        decode(data[:-9])
    with pytest.raises(FormatError, match="magic"):
        decode(b"XXXX" + data[4:])
    (tmp_path / "c.cetn").write_bytes(data[:100])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "c.cetn")


def test_checkpoint_shape_mismatch_leaves_model_untouched(tmp_path):
    save_checkpoint(build_model(tiny(dim=64), seed=0), tmp_path / "wide.cetn")
    target = build_model(tiny(), seed=1)
    before = {k: v.copy() for k, v in target.state_dict().items()}
    with pytest.raises(DimensionError, match=r"embed1\."):
        load_checkpoint(tmp_path / "wide.cetn", target)
    after = target.state_dict()
    assert all(np.array_equal(before[k], after[k]) for k in before)


# -- training loop -------------------------------------------------------------------------

def test_short_training_run_logs_and_checkpoints(tmp_path):
    cfg = TrainConfig(steps=6, batch_size=8, lr=1e-3, warmup_steps=2, checkpoint_dir=str(tmp_path / "ck"),
                      checkpoint_every=3, log_path=str(tmp_path / "log.jsonl"), eval_every_epochs=1)
    res = train(cfg, tiny(), synthetic_dataset(16, 10, 32, seed=0))
    lines = [json.loads(s) for s in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert lines == res.metrics
    assert [r["step"] for r in lines if "step" in r] == list(range(1, 7))
    assert [r["epoch"] for r in lines if "epoch" in r] == [1, 2, 3]
    assert all("eval_acc" in r for r in lines if "epoch" in r)
    assert lines[-1] == {"final_eval_acc": res.final_accuracy}
    assert sorted(p.name for p in (tmp_path / "ck").iterdir()) == ["final.cetn", "step000003.cetn",
                                                                   "step000006.cetn"]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_loss_aborts_with_dump(tmp_path):
    mcfg = tiny()
    ds = synthetic_dataset(8, 10, 32, seed=0)
    cfg = TrainConfig(steps=3, batch_size=8, lr=1e300, min_lr=0, warmup_steps=0, checkpoint_dir=str(tmp_path))
    with pytest.raises(NumericError) as err:
        train(cfg, mcfg, ds)
    dump = json.loads((tmp_path / "nan_dump.json").read_text())
    assert {"step", "lr", "loss", "batch_indices", "param_norms"} <= set(dump)
    assert "nan_dump.json" in str(err.value)


def test_train_rejects_labels_beyond_classes():
    ds = synthetic_dataset(12, 12, 32, seed=0)
    with pytest.raises(ConfigurationError):
        train(TrainConfig(steps=2, warmup_steps=0), tiny(), ds)


# -- cli ------------------------------------------------------------------------------------

def test_cli_analyze_json(capsys):
    assert cli.main(["analyze", "--config", "swin-t", "--format", "json"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert round(rep["params_total"] / 1e6, 2) == 28.29


def test_cli_build_train_eval_erf(tmp_path, capsys):
    tiny().save(tmp_path / "m.json")
    assert cli.main(["synth-data", "--out", str(tmp_path / "d.bin"), "--count", "16"]) == 0
    (tmp_path / "t.json").write_text(json.dumps({
        "steps": 4, "batch_size": 8, "warmup_steps": 1, "data": "d.bin", "model_config": "m.json",
        "checkpoint_dir": "ck", "hflip": False}))
    assert cli.main(["train", "--train-config", str(tmp_path / "t.json")]) == 0
    capsys.readouterr()
    assert cli.main(["eval", "--config", str(tmp_path / "m.json"), "--ckpt", str(tmp_path / "ck" / "final.cetn"),
                     "--data", str(tmp_path / "d.bin")]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["count"] == 16 and 0 <= out["top1"] <= 1
    assert cli.main(["build", "--config", "tiny", "--out", str(tmp_path / "b.cetn")]) == 0
    assert cli.main(["erf", "--config", "tiny", "--stage", "1", "--out", str(tmp_path / "e.pgm"), "--batch", "1"]) == 0
    assert (tmp_path / "e.pgm").read_bytes().startswith(b"P5\n32 32\n")


def test_cli_gradcheck_subset(capsys):
    assert cli.main(["gradcheck", "--module", "op.gelu", "--module", "mbconv"]) == 0
    out = capsys.readouterr().out
    assert "op.gelu" in out and "mbconv" in out and "FAIL" not in out


def test_cli_errors_exit_2(tmp_path, capsys):
    assert cli.main(["analyze", "--config", "no-such-model"]) == 2
    (tmp_path / "bad.cetn").write_bytes(b"nope")
    assert cli.main(["eval", "--config", "tiny", "--ckpt", str(tmp_path / "bad.cetn"),
                     "--data", str(tmp_path / "missing.bin")]) == 2
    assert cli.main(["gradcheck", "--module", "nonexistent"]) == 2
    assert "error:" in capsys.readouterr().err
