import json
import math

import numpy as np
import pytest

from gtloc.datastore import NoiseSpec, synth_generate
from gtloc.encoders import TAU_TIME, EncoderConfig
from gtloc.errors import DataError, InvalidInputError
from gtloc.trainer import (
    IMAGE_AUG_NOTE,
    TrainConfig,
    TrainingAborted,
    init_checkpoint,
    load_checkpoint,
    resume,
    save_checkpoint,
    steps_per_epoch,
    train,
)

ENC = EncoderConfig(backbone_dim=16, embed_dim=16, rff_features=16, head_hidden=16, image_hidden=16)
QUIET = NoiseSpec(0, 0, 0, 0, 0, 0)


def cfg(**kw):
    base = dict(epochs=2, batch_size=16, lr_max=1e-3, lr_min=1e-5, queue_size=32, model=ENC)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def ds():
    return synth_generate(64, seed=0, dim=16)


def test_zero_epochs_is_initialization(ds):
    res = train(ds, cfg(epochs=0))
    assert res.steps == []
    assert res.checkpoint.content_hash == init_checkpoint(cfg(epochs=0), 16).content_hash


def test_runs_are_bit_identical(ds, tmp_path):
    a = save_checkpoint(train(ds, cfg()).checkpoint, tmp_path / "a.ckpt")
    b = save_checkpoint(train(ds, cfg()).checkpoint, tmp_path / "b.ckpt")
    assert a == b
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert a != save_checkpoint(train(ds, cfg(seed=1)).checkpoint, tmp_path / "c.ckpt")


def test_split_run_equals_full_run(ds, tmp_path):
    full = train(ds, cfg()).checkpoint
    total = 2 * steps_per_epoch(64, 16)
    half = train(ds, cfg(), max_steps=total // 2).checkpoint
    assert half.step == total // 2
    save_checkpoint(half, tmp_path / "half.ckpt")
    back = load_checkpoint(tmp_path / "half.ckpt")
    assert back.content_hash == half.content_hash
    resume(back, ds)
    assert back.step == total
    assert back.content_hash == full.content_hash


def test_resume_zero_steps_keeps_hash(ds):
    ck = train(ds, cfg(), max_steps=3).checkpoint
    before = ck.content_hash
    resume(ck, ds, max_steps=0)
    assert ck.content_hash == before


def test_resume_rejects_architecture_change(ds, tmp_path):
    ck = train(ds, cfg(), max_steps=1).checkpoint
    with pytest.raises(InvalidInputError, match="architecture"):
        resume(ck, ds, {"model": {"head_hidden": 32}})
    save_checkpoint(ck, tmp_path / "x.ckpt")
    raw = json.loads(json.dumps(ck.meta()))
    assert raw["architecture"] == ck.architecture_hash


def test_corrupted_checkpoint(ds, tmp_path):
    p = tmp_path / "c.ckpt"
    save_checkpoint(train(ds, cfg(), max_steps=1).checkpoint, p)
    raw = bytearray(p.read_bytes())
    raw[len(raw) // 2] ^= 0x01
    p.write_bytes(bytes(raw))
    with pytest.raises(DataError):
        load_checkpoint(p)
    p.write_bytes(bytes(raw[:100]))
    with pytest.raises(DataError):
        load_checkpoint(p)


def test_timeloc_leaves_location_encoder_untouched(ds):
    c = cfg(mode="timeloc")
    init = init_checkpoint(c, 16)
    out = train(ds, c).checkpoint
    loc = [n for n in out.model.params if n.startswith("loc.")] + ["tau_loc"]
    assert loc
    for name in loc:
        assert np.array_equal(out.model.params[name], init.model.params[name]), name
    assert not np.array_equal(out.model.params["img.0.weight"], init.model.params["img.0.weight"])
    assert len(out.queue) == 0


def test_geoloc_only_leaves_time_encoder_untouched(ds):
    c = cfg(mode="geoloc_only")
    init = init_checkpoint(c, 16)
    out = train(ds, c).checkpoint
    for name in [n for n in out.model.params if n.startswith("time.")] + [TAU_TIME]:
        assert np.array_equal(out.model.params[name], init.model.params[name]), name


def test_queue_gets_batch_size_entries_per_step(ds):
    ck = init_checkpoint(cfg(queue_size=1000), 16)
    for k in range(1, 4):
        resume(ck, ds, max_steps=1)
        assert len(ck.queue) == 16 * k


def straight_line_time_loss(model, backbone, times, tau):
    V = model.embed_images(backbone).astype(np.float64)
    T = model.embed_times(times).astype(np.float64)
    B = len(V)
    total = 0.0
    for i in range(B):
        d = [min(math.hypot(times[i, 0] - times[j, 0] - a, times[i, 1] - times[j, 1] - b)
                 for a in (-1, 0, 1) for b in (-1, 0, 1)) for j in range(B)]
        z = sum(math.exp(x) for x in d)
        s = [float(V[i] @ T[j]) / tau for j in range(B)]
        m = max(s)
        lse = m + math.log(sum(math.exp(x - m) for x in s))
        total -= sum((1 - math.exp(d[j]) / z) * (s[j] - lse) for j in range(B))
    return total / B


def test_step0_loss_matches_closed_form():
    small = synth_generate(8, seed=3, dim=16)
    c = cfg(mode="timeloc", batch_size=8, noise=QUIET, queue_size=0)
    init = init_checkpoint(c, 16)
    rec = train(small, c, max_steps=1).steps[0]
    # one batch holds the whole set and the loss is permutation invariant
    want = straight_line_time_loss(init.model, small.backbone, small.times(), init.model.tau_time)
    assert rec["loss_time"] == pytest.approx(want, rel=1e-5)
    # very soft temperature: similarities are uniform, loss is (B - 1) log B
    flat = cfg(mode="timeloc", batch_size=8, noise=QUIET, queue_size=0,
               model=EncoderConfig(**{**ENC.to_dict(), "tau_time_init": 1e6}))
    rec = train(small, flat, max_steps=1).steps[0]
    assert rec["loss_time"] == pytest.approx(7 * math.log(8), rel=1e-5)


def test_loss_trend_decreases():
    big = synth_generate(800, seed=1, dim=16)
    c = cfg(epochs=1, noise=QUIET, batch_size=16)
    losses = [r["loss"] for r in train(big, c, max_steps=50).steps]
    assert len(losses) == 50
    assert np.polyfit(np.arange(50), losses, 1)[0] < 0


def test_nonfinite_loss_aborts_with_last_good_state(ds):
    ck = init_checkpoint(cfg(mode="timeloc"), 16)
    resume(ck, ds, max_steps=2)
    ck.model.params[TAU_TIME][0] = -800.0
    before = ck.content_hash
    with np.errstate(all="ignore"), pytest.raises(TrainingAborted) as err:
        resume(ck, ds)
    assert err.value.exit_code == 4
    assert err.value.checkpoint.step == 2
    # nothing was mutated by the failing step
    assert err.value.checkpoint.content_hash == before == ck.content_hash


def test_log_records(ds, tmp_path):
    p = tmp_path / "train.log"
    train(ds, cfg(), log_path=p)
    lines = [json.loads(x) for x in p.read_text(encoding="utf-8").splitlines()]
    assert lines[0]["event"] == "start" and lines[0]["note"] == IMAGE_AUG_NOTE
    steps = lines[1:]
    assert len(steps) == 2 * steps_per_epoch(64, 16)
    for rec in steps:
        assert {"step", "lr", "loss_loc", "loss_time", "tau_loc", "tau_time"} <= set(rec)
    assert [r["step"] for r in steps] == list(range(1, len(steps) + 1))


def test_config_round_trip_and_validation():
    c = cfg(mode="timeloc", noise=NoiseSpec(label_noise_sigma=1.0))
    assert TrainConfig.from_dict(c.to_dict()) == c
    for bad in ({"mode": "geo"}, {"lr_min": 1.0}, {"batch_size": 0}):
        with pytest.raises(InvalidInputError):
            cfg(**bad)


def test_dim_mismatch(ds):
    with pytest.raises(DataError, match="dim"):
        resume(init_checkpoint(cfg(model=EncoderConfig(**{**ENC.to_dict(), "backbone_dim": 8}))), ds)
