"""End-to-end acceptance checks.

Each test records one PASS/FAIL line (printed in the terminal summary) and
asserts the criterion at its stated tolerance. The desk-scale training runs
are cached per session because several criteria share them.
"""

import functools
import math
import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from gtloc.datastore import make_splits, synth_generate
from gtloc.diffnet import log_softmax_rows, max_relative_error, numerical_gradient, soft_cross_entropy
from gtloc.encoders import TAU_TIME
from gtloc.geotime import CyclicTime, toroidal_distance, tps
from gtloc.objectives import LocationQueue, loc_contrastive_loss, tml_loss, tml_targets
from gtloc.retrieval import (
    Gallery,
    build_gallery,
    eval_geo,
    eval_time,
    retrieve,
    sample_gallery_labels,
    write_metrics_csv,
)
from gtloc.trainer import desk_config, save_checkpoint, train

N, EVAL_FRACTION, GALLERY = 2000, 0.25, 4096
SEEDS = (0, 1, 2)


# ---- shared desk-scale pipeline ----------------------------------------------------

def pipeline(seed=0, mode="gtloc", distance="cyclic", label_noise=0.0, time_dist="uniform", wrap_spread=0.2):
    """synthesize, train and evaluate one configuration, single-threaded"""
    t0 = time.perf_counter()
    with threadpool_limits(limits=1):
        ds = synth_generate(N, seed=seed, time_dist=time_dist, wrap_spread=wrap_spread)
        ds = ds.with_split(make_splits(ds, "random", (1 - EVAL_FRACTION, EVAL_FRACTION), seed=seed))
        tr, ev = ds.part("train"), ds.part("eval")
        cfg = desk_config(seed, mode=mode)
        cfg.tml.distance = distance
        cfg.noise.label_noise_sigma = label_noise
        ckpt = train(tr, cfg).checkpoint
        model = ckpt.model
        tg = build_gallery("time", sample_gallery_labels(tr, "time", GALLERY, seed), model)
        gg = build_gallery("gps", sample_gallery_labels(tr, "gps", GALLERY, seed), model)
        tm = eval_time(model, ev, tg)
        gm = eval_geo(model, ev, gg)
    return {"ckpt": ckpt, "eval": ev, "time": tm, "geo": gm, "rows": tm.rows() + gm.rows(),
            "seconds": time.perf_counter() - t0}


cached = functools.lru_cache(maxsize=None)(pipeline)


# ---- 1. metric axioms -----------------------------------------------------------------

def test_c01_metric_axioms(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    pts = [CyclicTime(float(a), float(b)) for a, b in rng.uniform(0, 1, (30_000, 2))]
    a, b, c = pts[:10_000], pts[10_000:20_000], pts[20_000:]
    bad = 0
    for x, y, z in zip(a, b, c):
        dxy, dyx = toroidal_distance(x, y), toroidal_distance(y, x)
        brute = min(math.hypot(x.theta - y.theta + i, x.phi - y.phi + j) for i in (-1, 0, 1) for j in (-1, 0, 1))
        bad += dxy != dyx
        bad += toroidal_distance(x, x) != 0.0 or dxy <= 0.0
        bad += toroidal_distance(x, z) > dxy + toroidal_distance(y, z) + 1e-12
        bad += abs(dxy - brute) > 1e-12
    secs = time.perf_counter() - t0
    ok = criterion("C01 metric axioms", bad == 0 and secs < 5, f"violations={bad} time={secs:.2f}s")
    assert ok


# ---- 2. formula cross-checks ------------------------------------------------------------

def test_c02_tps_cross_checks(criterion):
    v = tps(1.40, 2.72)
    ok = abs(v - 0.7700) <= 5e-4 and tps(0, 0) == 1.0 and tps(6, 12) == 0.0
    assert criterion("C02 tps cross-checks", ok, f"tps(1.40, 2.72)={v:.5f}")


# ---- 3. gradients --------------------------------------------------------------------

def _unit(rng, *shape):
    x = rng.standard_normal(shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def test_c03_gradients(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    B, dim = 4, 8
    V, T, L, Q = _unit(rng, B, dim), _unit(rng, B, dim), _unit(rng, B, dim), _unit(rng, 6, dim)
    tgt = tml_targets(rng.uniform(0, 1, (B, 2)))
    lt_t, lt_l = math.log(0.5), math.log(0.2)

    def time_raw(Vx, Tx, lt):
        return soft_cross_entropy(Vx @ Tx.T / math.exp(lt), tgt.q)[0]

    def loc_raw(Vx, Lx, lt):
        logits = Vx @ np.concatenate([Lx, Q]).T / math.exp(lt)
        return -float(np.trace(log_softmax_rows(logits)[:, :B])) / B

    rt = tml_loss(V, T, tgt, lt_t)
    rl = loc_contrastive_loss(V, L, Q, lt_l)
    errs = [
        max_relative_error(rt.d_image, numerical_gradient(lambda z: time_raw(z, T, lt_t), V.copy())),
        max_relative_error(rt.d_other, numerical_gradient(lambda z: time_raw(V, z, lt_t), T.copy())),
        max_relative_error(np.array([rt.d_log_tau]),
                           numerical_gradient(lambda z: time_raw(V, T, float(z[0])), np.array([lt_t]))),
        max_relative_error(rl.d_image, numerical_gradient(lambda z: loc_raw(z, L, lt_l), V.copy())),
        max_relative_error(rl.d_other, numerical_gradient(lambda z: loc_raw(V, z, lt_l), L.copy())),
        max_relative_error(np.array([rl.d_log_tau]),
                           numerical_gradient(lambda z: loc_raw(V, L, float(z[0])), np.array([lt_l]))),
    ]
    secs = time.perf_counter() - t0
    ok = max(errs) < 1e-6 and secs < 30
    assert criterion("C03 gradient check", ok, f"max rel err={max(errs):.2e} time={secs:.2f}s")


# ---- 4. loss-value oracle -----------------------------------------------------------------

def test_c04_loss_oracle(criterion):
    rng = np.random.default_rng(4)
    V, T, L, Q = _unit(rng, 3, 4), _unit(rng, 3, 4), _unit(rng, 3, 4), _unit(rng, 5, 4)
    times = rng.uniform(0, 1, (3, 2))
    tau_t, tau_l = 0.3, 0.2

    want_t = 0.0
    for i in range(3):
        d = [toroidal_distance(CyclicTime(*times[i]), CyclicTime(*times[j])) for j in range(3)]
        z = sum(math.exp(x) for x in d)
        s = [float(V[i] @ T[j]) / tau_t for j in range(3)]
        zs = sum(math.exp(x) for x in s)
        want_t -= sum((1 - math.exp(d[j]) / z) * math.log(math.exp(s[j]) / zs) for j in range(3))
    want_t /= 3
    want_l = 0.0
    for i in range(3):
        den = sum(math.exp(float(V[i] @ k) / tau_l) for k in list(L) + list(Q))
        want_l -= math.log(math.exp(float(V[i] @ L[i]) / tau_l) / den)
    want_l /= 3

    got_t = tml_loss(V, T, tml_targets(times), math.log(tau_t)).loss
    got_l = loc_contrastive_loss(V, L, Q, math.log(tau_l)).loss
    et, el = abs(got_t - want_t) / abs(want_t), abs(got_l - want_l) / abs(want_l)
    assert criterion("C04 loss-value oracle", max(et, el) < 1e-6, f"rel err time={et:.1e} loc={el:.1e}")


# ---- 5. retrieval oracle ----------------------------------------------------------------

def test_c05_retrieval_oracle(criterion):
    rng = np.random.default_rng(5)
    details, ok = [], True
    for n in (10, 1000, 100_000):
        emb = _unit(rng, n, 512).astype(np.float32)
        g = Gallery("time", rng.uniform(0, 1, (n, 2)), emb)
        q = _unit(rng, 512).astype(np.float32)
        t0 = time.perf_counter()
        r = retrieve(q, g, k=n)
        secs = time.perf_counter() - t0
        # brute force: one dot product per row, then a stable descending sort
        sims = np.array([np.sum(emb[i] * q) for i in range(n)], dtype=np.float32)
        order = np.argsort(-sims, kind="stable")
        exact = np.array_equal(r.indices, order) and np.array_equal(r.similarities, sims[order])
        ok &= exact and (n < 100_000 or secs < 10)
        details.append(f"n={n} exact={exact} {secs:.2f}s")
    assert criterion("C05 retrieval oracle", ok, "; ".join(details))


# ---- 6. end-to-end recoverability ------------------------------------------------------

def test_c06_end_to_end(criterion):
    r = cached(0)
    tm, gm = r["time"], r["geo"]
    acc = gm.accuracy[200.0]
    ok = tm.hour_error < 2.0 and tm.month_error < 1.5 and acc >= 0.70 and r["seconds"] < 15 * 60
    detail = (f"month={tm.month_error:.3f} hour={tm.hour_error:.3f} tps={100 * tm.tps:.2f} "
              f"acc@200km={acc:.3f} n={tm.n} time={r['seconds']:.0f}s")
    assert criterion("C06 end-to-end recoverability", ok, detail)


# ---- 7. joint vs time-only --------------------------------------------------------------

def test_c07_joint_vs_time_only(criterion):
    joint = [100 * cached(s)["time"].tps for s in SEEDS]
    single = [100 * cached(s, "timeloc")["time"].tps for s in SEEDS]
    ok = all(j >= t - 1 for j, t in zip(joint, single))
    detail = " ".join(f"seed{s}: gtloc={j:.2f} timeloc={t:.2f}" for s, j, t in zip(SEEDS, joint, single))
    assert criterion("C07 gtloc >= timeloc - 1", ok, detail)


# ---- 8. cyclic vs l2 target distance ------------------------------------------------------

def _norm_err(tm):
    return (tm.month_error / 6 + tm.hour_error / 12) / 2


def test_c08_cyclic_vs_l2(criterion):
    cyc = [_norm_err(cached(s, distance="cyclic", time_dist="wrap")["time"]) for s in SEEDS]
    l2 = [_norm_err(cached(s, distance="l2", time_dist="wrap")["time"]) for s in SEEDS]
    ok = np.mean(cyc) < np.mean(l2)
    detail = f"mean normalized cyclic error: cyclic={np.mean(cyc):.4f} l2={np.mean(l2):.4f} " + \
        f"(per seed {[round(c, 4) for c in cyc]} vs {[round(x, 4) for x in l2]})"
    assert criterion("C08 cyclic beats l2 on wrapped times", ok, detail)


# ---- 9. label noise ----------------------------------------------------------------------

def test_c09_label_noise(criterion):
    clean = 100 * cached(0)["time"].tps
    noisy = 100 * cached(0, label_noise=1.0)["time"].tps
    ok = clean - noisy < 10
    assert criterion("C09 label-noise robustness", ok, f"tps clean={clean:.2f} sigma1={noisy:.2f}")


# ---- 10. queue ---------------------------------------------------------------------------

def test_c10_queue_fifo(criterion):
    ok = True
    for k in (1, 100, 5000):
        q = LocationQueue(4096, 4, dtype=np.float64)
        rows = np.arange(4096 + k, dtype=np.float64)[:, None] * np.ones((1, 4))
        for start in range(0, len(rows), 37):
            q.push(rows[start:start + 37])
        ok &= len(q) == 4096 and np.array_equal(q.entries(), rows[-4096:])
    assert criterion("C10 queue semantics", ok, "k in 1, 100, 5000")


# ---- 11. determinism ---------------------------------------------------------------------

def test_c11_determinism(criterion, tmp_path):
    a, b = cached(0), pipeline(0)
    ha = save_checkpoint(a["ckpt"], tmp_path / "a.ckpt")
    hb = save_checkpoint(b["ckpt"], tmp_path / "b.ckpt")
    write_metrics_csv(tmp_path / "a.csv", a["rows"])
    write_metrics_csv(tmp_path / "b.csv", b["rows"])
    same_ckpt = (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes() and ha == hb
    same_csv = (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert criterion("C11 determinism", same_ckpt and same_csv, f"checkpoint={same_ckpt} metrics={same_csv}")


# ---- trained-model properties beyond the numbered list ------------------------------------

def test_trained_time_embedding_is_continuous_across_wrap():
    model = cached(0)["ckpt"].model
    e = model.embed_times(np.array([[0.0, 0.0], [1 - 1e-9, 0.0], [0.0, 1 - 1e-9]]))
    assert float(e[0] @ e[1]) > 0.99
    assert float(e[0] @ e[2]) > 0.99


def test_time_temperature_was_learned():
    ckpt = cached(0)["ckpt"]
    assert ckpt.model.params[TAU_TIME][0] != math.log(desk_config().model.tau_time_init)


@pytest.mark.parametrize("size", [GALLERY, 20_000])
def test_larger_time_gallery_does_not_hurt(size):
    # a denser gallery can only move the nearest label closer to the truth on average
    r = cached(0)
    model, ev = r["ckpt"].model, r["eval"]
    tr = synth_generate(N, seed=0)
    tr = tr.with_split(make_splits(tr, "random", (1 - EVAL_FRACTION, EVAL_FRACTION), seed=0)).part("train")
    with threadpool_limits(limits=1):
        g = build_gallery("time", sample_gallery_labels(tr, "time", size, 7), model)
        tm = eval_time(model, ev, g)
    assert 100 * tm.tps >= 100 * r["time"].tps - 1
