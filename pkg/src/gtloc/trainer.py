"""Training loop and checkpoints.

Randomness is derived from ``(seed, purpose, step)`` rather than from one
stateful generator, so a run stopped after N steps and resumed produces the
same weights as an uninterrupted run.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .datastore import (
    Batch,
    Dataset,
    NoiseSpec,
    apply_label_noise,
    augment_batch,
    jitter_gps,
)
from .diffnet import AdamState, ParamSet, adam_step, cosine_lr, read_tensors, write_tensors
from .encoders import TAU_LOC, TAU_TIME, EncoderConfig, GTLocModel
from .errors import DataError, InvalidInputError, NumericError
from .geotime import equal_earth_array
from .objectives import LocationQueue, loc_contrastive_loss, tml_loss, tml_targets, total_loss

log = logging.getLogger(__name__)

MODES = ("gtloc", "timeloc", "geoloc_only")
IMAGE_AUG_NOTE = (
    "image augmentation is Gaussian noise on precomputed backbone vectors "
    "(image-space crops/flips are not applicable)"
)

# sub-streams of the per-run seed
_RNG_SHUFFLE, _RNG_STEP, _RNG_LABELS = 1, 2, 3


@dataclass
class TMLOptions:
    distance: str = "cyclic"
    renormalize_targets: bool = False


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr_max: float = 3e-5
    lr_min: float = 3e-7
    mode: str = "gtloc"
    seed: int = 0
    queue_size: int = 4096
    views: int = 1
    time_scale: str = "monthly"
    weight_decay: float = 1e-6
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    tml: TMLOptions = field(default_factory=TMLOptions)
    model: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.views < 1 or self.queue_size < 0:
            raise InvalidInputError("epochs, batch_size, views and queue_size must be positive", "trainer")
        if self.lr_max < self.lr_min or self.lr_min < 0:
            raise InvalidInputError("need 0 <= lr_min <= lr_max", "trainer")
        if self.mode not in MODES:
            raise InvalidInputError(f"mode must be one of {MODES}, got {self.mode!r}", "trainer")
        if self.time_scale not in ("monthly", "daily"):
            raise InvalidInputError(f"unknown time scale {self.time_scale!r}", "trainer")
        if self.tml.distance not in ("cyclic", "l2"):
            raise InvalidInputError(f"unknown tml distance {self.tml.distance!r}", "trainer")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name not in ("noise", "tml", "model")}
        d["noise"] = asdict(self.noise)
        d["tml"] = asdict(self.tml)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        noise = NoiseSpec(**d.pop("noise", {}))
        tml = TMLOptions(**d.pop("tml", {}))
        model = EncoderConfig.from_dict(d.pop("model")) if "model" in d else EncoderConfig()
        return cls(noise=noise, tml=tml, model=model, **d)


def desk_config(seed: int = 0, backbone_dim: int = 768, **overrides) -> TrainConfig:
    """Settings that train on a laptop CPU in well under a minute per run.

    Narrower heads, a larger learning rate (the full-scale 3e-5 barely moves
    in 460 steps), no queue (a 4096-entry queue outnumbers a 1.5k-row train
    set and fills with its own positives) and a softer initial time
    temperature, since the soft time targets are close to uniform.
    """
    model = EncoderConfig(backbone_dim=backbone_dim, head_hidden=256, tau_time_init=1.0, seed=seed)
    base = dict(epochs=20, batch_size=64, lr_max=1e-3, lr_min=1e-5, queue_size=0, seed=seed, model=model)
    base.update(overrides)
    return TrainConfig(**base)


@dataclass
class Checkpoint:
    model: GTLocModel
    config: TrainConfig
    adam: AdamState
    queue: LocationQueue
    step: int = 0

    def tensors(self) -> dict[str, np.ndarray]:
        out = dict(self.model.params.items())
        for name in sorted(self.adam.m):
            out["adam.m." + name] = self.adam.m[name]
            out["adam.v." + name] = self.adam.v[name]
        out["queue"] = self.queue.entries().reshape(-1, self.queue.dim)
        return out

    def meta(self) -> dict:
        return {
            "kind": "gtloc-checkpoint",
            "encoder": self.model.cfg.to_dict(),
            "config": self.config.to_dict(),
            "step": self.step,
            "adam_t": dict(sorted(self.adam.t.items())),
            "queue_capacity": self.queue.capacity,
            "architecture": self.architecture_hash,
        }

    @property
    def architecture_hash(self) -> str:
        return architecture_hash(self.model)

    @property
    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.meta(), sort_keys=True).encode())
        for name, arr in self.tensors().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return h.hexdigest()

    def copy(self) -> "Checkpoint":
        q = LocationQueue(self.queue.capacity, self.queue.dim)
        q.push(self.queue.entries())
        adam = AdamState(
            self.adam.beta1, self.adam.beta2, self.adam.eps, self.adam.weight_decay,
            {k: v.copy() for k, v in self.adam.m.items()},
            {k: v.copy() for k, v in self.adam.v.items()},
            dict(self.adam.t),
        )
        return Checkpoint(GTLocModel(self.model.cfg, self.model.params.copy()), self.config, adam, q, self.step)


def architecture_hash(model: GTLocModel) -> str:
    h = hashlib.sha256()
    cfg = model.cfg.to_dict()
    cfg.pop("seed")
    cfg.pop("tau_loc_init")
    cfg.pop("tau_time_init")
    h.update(json.dumps(cfg, sort_keys=True).encode())
    for name, arr in model.params.items():
        h.update(f"{name}:{arr.shape}".encode())
    return h.hexdigest()[:16]


def save_checkpoint(ckpt: Checkpoint, path) -> str:
    meta = ckpt.meta()
    meta["content_hash"] = ckpt.content_hash
    write_tensors(path, ckpt.tensors(), meta)
    return meta["content_hash"]


def load_checkpoint(path) -> Checkpoint:
    tensors, meta = read_tensors(path)
    if meta.get("kind") != "gtloc-checkpoint":
        raise DataError(f"{path}: not a gtloc checkpoint", "trainer")
    try:
        enc = EncoderConfig.from_dict(meta["encoder"])
        cfg = TrainConfig.from_dict(meta["config"])
    except (KeyError, TypeError) as exc:
        raise DataError(f"{path}: incomplete checkpoint metadata ({exc})", "trainer") from exc
    model = GTLocModel(enc)
    model.params.load_arrays(tensors)
    if architecture_hash(model) != meta.get("architecture"):
        raise DataError(f"{path}: architecture hash mismatch", "trainer")
    adam = AdamState(weight_decay=cfg.weight_decay)
    for name, t in meta.get("adam_t", {}).items():
        shape = model.params[name].shape
        adam.m[name] = tensors["adam.m." + name].reshape(shape).copy()
        adam.v[name] = tensors["adam.v." + name].reshape(shape).copy()
        adam.t[name] = int(t)
    queue = LocationQueue(int(meta["queue_capacity"]), enc.embed_dim)
    q = tensors.get("queue")
    if q is not None and q.size:
        queue.push(q.reshape(-1, enc.embed_dim))
    ckpt = Checkpoint(model, cfg, adam, queue, int(meta["step"]))
    if meta.get("content_hash") and ckpt.content_hash != meta["content_hash"]:
        raise DataError(f"{path}: content hash mismatch", "trainer")
    return ckpt


def init_checkpoint(cfg: TrainConfig, backbone_dim: int | None = None) -> Checkpoint:
    enc = cfg.model
    if backbone_dim is not None and backbone_dim != enc.backbone_dim:
        enc = replace(enc, backbone_dim=backbone_dim)
        cfg = replace(cfg, model=enc)
    model = GTLocModel(enc)
    return Checkpoint(
        model, cfg, AdamState(weight_decay=cfg.weight_decay),
        LocationQueue(cfg.queue_size, enc.embed_dim), 0,
    )


class TrainingAborted(NumericError):
    """Raised on a non-finite loss; ``checkpoint`` holds the last good state."""

    def __init__(self, message: str, checkpoint: Checkpoint):
        super().__init__(message, "trainer")
        self.checkpoint = checkpoint


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)


def steps_per_epoch(n: int, batch_size: int) -> int:
    # incomplete final batches are dropped; a dataset smaller than one batch
    # yields a single short batch
    return max(1, n // batch_size)


def train_step(
    ckpt: Checkpoint,
    batch: Batch,
    rng: np.random.Generator,
    lr: float,
) -> dict:
    """One optimization step in place; returns the step's log record."""
    cfg = ckpt.config
    model = ckpt.model
    params = model.params
    B = len(batch.latlon)
    P = cfg.views
    use_loc = cfg.mode in ("gtloc", "geoloc_only")
    use_time = cfg.mode in ("gtloc", "timeloc")

    views = [augment_batch(batch, cfg.noise, rng) for _ in range(P)]
    backbone = np.concatenate([v.backbone for v in views], axis=0)
    V, img_cache = model.image.forward(params, backbone)
    dV = np.zeros_like(V)
    grads: dict[str, np.ndarray] = {}
    loss_loc = loss_time = None
    d_tau_loc = d_tau_time = 0.0

    if use_loc:
        latlon = np.concatenate([v.latlon for v in views], axis=0)
        L, loc_cache = model.location.forward(params, equal_earth_array(latlon))
        res = loc_contrastive_loss(
            V.reshape(P, B, -1).transpose(1, 0, 2),
            L.reshape(P, B, -1).transpose(1, 0, 2),
            ckpt.queue,
            float(params[TAU_LOC][0]),
        )
        loss_loc = res.loss
        dV += res.d_image.transpose(1, 0, 2).reshape(P * B, -1)
        dL = res.d_other.transpose(1, 0, 2).reshape(P * B, -1)
        d_tau_loc = res.d_log_tau
    if use_time:
        times = np.concatenate([v.times for v in views], axis=0)
        T, time_cache = model.time.forward(params, times)
        dT = np.zeros_like(T)
        loss_time = 0.0
        for j in range(P):
            sl = slice(j * B, (j + 1) * B)
            targets = tml_targets(times[sl], cfg.tml.distance, cfg.tml.renormalize_targets)
            res = tml_loss(V[sl], T[sl], targets, float(params[TAU_TIME][0]))
            loss_time += res.loss
            dV[sl] += res.d_image
            dT[sl] += res.d_other
            d_tau_time += res.d_log_tau

    loss = total_loss(loss_loc, loss_time)
    if not np.isfinite(loss):
        raise NumericError(f"non-finite loss {loss}", "trainer")

    grads.update(model.image.backward(img_cache, dV))
    if use_loc:
        grads.update(model.location.backward(loc_cache, dL))
        grads[TAU_LOC] = np.full(1, d_tau_loc, dtype=params.dtype)
    if use_time:
        grads.update(model.time.backward(time_cache, dT))
        grads[TAU_TIME] = np.full(1, d_tau_time, dtype=params.dtype)
    adam_step(params, grads, ckpt.adam, lr)

    if use_loc and ckpt.queue.capacity:
        # queue entries are encoded from more strongly jittered coordinates, detached
        qpos = jitter_gps(batch.latlon, cfg.noise.gps_queue_std_m, rng)
        qemb, _ = model.location.forward(params, equal_earth_array(qpos))
        ckpt.queue.push(qemb)

    ckpt.step += 1
    return {
        "step": ckpt.step,
        "lr": lr,
        "loss": loss,
        "loss_loc": loss_loc,
        "loss_time": loss_time,
        "tau_loc": model.tau_loc,
        "tau_time": model.tau_time,
    }


def _run(ckpt: Checkpoint, ds: Dataset, max_steps: int | None, log_path=None) -> TrainResult:
    cfg = ckpt.config
    if len(ds) == 0:
        raise DataError("empty training set", "trainer")
    if ds.dim != ckpt.model.cfg.backbone_dim:
        raise DataError(
            f"dataset backbone dim {ds.dim} != model backbone dim {ckpt.model.cfg.backbone_dim}",
            "trainer",
        )
    n = len(ds)
    B = min(cfg.batch_size, n)
    spe = steps_per_epoch(n, B)
    total = cfg.epochs * spe
    end = total if max_steps is None else min(total, ckpt.step + max_steps)

    times = ds.times(cfg.time_scale)
    if cfg.noise.label_noise_sigma > 0:
        times = apply_label_noise(
            times, cfg.noise.label_noise_sigma, np.random.default_rng([cfg.seed, _RNG_LABELS])
        )
    params = ckpt.model.params
    backbone = ds.backbone.astype(params.dtype, copy=False)

    result = TrainResult(ckpt)
    fh = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        if fh and ckpt.step == 0:
            fh.write(json.dumps({"event": "start", "note": IMAGE_AUG_NOTE, "config": cfg.to_dict()}) + "\n")
        perm_epoch, perm = -1, None
        epoch_losses: list = []
        while ckpt.step < end:
            epoch, k = divmod(ckpt.step, spe)
            if epoch != perm_epoch:
                perm = np.random.default_rng([cfg.seed, _RNG_SHUFFLE, epoch]).permutation(n)
                perm_epoch = epoch
            idx = perm[k * B:(k + 1) * B]
            batch = Batch(ds.latlon[idx], times[idx], backbone[idx])
            rng = np.random.default_rng([cfg.seed, _RNG_STEP, ckpt.step])
            lr = cosine_lr(ckpt.step, total, cfg.lr_max, cfg.lr_min)
            try:
                rec = train_step(ckpt, batch, rng, lr)
            except NumericError as exc:
                # both checks run before any parameter or queue mutation
                raise TrainingAborted(f"step {ckpt.step}: {exc}", ckpt.copy()) from exc
            rec["epoch"] = epoch
            result.steps.append(rec)
            epoch_losses.append(rec["loss"])
            if fh:
                fh.write(json.dumps(rec) + "\n")
            if k == spe - 1:
                summary = {"epoch": epoch, "mean_loss": float(np.mean(epoch_losses)),
                           "tau_loc": rec["tau_loc"], "tau_time": rec["tau_time"]}
                result.epochs.append(summary)
                log.info("epoch %d loss %.4f", epoch, summary["mean_loss"])
                epoch_losses = []
    finally:
        if fh:
            fh.close()
    return result


def train(ds: Dataset, cfg: TrainConfig, max_steps: int | None = None, log_path=None) -> TrainResult:
    """Train from a fresh initialization.

    ``max_steps`` stops early (the schedule still spans the full run), which
    together with :func:`resume` splits one run into several.
    """
    ckpt = init_checkpoint(cfg, ds.dim)
    return _run(ckpt, ds, max_steps, log_path)


_ARCH_FIELDS = ("backbone_dim", "embed_dim", "rff_features", "rff_sigmas", "head_hidden",
                "head_layers", "image_hidden", "seed")


def resume(ckpt: Checkpoint, ds: Dataset, overrides: dict | None = None,
           max_steps: int | None = None, log_path=None) -> TrainResult:
    """Continue training from ``ckpt`` (mutated in place), keeping optimizer state and step."""
    overrides = dict(overrides or {})
    if "model" in overrides:
        new = EncoderConfig.from_dict({**ckpt.model.cfg.to_dict(), **overrides.pop("model")})
        if any(getattr(new, f) != getattr(ckpt.model.cfg, f) for f in _ARCH_FIELDS):
            raise InvalidInputError("cannot resume with a different architecture", "trainer")
    if overrides:
        d = ckpt.config.to_dict()
        for k, v in overrides.items():
            if isinstance(v, dict):
                d[k] = {**d[k], **v}
            else:
                d[k] = v
        ckpt.config = TrainConfig.from_dict(d)
    return _run(ckpt, ds, max_steps, log_path)
