"""Location, time and image encoders.

The location and time encoders share one architecture: a 2-D input goes
through a bank of random Fourier feature maps at several frequencies, each
scale feeds its own MLP, and the MLP outputs are summed and l2-normalized.
Locations are Equal-Earth projected (rescaled to [-1, 1]^2) first; times are
fed as raw ``(theta, phi)``.

The image encoder is a two-layer projection head over precomputed backbone
vectors.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
import math

import numpy as np

from .diffnet import MLP, ParamSet, l2_normalize, l2_normalize_backward
from .errors import InvalidInputError
from .geotime import equal_earth_array


@dataclass(frozen=True)
class EncoderConfig:
    backbone_dim: int = 768
    embed_dim: int = 512
    rff_features: int = 256
    rff_sigmas: tuple = (1.0, 16.0, 256.0)
    head_hidden: int = 1024
    head_layers: int = 3
    image_hidden: int = 768
    tau_loc_init: float = 0.07
    tau_time_init: float = 0.07
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rff_sigmas"] = list(self.rff_sigmas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        d = dict(d)
        d["rff_sigmas"] = tuple(float(s) for s in d["rff_sigmas"])
        return cls(**d)


class RffBank:
    """Frozen Gaussian projection matrices, one ``(features, 2)`` matrix per scale.

    Each matrix is drawn from its own generator seeded by ``(seed, stream,
    scale index)``, so a bank is fully determined by those numbers.
    """

    def __init__(self, sigmas, features: int = 256, seed: int = 0, stream: int = 0):
        self.sigmas = tuple(float(s) for s in sigmas)
        self.features = features
        self.seed = seed
        self.stream = stream
        mats = []
        for k, s in enumerate(self.sigmas):
            rng = np.random.default_rng([seed, stream, k])
            w = s * rng.standard_normal((features, 2))
            w.setflags(write=False)
            mats.append(w)
        self.matrices = tuple(mats)

    def __len__(self):
        return len(self.matrices)


def rff_encode(bank: RffBank, v: np.ndarray, dtype=np.float32) -> list[np.ndarray]:
    """Per-scale features ``[cos(2 pi W v) | sin(2 pi W v)]`` for rows of ``v``."""
    v = np.atleast_2d(np.asarray(v, dtype=np.float64))
    out = []
    for w in bank.matrices:
        proj = 2.0 * math.pi * (v @ w.T)
        out.append(np.concatenate([np.cos(proj), np.sin(proj)], axis=-1).astype(dtype))
    return out


@dataclass
class FourierCache:
    head_caches: list
    norms: np.ndarray
    out: np.ndarray


class FourierEncoder:
    """Sum over scales of ``f_i(rff_i(v))``, then l2-normalized."""

    def __init__(self, prefix: str, bank: RffBank, cfg: EncoderConfig):
        self.prefix = prefix
        self.bank = bank
        dims = [2 * cfg.rff_features] + [cfg.head_hidden] * cfg.head_layers + [cfg.embed_dim]
        self.heads = [MLP.build(f"{prefix}.f{i}", dims) for i in range(len(bank))]

    def init(self, params: ParamSet, rng: np.random.Generator):
        for h in self.heads:
            h.init(params, rng)

    def param_names(self) -> list[str]:
        return [n for h in self.heads for n in h.param_names()]

    def forward(self, params: ParamSet, v: np.ndarray) -> tuple[np.ndarray, FourierCache]:
        feats = rff_encode(self.bank, v, params.dtype)
        total = None
        caches = []
        for head, f in zip(self.heads, feats):
            y, c = head.forward(params, f)
            caches.append(c)
            total = y if total is None else total + y
        out, norms = l2_normalize(total)
        return out, FourierCache(caches, norms, out)

    def backward(self, cache: FourierCache, g_emb: np.ndarray) -> dict[str, np.ndarray]:
        g = l2_normalize_backward(cache.out, cache.norms, g_emb)
        grads = {}
        for head, c in zip(self.heads, cache.head_caches):
            hg, _ = head.backward(c, g, need_input_grad=False)
            grads.update(hg)
        return grads


class ImageEncoder:
    """Projection head over precomputed backbone vectors."""

    def __init__(self, cfg: EncoderConfig, prefix: str = "img"):
        self.backbone_dim = cfg.backbone_dim
        self.head = MLP.build(prefix, [cfg.backbone_dim, cfg.image_hidden, cfg.embed_dim])

    def init(self, params: ParamSet, rng: np.random.Generator):
        self.head.init(params, rng)

    def param_names(self) -> list[str]:
        return self.head.param_names()

    def forward(self, params: ParamSet, x: np.ndarray):
        x = np.atleast_2d(np.asarray(x))
        if x.shape[-1] != self.backbone_dim:
            raise InvalidInputError(
                f"backbone vector has dimension {x.shape[-1]}, expected {self.backbone_dim}",
                "encoders",
            )
        y, c = self.head.forward(params, x.astype(params.dtype, copy=False))
        out, norms = l2_normalize(y)
        return out, (c, norms, out)

    def backward(self, cache, g_emb: np.ndarray) -> dict[str, np.ndarray]:
        c, norms, out = cache
        g = l2_normalize_backward(out, norms, g_emb)
        grads, _ = self.head.backward(c, g, need_input_grad=False)
        return grads


TAU_LOC = "tau_loc"
TAU_TIME = "tau_time"


class GTLocModel:
    """All trainable pieces: three encoders plus two log-temperatures."""

    def __init__(self, cfg: EncoderConfig, params: ParamSet | None = None, dtype=np.float32):
        self.cfg = cfg
        self.loc_bank = RffBank(cfg.rff_sigmas, cfg.rff_features, cfg.seed, stream=0)
        self.time_bank = RffBank(cfg.rff_sigmas, cfg.rff_features, cfg.seed, stream=1)
        self.location = FourierEncoder("loc", self.loc_bank, cfg)
        self.time = FourierEncoder("time", self.time_bank, cfg)
        self.image = ImageEncoder(cfg)
        if params is None:
            params = ParamSet(dtype)
            rng = np.random.default_rng([cfg.seed, 99])
            self.image.init(params, rng)
            self.location.init(params, rng)
            self.time.init(params, rng)
            params.add(TAU_LOC, np.full(1, math.log(cfg.tau_loc_init)))
            params.add(TAU_TIME, np.full(1, math.log(cfg.tau_time_init)))
        self.params = params

    @property
    def tau_loc(self) -> float:
        return float(np.exp(self.params[TAU_LOC][0]))

    @property
    def tau_time(self) -> float:
        return float(np.exp(self.params[TAU_TIME][0]))

    def location_param_names(self) -> list[str]:
        return self.location.param_names() + [TAU_LOC]

    def time_param_names(self) -> list[str]:
        return self.time.param_names() + [TAU_TIME]

    def astype(self, dtype) -> "GTLocModel":
        return GTLocModel(self.cfg, self.params.astype(dtype))

    # batch helpers used by retrieval and evaluation; chunked to bound memory
    def embed_locations(self, latlon: np.ndarray, chunk: int = 2048) -> np.ndarray:
        v = equal_earth_array(np.atleast_2d(latlon))
        return _chunked(lambda a: self.location.forward(self.params, a)[0], v, chunk)

    def embed_times(self, cyc: np.ndarray, chunk: int = 2048) -> np.ndarray:
        return _chunked(lambda a: self.time.forward(self.params, a)[0], np.atleast_2d(cyc), chunk)

    def embed_images(self, backbone: np.ndarray, chunk: int = 2048) -> np.ndarray:
        return _chunked(lambda a: self.image.forward(self.params, a)[0], np.atleast_2d(backbone), chunk)


def _chunked(fn, x: np.ndarray, chunk: int) -> np.ndarray:
    parts = [fn(x[i:i + chunk]) for i in range(0, len(x), chunk)]
    return np.concatenate(parts, axis=0) if parts else np.zeros((0, 0), dtype=np.float32)


def encode_location(model: GTLocModel, lat: float, lon: float) -> np.ndarray:
    return model.embed_locations(np.array([[lat, lon]]))[0]


def encode_time(model: GTLocModel, theta: float, phi: float) -> np.ndarray:
    return model.embed_times(np.array([[theta, phi]]))[0]


def encode_image(model: GTLocModel, backbone_vec) -> np.ndarray:
    return model.embed_images(np.asarray(backbone_vec))[0]
